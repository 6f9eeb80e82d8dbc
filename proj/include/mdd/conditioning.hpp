// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdd/common.hpp"

namespace mdd {

constexpr int kConditionDim = 128;

struct ConditionEmbedding {
  Vec vector;  // dimension kConditionDim, unit l2 norm unless zero fallback
  std::string source_text;
  bool zero_fallback = false;
};

// Deterministic hashed character-trigram embedder. Text is wrapped in
// sentinel bytes so one-character inputs still produce a trigram; each
// trigram hashes to a signed bucket and the result is l2-normalized.
inline ConditionEmbedding embed_text_builtin(const std::string& text) {
  ConditionEmbedding e;
  e.source_text = text;
  e.vector = Vec::Zero(kConditionDim);
  if (text.empty()) {
    e.zero_fallback = true;
    return e;
  }
  std::string padded;
  padded.reserve(text.size() + 4);
  padded += '\x02';
  padded += '\x02';
  padded += text;
  padded += '\x03';
  padded += '\x03';
  for (size_t i = 0; i + 3 <= padded.size(); ++i) {
    uint64_t h = fnv1a64(std::string_view(padded).substr(i, 3));
    int idx = static_cast<int>(h % kConditionDim);
    double sign = (h >> 63) ? -1.0 : 1.0;
    e.vector[idx] += sign;
  }
  double norm = e.vector.norm();
  if (norm > 0) {
    e.vector /= norm;
  } else {
    e.zero_fallback = true;  // all buckets cancelled; treat as no condition
  }
  return e;
}

// Extension point for external text encoders. The built-in embedder stays
// the default until an adapter is registered.
class ConditioningFrontend {
 public:
  using Adapter = std::function<std::vector<double>(const std::string&)>;

  void register_external_embedder(Adapter adapter) {
    if (!adapter) throw AdapterError("null embedder adapter");
    // probe once so contract violations surface at registration
    std::vector<double> probe = adapter("adapter contract probe");
    if (static_cast<int>(probe.size()) != kConditionDim)
      throw AdapterError("adapter returned dimension " +
                         std::to_string(probe.size()) + ", expected " +
                         std::to_string(kConditionDim));
    adapter_ = std::move(adapter);
  }

  void clear_external_embedder() { adapter_ = nullptr; }
  bool has_external_embedder() const { return static_cast<bool>(adapter_); }

  ConditionEmbedding embed_text(const std::string& text) const {
    if (!adapter_) return embed_text_builtin(text);
    std::vector<double> v = adapter_(text);
    if (static_cast<int>(v.size()) != kConditionDim)
      throw AdapterError("adapter returned dimension " +
                         std::to_string(v.size()) + ", expected " +
                         std::to_string(kConditionDim));
    ConditionEmbedding e;
    e.source_text = text;
    e.vector = Eigen::Map<const Vec>(v.data(), v.size());
    if (!e.vector.allFinite())
      throw AdapterError("adapter returned non-finite embedding");
    e.zero_fallback = e.vector.norm() == 0.0;
    return e;
  }

 private:
  Adapter adapter_;
};

inline ConditionEmbedding embed_text(const std::string& text) {
  return embed_text_builtin(text);
}

}  // namespace mdd

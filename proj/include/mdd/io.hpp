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

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mdd/common.hpp"

namespace mdd {

// Binary matrix container: magic "MDDMAT1\0", int64 rows, int64 cols,
// then rows*cols little-endian doubles in row-major order.
inline void save_matrix(const std::string& path, const Mat& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write matrix file: " + path);
  const char magic[8] = {'M', 'D', 'D', 'M', 'A', 'T', '1', '\0'};
  f.write(magic, 8);
  int64_t rows = m.rows(), cols = m.cols();
  f.write(reinterpret_cast<const char*>(&rows), 8);
  f.write(reinterpret_cast<const char*>(&cols), 8);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) {
      double v = m(i, j);
      f.write(reinterpret_cast<const char*>(&v), 8);
    }
  if (!f) throw IoError("short write: " + path);
}

inline Mat load_matrix(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open matrix file: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "MDDMAT1\0", 8) != 0)
    throw IoError("bad matrix header: " + path);
  int64_t rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&rows), 8);
  f.read(reinterpret_cast<char*>(&cols), 8);
  if (!f || rows < 0 || cols < 0 || rows * cols > (int64_t(1) << 34))
    throw IoError("bad matrix shape in " + path);
  Mat m(rows, cols);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) {
      double v;
      f.read(reinterpret_cast<char*>(&v), 8);
      m(i, j) = v;
    }
  if (!f) throw IoError("truncated matrix file: " + path);
  return m;
}

// Locale-independent float formatting; shared by every CSV writer so metric
// tables are byte-reproducible across runs.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : path_(path), f_(path) {
    if (!f_) throw IoError("cannot write csv: " + path);
  }
  void row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) f_ << ',';
      f_ << cells[i];
    }
    f_ << '\n';
  }
  void close() {
    f_.close();
    if (f_.fail()) throw IoError("short write: " + path_);
  }

 private:
  std::string path_;
  std::ofstream f_;
};

inline void save_matrix_csv(const std::string& path, const Mat& m) {
  CsvWriter w(path);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<std::string> cells;
    cells.reserve(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      cells.push_back(format_double(m(i, j)));
    w.row(cells);
  }
  w.close();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& s) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write file: " + path);
  f << s;
  if (!f) throw IoError("short write: " + path);
}

inline std::vector<std::vector<std::string>> read_tsv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open tsv: " + path);
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        cells.push_back(line.substr(start));
        break;
      }
      cells.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace mdd

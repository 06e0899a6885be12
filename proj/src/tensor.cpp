// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/tensor.hpp"

#include "a3kv/error.hpp"

namespace a3kv {

Matrix matmul(const Matrix& x, const Matrix& w) {
  A3KV_CHECK(x.cols == w.rows, ErrorKind::kShape, "matmul: inner dimensions differ");
  Matrix out(x.rows, w.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    float* dst = out.data.data() + i * w.cols;
    const float* src = x.data.data() + i * x.cols;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const float a = src[k];
      const float* wk = w.data.data() + k * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) dst[j] += a * wk[j];
    }
  }
  return out;
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    A3KV_CHECK(rows[i] < x.rows, ErrorKind::kShape, "gather_rows: row out of range");
    auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace a3kv

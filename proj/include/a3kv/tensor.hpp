// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace a3kv {

// Dense row-major f32 matrix. Rows are independent units of work for every
// kernel in this library, so any row is computed identically regardless of
// how many other rows share the call.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const float> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }
  float& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const Matrix&) const = default;
};

// out[i] = x[i] * w for each row; w is (x.cols × out_cols).
Matrix matmul(const Matrix& x, const Matrix& w);

// Gathers the given rows of x into a new matrix, in the given order.
Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows);

}  // namespace a3kv

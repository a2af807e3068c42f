#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace evnas {

/// Dense row-major float matrix. Rows index cell edges, columns index
/// operations throughout the library.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(int r, int c, float fill = 0.0f) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
  }

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  std::span<float> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
  std::span<const float> row(int r) const {
    return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
  }

  bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace evnas

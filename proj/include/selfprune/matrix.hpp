#pragma once
// Dense row-major float matrix. Plain storage; the kernels do the math.

#include <cstddef>
#include <vector>

namespace selfprune {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float* row(std::size_t r) { return data.data() + r * cols; }
  const float* row(std::size_t r) const { return data.data() + r * cols; }
  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }

  bool operator==(const Matrix&) const = default;
};

}  // namespace selfprune

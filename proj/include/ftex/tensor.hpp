#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ftex/error.hpp"

namespace ftex {

// Row-major float32 matrix. Used for latent codes, model parameters and
// anything that crosses a file boundary.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("matrix payload does not match " + shape_string());
  }

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_string() const { return std::to_string(rows) + "x" + std::to_string(cols); }

  bool operator==(const Matrix&) const = default;
};

// Ordered name -> tensor list. Order is part of the contract: parameter
// vectors, gradients and optimizer state all follow it.
class NamedTensors {
 public:
  void add(std::string name, Matrix m);
  bool contains(const std::string& name) const;
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const std::pair<std::string, Matrix>& operator[](std::size_t i) const { return entries_[i]; }
  std::pair<std::string, Matrix>& operator[](std::size_t i) { return entries_[i]; }

  // Same names, same order, same shapes.
  bool same_layout(const NamedTensors& o) const;
  std::size_t total_elements() const;

  bool operator==(const NamedTensors&) const = default;

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
};

}  // namespace ftex

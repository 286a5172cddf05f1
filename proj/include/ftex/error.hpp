#pragma once

#include <stdexcept>
#include <string>

namespace ftex {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/latent/image dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed file, container, prompt or wire payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Degenerate or non-finite math (zero-norm embeddings, NaN losses).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ftex

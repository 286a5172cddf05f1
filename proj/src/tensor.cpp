#include "ftex/tensor.hpp"

#include <algorithm>

namespace ftex {

void NamedTensors::add(std::string name, Matrix m) {
  if (contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(m));
}

bool NamedTensors::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const Matrix& NamedTensors::at(const std::string& name) const {
  for (const auto& [n, m] : entries_)
    if (n == name) return m;
  throw FormatError("missing tensor '" + name + "'");
}

Matrix& NamedTensors::at(const std::string& name) {
  return const_cast<Matrix&>(static_cast<const NamedTensors&>(*this).at(name));
}

bool NamedTensors::same_layout(const NamedTensors& o) const {
  if (entries_.size() != o.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != o.entries_[i].first) return false;
    if (!entries_[i].second.same_shape(o.entries_[i].second)) return false;
  }
  return true;
}

std::size_t NamedTensors::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

}  // namespace ftex

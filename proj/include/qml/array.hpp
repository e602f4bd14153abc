#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Dense row-major array of 64-bit reals, rank 1 or 2 in practice.
// Shape is carried explicitly; data.size() always equals the product
// of the extents.

namespace qml {

struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;

  explicit Array(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(count(shape), 0.0);
  }

  Array(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) {
      throw std::invalid_argument("Array: data length does not match shape");
    }
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }

  static Array zeros(std::vector<std::size_t> s) { return Array(std::move(s)); }

  static Array full(std::vector<std::size_t> s, double v) {
    Array a(std::move(s));
    for (double& x : a.data) x = v;
    return a;
  }

  static Array scalar(double v) { return Array({1}, {v}); }

  static Array vec(std::initializer_list<double> v) {
    return Array({v.size()}, std::vector<double>(v));
  }

  static Array vec(std::vector<double> v) {
    std::size_t n = v.size();
    return Array({n}, std::move(v));
  }

  static Array matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Array({r, c}, std::move(v));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool finite() const {
    for (double x : data) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "{";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ",";
      os << shape[i];
    }
    os << "}";
    return os.str();
  }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sq_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

}  // namespace qml

#pragma once

// Dense row-major tensor of doubles with a dynamic shape (rank 1..4 in
// practice).  This is deliberately minimal: the hot loops in this codebase
// index raw data() pointers, so the class only has to get allocation,
// shape bookkeeping and bounds-checked convenience accessors right.

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace densecine {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(count(shape)), 0.0);
  }

  Tensor(std::initializer_list<int> s) : Tensor(std::vector<int>(s)) {}

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Flat access.
  double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  // Multi-index access (row-major).
  double& at(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }

  double& at(int i, int j, int k) {
    return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return v[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  double& at(int i, int j, int k, int l) {
    return v[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  double at(int i, int j, int k, int l) const {
    return v[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline void check_shape(const Tensor& t, const std::vector<int>& want,
                        const char* what) {
  if (t.shape != want) {
    Tensor w;  // only for shape_str
    std::ostringstream os;
    os << what << ": expected shape [";
    for (size_t i = 0; i < want.size(); ++i) os << (i ? "," : "") << want[i];
    os << "], got " << t.shape_str();
    throw std::invalid_argument(os.str());
  }
}

inline void check_rank(const Tensor& t, int r, const char* what) {
  if (t.rank() != r) {
    std::ostringstream os;
    os << what << ": expected rank " << r << " tensor, got " << t.shape_str();
    throw std::invalid_argument(os.str());
  }
}

inline bool all_finite(const Tensor& t) {
  for (double x : t.v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace densecine

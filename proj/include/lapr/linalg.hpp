#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "lapr/errors.hpp"
#include "lapr/rng.hpp"

namespace lapr {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = Vec<double>;
using Matrix = Mat<double>;

// Norms below this are treated as zero.
inline constexpr double kNormFloor = 1e-12;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Numerically stable softmax (max-subtracted).
template <typename Derived>
Vec<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw InvalidArgument("softmax: empty vector");
  const Scalar peak = v.maxCoeff();
  Vec<Scalar> out = (v.array() - peak).exp().matrix();
  out /= out.sum();
  return out;
}

/// log(sum(exp(v))) without overflow.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using std::log;
  if (v.size() == 0) throw InvalidArgument("log_sum_exp: empty vector");
  const auto peak = v.maxCoeff();
  return peak + log((v.array() - peak).exp().sum());
}

/// Unit-norm copy of v; a vector with norm below 1e-12 comes back unchanged.
template <typename Derived>
Vec<typename Derived::Scalar> l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  const auto norm = v.norm();
  if (norm < kNormFloor) return v;
  return v / norm;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) {
    throw InvalidArgument("cosine_similarity: dims " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  }
  const auto na = a.norm();
  const auto nb = b.norm();
  if (na < kNormFloor || nb < kNormFloor) {
    throw DegenerateVector("cosine_similarity: zero-norm operand (collapsed embedding)");
  }
  return a.dot(b) / (na * nb);
}

/// Gradients of cos(a, b) with respect to a and b.
template <typename Scalar>
struct CosineGrad {
  Scalar value;
  Vec<Scalar> d_a;
  Vec<Scalar> d_b;
};

template <typename DerivedA, typename DerivedB>
CosineGrad<typename DerivedA::Scalar> cosine_with_grad(const Eigen::MatrixBase<DerivedA>& a,
                                                       const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar c = cosine_similarity(a, b);
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  // d cos / d a = b / (|a||b|) - cos * a / |a|^2
  Vec<Scalar> d_a = b / (na * nb) - c * a / (na * na);
  Vec<Scalar> d_b = a / (na * nb) - c * b / (nb * nb);
  return {c, std::move(d_a), std::move(d_b)};
}

/// W x + b.
template <typename DerivedW, typename DerivedB, typename DerivedX>
Vec<typename DerivedW::Scalar> affine_forward(const Eigen::MatrixBase<DerivedW>& w,
                                              const Eigen::MatrixBase<DerivedB>& b,
                                              const Eigen::MatrixBase<DerivedX>& x) {
  if (w.cols() != x.size() || w.rows() != b.size()) {
    throw InvalidArgument("affine_forward: W is " + std::to_string(w.rows()) + "x" +
                          std::to_string(w.cols()) + ", b has " + std::to_string(b.size()) +
                          ", x has " + std::to_string(x.size()));
  }
  return w * x + b;
}

template <typename Derived>
Vec<typename Derived::Scalar> relu(const Eigen::MatrixBase<Derived>& v) {
  return v.cwiseMax(typename Derived::Scalar(0));
}

/// Fills m with draws from uniform(-bound, bound), row-major order.
template <typename Derived>
void fill_uniform(Eigen::MatrixBase<Derived>& m, double bound, SeededRng& rng) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
}

}  // namespace lapr

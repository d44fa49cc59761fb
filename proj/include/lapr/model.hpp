#pragma once

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lapr/errors.hpp"
#include "lapr/linalg.hpp"
#include "lapr/rng.hpp"

namespace lapr {

struct ModelConfig {
  int experts = 10;
  int input_dim = 0;
  int hidden = 0;
  int output_dim = 0;
  double temperature = 1.0;
  // Ablation switches that change inference as well as training.
  bool uniform_router = false;
  bool use_label = true;

  // Defaults hidden and output width to the input width.
  static ModelConfig for_dim(int dim, int experts = 10) {
    ModelConfig c;
    c.experts = experts;
    c.input_dim = dim;
    c.hidden = dim;
    c.output_dim = dim;
    return c;
  }

  void validate() const {
    if (experts < 1) throw InvalidArgument("model: experts must be >= 1");
    if (input_dim < 1 || hidden < 1 || output_dim < 1)
      throw InvalidArgument("model: input_dim, hidden and output_dim must be >= 1");
    if (!(temperature > 0.0) || !std::isfinite(temperature))
      throw InvalidArgument("model: temperature must be a positive finite number");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Two-layer perceptron W2 relu(W1 x + b1) + b2.
template <typename Scalar>
struct ExpertParams {
  Mat<Scalar> w1;
  Vec<Scalar> b1;
  Mat<Scalar> w2;
  Vec<Scalar> b2;

  static ExpertParams zeros(int in, int hidden, int out) {
    return {Mat<Scalar>::Zero(hidden, in), Vec<Scalar>::Zero(hidden), Mat<Scalar>::Zero(out, hidden),
            Vec<Scalar>::Zero(out)};
  }
  int input_dim() const { return static_cast<int>(w1.cols()); }
  int output_dim() const { return static_cast<int>(w2.rows()); }
};

enum class Side { kQuery, kPrompt };

template <typename Scalar>
struct EncoderBank {
  Side side = Side::kQuery;
  std::vector<ExpertParams<Scalar>> experts;
};

template <typename Scalar>
struct RouterParams {
  Mat<Scalar> w;  // K x d
  Vec<Scalar> b;  // K
};

/// Query encoders E, prompt encoders Ebar and the router R.
template <typename Scalar>
struct BasicModel {
  ModelConfig config;
  EncoderBank<Scalar> query_bank{Side::kQuery, {}};
  EncoderBank<Scalar> prompt_bank{Side::kPrompt, {}};
  RouterParams<Scalar> router;
};

using Model = BasicModel<double>;
using MixtureWeights = Vector;

template <typename Scalar>
BasicModel<Scalar> zero_model(const ModelConfig& config) {
  config.validate();
  BasicModel<Scalar> m;
  m.config = config;
  for (int k = 0; k < config.experts; ++k) {
    m.query_bank.experts.push_back(
        ExpertParams<Scalar>::zeros(config.input_dim, config.hidden, config.output_dim));
    m.prompt_bank.experts.push_back(
        ExpertParams<Scalar>::zeros(config.input_dim, config.hidden, config.output_dim));
  }
  m.router.w = Mat<Scalar>::Zero(config.experts, config.input_dim);
  m.router.b = Vec<Scalar>::Zero(config.experts);
  return m;
}

template <typename Scalar>
BasicModel<Scalar> zeros_like(const BasicModel<Scalar>& m) {
  return zero_model<Scalar>(m.config);
}

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. Draw order: query
// experts, prompt experts, router; W1 before W2 inside each expert.
inline Model init_model(const ModelConfig& config, SeededRng& rng) {
  Model m = zero_model<double>(config);
  auto init_bank = [&](EncoderBank<double>& bank) {
    for (auto& e : bank.experts) {
      fill_uniform(e.w1, 1.0 / std::sqrt(double(config.input_dim)), rng);
      fill_uniform(e.w2, 1.0 / std::sqrt(double(config.hidden)), rng);
    }
  };
  init_bank(m.query_bank);
  init_bank(m.prompt_bank);
  fill_uniform(m.router.w, 1.0 / std::sqrt(double(config.input_dim)), rng);
  return m;
}

/// Visits every parameter block in the canonical order: query experts
/// (w1, b1, w2, b2 each), prompt experts, router w, router b.
template <typename ModelT, typename F>
void for_each_block(ModelT& m, F&& f) {
  for (auto& e : m.query_bank.experts) {
    f(e.w1);
    f(e.b1);
    f(e.w2);
    f(e.b2);
  }
  for (auto& e : m.prompt_bank.experts) {
    f(e.w1);
    f(e.b1);
    f(e.w2);
    f(e.b2);
  }
  f(m.router.w);
  f(m.router.b);
}

template <typename ModelA, typename ModelB, typename F>
void for_each_block_pair(ModelA& a, ModelB& b, F&& f) {
  auto bank = [&](auto& x, auto& y) {
    for (std::size_t k = 0; k < x.experts.size(); ++k) {
      f(x.experts[k].w1, y.experts[k].w1);
      f(x.experts[k].b1, y.experts[k].b1);
      f(x.experts[k].w2, y.experts[k].w2);
      f(x.experts[k].b2, y.experts[k].b2);
    }
  };
  bank(a.query_bank, b.query_bank);
  bank(a.prompt_bank, b.prompt_bank);
  f(a.router.w, b.router.w);
  f(a.router.b, b.router.b);
}

/// The same parameters in another scalar type.
template <typename To, typename From>
BasicModel<To> cast_model(const BasicModel<From>& m) {
  BasicModel<To> out = zero_model<To>(m.config);
  for_each_block_pair(out, m, [](auto& dst, const auto& src) { dst = src.template cast<To>(); });
  return out;
}

template <typename Scalar>
std::size_t parameter_count(const BasicModel<Scalar>& m) {
  std::size_t n = 0;
  for_each_block(m, [&](const auto& block) { n += static_cast<std::size_t>(block.size()); });
  return n;
}

// 64-bit FNV-1a over a byte range.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

template <typename Derived>
std::uint64_t hash_block(const Eigen::MatrixBase<Derived>& block, std::uint64_t h) {
  const std::int64_t shape[2] = {block.rows(), block.cols()};
  h = fnv1a(shape, sizeof(shape), h);
  for (Eigen::Index r = 0; r < block.rows(); ++r)
    for (Eigen::Index c = 0; c < block.cols(); ++c) {
      const double v = static_cast<double>(block(r, c));
      h = fnv1a(&v, sizeof(v), h);
    }
  return h;
}

/// Hash of a bank's parameters, row-major. Identifies the parameters a mode cache was built from.
template <typename Scalar>
std::uint64_t bank_fingerprint(const EncoderBank<Scalar>& bank) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& e : bank.experts) {
    h = hash_block(e.w1, h);
    h = hash_block(e.b1, h);
    h = hash_block(e.w2, h);
    h = hash_block(e.b2, h);
  }
  return h;
}

template <typename Scalar>
std::uint64_t router_fingerprint(const RouterParams<Scalar>& r) {
  return hash_block(r.b, hash_block(r.w, 0xCBF29CE484222325ULL));
}

// ---------------------------------------------------------------------------
// Forward passes

/// z = zI + zL, or zI alone when the label is switched off.
template <typename DerivedI, typename DerivedL>
Vec<typename DerivedI::Scalar> fuse_prompt(const Eigen::MatrixBase<DerivedI>& image,
                                           const Eigen::MatrixBase<DerivedL>& label, bool use_label) {
  if (image.size() != label.size()) throw InvalidArgument("fuse_prompt: image/label dim mismatch");
  if (!use_label) return image;
  return image + label;
}

template <typename Scalar>
struct ExpertTrace {
  Vec<Scalar> pre;     // W1 x + b1
  Vec<Scalar> hidden;  // relu(pre)
  Vec<Scalar> out;     // W2 hidden + b2
};

template <typename Scalar, typename Derived>
ExpertTrace<Scalar> expert_trace(const ExpertParams<Scalar>& e, const Eigen::MatrixBase<Derived>& x) {
  if (x.size() != e.w1.cols()) {
    throw InvalidArgument("expert_forward: input dim " + std::to_string(x.size()) + ", expected " +
                          std::to_string(e.w1.cols()));
  }
  ExpertTrace<Scalar> t;
  t.pre = affine_forward(e.w1, e.b1, x);
  t.hidden = relu(t.pre);
  t.out = affine_forward(e.w2, e.b2, t.hidden);
  return t;
}

template <typename Scalar, typename Derived>
Vec<Scalar> expert_forward(const ExpertParams<Scalar>& e, const Eigen::MatrixBase<Derived>& x) {
  return expert_trace(e, x).out;
}

/// Accumulates d(out)-weighted parameter gradients of one expert into grad.
template <typename Scalar, typename DerivedX, typename DerivedD>
void expert_backward(const ExpertParams<Scalar>& e, const Eigen::MatrixBase<DerivedX>& x,
                     const ExpertTrace<Scalar>& t, const Eigen::MatrixBase<DerivedD>& d_out,
                     ExpertParams<Scalar>& grad) {
  grad.w2.noalias() += d_out * t.hidden.transpose();
  grad.b2 += d_out;
  Vec<Scalar> d_pre = e.w2.transpose() * d_out;
  for (Eigen::Index i = 0; i < d_pre.size(); ++i)
    if (!(t.pre(i) > Scalar(0))) d_pre(i) = Scalar(0);
  grad.w1.noalias() += d_pre * x.transpose();
  grad.b1 += d_pre;
}

/// softmax(W u + b), a point on the K-simplex.
template <typename Scalar, typename Derived>
Vec<Scalar> router_forward(const RouterParams<Scalar>& r, const Eigen::MatrixBase<Derived>& u) {
  return softmax(affine_forward(r.w, r.b, u));
}

/// Accumulates router gradients given d loss / d pi.
template <typename Scalar, typename DerivedU, typename DerivedP, typename DerivedD>
void router_backward(const Eigen::MatrixBase<DerivedU>& u, const Eigen::MatrixBase<DerivedP>& pi,
                     const Eigen::MatrixBase<DerivedD>& d_pi, RouterParams<Scalar>& grad) {
  const Scalar centre = pi.dot(d_pi);
  const Vec<Scalar> d_logits = pi.cwiseProduct((d_pi.array() - centre).matrix());
  grad.w.noalias() += d_logits * u.transpose();
  grad.b += d_logits;
}

/// Mixture weights of a query, honouring the uniform-router ablation.
template <typename Scalar, typename Derived>
Vec<Scalar> mixture_weights(const BasicModel<Scalar>& m, const Eigen::MatrixBase<Derived>& u) {
  if (m.config.uniform_router) {
    if (u.size() != m.router.w.cols()) throw InvalidArgument("router_forward: input dim mismatch");
    return Vec<Scalar>::Constant(m.config.experts, Scalar(1) / Scalar(m.config.experts));
  }
  return router_forward(m.router, u);
}

/// sum_k pi_k modes[k].
template <typename Scalar>
Vec<Scalar> mix(const Vec<Scalar>& pi, std::span<const Vec<Scalar>> modes) {
  if (modes.size() != static_cast<std::size_t>(pi.size()) || modes.empty())
    throw InvalidArgument("mix: " + std::to_string(modes.size()) + " modes for " +
                          std::to_string(pi.size()) + " weights");
  Vec<Scalar> out = Vec<Scalar>::Zero(modes.front().size());
  for (std::size_t k = 0; k < modes.size(); ++k) {
    if (modes[k].size() != out.size()) throw InvalidArgument("mix: mode dims differ");
    out += pi(static_cast<Eigen::Index>(k)) * modes[k];
  }
  return out;
}

/// Column form of mix: modes is d' x K.
template <typename Scalar, typename Derived>
Vec<Scalar> mix(const Vec<Scalar>& pi, const Eigen::MatrixBase<Derived>& modes) {
  if (modes.cols() != pi.size()) throw InvalidArgument("mix: mode count does not match weights");
  return modes * pi;
}

/// All K expert passes of one side for one input, kept for backprop.
template <typename Scalar>
struct BankTrace {
  std::vector<ExpertTrace<Scalar>> experts;
  Mat<Scalar> modes;  // d' x K, column k = expert k output
};

template <typename Scalar, typename Derived>
BankTrace<Scalar> bank_trace(const EncoderBank<Scalar>& bank, const Eigen::MatrixBase<Derived>& x) {
  BankTrace<Scalar> t;
  t.experts.reserve(bank.experts.size());
  for (const auto& e : bank.experts) t.experts.push_back(expert_trace(e, x));
  const Eigen::Index out = t.experts.empty() ? 0 : t.experts.front().out.size();
  t.modes.resize(out, static_cast<Eigen::Index>(t.experts.size()));
  for (std::size_t k = 0; k < t.experts.size(); ++k) t.modes.col(Eigen::Index(k)) = t.experts[k].out;
  return t;
}

/// Modes of one side without traces.
template <typename Scalar, typename Derived>
Mat<Scalar> bank_modes(const EncoderBank<Scalar>& bank, const Eigen::MatrixBase<Derived>& x) {
  Mat<Scalar> modes;
  for (std::size_t k = 0; k < bank.experts.size(); ++k) {
    Vec<Scalar> out = expert_forward(bank.experts[k], x);
    if (k == 0) modes.resize(out.size(), Eigen::Index(bank.experts.size()));
    modes.col(Eigen::Index(k)) = out;
  }
  return modes;
}

/// Backprop through a bank given per-mode output gradients (d' x K).
template <typename Scalar, typename DerivedX, typename DerivedD>
void bank_backward(const EncoderBank<Scalar>& bank, const Eigen::MatrixBase<DerivedX>& x,
                   const BankTrace<Scalar>& trace, const Eigen::MatrixBase<DerivedD>& d_modes,
                   EncoderBank<Scalar>& grad) {
  for (std::size_t k = 0; k < bank.experts.size(); ++k)
    expert_backward(bank.experts[k], x, trace.experts[k], d_modes.col(Eigen::Index(k)), grad.experts[k]);
}

template <typename Scalar>
struct PairScore {
  Scalar score;        // cos(u_tilde, p_tilde) / temperature
  Vec<Scalar> u_tilde;  // label-aware query embedding
  Vec<Scalar> p_tilde;  // query-relevant prompt embedding
  Vec<Scalar> pi;
};

template <typename Scalar, typename DerivedU, typename DerivedZ>
PairScore<Scalar> pair_score(const BasicModel<Scalar>& m, const Eigen::MatrixBase<DerivedU>& u,
                             const Eigen::MatrixBase<DerivedZ>& z) {
  PairScore<Scalar> s;
  s.pi = mixture_weights(m, u);
  s.u_tilde = mix(s.pi, bank_modes(m.query_bank, u));
  s.p_tilde = mix(s.pi, bank_modes(m.prompt_bank, z));
  s.score = cosine_similarity(s.u_tilde, s.p_tilde) / Scalar(m.config.temperature);
  return s;
}

/// Which parameter groups receive gradient. A frozen group gets an exactly zero slot.
struct GradientMask {
  bool experts = true;
  bool router = true;
};

/// Parameter gradients of upstream * s_CL(u, z).
template <typename Scalar, typename DerivedU, typename DerivedZ>
BasicModel<Scalar> backward_pair(const BasicModel<Scalar>& m, const Eigen::MatrixBase<DerivedU>& u,
                                 const Eigen::MatrixBase<DerivedZ>& z, Scalar upstream,
                                 GradientMask mask = {}) {
  BasicModel<Scalar> grad = zeros_like(m);
  const Vec<Scalar> pi = mixture_weights(m, u);
  const BankTrace<Scalar> q = bank_trace(m.query_bank, u);
  const BankTrace<Scalar> p = bank_trace(m.prompt_bank, z);
  const Vec<Scalar> u_tilde = q.modes * pi;
  const Vec<Scalar> p_tilde = p.modes * pi;
  const auto cg = cosine_with_grad(u_tilde, p_tilde);
  if (upstream == Scalar(0)) return grad;
  const Scalar scale = upstream / Scalar(m.config.temperature);
  const Vec<Scalar> d_u = scale * cg.d_a;
  const Vec<Scalar> d_p = scale * cg.d_b;
  if (mask.experts) {
    bank_backward(m.query_bank, u, q, d_u * pi.transpose(), grad.query_bank);
    bank_backward(m.prompt_bank, z, p, d_p * pi.transpose(), grad.prompt_bank);
  }
  if (mask.router && !m.config.uniform_router) {
    const Vec<Scalar> d_pi = q.modes.transpose() * d_u + p.modes.transpose() * d_p;
    router_backward(u, pi, d_pi, grad.router);
  }
  return grad;
}

}  // namespace lapr

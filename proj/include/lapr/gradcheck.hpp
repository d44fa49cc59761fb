#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lapr/losses.hpp"
#include "lapr/model.hpp"
#include "lapr/rng.hpp"

namespace lapr {

/// Central finite-difference verification of analytic gradients.
namespace gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-6;
inline constexpr double kGuard = 1e-8;

/// |a - n| / (max(|a|, |n|) + 1e-8)
double relative_error(double analytic, double numeric);

struct Comparison {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

using Extended = long double;
using ExtendedModel = BasicModel<Extended>;
using Objective = std::function<Extended(const ExtendedModel&)>;

/// Compares `analytic` against the fourth-order central difference
///   (f(t - 2h) - 8 f(t - h) + 8 f(t + h) - f(t + 2h)) / 12h
/// for every parameter in the groups enabled by mask. f is evaluated in
/// extended precision so the reference is not limited by double rounding.
Comparison compare(const Model& model, const Model& analytic, const Objective& f, GradientMask mask,
                   double step = kStep);

/// A tiny random problem: d, hidden, d' in {2, 3}, K in {2, 3}, batch <= 4.
struct Instance {
  Model model;
  EmbeddingTable emb;
  std::vector<PairSelection> perf_batch;
  std::vector<PairSelection> label_batch;
};

/// Draws an instance whose hidden pre-activations all sit at least 1e-3 away
/// from the rectifier kink, so central differences never straddle it.
Instance random_instance(SeededRng& rng);

enum class Loss { kPerformance, kLabel, kBalance, kRouter, kJoint };
const char* name(Loss loss);

Comparison check(Loss loss, const Instance& instance);

struct SuiteResult {
  Loss loss;
  Comparison worst;
  std::size_t instances = 0;
};

/// `instances` random problems per loss, all five losses.
std::vector<SuiteResult> run_suite(std::uint64_t seed, int instances);

}  // namespace gradcheck
}  // namespace lapr

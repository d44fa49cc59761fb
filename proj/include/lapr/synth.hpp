#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lapr/model.hpp"
#include "lapr/records.hpp"
#include "lapr/rng.hpp"
#include "lapr/training.hpp"

namespace lapr {

/// Planted-mode benchmark parameters.
///
/// Every record draws a category uniformly, then a hidden mode from that
/// category's row of `mixing`. Noise terms are isotropic gaussians with the
/// given per-coordinate standard deviation.
struct SynthConfig {
  int modes = 6;
  int categories = 5;
  int dim = 64;
  int prompts = 2000;
  int queries = 400;
  double image_noise = 0.35;
  double label_noise = 0.1;
  std::vector<std::vector<double>> mixing;  // categories x modes; empty = uniform rows
  double perf_alpha = 0.7;
  double perf_beta = 0.3;
  double perf_noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  /// `mixing` as a matrix, filling in uniform rows when unset.
  Matrix mixing_matrix() const;
};

inline constexpr double kMaxPrototypeCosine = 0.3;
inline constexpr int kMaxPrototypeRejections = 1000;

struct SynthDataset {
  std::vector<PromptRecord> prompts;
  std::vector<QueryRecord> queries;
  std::vector<int> prompt_modes;  // hidden; evaluation only
  std::vector<int> query_modes;   // hidden; evaluation only
  Matrix prototypes;              // dim x modes, unit columns
  Matrix category_directions;     // dim x categories, unit columns
};

SynthDataset generate(const SynthConfig& config);

/// (cos(z^L, y_q) + 1) / 2.
double label_score_proxy(const PromptRecord& prompt, const QueryRecord& query);

/// clamp(alpha * label_score + beta * (cos(z^I, u_q) + 1) / 2 + N(0, perf_noise^2), 0, 1).
double perf_score_proxy(const PromptRecord& prompt, const QueryRecord& query, const SynthConfig& config,
                        SeededRng& rng);

/// Pair-keyed variant: the noise stream is derived from (seed, query id, prompt id),
/// so results do not depend on evaluation order.
double perf_score_proxy(const PromptRecord& prompt, const QueryRecord& query, const SynthConfig& config);

/// Both proxies over every candidate pool.
ScoreTable proxy_score_table(const CandidatePool& pool, const SynthDataset& data, const SynthConfig& config,
                             int threads = 1);

struct Metrics {
  double mode_match_acc = 0.0;
  double mean_label_score = 0.0;
  double mean_perf_score = 0.0;
};

/// Maps a query to the id of its top-1 prompt.
using Retriever = std::function<std::size_t(const QueryRecord&)>;

Metrics evaluate(const Retriever& retriever, const SynthDataset& data, const SynthConfig& config, int threads = 1);

/// Per category: mean mixture weight of each expert and how often each expert is the argmax.
struct ActivationTable {
  Matrix mean_weight;   // categories x experts
  Matrix argmax_freq;   // categories x experts
  std::vector<std::size_t> counts;
  std::vector<bool> empty;  // category had no queries; its rows are zero

  std::string to_csv() const;
};

ActivationTable expert_activation_analysis(const Model& model, std::span<const QueryRecord> queries,
                                           int categories);

double pearson_correlation(std::span<const double> x, std::span<const double> y);

/// Pearson r between label score and performance score over the given (query, prompt) pairs.
double consistency_correlation(std::span<const std::pair<std::size_t, std::size_t>> pairs, const ScoreTable& scores);

/// Every (query, prompt) pair present in the table, row by row.
std::vector<std::pair<std::size_t, std::size_t>> table_pairs(const ScoreTable& scores);

}  // namespace lapr

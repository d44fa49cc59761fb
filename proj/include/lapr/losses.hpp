#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lapr/linalg.hpp"
#include "lapr/model.hpp"

namespace lapr {

enum class PairSource { kPerformance, kLabel };

/// One query with its sampled positive and negative prompt.
struct PairSelection {
  std::size_t query_id = 0;
  std::size_t positive_id = 0;
  std::size_t negative_id = 0;
  PairSource source = PairSource::kPerformance;
};

/// Inputs the losses read: query embeddings u_q and fused prompt embeddings
/// z_i, both indexed by record id.
struct EmbeddingTable {
  std::vector<Vector> queries;
  std::vector<Vector> prompts;
};

struct LossResult {
  double value = 0.0;
  Model grad;
};

/// Sorted, deduplicated union of every positive and negative id in the batch.
std::vector<std::size_t> denominator_set(std::span<const PairSelection> batch);

/// Batch-mean InfoNCE over the shared denominator set:
///   -(1/B) sum_q log( exp(s(q, i+)) / sum_{j in D} exp(s(q, j)) )
/// with s the label-aware cosine score. Gradients are produced only for the
/// groups enabled in mask; the others stay exactly zero.
LossResult contrastive_loss(const Model& model, const EmbeddingTable& emb,
                            std::span<const PairSelection> batch, GradientMask mask);

// Performance-guided loss; router frozen.
LossResult loss_pg(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch);

// Label-guided loss; experts frozen (their outputs still carry gradient into pi).
LossResult loss_lg(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch);

struct BalanceResult {
  double value = 0.0;
  std::vector<Vector> d_pi;  // d loss / d pi_q, one per input mixture
};

inline constexpr double kBalanceEpsilon = 1e-12;

/// KL(mean mixture || uniform), with the log guarded as log(pbar_k + 1e-12).
BalanceResult load_balance(std::span<const Vector> mixtures);

/// load_balance over the mixtures of the given queries, chained into the router.
LossResult loss_lb(const Model& model, const EmbeddingTable& emb, std::span<const std::size_t> query_ids);

/// L_LG + L_LB over the batch's queries.
LossResult loss_router(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch);

/// L_PG + L_LG + L_LB with every parameter group free.
LossResult loss_joint(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch_pg,
                      std::span<const PairSelection> batch_lg);

std::vector<std::size_t> batch_queries(std::span<const PairSelection> batch);

// grad += other, blockwise.
void accumulate(Model& grad, const Model& other);

/// Value-only forms in any scalar type, same reduction order as the losses
/// above. The finite-difference checker runs these in extended precision.
template <typename S>
S contrastive_value(const BasicModel<S>& model, const EmbeddingTable& emb, std::span<const PairSelection> batch) {
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  const std::vector<std::size_t> denom = denominator_set(batch);
  std::vector<Mat<S>> prompt_modes;
  for (std::size_t id : denom) prompt_modes.push_back(bank_modes(model.prompt_bank, emb.prompts.at(id).template cast<S>()));
  std::vector<const PairSelection*> order;
  for (const auto& sel : batch) order.push_back(&sel);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->query_id < b->query_id; });
  S total = 0;
  Vec<S> scores(static_cast<Eigen::Index>(denom.size()));
  for (const PairSelection* sel : order) {
    const Vec<S> u = emb.queries.at(sel->query_id).template cast<S>();
    const Vec<S> pi = mixture_weights(model, u);
    const Vec<S> u_tilde = bank_modes(model.query_bank, u) * pi;
    for (std::size_t j = 0; j < denom.size(); ++j)
      scores(Eigen::Index(j)) = cosine_similarity(u_tilde, Vec<S>(prompt_modes[j] * pi)) / S(model.config.temperature);
    const auto positive = std::lower_bound(denom.begin(), denom.end(), sel->positive_id) - denom.begin();
    total += log_sum_exp(scores) - scores(Eigen::Index(positive));
  }
  return total / S(batch.size());
}

template <typename S>
S balance_value(const BasicModel<S>& model, const EmbeddingTable& emb, std::span<const std::size_t> query_ids) {
  if (query_ids.empty()) throw InvalidArgument("loss_lb: empty batch");
  Vec<S> mean = Vec<S>::Zero(model.config.experts);
  for (std::size_t q : query_ids) mean += mixture_weights(model, emb.queries.at(q).template cast<S>());
  mean /= S(query_ids.size());
  S value = 0;
  for (Eigen::Index k = 0; k < mean.size(); ++k)
    value += mean(k) * (std::log(mean(k) + S(kBalanceEpsilon)) + std::log(S(mean.size())));
  return value;
}

}  // namespace lapr

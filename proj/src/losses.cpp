#include "lapr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace lapr {

namespace {

const Vector& lookup(const std::vector<Vector>& table, std::size_t id, const char* what) {
  if (id >= table.size())
    throw InvalidArgument(std::string("loss: ") + what + " id " + std::to_string(id) + " out of range");
  return table[id];
}

void check_batch(std::span<const PairSelection> batch) {
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  for (const auto& sel : batch)
    if (sel.positive_id == sel.negative_id)
      throw InvalidArgument("loss: positive and negative coincide for query " + std::to_string(sel.query_id));
}

// Batch positions sorted by query id so reductions happen in a fixed order.
std::vector<std::size_t> reduction_order(std::span<const PairSelection> batch) {
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return batch[a].query_id < batch[b].query_id; });
  return order;
}

}  // namespace

void accumulate(Model& grad, const Model& other) {
  for_each_block_pair(grad, other, [](auto& a, const auto& b) { a += b; });
}

std::vector<std::size_t> denominator_set(std::span<const PairSelection> batch) {
  std::vector<std::size_t> ids;
  ids.reserve(batch.size() * 2);
  for (const auto& sel : batch) {
    ids.push_back(sel.positive_id);
    ids.push_back(sel.negative_id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<std::size_t> batch_queries(std::span<const PairSelection> batch) {
  std::vector<std::size_t> ids;
  ids.reserve(batch.size());
  for (const auto& sel : batch) ids.push_back(sel.query_id);
  return ids;
}

LossResult contrastive_loss(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch,
                            GradientMask mask) {
  check_batch(batch);
  const std::vector<std::size_t> denom = denominator_set(batch);
  const auto temperature = model.config.temperature;
  const auto batch_size = static_cast<double>(batch.size());
  const bool router_grads = mask.router && !model.config.uniform_router;

  // Prompt-side modes do not depend on the query: one pass per denominator member.
  std::vector<BankTrace<double>> prompt_traces;
  prompt_traces.reserve(denom.size());
  for (std::size_t id : denom) prompt_traces.push_back(bank_trace(model.prompt_bank, lookup(emb.prompts, id, "prompt")));
  std::vector<Matrix> d_prompt_modes;
  if (mask.experts)
    d_prompt_modes.assign(denom.size(), Matrix::Zero(model.config.output_dim, model.config.experts));

  LossResult result{0.0, zeros_like(model)};
  Vector scores(static_cast<Eigen::Index>(denom.size()));
  std::vector<CosineGrad<double>> cosines(denom.size());

  for (std::size_t pos : reduction_order(batch)) {
    const PairSelection& sel = batch[pos];
    const Vector& u = lookup(emb.queries, sel.query_id, "query");
    const Vector pi = mixture_weights(model, u);
    const BankTrace<double> query_trace = bank_trace(model.query_bank, u);
    const Vector u_tilde = query_trace.modes * pi;

    const auto positive = static_cast<Eigen::Index>(
        std::lower_bound(denom.begin(), denom.end(), sel.positive_id) - denom.begin());
    for (std::size_t j = 0; j < denom.size(); ++j) {
      cosines[j] = cosine_with_grad(u_tilde, prompt_traces[j].modes * pi);
      scores(Eigen::Index(j)) = cosines[j].value / temperature;
    }
    result.value += (log_sum_exp(scores) - scores(positive)) / batch_size;

    // d loss / d s_j = (softmax_j - [j == +]) / B
    Vector coeff = softmax(scores);
    coeff(positive) -= 1.0;
    coeff /= batch_size * temperature;

    Vector d_u = Vector::Zero(u_tilde.size());
    Vector d_pi = Vector::Zero(pi.size());
    for (std::size_t j = 0; j < denom.size(); ++j) {
      const double c = coeff(Eigen::Index(j));
      d_u += c * cosines[j].d_a;
      const Vector d_p = c * cosines[j].d_b;
      if (mask.experts) d_prompt_modes[j].noalias() += d_p * pi.transpose();
      if (router_grads) d_pi.noalias() += prompt_traces[j].modes.transpose() * d_p;
    }
    if (mask.experts) bank_backward(model.query_bank, u, query_trace, d_u * pi.transpose(), result.grad.query_bank);
    if (router_grads) {
      d_pi.noalias() += query_trace.modes.transpose() * d_u;
      router_backward(u, pi, d_pi, result.grad.router);
    }
  }

  if (mask.experts) {
    for (std::size_t j = 0; j < denom.size(); ++j)
      bank_backward(model.prompt_bank, emb.prompts[denom[j]], prompt_traces[j], d_prompt_modes[j],
                    result.grad.prompt_bank);
  }
  return result;
}

LossResult loss_pg(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch) {
  return contrastive_loss(model, emb, batch, {.experts = true, .router = false});
}

LossResult loss_lg(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch) {
  return contrastive_loss(model, emb, batch, {.experts = false, .router = true});
}

BalanceResult load_balance(std::span<const Vector> mixtures) {
  if (mixtures.empty()) throw InvalidArgument("load_balance: empty batch");
  const Eigen::Index k = mixtures.front().size();
  if (k == 0) throw InvalidArgument("load_balance: empty mixture");
  Vector mean = Vector::Zero(k);
  for (const auto& pi : mixtures) {
    if (pi.size() != k) throw InvalidArgument("load_balance: mixtures of different sizes");
    mean += pi;
  }
  const double batch = static_cast<double>(mixtures.size());
  mean /= batch;

  BalanceResult out;
  const double log_k = std::log(static_cast<double>(k));
  Vector d_mean(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double guarded = mean(i) + kBalanceEpsilon;
    const double log_ratio = std::log(guarded) + log_k;
    out.value += mean(i) * log_ratio;
    d_mean(i) = log_ratio + mean(i) / guarded;
  }
  out.d_pi.assign(mixtures.size(), d_mean / batch);
  return out;
}

LossResult loss_lb(const Model& model, const EmbeddingTable& emb, std::span<const std::size_t> query_ids) {
  if (query_ids.empty()) throw InvalidArgument("loss_lb: empty batch");
  std::vector<Vector> mixtures;
  mixtures.reserve(query_ids.size());
  for (std::size_t q : query_ids) mixtures.push_back(mixture_weights(model, lookup(emb.queries, q, "query")));
  const BalanceResult balance = load_balance(mixtures);
  LossResult result{balance.value, zeros_like(model)};
  if (!model.config.uniform_router) {
    for (std::size_t i = 0; i < query_ids.size(); ++i)
      router_backward(emb.queries[query_ids[i]], mixtures[i], balance.d_pi[i], result.grad.router);
  }
  return result;
}

LossResult loss_router(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch) {
  LossResult result = loss_lg(model, emb, batch);
  const auto queries = batch_queries(batch);
  const LossResult balance = loss_lb(model, emb, queries);
  result.value += balance.value;
  accumulate(result.grad, balance.grad);
  return result;
}

LossResult loss_joint(const Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch_pg,
                      std::span<const PairSelection> batch_lg) {
  const GradientMask all{.experts = true, .router = true};
  LossResult result = contrastive_loss(model, emb, batch_pg, all);
  const LossResult label = contrastive_loss(model, emb, batch_lg, all);
  const auto queries = batch_queries(batch_lg);
  const LossResult balance = loss_lb(model, emb, queries);
  result.value += label.value + balance.value;
  accumulate(result.grad, label.grad);
  accumulate(result.grad, balance.grad);
  return result;
}

}  // namespace lapr

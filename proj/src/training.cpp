#include "lapr/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lapr/log.hpp"
#include "lapr/parallel.hpp"

namespace lapr {

void AblationFlags::validate() const {
  if (single_stage && drop_pg) throw InvalidArgument("ablation: single_stage and drop_pg are mutually exclusive");
  if (single_stage && drop_lg) throw InvalidArgument("ablation: single_stage and drop_lg are mutually exclusive");
  if (no_router && drop_lg) throw InvalidArgument("ablation: drop_lg needs a router step, but no_router removes it");
  if (no_router && drop_lb) throw InvalidArgument("ablation: drop_lb needs a router step, but no_router removes it");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidArgument("train: lr must be finite and >= 0");
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (epochs < 0) throw InvalidArgument("train: epochs must be >= 0");
  if (experts < 1) throw InvalidArgument("train: experts must be >= 1");
  if (mine_count < 1) throw InvalidArgument("train: mine_count must be >= 1");
  if (pool_size < 2 * mine_count) throw InvalidArgument("train: pool_size must be >= 2 * mine_count");
  if (!(momentum >= 0.0) || momentum >= 1.0) throw InvalidArgument("train: momentum must be in [0, 1)");
  if (!(temperature > 0.0)) throw InvalidArgument("train: temperature must be > 0");
  if (hidden < 0 || output_dim < 0) throw InvalidArgument("train: hidden/output_dim must be >= 0");
  ablation.validate();
}

ModelConfig TrainConfig::model_config(int input_dim) const {
  ModelConfig c = ModelConfig::for_dim(input_dim, experts);
  if (hidden > 0) c.hidden = hidden;
  if (output_dim > 0) c.output_dim = output_dim;
  c.temperature = temperature;
  c.uniform_router = ablation.no_router;
  c.use_label = !ablation.no_label;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Score table

void ScoreTable::set_row(std::size_t query_id, std::vector<ScoreEntry> entries) {
  if (query_id >= rows_.size()) rows_.resize(query_id + 1);
  rows_[query_id] = std::move(entries);
}

const ScoreEntry* ScoreTable::find(std::size_t query_id, std::size_t prompt_id) const {
  if (query_id >= rows_.size()) return nullptr;
  for (const auto& e : rows_[query_id])
    if (e.prompt_id == prompt_id) return &e;
  return nullptr;
}

std::size_t ScoreTable::size() const {
  std::size_t n = 0;
  for (const auto& r : rows_) n += r.size();
  return n;
}

bool ScoreTable::operator==(const ScoreTable& other) const {
  if (rows_.size() != other.rows_.size()) return false;
  for (std::size_t q = 0; q < rows_.size(); ++q) {
    if (rows_[q].size() != other.rows_[q].size()) return false;
    for (std::size_t i = 0; i < rows_[q].size(); ++i) {
      const auto& a = rows_[q][i];
      const auto& b = other.rows_[q][i];
      if (a.prompt_id != b.prompt_id || a.perf != b.perf || a.label != b.label) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Pools, scoring, mining

CandidatePool build_candidate_pool(std::span<const QueryRecord> queries, std::span<const PromptRecord> database,
                                   std::size_t pool_size, int threads) {
  if (pool_size > database.size())
    throw InvalidArgument("candidate pool: pool_size " + std::to_string(pool_size) + " exceeds database size " +
                          std::to_string(database.size()));
  CandidatePool pool;
  pool.members.resize(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t q) {
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(database.size());
    for (const auto& p : database) scored.emplace_back(cosine_similarity(queries[q].embedding, p.image), p.id);
    auto better = [](const auto& a, const auto& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    };
    std::partial_sort(scored.begin(), scored.begin() + std::ptrdiff_t(pool_size), scored.end(), better);
    auto& out = pool.members[q];
    out.reserve(pool_size);
    for (std::size_t i = 0; i < pool_size; ++i) out.push_back(scored[i].second);
  });
  return pool;
}

ScoreTable score_pools(const CandidatePool& pool, std::span<const QueryRecord> queries,
                       std::span<const PromptRecord> database, const Scorer& perf, const Scorer& label,
                       int threads) {
  if (pool.members.size() != queries.size()) throw InvalidArgument("score_pools: pool/query count mismatch");
  std::vector<std::vector<ScoreEntry>> rows(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t q) {
    for (std::size_t id : pool.members[q]) {
      const PromptRecord& p = database[id];
      rows[q].push_back({id, perf(queries[q], p), label(queries[q], p)});
    }
  });
  ScoreTable table(queries.size());
  for (std::size_t q = 0; q < rows.size(); ++q) table.set_row(q, std::move(rows[q]));
  return table;
}

MinedSets mine_query(std::span<const ScoreEntry> row, PairSource source, std::size_t mine_count) {
  auto score = [source](const ScoreEntry& e) { return source == PairSource::kPerformance ? e.perf : e.label; };
  std::vector<const ScoreEntry*> sorted;
  sorted.reserve(row.size());
  for (const auto& e : row) sorted.push_back(&e);

  MinedSets sets;
  const std::size_t take = std::min(mine_count, row.size());
  std::sort(sorted.begin(), sorted.end(), [&](const ScoreEntry* a, const ScoreEntry* b) {
    return score(*a) > score(*b) || (score(*a) == score(*b) && a->prompt_id < b->prompt_id);
  });
  for (std::size_t i = 0; i < take; ++i) sets.positives.push_back(sorted[i]->prompt_id);
  std::sort(sorted.begin(), sorted.end(), [&](const ScoreEntry* a, const ScoreEntry* b) {
    return score(*a) < score(*b) || (score(*a) == score(*b) && a->prompt_id < b->prompt_id);
  });
  for (std::size_t i = 0; i < take; ++i) sets.negatives.push_back(sorted[i]->prompt_id);

  if (sets.positives.empty()) throw DegenerateSupervision("mining: empty candidate pool");
  for (std::size_t p : sets.positives)
    if (std::find(sets.negatives.begin(), sets.negatives.end(), p) != sets.negatives.end())
      throw DegenerateSupervision("mining: prompt " + std::to_string(p) + " is both positive and negative");
  return sets;
}

std::vector<std::optional<MinedSets>> mine_pairs(const ScoreTable& scores, PairSource source,
                                                 std::size_t mine_count) {
  std::vector<std::optional<MinedSets>> out(scores.queries());
  for (std::size_t q = 0; q < scores.queries(); ++q) {
    try {
      out[q] = mine_query(scores.row(q), source, mine_count);
    } catch (const DegenerateSupervision& e) {
      log().warn("query {} skipped ({} supervision): {}", q,
                 source == PairSource::kPerformance ? "performance" : "label", e.what());
    }
  }
  return out;
}

PairSelection sample_pair(SeededRng& rng, std::size_t query_id, const MinedSets& sets, PairSource source) {
  if (sets.positives.empty() || sets.negatives.empty())
    throw DegenerateSupervision("sample_pair: empty positive or negative set for query " + std::to_string(query_id));
  const std::size_t pos = sets.positives[rng.below(sets.positives.size())];
  const std::size_t neg = sets.negatives[rng.below(sets.negatives.size())];
  return {query_id, pos, neg, source};
}

// ---------------------------------------------------------------------------
// Optimization

SgdOptimizer::SgdOptimizer(const Model& model, double lr, double momentum)
    : lr_(lr), momentum_(momentum), velocity_(zeros_like(model)) {}

void SgdOptimizer::apply(Model& model, const Model& grad, GradientMask mask) {
  auto update = [&](auto& param, auto& velocity, const auto& g) {
    if (momentum_ > 0.0) {
      velocity = momentum_ * velocity + g;
      param -= lr_ * velocity;
    } else {
      param -= lr_ * g;
    }
  };
  auto update_bank = [&](EncoderBank<double>& bank, EncoderBank<double>& vel, const EncoderBank<double>& g) {
    for (std::size_t k = 0; k < bank.experts.size(); ++k) {
      update(bank.experts[k].w1, vel.experts[k].w1, g.experts[k].w1);
      update(bank.experts[k].b1, vel.experts[k].b1, g.experts[k].b1);
      update(bank.experts[k].w2, vel.experts[k].w2, g.experts[k].w2);
      update(bank.experts[k].b2, vel.experts[k].b2, g.experts[k].b2);
    }
  };
  if (mask.experts) {
    update_bank(model.query_bank, velocity_.query_bank, grad.query_bank);
    update_bank(model.prompt_bank, velocity_.prompt_bank, grad.prompt_bank);
  }
  if (mask.router && !model.config.uniform_router) {
    update(model.router.w, velocity_.router.w, grad.router.w);
    update(model.router.b, velocity_.router.b, grad.router.b);
  }
}

EmbeddingTable make_embedding_table(std::span<const PromptRecord> prompts, std::span<const QueryRecord> queries,
                                    bool use_label) {
  EmbeddingTable emb;
  emb.prompts.resize(prompts.size());
  for (const auto& p : prompts) {
    if (p.id >= prompts.size()) throw InvalidArgument("prompt ids must be dense in [0, N)");
    emb.prompts[p.id] = fuse_prompt(p.image, p.label, use_label);
  }
  emb.queries.resize(queries.size());
  for (const auto& q : queries) {
    if (q.id >= queries.size()) throw InvalidArgument("query ids must be dense in [0, Q)");
    emb.queries[q.id] = q.embedding;
  }
  return emb;
}

StepReport expert_step(Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch,
                       SgdOptimizer& opt) {
  const GradientMask mask{.experts = true, .router = false};
  const LossResult r = contrastive_loss(model, emb, batch, mask);
  opt.apply(model, r.grad, mask);
  return {r.value, 0.0};
}

StepReport router_step(Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch,
                       SgdOptimizer& opt, bool with_balance) {
  const GradientMask mask{.experts = false, .router = true};
  LossResult r = contrastive_loss(model, emb, batch, mask);
  StepReport report{r.value, 0.0};
  if (with_balance) {
    const auto queries = batch_queries(batch);
    const LossResult balance = loss_lb(model, emb, queries);
    report.balance = balance.value;
    report.loss += balance.value;
    accumulate(r.grad, balance.grad);
  }
  opt.apply(model, r.grad, mask);
  return report;
}

StepReport joint_step(Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch_pg,
                      std::span<const PairSelection> batch_lg, SgdOptimizer& opt) {
  const GradientMask all{.experts = true, .router = true};
  LossResult r = contrastive_loss(model, emb, batch_pg, all);
  const LossResult label = contrastive_loss(model, emb, batch_lg, all);
  const LossResult balance = loss_lb(model, emb, batch_queries(batch_lg));
  accumulate(r.grad, label.grad);
  accumulate(r.grad, balance.grad);
  opt.apply(model, r.grad, all);
  // The L_PG part alone is what the expert-loss curve tracks.
  return {r.value, balance.value};
}

Model make_model(const TrainConfig& config, int input_dim) {
  SeededRng rng(derive_seed(config.seed, 1));
  return init_model(config.model_config(input_dim), rng);
}

TrainResult train(Model model, std::span<const PromptRecord> prompts, std::span<const QueryRecord> queries,
                  const ScoreTable& scores, const TrainConfig& config, const StepObserver& observer) {
  config.validate();
  const AblationFlags& ab = config.ablation;
  model.config.uniform_router = ab.no_router;
  model.config.use_label = !ab.no_label;
  model.config.temperature = config.temperature;
  if (scores.queries() > queries.size()) throw InvalidArgument("train: score table has more queries than data");

  const EmbeddingTable emb = make_embedding_table(prompts, queries, model.config.use_label);
  const auto mine = static_cast<std::size_t>(config.mine_count);
  const auto perf_sets = mine_pairs(scores, PairSource::kPerformance, mine);
  const auto label_sets = mine_pairs(scores, PairSource::kLabel, mine);

  TrainResult result;
  std::vector<std::size_t> eligible;
  for (std::size_t q = 0; q < scores.queries(); ++q) {
    if (!perf_sets[q]) ++result.degenerate_performance;
    if (!label_sets[q]) ++result.degenerate_label;
    if (perf_sets[q] || label_sets[q]) eligible.push_back(q);
  }
  log().info("training on {} queries ({} without performance pairs, {} without label pairs)", eligible.size(),
             result.degenerate_performance, result.degenerate_label);

  SeededRng rng(derive_seed(config.seed, 2));
  SgdOptimizer opt(model, config.lr, config.momentum);
  const auto batch_size = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = eligible;
    rng.shuffle(std::span<std::size_t>(order));
    EpochStats stats;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<PairSelection> perf_batch;
      std::vector<PairSelection> label_batch;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t q = order[i];
        if (perf_sets[q]) perf_batch.push_back(sample_pair(rng, q, *perf_sets[q], PairSource::kPerformance));
        if (label_sets[q]) label_batch.push_back(sample_pair(rng, q, *label_sets[q], PairSource::kLabel));
      }

      if (ab.single_stage) {
        if (perf_batch.empty() || label_batch.empty()) continue;
        const StepReport r = joint_step(model, emb, perf_batch, label_batch, opt);
        stats.expert_loss += r.loss;
        stats.balance_loss += r.balance;
        ++stats.expert_steps;
        if (observer) observer(StepKind::kJoint, model);
        continue;
      }

      const auto& expert_batch = ab.drop_pg ? label_batch : perf_batch;
      if (!expert_batch.empty()) {
        const StepReport r = expert_step(model, emb, expert_batch, opt);
        stats.expert_loss += r.loss;
        ++stats.expert_steps;
        if (observer) observer(StepKind::kExpert, model);
      }
      if (!ab.no_router) {
        const auto& router_batch = ab.drop_lg ? perf_batch : label_batch;
        if (!router_batch.empty()) {
          const StepReport r = router_step(model, emb, router_batch, opt, !ab.drop_lb);
          stats.router_loss += r.loss;
          stats.balance_loss += r.balance;
          ++stats.router_steps;
          if (observer) observer(StepKind::kRouter, model);
        }
      }
    }
    if (stats.expert_steps > 0) stats.expert_loss /= double(stats.expert_steps);
    if (stats.router_steps > 0) stats.router_loss /= double(stats.router_steps);
    const std::size_t balance_steps = ab.single_stage ? stats.expert_steps : stats.router_steps;
    if (balance_steps > 0) stats.balance_loss /= double(balance_steps);
    log().debug("epoch {}: expert {:.6f} router {:.6f} balance {:.6f}", epoch, stats.expert_loss,
                stats.router_loss, stats.balance_loss);
    result.epochs.push_back(stats);
  }
  result.model = std::move(model);
  return result;
}

double mean_batch_mixture_entropy(const Model& model, std::span<const QueryRecord> queries, std::size_t batch_size) {
  if (queries.empty() || batch_size == 0) throw InvalidArgument("mixture entropy: empty input");
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < queries.size(); start += batch_size) {
    const std::size_t end = std::min(queries.size(), start + batch_size);
    Vector mean = Vector::Zero(model.config.experts);
    for (std::size_t i = start; i < end; ++i) mean += mixture_weights(model, queries[i].embedding);
    mean /= double(end - start);
    double h = 0.0;
    for (Eigen::Index k = 0; k < mean.size(); ++k)
      if (mean(k) > 0.0) h -= mean(k) * std::log(mean(k));
    total += h;
    ++batches;
  }
  return total / double(batches);
}

}  // namespace lapr

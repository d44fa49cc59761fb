#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "lapr/losses.hpp"
#include "lapr/model.hpp"
#include "lapr/records.hpp"
#include "lapr/rng.hpp"

namespace lapr {

/// Ablation switches. Each one reproduces one row of the ablation study.
struct AblationFlags {
  bool no_router = false;     // uniform mixture everywhere, router step skipped
  bool no_label = false;      // prompts fused from the image embedding only
  bool single_stage = false;  // one joint step on L_PG + L_LG + L_LB per batch
  bool drop_pg = false;       // expert step trained on label-sourced pairs
  bool drop_lg = false;       // router step trained on performance-sourced pairs
  bool drop_lb = false;       // router step without the load-balancing term

  /// Throws InvalidArgument for combinations that have no coherent schedule.
  void validate() const;
  bool operator==(const AblationFlags&) const = default;
};

struct TrainConfig {
  double lr = 0.005;
  int batch_size = 64;
  int epochs = 200;
  int experts = 10;
  int pool_size = 50;
  int mine_count = 5;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  int hidden = 0;      // 0: input dim
  int output_dim = 0;  // 0: input dim
  AblationFlags ablation;
  int threads = 1;  // pool construction and scoring only

  void validate() const;
  /// Model shape and inference switches implied by this configuration.
  ModelConfig model_config(int input_dim) const;
};

/// Per query, the pool members ordered by descending raw image cosine
/// (ties: ascending prompt id).
struct CandidatePool {
  std::vector<std::vector<std::size_t>> members;
};

struct ScoreEntry {
  std::size_t prompt_id = 0;
  double perf = 0.0;   // H_vp proxy or imported value
  double label = 0.0;  // S_task
};

/// Supervision scores for (query, prompt) pairs inside each query's pool.
class ScoreTable {
 public:
  ScoreTable() = default;
  explicit ScoreTable(std::size_t queries) : rows_(queries) {}

  std::size_t queries() const { return rows_.size(); }
  std::span<const ScoreEntry> row(std::size_t query_id) const { return rows_.at(query_id); }
  void set_row(std::size_t query_id, std::vector<ScoreEntry> entries);
  const ScoreEntry* find(std::size_t query_id, std::size_t prompt_id) const;
  std::size_t size() const;

  bool operator==(const ScoreTable&) const;

 private:
  std::vector<std::vector<ScoreEntry>> rows_;
};

using Scorer = std::function<double(const QueryRecord&, const PromptRecord&)>;

CandidatePool build_candidate_pool(std::span<const QueryRecord> queries, std::span<const PromptRecord> database,
                                   std::size_t pool_size, int threads = 1);

/// Evaluates both scorers on every pool member. Scorers must be pure.
ScoreTable score_pools(const CandidatePool& pool, std::span<const QueryRecord> queries,
                       std::span<const PromptRecord> database, const Scorer& perf, const Scorer& label,
                       int threads = 1);

struct MinedSets {
  std::vector<std::size_t> positives;  // best mine_count, descending score
  std::vector<std::size_t> negatives;  // worst mine_count, ascending score
};

/// Top/bottom mine_count of one query's scored pool. Throws DegenerateSupervision
/// when the two sets overlap.
MinedSets mine_query(std::span<const ScoreEntry> row, PairSource source, std::size_t mine_count);

/// mine_query for every query; degenerate queries come back empty and are logged.
std::vector<std::optional<MinedSets>> mine_pairs(const ScoreTable& scores, PairSource source,
                                                 std::size_t mine_count);

PairSelection sample_pair(SeededRng& rng, std::size_t query_id, const MinedSets& sets, PairSource source);

/// Plain SGD with optional momentum. Only groups enabled in the mask move.
class SgdOptimizer {
 public:
  SgdOptimizer(const Model& model, double lr, double momentum);
  void apply(Model& model, const Model& grad, GradientMask mask);

 private:
  double lr_;
  double momentum_;
  Model velocity_;
};

struct StepReport {
  double loss = 0.0;
  double balance = 0.0;  // L_LB part of a router or joint step
};

/// Fused prompt embeddings and query embeddings as consumed by the losses.
EmbeddingTable make_embedding_table(std::span<const PromptRecord> prompts, std::span<const QueryRecord> queries,
                                    bool use_label);

/// Experts move along grad(L_PG) (or L_LG under drop_pg); router untouched.
StepReport expert_step(Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch,
                       SgdOptimizer& opt);

/// Router moves along grad(L_LG + L_LB) with the label term and balance term
/// selectable; experts untouched.
StepReport router_step(Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch,
                       SgdOptimizer& opt, bool with_balance = true);

/// Single update on L_J over all parameters.
StepReport joint_step(Model& model, const EmbeddingTable& emb, std::span<const PairSelection> batch_pg,
                      std::span<const PairSelection> batch_lg, SgdOptimizer& opt);

enum class StepKind { kExpert, kRouter, kJoint };

struct EpochStats {
  double expert_loss = 0.0;   // mean over expert (or joint) steps
  double router_loss = 0.0;   // mean over router steps
  double balance_loss = 0.0;  // mean L_LB over router / joint steps
  std::size_t expert_steps = 0;
  std::size_t router_steps = 0;
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> epochs;
  std::size_t degenerate_performance = 0;
  std::size_t degenerate_label = 0;
};

using StepObserver = std::function<void(StepKind, const Model&)>;

/// A freshly initialized model for the given configuration and input dim.
Model make_model(const TrainConfig& config, int input_dim);

/// Alternating optimization over the queries that have mined supervision.
/// Deterministic in (data, scores, config).
TrainResult train(Model model, std::span<const PromptRecord> prompts, std::span<const QueryRecord> queries,
                  const ScoreTable& scores, const TrainConfig& config, const StepObserver& observer = {});

/// Entropy of the mean mixture of consecutive batches (id order), averaged over batches.
double mean_batch_mixture_entropy(const Model& model, std::span<const QueryRecord> queries, std::size_t batch_size);

}  // namespace lapr

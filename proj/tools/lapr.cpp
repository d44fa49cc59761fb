// Command-line front end: synthetic data generation, training, caching,
// retrieval, evaluation, analysis and gradient verification.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "lapr/errors.hpp"
#include "lapr/gradcheck.hpp"
#include "lapr/io.hpp"
#include "lapr/log.hpp"
#include "lapr/retrieval.hpp"
#include "lapr/synth.hpp"
#include "lapr/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode : int { kOk = 0, kVerification = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

struct Common {
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--seed", common.seed, "Random seed override");
  cmd->add_option("--threads", common.threads, "Worker threads for parallel sections")->check(CLI::PositiveNumber);
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw lapr::IoError("no such file: " + p.string());
}

void require_dir(const fs::path& p) {
  if (!fs::is_directory(p)) throw lapr::IoError("no such directory: " + p.string());
}

struct AblationOptions {
  bool no_router = false, no_label = false, single_stage = false, drop_pg = false, drop_lg = false, drop_lb = false;

  void add(CLI::App* cmd) {
    cmd->add_flag("--no-router", no_router, "Uniform mixture weights; no router step");
    cmd->add_flag("--no-label", no_label, "Fuse prompts from image embeddings only");
    cmd->add_flag("--single-stage", single_stage, "Joint objective instead of alternating steps");
    cmd->add_flag("--drop-pg", drop_pg, "Expert step on label-guided pairs");
    cmd->add_flag("--drop-lg", drop_lg, "Router step on performance-guided pairs");
    cmd->add_flag("--drop-lb", drop_lb, "No load-balancing term");
  }
  void apply(lapr::AblationFlags& f) const {
    f.no_router = f.no_router || no_router;
    f.no_label = f.no_label || no_label;
    f.single_stage = f.single_stage || single_stage;
    f.drop_pg = f.drop_pg || drop_pg;
    f.drop_lg = f.drop_lg || drop_lg;
    f.drop_lb = f.drop_lb || drop_lb;
  }
};

int gen_synth(const fs::path& config_path, const fs::path& out, const Common& common) {
  require_file(config_path);
  lapr::io::RunConfig rc = lapr::io::load_run_config(config_path);
  if (common.seed) rc.synth.seed = *common.seed;
  const lapr::SynthDataset data = lapr::generate(rc.synth);

  std::size_t pool_size = std::size_t(rc.train.pool_size);
  if (pool_size > data.prompts.size()) {
    lapr::log().warn("pool_size {} exceeds the {} generated prompts; pools hold every prompt", pool_size,
                     data.prompts.size());
    pool_size = data.prompts.size();
  }
  const lapr::CandidatePool pool = lapr::build_candidate_pool(data.queries, data.prompts, pool_size, common.threads);
  const lapr::ScoreTable scores = lapr::proxy_score_table(pool, data, rc.synth, common.threads);
  lapr::io::write_dataset(out, data, rc.synth, scores);
  std::cout << json{{"prompts", data.prompts.size()}, {"queries", data.queries.size()}, {"dim", rc.synth.dim},
                    {"scored_pairs", scores.size()}}
                   .dump()
            << "\n";
  return kOk;
}

int train(const fs::path& config_path, const fs::path& data_dir, const fs::path& out,
          const std::optional<fs::path>& curves, const AblationOptions& ablation, const Common& common) {
  require_file(config_path);
  require_dir(data_dir);
  lapr::io::RunConfig rc = lapr::io::load_run_config(config_path);
  if (common.seed) rc.train.seed = *common.seed;
  ablation.apply(rc.train.ablation);
  rc.train.threads = common.threads;
  rc.train.validate();

  const lapr::io::DataBundle data = lapr::io::load_data_dir(data_dir);
  if (!data.scores) throw lapr::IoError("data directory has no score table (scores.csv)");
  if (data.prompts.empty() || data.queries.empty()) throw lapr::InvalidArgument("train: empty dataset");
  for (const auto& q : data.queries)
    if (!q.label) throw lapr::IoError("training needs query labels (queries_label.lapr)");

  const int dim = int(data.prompts.front().image.size());
  const lapr::TrainResult result =
      lapr::train(lapr::make_model(rc.train, dim), data.prompts, data.queries, *data.scores, rc.train);
  lapr::io::write_checkpoint(out, result.model);

  if (curves) {
    std::string csv = "epoch,expert_loss,router_loss,balance_loss\n";
    for (std::size_t e = 0; e < result.epochs.size(); ++e)
      csv += fmt::format("{},{:.6g},{:.6g},{:.6g}\n", e, result.epochs[e].expert_loss, result.epochs[e].router_loss,
                         result.epochs[e].balance_loss);
    std::ofstream f(*curves, std::ios::binary);
    if (!(f << csv)) throw lapr::IoError("cannot write " + curves->string());
  }
  json summary{{"epochs", result.epochs.size()},
               {"degenerate_performance", result.degenerate_performance},
               {"degenerate_label", result.degenerate_label}};
  if (!result.epochs.empty()) {
    summary["first_expert_loss"] = result.epochs.front().expert_loss;
    summary["final_expert_loss"] = result.epochs.back().expert_loss;
  }
  std::cout << summary.dump() << "\n";
  return kOk;
}

int build_cache(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out, const Common& common) {
  require_file(checkpoint);
  require_dir(data_dir);
  const lapr::Model model = lapr::io::read_checkpoint(checkpoint);
  const lapr::io::DataBundle data = lapr::io::load_data_dir(data_dir);
  const lapr::ModeCache cache = lapr::build_cache(data.prompts, model, common.threads);
  lapr::io::write_cache(out, cache);
  std::cout << json{{"prompts", cache.prompts}, {"experts", cache.experts}, {"dim", cache.dim},
                    {"fingerprint", fmt::format("{:016x}", cache.fingerprint)}}
                   .dump()
            << "\n";
  return kOk;
}

int retrieve(const fs::path& checkpoint, const fs::path& cache_path, const fs::path& query_path, std::size_t k,
             const Common& common) {
  require_file(checkpoint);
  require_file(cache_path);
  require_file(query_path);
  const lapr::Model model = lapr::io::read_checkpoint(checkpoint);
  const lapr::ModeCache cache = lapr::io::read_cache(cache_path);
  const std::vector<lapr::Vector> queries = lapr::io::read_queries(query_path);
  std::string out;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (q > 0) out += "\n";
    for (const auto& r : lapr::retrieve(queries[q], model, cache, k, common.threads))
      out += fmt::format("{}\t{:.6g}\n", r.id, r.score);
  }
  std::cout << out;
  return kOk;
}

json metrics_json(const lapr::Metrics& m) {
  return {{"mode_match_acc", m.mode_match_acc},
          {"mean_label_score", m.mean_label_score},
          {"mean_perf_score", m.mean_perf_score}};
}

int eval(const std::optional<fs::path>& checkpoint, const fs::path& data_dir, bool baseline, const Common& common) {
  require_dir(data_dir);
  if (!baseline && !checkpoint) throw lapr::InvalidArgument("eval: --checkpoint is required unless --baseline");
  if (checkpoint) require_file(*checkpoint);
  const lapr::io::DataBundle data = lapr::io::load_data_dir(data_dir);
  if (!data.synth) throw lapr::IoError("data directory has no synth.json");
  const lapr::SynthDataset dataset = data.as_dataset();

  lapr::Metrics m;
  if (baseline) {
    m = lapr::evaluate(
        [&](const lapr::QueryRecord& q) { return lapr::retrieve_baseline(q.embedding, dataset.prompts, 1).front().id; },
        dataset, *data.synth, common.threads);
  } else {
    const lapr::Model model = lapr::io::read_checkpoint(*checkpoint);
    const lapr::ModeCache cache = lapr::build_cache(dataset.prompts, model, common.threads);
    m = lapr::evaluate(
        [&](const lapr::QueryRecord& q) { return lapr::retrieve(q.embedding, model, cache, 1).front().id; }, dataset,
        *data.synth, common.threads);
  }
  std::cout << metrics_json(m).dump() << "\n";
  return kOk;
}

int analyze(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out) {
  require_file(checkpoint);
  require_dir(data_dir);
  const lapr::Model model = lapr::io::read_checkpoint(checkpoint);
  const lapr::io::DataBundle data = lapr::io::load_data_dir(data_dir);
  int categories = 1;
  for (const auto& q : data.queries) categories = std::max(categories, q.category + 1);
  if (data.synth) categories = std::max(categories, data.synth->categories);
  const lapr::ActivationTable table = lapr::expert_activation_analysis(model, data.queries, categories);
  std::ofstream f(out, std::ios::binary);
  if (!(f << table.to_csv())) throw lapr::IoError("cannot write " + out.string());

  json summary{{"categories", categories}, {"experts", model.config.experts}};
  if (!data.queries.empty())
    summary["mixture_entropy"] = lapr::mean_batch_mixture_entropy(model, data.queries, 64);
  if (data.scores) {
    const auto pairs = lapr::table_pairs(*data.scores);
    summary["consistency_r"] = lapr::consistency_correlation(pairs, *data.scores);
  }
  std::cout << summary.dump() << "\n";
  return kOk;
}

int gradcheck(std::uint64_t seed, int instances) {
  const auto results = lapr::gradcheck::run_suite(seed, instances);
  json report = json::array();
  double worst = 0.0;
  for (const auto& r : results) {
    worst = std::max(worst, r.worst.max_rel_error);
    report.push_back({{"loss", lapr::gradcheck::name(r.loss)},
                      {"instances", r.instances},
                      {"entries", r.worst.entries},
                      {"max_rel_error", r.worst.max_rel_error}});
  }
  const bool ok = worst <= lapr::gradcheck::kTolerance;
  std::cout << json{{"seed", seed}, {"max_rel_error", worst}, {"tolerance", lapr::gradcheck::kTolerance},
                    {"passed", ok}, {"losses", report}}
                   .dump()
            << "\n";
  return ok ? kOk : kVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-aware prompt retrieval with mixture-of-expert dual encoders"};
  app.require_subcommand(1);
  Common common;

  fs::path config, out, data_dir, checkpoint_path, cache_path, query_path;
  std::optional<fs::path> curves, eval_checkpoint;
  std::size_t k = 1;
  bool baseline = false;
  int instances = 10;
  AblationOptions ablation;

  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic planted-mode dataset");
  gen->add_option("--config", config, "Run configuration JSON")->required();
  gen->add_option("--out", out, "Output directory")->required();
  add_common(gen, common);

  auto* tr = app.add_subcommand("train", "Train a model on a data directory");
  tr->add_option("--config", config, "Run configuration JSON")->required();
  tr->add_option("--data", data_dir, "Data directory")->required();
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_option("--curves", curves, "Optional per-epoch loss CSV");
  ablation.add(tr);
  add_common(tr, common);

  auto* ca = app.add_subcommand("cache", "Precompute prompt mode embeddings");
  ca->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  ca->add_option("--data", data_dir, "Data directory")->required();
  ca->add_option("--out", out, "Cache path")->required();
  add_common(ca, common);

  auto* re = app.add_subcommand("retrieve", "Rank database prompts for each query");
  re->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  re->add_option("--cache", cache_path, "Cache path")->required();
  re->add_option("--query", query_path, "Query embedding file")->required();
  re->add_option("-k", k, "Results per query")->check(CLI::PositiveNumber);
  add_common(re, common);

  auto* ev = app.add_subcommand("eval", "Benchmark metrics on a synthetic data directory");
  ev->add_option("--checkpoint", eval_checkpoint, "Checkpoint path");
  ev->add_option("--data", data_dir, "Data directory")->required();
  ev->add_flag("--baseline", baseline, "Evaluate label-agnostic image-cosine retrieval");
  add_common(ev, common);

  auto* an = app.add_subcommand("analyze", "Expert activation per category, consistency correlation");
  an->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  an->add_option("--data", data_dir, "Data directory")->required();
  an->add_option("--out", out, "Activation CSV path")->required();
  add_common(an, common);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  gc->add_option("--instances", instances, "Random problems per loss")->check(CLI::PositiveNumber);
  add_common(gc, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return gen_synth(config, out, common);
    if (*tr) return train(config, data_dir, out, curves, ablation, common);
    if (*ca) return build_cache(checkpoint_path, data_dir, out, common);
    if (*re) return retrieve(checkpoint_path, cache_path, query_path, k, common);
    if (*ev) return eval(eval_checkpoint, data_dir, baseline, common);
    if (*an) return analyze(checkpoint_path, data_dir, out);
    if (*gc) return gradcheck(common.seed.value_or(0), instances);
  } catch (const lapr::IoError& e) {
    lapr::log().error("{}", e.what());
    return kIo;
  } catch (const lapr::InvalidArgument& e) {
    lapr::log().error("{}", e.what());
    return kUsage;
  } catch (const lapr::GenerationError& e) {
    lapr::log().error("{}", e.what());
    return kUsage;
  } catch (const lapr::DegenerateVector& e) {
    lapr::log().error("{}", e.what());
    return kNumerical;
  } catch (const lapr::StaleCache& e) {
    lapr::log().error("{}", e.what());
    return kNumerical;
  } catch (const lapr::DegenerateSupervision& e) {
    lapr::log().error("{}", e.what());
    return kNumerical;
  } catch (const lapr::UndefinedCorrelation& e) {
    lapr::log().error("{}", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    lapr::log().error("{}", e.what());
    return kIo;
  }
  return kUsage;
}

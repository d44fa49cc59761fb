#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lapr/model.hpp"
#include "lapr/records.hpp"
#include "lapr/retrieval.hpp"
#include "lapr/synth.hpp"
#include "lapr/training.hpp"

namespace lapr::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Embedding files
//
//   offset  size  field
//        0     4  magic "LAPR"
//        4     4  version, u32 LE (= 1)
//        8     4  record count, u32 LE
//       12     4  dim, u32 LE
//       16     1  kind (0 image, 1 label, 2 query)
//       17     3  reserved, zero
//       20     .  count * dim float32 LE, row-major, ascending record id
//
// The file size is exactly 20 + 4 * count * dim bytes.

inline constexpr std::size_t kEmbeddingHeaderBytes = 20;

enum class EmbeddingKind : std::uint8_t { kImage = 0, kLabel = 1, kQuery = 2 };

struct EmbeddingFile {
  EmbeddingKind kind = EmbeddingKind::kImage;
  std::size_t dim = 0;
  std::vector<Vector> rows;  // widened to double, not normalized
};

/// Rows are narrowed to float32. All rows must share one dim; non-finite values are rejected.
void write_embeddings(const fs::path& path, EmbeddingKind kind, std::span<const Vector> rows, std::size_t dim);
EmbeddingFile read_embeddings(const fs::path& path);

// ---------------------------------------------------------------------------
// Model checkpoint: "LAPC", u32 version, u32 JSON length, ModelConfig JSON,
// u64 value count, then every parameter as float64 LE in for_each_block order,
// each block row-major.

void write_checkpoint(const fs::path& path, const Model& model);
Model read_checkpoint(const fs::path& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Mode cache: "LAPM", u32 version, u64 fingerprint, u32 prompts, u32 experts,
// u32 dim, u32 reserved, then prompts * experts * dim float64 LE with p_{i,k}
// at position (i * experts + k) * dim.

void write_cache(const fs::path& path, const ModeCache& cache);
ModeCache read_cache(const fs::path& path);

// ---------------------------------------------------------------------------
// Score tables: CSV with header "query_id,prompt_id,perf_score,label_score",
// rows grouped by query in pool order, reals printed with 17 significant digits.

void write_scores(const fs::path& path, const ScoreTable& scores);
ScoreTable read_scores(const fs::path& path);

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  TrainConfig train;
  SynthConfig synth;
};

/// Fills a RunConfig from {"model": {...}, "train": {...}, "synth": {...}};
/// absent keys keep their defaults, unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const fs::path& path);
nlohmann::json to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Dataset directories

struct DataFiles {
  static constexpr const char* kPromptImages = "prompts_image.lapr";
  static constexpr const char* kPromptLabels = "prompts_label.lapr";
  static constexpr const char* kQueries = "queries.lapr";
  static constexpr const char* kQueryLabels = "queries_label.lapr";
  static constexpr const char* kPromptMeta = "prompts.jsonl";
  static constexpr const char* kQueryMeta = "queries.jsonl";
  static constexpr const char* kPromptEval = "prompts_eval.jsonl";
  static constexpr const char* kQueryEval = "queries_eval.jsonl";
  static constexpr const char* kScores = "scores.csv";
  static constexpr const char* kSynthConfig = "synth.json";
};

/// Everything a data directory can hold. Embeddings are l2-normalized on load.
struct DataBundle {
  std::vector<PromptRecord> prompts;
  std::vector<QueryRecord> queries;
  std::optional<ScoreTable> scores;
  std::vector<int> prompt_modes;  // empty unless eval sidecars exist
  std::vector<int> query_modes;
  std::optional<SynthConfig> synth;

  bool has_hidden_modes() const { return !prompt_modes.empty() && !query_modes.empty(); }
  /// A SynthDataset view for evaluation; requires hidden modes.
  SynthDataset as_dataset() const;
};

/// Writes the generated dataset, its sidecars, the proxy score table and the config.
void write_dataset(const fs::path& dir, const SynthDataset& data, const SynthConfig& config,
                   const ScoreTable& scores);
DataBundle load_data_dir(const fs::path& dir);

/// Query embeddings for retrieval (kind 2 file), normalized.
std::vector<Vector> read_queries(const fs::path& path);

}  // namespace lapr::io

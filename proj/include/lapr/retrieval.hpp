#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lapr/model.hpp"
#include "lapr/records.hpp"

namespace lapr {

/// Precomputed prompt mode embeddings p_{i,k}, stored contiguously in
/// (prompt, expert) order: column i*K + k of `modes` holds p_{i,k}.
struct ModeCache {
  std::size_t prompts = 0;
  std::size_t experts = 0;
  std::size_t dim = 0;
  std::uint64_t fingerprint = 0;  // bank_fingerprint of the prompt bank used
  Matrix modes;                   // dim x (prompts * experts)

  auto modes_of(std::size_t prompt) const {
    return modes.middleCols(Eigen::Index(prompt * experts), Eigen::Index(experts));
  }
  bool operator==(const ModeCache& o) const {
    return prompts == o.prompts && experts == o.experts && dim == o.dim && fingerprint == o.fingerprint &&
           modes == o.modes;
  }
};

ModeCache build_cache(std::span<const PromptRecord> database, const Model& model, int threads = 1);

struct Ranked {
  std::size_t id = 0;
  double score = 0.0;
  bool operator==(const Ranked&) const = default;
};

/// Descending score, ties by ascending id.
using RankedResult = std::vector<Ranked>;

/// Sorts candidates into ranking order and keeps the first k.
RankedResult top_k(std::vector<Ranked> candidates, std::size_t k);

/// Label-aware retrieval against the mode cache. Throws StaleCache when the
/// cache was built from different prompt-bank parameters.
RankedResult retrieve(const Vector& query, const Model& model, const ModeCache& cache, std::size_t k,
                      int threads = 1);

/// Same ranking recomputed from scratch, one full prompt-side forward per record.
RankedResult retrieve_uncached(const Vector& query, std::span<const PromptRecord> database, const Model& model,
                               std::size_t k);

/// Label-agnostic ranking by raw image cosine.
RankedResult retrieve_baseline(const Vector& query, std::span<const PromptRecord> database, std::size_t k,
                               int threads = 1);

}  // namespace lapr

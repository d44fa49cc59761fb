#include "lapr/retrieval.hpp"

#include <algorithm>
#include <string>

#include "lapr/parallel.hpp"

namespace lapr {

namespace {

bool ranks_before(const Ranked& a, const Ranked& b) {
  return a.score > b.score || (a.score == b.score && a.id < b.id);
}

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n)
    throw InvalidArgument("retrieve: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
}

}  // namespace

ModeCache build_cache(std::span<const PromptRecord> database, const Model& model, int threads) {
  ModeCache cache;
  cache.prompts = database.size();
  cache.experts = static_cast<std::size_t>(model.config.experts);
  cache.dim = static_cast<std::size_t>(model.config.output_dim);
  cache.fingerprint = bank_fingerprint(model.prompt_bank);
  cache.modes = Matrix::Zero(Eigen::Index(cache.dim), Eigen::Index(cache.prompts * cache.experts));
  for (std::size_t i = 0; i < database.size(); ++i)
    if (database[i].id != i) throw InvalidArgument("build_cache: prompt ids must be dense and ordered");
  parallel_for(database.size(), threads, [&](std::size_t i) {
    const Vector z = fuse_prompt(database[i].image, database[i].label, model.config.use_label);
    for (std::size_t k = 0; k < cache.experts; ++k)
      cache.modes.col(Eigen::Index(i * cache.experts + k)) = expert_forward(model.prompt_bank.experts[k], z);
  });
  return cache;
}

RankedResult top_k(std::vector<Ranked> candidates, std::size_t k) {
  k = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + std::ptrdiff_t(k), candidates.end(), ranks_before);
  candidates.resize(k);
  return candidates;
}

RankedResult retrieve(const Vector& query, const Model& model, const ModeCache& cache, std::size_t k, int threads) {
  if (cache.fingerprint != bank_fingerprint(model.prompt_bank))
    throw StaleCache("mode cache was built from different prompt-bank parameters; rebuild it");
  if (cache.experts != std::size_t(model.config.experts) || cache.dim != std::size_t(model.config.output_dim))
    throw InvalidArgument("retrieve: cache shape does not match the model");
  check_k(k, cache.prompts);

  const Vector pi = mixture_weights(model, query);
  const Vector u_tilde = bank_modes(model.query_bank, query) * pi;
  if (u_tilde.norm() < kNormFloor) throw DegenerateVector("retrieve: label-aware query embedding collapsed");

  std::vector<Ranked> scored(cache.prompts);
  parallel_for(cache.prompts, threads, [&](std::size_t i) {
    const Vector p_tilde = cache.modes_of(i) * pi;
    scored[i] = {i, cosine_similarity(u_tilde, p_tilde) / model.config.temperature};
  });
  return top_k(std::move(scored), k);
}

RankedResult retrieve_uncached(const Vector& query, std::span<const PromptRecord> database, const Model& model,
                               std::size_t k) {
  check_k(k, database.size());
  std::vector<Ranked> scored;
  scored.reserve(database.size());
  for (const auto& p : database) {
    const Vector z = fuse_prompt(p.image, p.label, model.config.use_label);
    scored.push_back({p.id, pair_score(model, query, z).score});
  }
  return top_k(std::move(scored), k);
}

RankedResult retrieve_baseline(const Vector& query, std::span<const PromptRecord> database, std::size_t k,
                               int threads) {
  check_k(k, database.size());
  std::vector<Ranked> scored(database.size());
  parallel_for(database.size(), threads, [&](std::size_t i) {
    scored[i] = {database[i].id, cosine_similarity(query, database[i].image)};
  });
  return top_k(std::move(scored), k);
}

}  // namespace lapr

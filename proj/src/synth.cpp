#include "lapr/synth.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "lapr/log.hpp"
#include "lapr/parallel.hpp"

namespace lapr {

namespace {

Vector gaussian(int dim, double stddev, SeededRng& rng) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng.normal(0.0, stddev);
  return v;
}

Vector random_unit(int dim, SeededRng& rng) {
  for (;;) {
    Vector v = gaussian(dim, 1.0, rng);
    if (v.norm() > kNormFloor) return v.normalized();
  }
}

int draw_categorical(const Eigen::Ref<const Vector>& probs, SeededRng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return int(i);
  }
  // Rounding left u above the last partial sum: take the last nonzero entry.
  for (Eigen::Index i = probs.size() - 1; i >= 0; --i)
    if (probs(i) > 0.0) return int(i);
  return 0;
}

constexpr std::uint64_t kPerfNoiseStream = 0x5045524Full;

}  // namespace

void SynthConfig::validate() const {
  if (modes < 2) throw InvalidArgument("synth: modes must be >= 2");
  if (categories < 2) throw InvalidArgument("synth: categories must be >= 2");
  if (dim < 1) throw InvalidArgument("synth: dim must be >= 1");
  if (prompts < 0 || queries < 0) throw InvalidArgument("synth: record counts must be >= 0");
  if (!(image_noise >= 0.0) || !(label_noise >= 0.0) || !(perf_noise >= 0.0))
    throw InvalidArgument("synth: noise levels must be >= 0");
  if (!std::isfinite(perf_alpha) || !std::isfinite(perf_beta))
    throw InvalidArgument("synth: perf weights must be finite");
  if (!mixing.empty()) {
    if (mixing.size() != std::size_t(categories))
      throw InvalidArgument("synth: mixing needs one row per category");
    for (const auto& row : mixing) {
      if (row.size() != std::size_t(modes)) throw InvalidArgument("synth: mixing rows need one entry per mode");
      double sum = 0.0;
      for (double v : row) {
        if (!(v >= 0.0)) throw InvalidArgument("synth: mixing entries must be >= 0");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("synth: mixing rows must sum to 1");
    }
  }
}

Matrix SynthConfig::mixing_matrix() const {
  if (mixing.empty()) return Matrix::Constant(categories, modes, 1.0 / modes);
  Matrix a(categories, modes);
  for (int c = 0; c < categories; ++c)
    for (int m = 0; m < modes; ++m) a(c, m) = mixing[std::size_t(c)][std::size_t(m)];
  return a;
}

SynthDataset generate(const SynthConfig& config) {
  config.validate();
  SeededRng rng(config.seed);
  SynthDataset data;

  // Prototypes, one at a time, each rejected while too close to an accepted one.
  data.prototypes = Matrix::Zero(config.dim, config.modes);
  int rejections = 0;
  for (int m = 0; m < config.modes;) {
    const Vector candidate = random_unit(config.dim, rng);
    bool separated = true;
    for (int j = 0; j < m && separated; ++j)
      separated = candidate.dot(data.prototypes.col(j)) <= kMaxPrototypeCosine;
    if (separated) {
      data.prototypes.col(m++) = candidate;
    } else if (++rejections > kMaxPrototypeRejections) {
      throw GenerationError(fmt::format("synth: cannot place {} prototypes with pairwise cosine <= {} in {} dims",
                                        config.modes, kMaxPrototypeCosine, config.dim));
    }
  }
  data.category_directions = Matrix::Zero(config.dim, config.categories);
  for (int c = 0; c < config.categories; ++c) data.category_directions.col(c) = random_unit(config.dim, rng);

  const Matrix mixing = config.mixing_matrix();
  auto draw_record = [&](int& category, int& mode, Vector& image, Vector& label) {
    category = int(rng.below(std::uint64_t(config.categories)));
    mode = draw_categorical(mixing.row(category).transpose(), rng);
    image = l2_normalize(Vector(data.prototypes.col(mode) + data.category_directions.col(category) +
                                gaussian(config.dim, config.image_noise, rng)));
    label = l2_normalize(Vector(data.prototypes.col(mode) + gaussian(config.dim, config.label_noise, rng)));
  };

  data.prompts.reserve(std::size_t(config.prompts));
  for (int i = 0; i < config.prompts; ++i) {
    PromptRecord p;
    p.id = std::size_t(i);
    int mode = 0;
    draw_record(p.category, mode, p.image, p.label);
    data.prompts.push_back(std::move(p));
    data.prompt_modes.push_back(mode);
  }
  data.queries.reserve(std::size_t(config.queries));
  for (int i = 0; i < config.queries; ++i) {
    QueryRecord q;
    q.id = std::size_t(i);
    int mode = 0;
    Vector label;
    draw_record(q.category, mode, q.embedding, label);
    q.label = std::move(label);
    data.queries.push_back(std::move(q));
    data.query_modes.push_back(mode);
  }
  return data;
}

double label_score_proxy(const PromptRecord& prompt, const QueryRecord& query) {
  if (!query.label) throw InvalidArgument("label score: query " + std::to_string(query.id) + " has no label");
  return (cosine_similarity(prompt.label, *query.label) + 1.0) / 2.0;
}

double perf_score_proxy(const PromptRecord& prompt, const QueryRecord& query, const SynthConfig& config,
                        SeededRng& rng) {
  const double label = label_score_proxy(prompt, query);
  const double image = (cosine_similarity(prompt.image, query.embedding) + 1.0) / 2.0;
  double noise = 0.0;
  if (config.perf_noise > 0.0) noise = rng.normal(0.0, config.perf_noise);
  return std::clamp(config.perf_alpha * label + config.perf_beta * image + noise, 0.0, 1.0);
}

double perf_score_proxy(const PromptRecord& prompt, const QueryRecord& query, const SynthConfig& config) {
  SeededRng rng(derive_seed(config.seed ^ kPerfNoiseStream, query.id, prompt.id));
  return perf_score_proxy(prompt, query, config, rng);
}

ScoreTable proxy_score_table(const CandidatePool& pool, const SynthDataset& data, const SynthConfig& config,
                             int threads) {
  const Scorer perf = [&config](const QueryRecord& q, const PromptRecord& p) { return perf_score_proxy(p, q, config); };
  const Scorer label = [](const QueryRecord& q, const PromptRecord& p) { return label_score_proxy(p, q); };
  return score_pools(pool, data.queries, data.prompts, perf, label, threads);
}

Metrics evaluate(const Retriever& retriever, const SynthDataset& data, const SynthConfig& config, int threads) {
  if (data.queries.empty()) throw InvalidArgument("evaluate: no queries");
  if (data.query_modes.size() != data.queries.size() || data.prompt_modes.size() != data.prompts.size())
    throw InvalidArgument("evaluate: dataset carries no hidden modes");
  const std::size_t n = data.queries.size();
  std::vector<double> match(n), label(n), perf(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const QueryRecord& q = data.queries[i];
    const std::size_t chosen = retriever(q);
    if (chosen >= data.prompts.size()) throw InvalidArgument("evaluate: retriever returned an unknown prompt id");
    const PromptRecord& p = data.prompts[chosen];
    match[i] = data.prompt_modes[chosen] == data.query_modes[i] ? 1.0 : 0.0;
    label[i] = label_score_proxy(p, q);
    perf[i] = perf_score_proxy(p, q, config);
  });
  Metrics m;
  for (std::size_t i = 0; i < n; ++i) {
    m.mode_match_acc += match[i];
    m.mean_label_score += label[i];
    m.mean_perf_score += perf[i];
  }
  m.mode_match_acc /= double(n);
  m.mean_label_score /= double(n);
  m.mean_perf_score /= double(n);
  return m;
}

ActivationTable expert_activation_analysis(const Model& model, std::span<const QueryRecord> queries,
                                           int categories) {
  if (categories < 1) throw InvalidArgument("activation analysis: categories must be >= 1");
  const int k = model.config.experts;
  ActivationTable t;
  t.mean_weight = Matrix::Zero(categories, k);
  t.argmax_freq = Matrix::Zero(categories, k);
  t.counts.assign(std::size_t(categories), 0);
  for (const auto& q : queries) {
    if (q.category < 0 || q.category >= categories)
      throw InvalidArgument("activation analysis: category " + std::to_string(q.category) + " out of range");
    const Vector pi = mixture_weights(model, q.embedding);
    Eigen::Index best = 0;
    pi.maxCoeff(&best);
    t.mean_weight.row(q.category) += pi.transpose();
    t.argmax_freq(q.category, best) += 1.0;
    ++t.counts[std::size_t(q.category)];
  }
  t.empty.assign(std::size_t(categories), false);
  for (int c = 0; c < categories; ++c) {
    if (t.counts[std::size_t(c)] == 0) {
      t.empty[std::size_t(c)] = true;
      log().warn("activation analysis: category {} has no queries", c);
      continue;
    }
    t.mean_weight.row(c) /= double(t.counts[std::size_t(c)]);
    t.argmax_freq.row(c) /= double(t.counts[std::size_t(c)]);
  }
  return t;
}

std::string ActivationTable::to_csv() const {
  std::string out = "category,expert,mean_weight,argmax_frequency,queries\n";
  for (Eigen::Index c = 0; c < mean_weight.rows(); ++c)
    for (Eigen::Index k = 0; k < mean_weight.cols(); ++k)
      out += fmt::format("{},{},{:.6g},{:.6g},{}\n", c, k, mean_weight(c, k), argmax_freq(c, k),
                         counts[std::size_t(c)]);
  return out;
}

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("correlation: length mismatch");
  if (x.size() < 3) throw InvalidArgument("correlation: need at least 3 pairs");
  const auto n = Eigen::Index(x.size());
  const Eigen::Map<const Vector> xv(x.data(), n);
  const Eigen::Map<const Vector> yv(y.data(), n);
  const Vector xc = xv.array() - xv.mean();
  const Vector yc = yv.array() - yv.mean();
  const double sx = xc.norm();
  const double sy = yc.norm();
  if (sx < kNormFloor || sy < kNormFloor) throw UndefinedCorrelation("correlation: constant input");
  return std::clamp(xc.dot(yc) / (sx * sy), -1.0, 1.0);
}

double consistency_correlation(std::span<const std::pair<std::size_t, std::size_t>> pairs, const ScoreTable& scores) {
  std::vector<double> label, perf;
  label.reserve(pairs.size());
  perf.reserve(pairs.size());
  for (const auto& [q, p] : pairs) {
    const ScoreEntry* e = scores.find(q, p);
    if (e == nullptr) throw InvalidArgument(fmt::format("correlation: no score for query {}, prompt {}", q, p));
    label.push_back(e->label);
    perf.push_back(e->perf);
  }
  return pearson_correlation(label, perf);
}

std::vector<std::pair<std::size_t, std::size_t>> table_pairs(const ScoreTable& scores) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t q = 0; q < scores.queries(); ++q)
    for (const auto& e : scores.row(q)) out.emplace_back(q, e.prompt_id);
  return out;
}

}  // namespace lapr

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lapr/losses.hpp"
#include "lapr/model.hpp"
#include "lapr/records.hpp"
#include "lapr/rng.hpp"
#include "oracles.hpp"

namespace testing {

inline lapr::Vector random_vector(int dim, lapr::SeededRng& rng, double sd = 1.0) {
  lapr::Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng.normal(0.0, sd);
  return v;
}

inline lapr::Vector random_unit(int dim, lapr::SeededRng& rng) {
  lapr::Vector v;
  do v = random_vector(dim, rng);
  while (v.norm() < 1e-6);
  return v.normalized();
}

/// All parameters U(-scale, scale).
inline lapr::Model random_model(const lapr::ModelConfig& c, lapr::SeededRng& rng, double scale = 1.0) {
  lapr::Model m = lapr::zero_model<double>(c);
  lapr::for_each_block(m, [&](auto& block) { lapr::fill_uniform(block, scale, rng); });
  return m;
}

inline lapr::ModelConfig small_config(int dim, int experts, int hidden = 0, int out = 0) {
  lapr::ModelConfig c = lapr::ModelConfig::for_dim(dim);
  c.experts = experts;
  if (hidden) c.hidden = hidden;
  if (out) c.output_dim = out;
  return c;
}

inline std::vector<lapr::PromptRecord> random_prompts(int n, int dim, lapr::SeededRng& rng) {
  std::vector<lapr::PromptRecord> out;
  for (int i = 0; i < n; ++i) {
    lapr::PromptRecord p;
    p.id = std::size_t(i);
    p.image = random_unit(dim, rng);
    p.label = random_unit(dim, rng);
    p.category = int(rng.below(3));
    out.push_back(p);
  }
  return out;
}

inline std::vector<lapr::QueryRecord> random_queries(int n, int dim, lapr::SeededRng& rng) {
  std::vector<lapr::QueryRecord> out;
  for (int i = 0; i < n; ++i) {
    lapr::QueryRecord q;
    q.id = std::size_t(i);
    q.embedding = random_unit(dim, rng);
    q.label = random_unit(dim, rng);
    q.category = int(rng.below(3));
    out.push_back(q);
  }
  return out;
}

inline std::vector<oracle::Vec> to_vecs(const std::vector<lapr::Vector>& xs) {
  std::vector<oracle::Vec> out;
  for (const auto& x : xs) out.push_back(oracle::to_vec(x));
  return out;
}

/// A scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("lapr_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace testing

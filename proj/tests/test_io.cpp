#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "lapr/io.hpp"
#include "lapr/retrieval.hpp"
#include "lapr/synth.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
namespace io = lapr::io;
using lapr::Vector;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

void truncate_by(const fs::path& p, std::size_t n) {
  const std::string s = slurp(p);
  spit(p, s.substr(0, s.size() - n));
}

bool same_params(const lapr::Model& a, const lapr::Model& b) {
  bool same = a.config == b.config;
  lapr::for_each_block_pair(a, b, [&](const auto& x, const auto& y) { same = same && x == y; });
  return same;
}

}  // namespace

TEST_CASE("embedding files round-trip through float32") {
  testing::TempDir dir;
  lapr::SeededRng rng(1);
  std::vector<Vector> rows;
  for (int i = 0; i < 7; ++i) rows.push_back(testing::random_vector(5, rng));
  io::write_embeddings(dir / "e.lapr", io::EmbeddingKind::kLabel, rows, 5);
  CHECK(fs::file_size(dir / "e.lapr") == 20 + 7 * 5 * 4);
  const auto back = io::read_embeddings(dir / "e.lapr");
  CHECK(back.kind == io::EmbeddingKind::kLabel);
  CHECK(back.dim == 5);
  REQUIRE(back.rows.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(back.rows[i] == rows[i].cast<float>().cast<double>());

  const std::string bytes = slurp(dir / "e.lapr");
  CHECK(bytes.substr(0, 4) == "LAPR");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 7);
  CHECK(bytes[12] == 5);
  CHECK(bytes[16] == 1);
  CHECK(bytes.substr(17, 3) == std::string(3, '\0'));
}

TEST_CASE("embedding file sizes") {
  testing::TempDir dir;
  lapr::SeededRng rng(2);
  std::vector<Vector> rows;
  for (int i = 0; i < 100; ++i) rows.push_back(testing::random_vector(32, rng));
  io::write_embeddings(dir / "a.lapr", io::EmbeddingKind::kImage, rows, 32);
  CHECK(fs::file_size(dir / "a.lapr") == 12820);
  io::write_embeddings(dir / "z.lapr", io::EmbeddingKind::kImage, {}, 32);
  CHECK(fs::file_size(dir / "z.lapr") == 20);
  CHECK(io::read_embeddings(dir / "z.lapr").rows.empty());
}

TEST_CASE("malformed embedding files are I/O errors") {
  testing::TempDir dir;
  lapr::SeededRng rng(3);
  const std::vector<Vector> rows{testing::random_vector(4, rng), testing::random_vector(4, rng)};
  const fs::path p = dir / "e.lapr";

  spit(p, "");
  CHECK_THROWS_AS(io::read_embeddings(p), lapr::IoError);
  spit(p, "LAPR");
  CHECK_THROWS_AS(io::read_embeddings(p), lapr::IoError);

  io::write_embeddings(p, io::EmbeddingKind::kImage, rows, 4);
  truncate_by(p, 1);
  CHECK_THROWS_AS(io::read_embeddings(p), lapr::IoError);

  io::write_embeddings(p, io::EmbeddingKind::kImage, rows, 4);
  spit(p, slurp(p) + "x");
  CHECK_THROWS_AS(io::read_embeddings(p), lapr::IoError);

  io::write_embeddings(p, io::EmbeddingKind::kImage, rows, 4);
  std::string bad = slurp(p);
  bad[0] = 'X';
  spit(p, bad);
  CHECK_THROWS_AS(io::read_embeddings(p), lapr::IoError);

  io::write_embeddings(p, io::EmbeddingKind::kImage, rows, 4);
  bad = slurp(p);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bad.data() + 24, &nan, 4);
  spit(p, bad);
  CHECK_THROWS_AS(io::read_embeddings(p), lapr::IoError);

  CHECK_THROWS_AS(io::read_embeddings(dir / "missing.lapr"), lapr::IoError);
  Vector inf = rows[0];
  inf(1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(io::write_embeddings(p, io::EmbeddingKind::kImage, std::vector<Vector>{inf}, 4),
                  lapr::InvalidArgument);
}

TEST_CASE("checkpoints round-trip exactly") {
  testing::TempDir dir;
  lapr::SeededRng rng(4);
  lapr::ModelConfig c = testing::small_config(5, 3, 4, 6);
  c.temperature = 0.37;
  c.use_label = false;
  const lapr::Model m = testing::random_model(c, rng);
  io::write_checkpoint(dir / "m.lapc", m);
  const lapr::Model back = io::read_checkpoint(dir / "m.lapc");
  CHECK(same_params(m, back));

  io::write_checkpoint(dir / "again.lapc", back);
  CHECK(slurp(dir / "m.lapc") == slurp(dir / "again.lapc"));
  CHECK(slurp(dir / "m.lapc").substr(0, 4) == "LAPC");

  truncate_by(dir / "m.lapc", 8);
  CHECK_THROWS_AS(io::read_checkpoint(dir / "m.lapc"), lapr::IoError);
  spit(dir / "m.lapc", "");
  CHECK_THROWS_AS(io::read_checkpoint(dir / "m.lapc"), lapr::IoError);
}

TEST_CASE("mode caches round-trip exactly") {
  testing::TempDir dir;
  lapr::SeededRng rng(5);
  const lapr::Model m = testing::random_model(testing::small_config(4, 3), rng);
  const auto db = testing::random_prompts(9, 4, rng);
  const auto cache = lapr::build_cache(db, m);
  io::write_cache(dir / "c.lapm", cache);
  CHECK(fs::file_size(dir / "c.lapm") == 4 + 4 + 8 + 4 * 4 + 9 * 3 * 4 * 8);
  CHECK(io::read_cache(dir / "c.lapm") == cache);
  truncate_by(dir / "c.lapm", 3);
  CHECK_THROWS_AS(io::read_cache(dir / "c.lapm"), lapr::IoError);
}

TEST_CASE("score tables round-trip exactly") {
  testing::TempDir dir;
  lapr::SeededRng rng(6);
  lapr::ScoreTable t(3);
  for (std::size_t q = 0; q < 3; ++q) {
    std::vector<lapr::ScoreEntry> row;
    for (std::size_t i = 0; i < 4; ++i) row.push_back({q * 10 + i, rng.uniform(), rng.normal()});
    t.set_row(q, row);
  }
  io::write_scores(dir / "s.csv", t);
  CHECK(io::read_scores(dir / "s.csv") == t);
  CHECK(slurp(dir / "s.csv").rfind("query_id,prompt_id,perf_score,label_score\n", 0) == 0);

  spit(dir / "bad.csv", "query_id,prompt_id,perf_score,label_score\n0,1,0.5\n");
  CHECK_THROWS_AS(io::read_scores(dir / "bad.csv"), lapr::IoError);
  spit(dir / "empty.csv", "");
  CHECK_THROWS_AS(io::read_scores(dir / "empty.csv"), lapr::IoError);
}

TEST_CASE("run configuration parsing") {
  const auto rc = io::run_config_from_json(nlohmann::json::parse(R"({
    "model": {"experts": 4, "temperature": 0.2},
    "train": {"lr": 0.01, "epochs": 3, "ablation": {"drop_lb": true}},
    "synth": {"modes": 3, "dim": 8, "mixing": [[1,0,0],[0,1,0],[0,0,1],[0.5,0.5,0],[0,0.5,0.5]]}
  })"));
  CHECK(rc.train.experts == 4);
  CHECK(rc.train.temperature == 0.2);
  CHECK(rc.train.lr == 0.01);
  CHECK(rc.train.epochs == 3);
  CHECK(rc.train.ablation.drop_lb);
  CHECK(rc.train.batch_size == 64);
  CHECK(rc.synth.modes == 3);
  CHECK(rc.synth.mixing.size() == 5);

  CHECK_THROWS_AS(io::run_config_from_json(nlohmann::json::parse(R"({"train": {"learning_rate": 1}})")),
                  lapr::InvalidArgument);
  CHECK_THROWS_AS(io::run_config_from_json(nlohmann::json::parse(R"({"model": {"experts": "ten"}})")),
                  lapr::InvalidArgument);
  CHECK_THROWS_AS(io::run_config_from_json(nlohmann::json::parse(R"({"extra": {}})")), lapr::InvalidArgument);

  lapr::SynthConfig s;
  s.seed = 77;
  s.image_noise = 0.125;
  CHECK(io::synth_config_from_json(io::to_json(s)).seed == 77);
  CHECK(io::synth_config_from_json(io::to_json(s)).image_noise == 0.125);
}

TEST_CASE("dataset directories round-trip") {
  testing::TempDir dir;
  lapr::SynthConfig c;
  c.modes = 3;
  c.categories = 2;
  c.dim = 6;
  c.prompts = 30;
  c.queries = 8;
  c.seed = 12;
  const auto data = lapr::generate(c);
  const auto pool = lapr::build_candidate_pool(data.queries, data.prompts, 10);
  const auto scores = lapr::proxy_score_table(pool, data, c);
  io::write_dataset(dir.path, data, c, scores);

  const auto back = io::load_data_dir(dir.path);
  REQUIRE(back.prompts.size() == 30);
  REQUIRE(back.queries.size() == 8);
  CHECK(back.has_hidden_modes());
  CHECK(back.prompt_modes == data.prompt_modes);
  CHECK(back.query_modes == data.query_modes);
  REQUIRE(back.scores.has_value());
  CHECK(*back.scores == scores);
  REQUIRE(back.synth.has_value());
  CHECK(back.synth->seed == 12);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(back.prompts[i].category == data.prompts[i].category);
    CHECK((back.prompts[i].image - data.prompts[i].image).norm() <= 1e-6);
    CHECK(std::abs(back.prompts[i].image.norm() - 1.0) <= 1e-12);
  }
  REQUIRE(back.queries[3].label.has_value());

  // the hidden mode lives only in the eval sidecar
  CHECK(slurp(dir / io::DataFiles::kPromptMeta).find("hidden_mode") == std::string::npos);
  CHECK(slurp(dir / io::DataFiles::kPromptEval).find("hidden_mode") != std::string::npos);

  testing::TempDir again;
  io::write_dataset(again.path, data, c, scores);
  for (const char* name : {io::DataFiles::kPromptImages, io::DataFiles::kQueries, io::DataFiles::kScores,
                           io::DataFiles::kPromptMeta, io::DataFiles::kSynthConfig})
    CHECK(slurp(dir / name) == slurp(again / name));
}

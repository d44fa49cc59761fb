#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "lapr/io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
namespace io = lapr::io;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run lapr_cli(const std::string& args) {
  const std::string cmd = std::string(LAPR_BIN) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// 100 prompts of dim 32; small enough for a two-epoch run.
const char* kConfig = R"({
  "model": {"experts": 3, "temperature": 0.2},
  "train": {"epochs": 2, "batch_size": 16, "pool_size": 20, "mine_count": 3, "seed": 4},
  "synth": {"modes": 3, "categories": 2, "dim": 32, "prompts": 100, "queries": 30, "seed": 8}
})";

struct Workspace {
  testing::TempDir dir;
  fs::path config = dir / "config.json";
  fs::path data = dir / "data";
  Workspace() {
    spit(config, kConfig);
    REQUIRE(lapr_cli("gen-synth --config " + q(config) + " --out " + q(data)).code == 0);
  }
};

}  // namespace

TEST_CASE("gen-synth writes fixed-size, reproducible files") {
  Workspace w;
  CHECK(fs::file_size(w.data / io::DataFiles::kPromptImages) == 12820);
  CHECK(fs::file_size(w.data / io::DataFiles::kQueries) == 20 + 30 * 32 * 4);
  const fs::path again = w.dir / "again";
  REQUIRE(lapr_cli("gen-synth --threads 3 --config " + q(w.config) + " --out " + q(again)).code == 0);
  for (const auto& entry : fs::directory_iterator(w.data))
    CHECK(slurp(entry.path()) == slurp(again / entry.path().filename()));

  const fs::path other = w.dir / "other";
  REQUIRE(lapr_cli("gen-synth --seed 9 --config " + q(w.config) + " --out " + q(other)).code == 0);
  CHECK(slurp(w.data / io::DataFiles::kPromptImages) != slurp(other / io::DataFiles::kPromptImages));
}

TEST_CASE("gen-synth with zero prompts writes header-only files") {
  testing::TempDir dir;
  spit(dir / "c.json", R"({"synth": {"dim": 4, "prompts": 0, "queries": 0}})");
  REQUIRE(lapr_cli("gen-synth --config " + q(dir / "c.json") + " --out " + q(dir / "d")).code == 0);
  CHECK(fs::file_size(dir / "d" / io::DataFiles::kPromptImages) == 20);
}

TEST_CASE("usage and configuration errors exit 2") {
  Workspace w;
  CHECK(lapr_cli("").code == 2);
  CHECK(lapr_cli("frobnicate").code == 2);
  CHECK(lapr_cli("train --config " + q(w.config)).code == 2);
  const std::string train = "train --config " + q(w.config) + " --data " + q(w.data) + " --out " + q(w.dir / "m");
  CHECK(lapr_cli(train + " --no-router --drop-lb").code == 2);
  CHECK(lapr_cli(train + " --no-router --drop-lg").code == 2);
  CHECK(lapr_cli(train + " --single-stage --drop-pg").code == 2);
  CHECK_FALSE(fs::exists(w.dir / "m"));

  spit(w.dir / "bad.json", R"({"train": {"lr": -1}})");
  CHECK(lapr_cli("gen-synth --config " + q(w.dir / "bad.json") + " --out " + q(w.dir / "x")).code == 2);
  spit(w.dir / "unknown.json", R"({"train": {"speed": 3}})");
  CHECK(lapr_cli("gen-synth --config " + q(w.dir / "unknown.json") + " --out " + q(w.dir / "x")).code == 2);
  spit(w.dir / "broken.json", "{");
  CHECK(lapr_cli("gen-synth --config " + q(w.dir / "broken.json") + " --out " + q(w.dir / "x")).code == 2);
}

TEST_CASE("missing, empty and truncated files exit 3") {
  Workspace w;
  const fs::path m = w.dir / "m.lapc";
  REQUIRE(lapr_cli("train --config " + q(w.config) + " --data " + q(w.data) + " --out " + q(m)).code == 0);
  const fs::path cache = w.dir / "c.lapm";
  REQUIRE(lapr_cli("cache --checkpoint " + q(m) + " --data " + q(w.data) + " --out " + q(cache)).code == 0);
  const fs::path query = w.data / io::DataFiles::kQueries;
  auto retrieve = [&](const fs::path& ckpt, const fs::path& c, const fs::path& qf) {
    return lapr_cli("retrieve --checkpoint " + q(ckpt) + " --cache " + q(c) + " --query " + q(qf) + " -k 3").code;
  };
  CHECK(retrieve(m, cache, query) == 0);

  CHECK(lapr_cli("gen-synth --config " + q(w.dir / "nope.json") + " --out " + q(w.dir / "x")).code == 3);
  CHECK(retrieve(w.dir / "nope", cache, query) == 3);

  const std::string full_m = slurp(m), full_cache = slurp(cache), full_query = slurp(query);
  for (const auto& [path, full] : {std::pair{m, full_m}, std::pair{cache, full_cache}, std::pair{query, full_query}}) {
    spit(path, "");
    CHECK(retrieve(m, cache, query) == 3);
    spit(path, full.substr(0, full.size() - 5));
    CHECK(retrieve(m, cache, query) == 3);
    spit(path, full);
  }
  CHECK(retrieve(m, cache, query) == 0);

  // a truncated data directory fails training with an I/O error
  const fs::path images = w.data / io::DataFiles::kPromptImages;
  const std::string full_images = slurp(images);
  spit(images, full_images.substr(0, 100));
  CHECK(lapr_cli("train --config " + q(w.config) + " --data " + q(w.data) + " --out " + q(w.dir / "m2")).code == 3);
  spit(images, "");
  CHECK(lapr_cli("train --config " + q(w.config) + " --data " + q(w.data) + " --out " + q(w.dir / "m2")).code == 3);
  spit(images, full_images);
  fs::remove(w.data / io::DataFiles::kScores);
  CHECK(lapr_cli("train --config " + q(w.config) + " --data " + q(w.data) + " --out " + q(w.dir / "m2")).code == 3);
}

TEST_CASE("train is deterministic across thread counts; stale caches exit 4") {
  Workspace w;
  const std::string base = "train --config " + q(w.config) + " --data " + q(w.data);
  const Run a = lapr_cli(base + " --out " + q(w.dir / "a.lapc"));
  const Run b = lapr_cli(base + " --threads 4 --out " + q(w.dir / "b.lapc"));
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(slurp(w.dir / "a.lapc") == slurp(w.dir / "b.lapc"));
  CHECK(a.out == b.out);
  const auto summary = nlohmann::json::parse(a.out);
  CHECK(summary["epochs"] == 2);

  REQUIRE(lapr_cli(base + " --seed 99 --out " + q(w.dir / "c.lapc")).code == 0);
  CHECK(slurp(w.dir / "a.lapc") != slurp(w.dir / "c.lapc"));
  REQUIRE(lapr_cli("cache --checkpoint " + q(w.dir / "a.lapc") + " --data " + q(w.data) + " --out " +
                   q(w.dir / "a.lapm"))
              .code == 0);
  const std::string retrieve = "retrieve --cache " + q(w.dir / "a.lapm") + " --query " +
                               q(w.data / io::DataFiles::kQueries) + " -k 5 --checkpoint ";
  CHECK(lapr_cli(retrieve + q(w.dir / "c.lapc")).code == 4);
  const Run r1 = lapr_cli(retrieve + q(w.dir / "a.lapc"));
  const Run r4 = lapr_cli(retrieve + q(w.dir / "a.lapc") + " --threads 4");
  CHECK(r1.code == 0);
  CHECK(r1.out == r4.out);
}

TEST_CASE("retrieve finds the query's twin and prints id<TAB>score lines") {
  testing::TempDir dir;
  lapr::SeededRng rng(3);
  lapr::ModelConfig c = lapr::ModelConfig::for_dim(6, 2);
  c.use_label = false;
  lapr::Model m = testing::random_model(c, rng);
  m.prompt_bank.experts = m.query_bank.experts;
  io::write_checkpoint(dir / "m.lapc", m);

  lapr::SynthConfig s;
  s.modes = 2;
  s.categories = 2;
  s.dim = 6;
  s.prompts = 20;
  s.queries = 2;
  const auto data = lapr::generate(s);
  io::write_dataset(dir / "data", data, s, lapr::ScoreTable(2));
  std::vector<lapr::Vector> twin{data.prompts[13].image, data.prompts[4].image};
  io::write_embeddings(dir / "q.lapr", io::EmbeddingKind::kQuery, twin, 6);

  REQUIRE(lapr_cli("cache --checkpoint " + q(dir / "m.lapc") + " --data " + q(dir / "data") + " --out " +
                   q(dir / "c.lapm"))
              .code == 0);
  const Run r = lapr_cli("retrieve --checkpoint " + q(dir / "m.lapc") + " --cache " + q(dir / "c.lapm") +
                         " --query " + q(dir / "q.lapr") + " -k 2");
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("13\t1\n", 0) == 0);
  const auto blank = r.out.find("\n\n");
  REQUIRE(blank != std::string::npos);
  CHECK(r.out.substr(blank + 2, 4) == "4\t1\n");
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 5);
}

TEST_CASE("eval and analyze print JSON") {
  Workspace w;
  const fs::path m = w.dir / "m.lapc";
  REQUIRE(lapr_cli("train --config " + q(w.config) + " --data " + q(w.data) + " --out " + q(m)).code == 0);
  const Run e = lapr_cli("eval --checkpoint " + q(m) + " --data " + q(w.data));
  REQUIRE(e.code == 0);
  const auto metrics = nlohmann::json::parse(e.out);
  CHECK(metrics.contains("mode_match_acc"));
  CHECK(metrics["mode_match_acc"].get<double>() >= 0.0);
  const Run b = lapr_cli("eval --baseline --data " + q(w.data));
  REQUIRE(b.code == 0);
  CHECK(nlohmann::json::parse(b.out).contains("mean_label_score"));
  CHECK(lapr_cli("eval --data " + q(w.data)).code == 2);

  const Run a = lapr_cli("analyze --checkpoint " + q(m) + " --data " + q(w.data) + " --out " + q(w.dir / "a.csv"));
  REQUIRE(a.code == 0);
  const auto summary = nlohmann::json::parse(a.out);
  CHECK(summary["consistency_r"].get<double>() > 0.5);
  CHECK(slurp(w.dir / "a.csv").rfind("category,expert,mean_weight,argmax_frequency,queries\n", 0) == 0);
}

TEST_CASE("gradcheck exits 0 with a passing report") {
  for (const char* seed : {"0", "17"}) {
    const Run r = lapr_cli(std::string("gradcheck --instances 3 --seed ") + seed);
    CHECK(r.code == 0);
    const auto report = nlohmann::json::parse(r.out);
    CHECK(report["passed"] == true);
    CHECK(report["max_rel_error"].get<double>() <= 1e-6);
    CHECK(report["losses"].size() == 5);
  }
}

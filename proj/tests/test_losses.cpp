#include <doctest.h>

#include <cmath>

#include "lapr/gradcheck.hpp"
#include "lapr/losses.hpp"
#include "support.hpp"

using lapr::Model;
using lapr::PairSelection;
using lapr::PairSource;
using lapr::Vector;

namespace {

struct Problem {
  Model model;
  lapr::EmbeddingTable emb;
};

Problem random_problem(lapr::SeededRng& rng, int queries, int prompts, double temperature = 1.0) {
  const int d = 3;
  lapr::ModelConfig c = testing::small_config(d, 3);
  c.temperature = temperature;
  Problem p{testing::random_model(c, rng), {}};
  for (int i = 0; i < queries; ++i) p.emb.queries.push_back(testing::random_unit(d, rng));
  for (int i = 0; i < prompts; ++i) p.emb.prompts.push_back(testing::random_vector(d, rng));
  return p;
}

std::vector<oracle::Selection> to_oracle(const std::vector<PairSelection>& b) {
  std::vector<oracle::Selection> out;
  for (const auto& s : b) out.push_back({s.query_id, s.positive_id, s.negative_id});
  return out;
}

bool group_zero(const Model& g, bool experts) {
  bool ok = true;
  if (experts) {
    for (const auto* bank : {&g.query_bank, &g.prompt_bank})
      for (const auto& e : bank->experts)
        ok = ok && e.w1.isZero(0) && e.b1.isZero(0) && e.w2.isZero(0) && e.b2.isZero(0);
  } else {
    ok = g.router.w.isZero(0) && g.router.b.isZero(0);
  }
  return ok;
}

}  // namespace

TEST_CASE("denominator set is the sorted union of positives and negatives") {
  const std::vector<PairSelection> batch{{0, 7, 2}, {1, 2, 5}, {2, 7, 1}};
  CHECK(lapr::denominator_set(batch) == std::vector<std::size_t>{1, 2, 5, 7});
  CHECK(lapr::batch_queries(batch) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("contrastive loss matches explicit summation") {
  lapr::SeededRng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int queries = 1 + int(rng.below(5)), prompts = 2 + int(rng.below(8));
    Problem p = random_problem(rng, queries, prompts, rng.uniform(0.1, 2.0));
    std::vector<PairSelection> batch;
    for (int q = 0; q < queries; ++q) {
      const std::size_t pos = rng.below(std::uint64_t(prompts));
      std::size_t neg = rng.below(std::uint64_t(prompts - 1));
      if (neg >= pos) ++neg;
      batch.push_back({std::size_t(q), pos, neg, PairSource::kPerformance});
    }
    const double got = lapr::loss_pg(p.model, p.emb, batch).value;
    const double ref =
        oracle::contrastive(p.model, testing::to_vecs(p.emb.queries), testing::to_vecs(p.emb.prompts), to_oracle(batch));
    CHECK(std::abs(got - ref) <= 1e-10 * std::max(1.0, std::abs(ref)));
  }
}

TEST_CASE("a single pair reduces to log(1 + exp(s_neg - s_pos))") {
  lapr::SeededRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Problem p = random_problem(rng, 1, 2, rng.uniform(0.2, 2.0));
    const std::vector<PairSelection> batch{{0, 0, 1, PairSource::kLabel}};
    const double sp = lapr::pair_score(p.model, p.emb.queries[0], p.emb.prompts[0]).score;
    const double sn = lapr::pair_score(p.model, p.emb.queries[0], p.emb.prompts[1]).score;
    CHECK(lapr::loss_lg(p.model, p.emb, batch).value == doctest::Approx(std::log1p(std::exp(sn - sp))).epsilon(1e-12));
  }
}

TEST_CASE("equal positive and negative scores give ln 2") {
  lapr::SeededRng rng(3);
  Problem p = random_problem(rng, 1, 1);
  p.emb.prompts.push_back(p.emb.prompts[0]);
  const std::vector<PairSelection> batch{{0, 0, 1, PairSource::kPerformance}};
  CHECK(lapr::loss_pg(p.model, p.emb, batch).value == doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("invalid batches are rejected") {
  lapr::SeededRng rng(4);
  Problem p = random_problem(rng, 1, 3);
  CHECK_THROWS_AS(lapr::loss_pg(p.model, p.emb, std::vector<PairSelection>{}), lapr::InvalidArgument);
  const std::vector<PairSelection> same{{0, 1, 1, PairSource::kPerformance}};
  CHECK_THROWS_AS(lapr::loss_pg(p.model, p.emb, same), lapr::InvalidArgument);
}

TEST_CASE("frozen groups receive exactly zero gradient") {
  lapr::SeededRng rng(5);
  Problem p = random_problem(rng, 3, 6);
  const std::vector<PairSelection> batch{{0, 0, 1}, {1, 2, 3}, {2, 4, 5}};
  const auto pg = lapr::loss_pg(p.model, p.emb, batch);
  CHECK(group_zero(pg.grad, false));
  CHECK_FALSE(group_zero(pg.grad, true));
  const auto lg = lapr::loss_lg(p.model, p.emb, batch);
  CHECK(group_zero(lg.grad, true));
  CHECK_FALSE(group_zero(lg.grad, false));
  const std::vector<std::size_t> qs{0, 1, 2};
  CHECK(group_zero(lapr::loss_lb(p.model, p.emb, qs).grad, true));
  CHECK(group_zero(lapr::loss_router(p.model, p.emb, batch).grad, true));
}

TEST_CASE("load balance examples and bounds") {
  const std::vector<Vector> uniform(4, Vector::Constant(3, 1.0 / 3));
  CHECK(std::abs(lapr::load_balance(uniform).value) <= 1e-10);  // the log guard leaves ~K * 1e-12

  std::vector<Vector> collapsed(5, Vector::Zero(4));
  for (auto& v : collapsed) v(2) = 1.0;
  CHECK(lapr::load_balance(collapsed).value == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  std::vector<Vector> spread;
  for (int k = 0; k < 4; ++k) spread.push_back(Vector::Unit(4, k));
  CHECK(std::abs(lapr::load_balance(spread).value) <= 1e-10);

  lapr::SeededRng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + int(rng.below(8)), b = 1 + int(rng.below(10));
    std::vector<Vector> mixtures;
    for (int i = 0; i < b; ++i) {
      Vector logits = testing::random_vector(k, rng, trial % 2 ? 20.0 : 1.0);
      mixtures.push_back(lapr::softmax(logits));
    }
    const double lb = lapr::load_balance(mixtures).value;
    CHECK(lb >= -1e-12);
    CHECK(lb <= std::log(double(k)) + 1e-9);
  }
}

TEST_CASE("joint loss is the sum of its parts") {
  lapr::SeededRng rng(7);
  Problem p = random_problem(rng, 3, 6);
  const std::vector<PairSelection> pg{{0, 0, 1}, {1, 2, 3}, {2, 4, 5}};
  const std::vector<PairSelection> lg{{0, 5, 1, PairSource::kLabel}, {2, 3, 0, PairSource::kLabel}};
  const std::vector<std::size_t> qs{0, 2};
  const double expected = lapr::loss_pg(p.model, p.emb, pg).value + lapr::loss_lg(p.model, p.emb, lg).value +
                          lapr::loss_lb(p.model, p.emb, qs).value;
  CHECK(lapr::loss_joint(p.model, p.emb, pg, lg).value == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences for every loss") {
  using lapr::gradcheck::Loss;
  lapr::SeededRng rng(8);
  for (Loss loss : {Loss::kPerformance, Loss::kLabel, Loss::kBalance, Loss::kRouter, Loss::kJoint}) {
    for (int i = 0; i < 10; ++i) {
      const auto c = lapr::gradcheck::check(loss, lapr::gradcheck::random_instance(rng));
      INFO(std::string(lapr::gradcheck::name(loss)) << " instance " << i);
      CHECK(c.entries > 0);
      CHECK(c.max_rel_error <= lapr::gradcheck::kTolerance);
    }
  }
}

TEST_CASE("permuting the batch leaves the loss unchanged") {
  lapr::SeededRng rng(9);
  Problem p = random_problem(rng, 4, 8);
  std::vector<PairSelection> batch{{0, 0, 1}, {1, 2, 3}, {2, 4, 5}, {3, 6, 7}};
  const auto a = lapr::loss_pg(p.model, p.emb, batch);
  std::swap(batch[0], batch[3]);
  std::swap(batch[1], batch[2]);
  const auto b = lapr::loss_pg(p.model, p.emb, batch);
  CHECK(a.value == doctest::Approx(b.value).epsilon(1e-14));
  double worst = 0.0;
  lapr::for_each_block_pair(a.grad, b.grad, [&](const auto& x, const auto& y) {
    if (x.size()) worst = std::max(worst, (x - y).cwiseAbs().maxCoeff());
  });
  CHECK(worst <= 1e-14);
}

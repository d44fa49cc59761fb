#include "lapr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace lapr::gradcheck {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::max(std::abs(analytic), std::abs(numeric)) + kGuard);
}

namespace {

// Visits (param, grad) block pairs of the groups enabled in mask.
template <typename F>
void for_each_masked(ExtendedModel& model, const Model& grad, GradientMask mask, F&& f) {
  auto bank = [&](EncoderBank<Extended>& b, const EncoderBank<double>& g) {
    for (std::size_t k = 0; k < b.experts.size(); ++k) {
      f(b.experts[k].w1, g.experts[k].w1);
      f(b.experts[k].b1, g.experts[k].b1);
      f(b.experts[k].w2, g.experts[k].w2);
      f(b.experts[k].b2, g.experts[k].b2);
    }
  };
  if (mask.experts) {
    bank(model.query_bank, grad.query_bank);
    bank(model.prompt_bank, grad.prompt_bank);
  }
  if (mask.router) {
    f(model.router.w, grad.router.w);
    f(model.router.b, grad.router.b);
  }
}

bool clear_of_kinks(const Model& m, const EmbeddingTable& emb) {
  constexpr double kMargin = 1e-3;
  auto check_bank = [&](const EncoderBank<double>& bank, const std::vector<Vector>& inputs) {
    for (const auto& x : inputs)
      for (const auto& e : bank.experts)
        if ((affine_forward(e.w1, e.b1, x).array().abs() < kMargin).any()) return false;
    return true;
  };
  return check_bank(m.query_bank, emb.queries) && check_bank(m.prompt_bank, emb.prompts);
}

Vector random_unit(int dim, SeededRng& rng) {
  Vector v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  } while (v.norm() < 1e-3);
  return v.normalized();
}

}  // namespace

Comparison compare(const Model& model, const Model& analytic, const Objective& f, GradientMask mask,
                   double step) {
  Comparison out;
  ExtendedModel probe = cast_model<Extended>(model);
  const Extended h = step;
  for_each_masked(probe, analytic, mask, [&](auto& block, const auto& grad_block) {
    for (Eigen::Index i = 0; i < block.size(); ++i) {
      const Extended original = block.data()[i];
      auto at = [&](Extended offset) {
        block.data()[i] = original + offset;
        return f(probe);
      };
      const Extended numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      block.data()[i] = original;
      out.max_rel_error =
          std::max(out.max_rel_error, relative_error(grad_block.data()[i], static_cast<double>(numeric)));
      ++out.entries;
    }
  });
  return out;
}

Instance random_instance(SeededRng& rng) {
  for (;;) {
    ModelConfig c;
    c.input_dim = 2 + int(rng.below(2));
    c.hidden = 2 + int(rng.below(2));
    c.output_dim = 2 + int(rng.below(2));
    c.experts = 2 + int(rng.below(2));
    c.temperature = rng.uniform(0.5, 1.5);

    Instance inst;
    inst.model = zero_model<double>(c);
    for_each_block(inst.model, [&](auto& block) { fill_uniform(block, 1.0, rng); });

    const int prompts = 6;
    const int queries = 1 + int(rng.below(4));
    for (int i = 0; i < prompts; ++i) inst.emb.prompts.push_back(random_unit(c.input_dim, rng) * rng.uniform(0.5, 2.0));
    for (int i = 0; i < queries; ++i) inst.emb.queries.push_back(random_unit(c.input_dim, rng));
    if (!clear_of_kinks(inst.model, inst.emb)) continue;

    auto draw = [&](PairSource source) {
      std::vector<PairSelection> batch;
      for (int q = 0; q < queries; ++q) {
        const std::size_t pos = rng.below(prompts);
        std::size_t neg = rng.below(prompts - 1);
        if (neg >= pos) ++neg;
        batch.push_back({std::size_t(q), pos, neg, source});
      }
      return batch;
    };
    inst.perf_batch = draw(PairSource::kPerformance);
    inst.label_batch = draw(PairSource::kLabel);
    return inst;
  }
}

const char* name(Loss loss) {
  switch (loss) {
    case Loss::kPerformance: return "L_PG";
    case Loss::kLabel: return "L_LG";
    case Loss::kBalance: return "L_LB";
    case Loss::kRouter: return "L_R";
    case Loss::kJoint: return "L_J";
  }
  return "?";
}

Comparison check(Loss loss, const Instance& inst) {
  const GradientMask experts_only{.experts = true, .router = false};
  const GradientMask router_only{.experts = false, .router = true};
  const GradientMask all{.experts = true, .router = true};
  const auto queries = batch_queries(inst.label_batch);
  const auto& emb = inst.emb;
  const auto pg = [&](const ExtendedModel& m) { return contrastive_value(m, emb, inst.perf_batch); };
  const auto lg = [&](const ExtendedModel& m) { return contrastive_value(m, emb, inst.label_batch); };
  const auto lb = [&](const ExtendedModel& m) { return balance_value<Extended>(m, emb, queries); };
  switch (loss) {
    case Loss::kPerformance:
      return compare(inst.model, loss_pg(inst.model, emb, inst.perf_batch).grad, pg, experts_only);
    case Loss::kLabel:
      return compare(inst.model, loss_lg(inst.model, emb, inst.label_batch).grad, lg, router_only);
    case Loss::kBalance:
      return compare(inst.model, loss_lb(inst.model, emb, queries).grad, lb, router_only);
    case Loss::kRouter:
      return compare(inst.model, loss_router(inst.model, emb, inst.label_batch).grad,
                     [&](const ExtendedModel& m) { return lg(m) + lb(m); }, router_only);
    case Loss::kJoint:
      return compare(inst.model, loss_joint(inst.model, emb, inst.perf_batch, inst.label_batch).grad,
                     [&](const ExtendedModel& m) { return pg(m) + lg(m) + lb(m); }, all);
  }
  return {};
}

std::vector<SuiteResult> run_suite(std::uint64_t seed, int instances) {
  std::vector<SuiteResult> results;
  for (Loss loss : {Loss::kPerformance, Loss::kLabel, Loss::kBalance, Loss::kRouter, Loss::kJoint}) {
    SeededRng rng(derive_seed(seed, static_cast<std::uint64_t>(loss)));
    SuiteResult r{loss, {}, 0};
    for (int i = 0; i < instances; ++i) {
      const Comparison c = check(loss, random_instance(rng));
      r.worst.max_rel_error = std::max(r.worst.max_rel_error, c.max_rel_error);
      r.worst.entries += c.entries;
      ++r.instances;
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace lapr::gradcheck

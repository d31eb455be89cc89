#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "rulemem/datasets.hpp"
#include "rulemem/trainkit.hpp"

using namespace rulemem;
using train::TrainConfig;

namespace {

data::GeneratorSpec pairsum_spec(std::size_t digits, std::size_t n,
                                 std::uint64_t seed, double sigma = 0.3) {
  data::GeneratorSpec s;
  s.kind = data::Kind::PairSum;
  s.digits = digits;
  s.noise_sigma = sigma;
  s.n_examples = n;
  s.seed = seed;
  return s;
}

model::ModelConfig small_model(const data::Dataset& ds, std::size_t n_rules) {
  model::ModelConfig cfg;
  cfg.n_inputs = ds.n_inputs();
  cfg.n_concepts = ds.n_concepts();
  cfg.n_tasks = ds.n_tasks();
  cfg.n_rules = n_rules;
  cfg.rule_emb_size = 16;
  cfg.encoder_hidden = {32, 32};
  cfg.selector_hidden = {32};
  cfg.decoder_hidden = {32};
  cfg.selector_input = model::SelectorInput::ConceptProbs;
  return cfg;
}

model::ModelParams named_init(const data::Dataset& ds,
                              const model::ModelConfig& cfg,
                              std::uint64_t seed) {
  model::ModelParams p = model::init_params(cfg, seed);
  p.concept_names = ds.concept_names;
  p.task_names = ds.task_names;
  return p;
}

bool same_values(const model::ModelParams& a, const model::ModelParams& b) {
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first) return false;
    if (pa[i].second.values() != pb[i].second.values()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("zero epochs leave the parameters untouched") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 64, 5));
  model::ModelConfig cfg = small_model(ds, 2);
  model::ModelParams params = named_init(ds, cfg, 7);
  model::ModelParams before = params.clone();
  TrainConfig tc;
  tc.epochs = 0;
  tc.eval_every = 0;
  tc.restore_policy = train::RestorePolicy::Last;
  train::train_model(params, ds, tc);
  CHECK(same_values(params, before));
}

TEST_CASE("selector resets replay the seed-derived stream and touch nothing else") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 128, 5));
  model::ModelConfig cfg = small_model(ds, 2);
  model::ModelParams params = named_init(ds, cfg, 11);
  model::ModelParams initial = params.clone();

  TrainConfig tc;
  tc.epochs = 5;
  tc.learning_rate = 0.0;  // isolate the reset
  tc.selector_reset_every = 1;
  tc.eval_every = 0;
  tc.seed = 11;
  tc.restore_policy = train::RestorePolicy::Last;
  train::train_model(params, ds, tc);

  // Non-selector parameters are exactly the initial draw.
  for (auto& [name, t] : params.named_parameters()) {
    if (name.rfind("selector.", 0) == 0) continue;
    for (auto& [iname, it] : initial.named_parameters()) {
      if (iname == name) CHECK(t.values() == it.values());
    }
  }
  // Selector parameters equal the fresh draw of the last reset (epoch 4).
  model::ModelParams expect = initial.clone();
  model::reset_selector(expect, 11, 4);
  for (auto& [name, t] : params.named_parameters()) {
    if (name.rfind("selector.", 0) != 0) continue;
    for (auto& [ename, et] : expect.named_parameters()) {
      if (ename == name) CHECK(t.values() == et.values());
    }
  }
}

TEST_CASE("training is deterministic: identical configs give identical checkpoints") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 256, 3));
  model::ModelConfig cfg = small_model(ds, 3);
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 64;
  tc.eval_every = 3;
  tc.selector_reset_every = 2;
  tc.seed = 21;
  tc.restore_policy = train::RestorePolicy::BestValLoss;

  auto run = [&](const std::string& path) {
    model::ModelParams params = named_init(ds, cfg, 21);
    TrainConfig local = tc;
    local.checkpoint_path = path;
    train::train_model(params, ds, local);
    return params;
  };
  model::ModelParams a = run("/tmp/rulemem_ck_a.json");
  model::ModelParams b = run("/tmp/rulemem_ck_b.json");
  CHECK(same_values(a, b));

  std::ifstream fa("/tmp/rulemem_ck_a.json"), fb("/tmp/rulemem_ck_b.json");
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().size() > 0);
}

TEST_CASE("best-loss restore never ends worse than the final epoch") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 512, 9));
  model::ModelConfig cfg = small_model(ds, 3);
  model::ModelParams params = named_init(ds, cfg, 2);
  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 128;
  tc.eval_every = 2;
  tc.selector_reset_every = 3;  // resets make the loss non-monotone
  tc.seed = 2;
  tc.restore_policy = train::RestorePolicy::BestTrainLoss;
  train::History hist = train::train_model(params, ds, tc);
  REQUIRE(!hist.empty());
  // Recompute the loss of the restored parameters over the train split.
  train::Trainer probe(params.clone(), ds, tc);
  const double restored = probe.full_loss(probe.train_indices());
  CHECK(restored <= hist.back().train_loss + 1e-12);
}

TEST_CASE("predicted-concept training uses exactly the thresholded predictions") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 32, 13));
  model::ModelConfig cfg = small_model(ds, 2);
  model::ModelParams params = named_init(ds, cfg, 4);
  model::Batch probe = data::make_batch(ds);
  const double direct = model::objective(nullptr, params, probe, false).item();

  // Substitute hard predictions as observed concepts for the task term only:
  // teacher forcing on the substituted batch must agree.
  model::ForwardOut fwd = model::forward(nullptr, params, probe.x);
  model::Batch swapped = probe;
  for (std::size_t n = 0; n < probe.size(); ++n) {
    std::vector<double> row(cfg.n_concepts);
    for (std::size_t i = 0; i < cfg.n_concepts; ++i)
      row[i] = fwd.concept_probs.values()[n * cfg.n_concepts + i];
    swapped.c[n] = model::hard_concepts(row);
  }
  const double forced = model::objective(nullptr, params, swapped, true).item();
  // The concept log-likelihood terms differ (they always score the observed
  // bits), so compare the task parts by removing them.
  const double concept_direct = model::concept_bce(params, probe);
  const double concept_swapped = model::concept_bce(params, swapped);
  CHECK(direct + concept_direct ==
        doctest::Approx(forced + concept_swapped).epsilon(1e-10));
}

TEST_CASE("a never-firing rulebook scores zero subset accuracy") {
  data::GeneratorSpec spec;
  spec.kind = data::Kind::ParityColor;
  spec.digits = 4;
  spec.noise_sigma = 0.1;
  spec.n_examples = 200;
  spec.seed = 17;
  data::Dataset ds = data::gen_paritycolor(spec);
  model::ModelConfig cfg = small_model(ds, 1);
  model::ModelParams params = named_init(ds, cfg, 6);
  // Pin every rule to require two digits at once; no example satisfies that.
  std::vector<rules::RolePin> pins;
  for (std::size_t t = 0; t < cfg.n_tasks; ++t)
    for (std::size_t i = 0; i < 2; ++i)
      pins.push_back({t, 0, i, rules::PinKind::ForceRole, rules::Role::P});
  rules::pin_roles(params, pins);
  train::MetricsReport m = train::evaluate(params, ds);
  CHECK(m.task_subset_accuracy == 0.0);
}

TEST_CASE("metrics agree with a scripted recomputation of the predictions") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 300, 19));
  model::ModelConfig cfg = small_model(ds, 2);
  model::ModelParams params = named_init(ds, cfg, 9);
  train::MetricsReport m = train::evaluate(params, ds);
  train::HardPredictions pred = train::predict_hard(params, ds);
  std::size_t subset = 0;
  std::vector<double> concept_acc(cfg.n_concepts, 0.0);
  for (std::size_t n = 0; n < ds.examples.size(); ++n) {
    if (pred.tasks[n] == ds.examples[n].y) ++subset;
    for (std::size_t i = 0; i < cfg.n_concepts; ++i)
      concept_acc[i] += pred.concepts[n][i] == ds.examples[n].c[i] ? 1.0 : 0.0;
  }
  CHECK(m.task_subset_accuracy ==
        doctest::Approx(double(subset) / ds.examples.size()).epsilon(1e-12));
  for (std::size_t i = 0; i < cfg.n_concepts; ++i)
    CHECK(m.concept_accuracy[i] ==
          doctest::Approx(concept_acc[i] / ds.examples.size()).epsilon(1e-12));
}

TEST_CASE("small pairsum run recovers the ground-truth rulebook end to end") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 2000, 1));
  data::Dataset test = data::gen_pairsum(pairsum_spec(2, 2000, 101));
  model::ModelConfig cfg = small_model(ds, 4);
  cfg.beta = 1.0;
  model::ModelParams params = named_init(ds, cfg, 1);
  TrainConfig tc;
  tc.epochs = 80;
  tc.batch_size = 256;
  tc.learning_rate = 1e-3;
  tc.eval_every = 20;
  tc.selector_reset_every = 25;
  tc.seed = 1;
  tc.restore_policy = train::RestorePolicy::BestValLoss;
  train::History hist = train::train_model(params, ds, tc);
  REQUIRE(!hist.empty());

  rules::Rulebook decoded = model::decode_rulebook(params);
  rules::RecoveryScore score =
      rules::rule_recovery_score(decoded, *ds.ground_truth);
  INFO("decoded:\n", rules::render_rulebook(decoded));
  CHECK(score.missing == 0);

  train::MetricsReport m = train::evaluate(params, test);
  INFO("subset accuracy ", m.task_subset_accuracy);
  CHECK(m.task_subset_accuracy >= 0.9);
  CHECK(m.mean_concept_accuracy >= 0.95);

  // Feeding ground-truth concepts at the task stage can only help, and with
  // the exact rulebook recovered it is perfect on complete-concept data.
  train::InterventionEffect fx = train::concept_intervention_eval(params, test);
  CHECK(fx.after >= fx.before);
  if (score.missing == 0 && score.spurious == 0) CHECK(fx.after == 1.0);
}

TEST_CASE("pinning the color roles reproduces the unpinned converged rules") {
  // Colors are irrelevant by construction, so forcing them to I must not
  // change what the model converges to.
  data::GeneratorSpec spec;
  spec.kind = data::Kind::ParityColor;
  spec.digits = 4;
  spec.noise_sigma = 0.2;
  spec.n_examples = 2000;
  spec.seed = 1;
  data::Dataset ds = data::gen_paritycolor(spec);
  // Exact capacity (two rules per parity) forces rule sharing across colors,
  // which is what drives the color roles to irrelevant.
  model::ModelConfig cfg = small_model(ds, 2);
  TrainConfig tc;
  tc.epochs = 240;
  tc.batch_size = 256;
  tc.eval_every = 60;
  tc.selector_reset_every = 30;
  tc.seed = 1;
  tc.positive_weight = 4.0;
  tc.weight_decay = 1e-4;
  tc.restore_policy = train::RestorePolicy::Last;

  auto run = [&](bool pin_colors) {
    model::ModelParams params = named_init(ds, cfg, 1);
    if (pin_colors) {
      std::vector<rules::RolePin> pins;
      for (std::size_t t = 0; t < cfg.n_tasks; ++t)
        for (std::size_t j = 0; j < 2; ++j)
          for (std::size_t i = 4; i < 6; ++i)
            pins.push_back({t, j, i, rules::PinKind::ForceI, rules::Role::I});
      rules::pin_roles(params, pins);
    }
    train::train_model(params, ds, tc);
    return model::decode_rulebook(params);
  };
  rules::Rulebook unpinned = run(false);
  rules::Rulebook pinned = run(true);
  // Compare the deduplicated rule sets per task.
  for (std::size_t t = 0; t < unpinned.tasks.size(); ++t) {
    std::vector<std::string> a, b;
    for (const auto& r : unpinned.tasks[t].rules) a.push_back(r.role_string());
    for (const auto& r : pinned.tasks[t].rules) b.push_back(r.role_string());
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    std::sort(b.begin(), b.end());
    b.erase(std::unique(b.begin(), b.end()), b.end());
    INFO("task ", t, " unpinned:", [&] {
      std::string s;
      for (auto& x : a) s += " " + x;
      return s;
    }(), " pinned:", [&] {
      std::string s;
      for (auto& x : b) s += " " + x;
      return s;
    }());
    CHECK(a == b);
  }
  // Both decodes mark the colors irrelevant everywhere and land within one
  // logically-equivalent rewrite of the ground truth (digit identification
  // sometimes settles on the negation form of the same conjunction).
  for (const rules::Rulebook* book : {&pinned, &unpinned}) {
    for (const auto& task : book->tasks)
      for (const auto& rule : task.rules) {
        CHECK(rule.roles[4] == rules::Role::I);
        CHECK(rule.roles[5] == rules::Role::I);
      }
    CHECK(rules::rule_recovery_score(*book, *ds.ground_truth).missing <= 1);
  }
}

TEST_CASE("an intervention with no additions reproduces a plain run exactly") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 400, 23));
  model::ModelConfig cfg = small_model(ds, 2);
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 128;
  tc.eval_every = 2;
  tc.selector_reset_every = 2;
  tc.seed = 31;
  tc.restore_policy = train::RestorePolicy::BestTrainLoss;

  model::ModelParams plain = named_init(ds, cfg, 31);
  train::train_model(plain, ds, tc);

  model::ModelParams split = named_init(ds, cfg, 31);
  train::InterventionSchedule sched;
  sched.config = tc;
  sched.epochs_before = 4;
  sched.epochs_after = 2;
  train::run_rule_intervention(split, ds, sched);

  CHECK(same_values(plain, split));
}

TEST_CASE("histories serialize one record per eval point") {
  data::Dataset ds = data::gen_pairsum(pairsum_spec(2, 128, 3));
  model::ModelConfig cfg = small_model(ds, 2);
  model::ModelParams params = named_init(ds, cfg, 3);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 64;
  tc.eval_every = 2;
  tc.selector_reset_every = 0;
  tc.restore_policy = train::RestorePolicy::BestValLoss;
  train::History hist = train::train_model(params, ds, tc);
  CHECK(hist.size() == 2);
  const std::string path = "/tmp/rulemem_hist.jsonl";
  train::save_history(hist, path);
  std::ifstream is(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    ++lines;
    nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("epoch"));
    CHECK(j.contains("train_loss"));
    CHECK(j.contains("val_loss"));
  }
  CHECK(lines == hist.size());
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "rulemem/datasets.hpp"
#include "rulemem/rng.hpp"

using namespace rulemem;
using data::Dataset;
using data::GeneratorSpec;

namespace {

GeneratorSpec spec_of(data::Kind kind, std::size_t digits, double sigma,
                      std::size_t n, std::uint64_t seed) {
  GeneratorSpec s;
  s.kind = kind;
  s.digits = digits;
  s.noise_sigma = sigma;
  s.n_examples = n;
  s.seed = seed;
  return s;
}

// True iff some rule of the task fires on the concepts.
bool any_rule_fires(const rules::TaskRules& task,
                    const std::vector<std::uint8_t>& c) {
  for (const rules::SymbolicRule& r : task.rules)
    if (rules::evaluate(r, c)) return true;
  return false;
}

}  // namespace

TEST_CASE("pairsum construction: concepts, tasks and ground truth line up") {
  Dataset ds = data::gen_pairsum(spec_of(data::Kind::PairSum, 4, 0.3, 500, 1));
  CHECK(ds.concept_names.size() == 8);
  CHECK(ds.task_names.size() == 7);
  CHECK(ds.concept_names[1] == "c_0_1");
  CHECK(ds.concept_names[6] == "c_1_2");
  REQUIRE(ds.ground_truth.has_value());

  bool saw_1_2 = false;
  for (const data::Example& ex : ds.examples) {
    // Exactly one digit bit per block, exactly one task bit.
    int first = 0, second = 0, tasks = 0;
    for (int i = 0; i < 4; ++i) first += ex.c[i];
    for (int i = 4; i < 8; ++i) second += ex.c[i];
    for (std::uint8_t y : ex.y) tasks += y;
    CHECK(first == 1);
    CHECK(second == 1);
    CHECK(tasks == 1);
    if (ex.c[1] && ex.c[4 + 2]) {
      saw_1_2 = true;
      CHECK(ex.y[3] == 1);  // digits (1, 2) activate y_3 only
    }
    // The ground-truth book classifies every example exactly.
    for (std::size_t t = 0; t < ds.task_names.size(); ++t)
      CHECK(any_rule_fires(ds.ground_truth->tasks[t], ex.c) == (ex.y[t] == 1));
  }
  CHECK(saw_1_2);

  // Ground-truth shape: task k holds one rule per digit pair summing to k.
  CHECK(ds.ground_truth->tasks[0].rules.size() == 1);
  CHECK(ds.ground_truth->tasks[3].rules.size() == 4);
  CHECK(ds.ground_truth->tasks[6].rules.size() == 1);
}

TEST_CASE("zero noise gives exact one-hot inputs") {
  Dataset ds = data::gen_pairsum(spec_of(data::Kind::PairSum, 3, 0.0, 50, 2));
  for (const data::Example& ex : ds.examples) {
    for (std::size_t i = 0; i < ex.x.size(); ++i) {
      CHECK(ex.x[i] == (ex.c[i] ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("pairsum task frequencies match the convolution of two uniforms") {
  Dataset ds = data::gen_pairsum(spec_of(data::Kind::PairSum, 4, 0.3, 10000, 1));
  std::vector<double> freq(7, 0.0);
  for (const data::Example& ex : ds.examples)
    for (std::size_t k = 0; k < 7; ++k) freq[k] += ex.y[k];
  const double expected[7] = {1, 2, 3, 4, 3, 2, 1};
  for (std::size_t k = 0; k < 7; ++k) {
    CHECK(std::fabs(freq[k] / 10000.0 - expected[k] / 16.0) <= 0.02);
  }
}

TEST_CASE("parity-color: parity drives the task, colors stay uncorrelated") {
  Dataset ds =
      data::gen_paritycolor(spec_of(data::Kind::ParityColor, 10, 0.3, 10000, 1));
  CHECK(ds.concept_names.size() == 12);
  CHECK(ds.task_names == std::vector<std::string>{"y_even", "y_odd"});
  REQUIRE(ds.ground_truth.has_value());
  double n_red = 0, n_even = 0, n_red_even = 0;
  for (const data::Example& ex : ds.examples) {
    std::size_t digit = 0;
    for (std::size_t i = 0; i < 10; ++i)
      if (ex.c[i]) digit = i;
    CHECK(ex.y[0] == (digit % 2 == 0 ? 1 : 0));
    CHECK(ex.y[1] == 1 - ex.y[0]);
    CHECK(ex.c[10] + ex.c[11] == 1);  // exactly one color
    n_red += ex.c[10];
    n_even += ex.y[0];
    n_red_even += ex.c[10] && ex.y[0];
    for (std::size_t t = 0; t < 2; ++t)
      CHECK(any_rule_fires(ds.ground_truth->tasks[t], ex.c) == (ex.y[t] == 1));
  }
  const double n = 10000.0;
  const double cov = n_red_even / n - (n_red / n) * (n_even / n);
  const double corr = cov / std::sqrt((n_red / n) * (1 - n_red / n) *
                                      (n_even / n) * (1 - n_even / n));
  CHECK(std::fabs(corr) < 0.03);

  // Ground truth marks both colors irrelevant in every rule.
  for (const auto& task : ds.ground_truth->tasks)
    for (const auto& rule : task.rules) {
      CHECK(rule.roles[10] == rules::Role::I);
      CHECK(rule.roles[11] == rules::Role::I);
    }
}

TEST_CASE("incomplete pairsum drops the requested concept columns") {
  GeneratorSpec spec = spec_of(data::Kind::PairSumIncomplete, 4, 0.3, 400, 3);
  spec.dropped_concepts = {0, 1};
  Dataset ds = data::gen_pairsum_incomplete(spec);
  CHECK(ds.concept_names ==
        std::vector<std::string>{"c_0_2", "c_0_3", "c_1_2", "c_1_3"});
  CHECK_FALSE(ds.ground_truth.has_value());

  // Inputs and tasks are identical to the complete dataset.
  GeneratorSpec full_spec = spec;
  full_spec.kind = data::Kind::PairSum;
  Dataset full = data::gen_pairsum(full_spec);
  REQUIRE(full.examples.size() == ds.examples.size());
  bool saw_0_3 = false;
  for (std::size_t n = 0; n < ds.examples.size(); ++n) {
    CHECK(ds.examples[n].x == full.examples[n].x);
    CHECK(ds.examples[n].y == full.examples[n].y);
    if (full.examples[n].c[0] && full.examples[n].c[4 + 3]) {
      saw_0_3 = true;
      // digits (0, 3): only c_1_3 remains visible
      CHECK(ds.examples[n].c == std::vector<std::uint8_t>{0, 0, 0, 1});
    }
  }
  CHECK(saw_0_3);
}

TEST_CASE("bottleneck ceiling is the majority-table accuracy") {
  // Hand-built: pattern (0) appears 4 times with task vectors 3:1.
  Dataset tiny;
  tiny.concept_names = {"c"};
  tiny.task_names = {"y"};
  for (int i = 0; i < 3; ++i) tiny.examples.push_back({{0.0}, {0}, {0}});
  tiny.examples.push_back({{0.0}, {0}, {1}});
  tiny.examples.push_back({{0.0}, {1}, {1}});
  CHECK(data::bottleneck_ceiling(tiny) == doctest::Approx(0.8));

  // The incomplete pairsum ceiling sits near its analytic value 0.625:
  // patterns with both digits >= 2 are fully determined (prob 1/4), the
  // rest are at best a coin flip between two or four sums.
  GeneratorSpec spec = spec_of(data::Kind::PairSumIncomplete, 4, 0.3, 20000, 7);
  Dataset ds = data::gen_pairsum_incomplete(spec);
  CHECK(data::bottleneck_ceiling(ds) == doctest::Approx(0.625).epsilon(0.03));
}

TEST_CASE("jsonl round-trips exactly, including doubles") {
  Dataset ds = data::gen_pairsum(spec_of(data::Kind::PairSum, 3, 0.25, 200, 9));
  const std::string path = "/tmp/rulemem_test_ds.jsonl";
  data::save_jsonl(ds, path);
  Dataset back = data::load_jsonl(path);
  CHECK(back.concept_names == ds.concept_names);
  CHECK(back.task_names == ds.task_names);
  CHECK(back.spec.seed == ds.spec.seed);
  REQUIRE(back.ground_truth.has_value());
  REQUIRE(back.examples.size() == ds.examples.size());
  for (std::size_t n = 0; n < ds.examples.size(); ++n) {
    CHECK(back.examples[n].x == ds.examples[n].x);  // exact double round-trip
    CHECK(back.examples[n].c == ds.examples[n].c);
    CHECK(back.examples[n].y == ds.examples[n].y);
  }

  // A thousand random doubles survive the shortest-round-trip rendering.
  Rng rng(123);
  Dataset wild;
  wild.concept_names = {"c"};
  wild.task_names = {"y"};
  for (int i = 0; i < 1000; ++i) {
    const double v = (rng.uniform() - 0.5) * std::pow(10.0, double(rng.below(10)) - 5.0);
    wild.examples.push_back({{v}, {0}, {0}});
  }
  data::save_jsonl(wild, path);
  Dataset wild_back = data::load_jsonl(path);
  for (std::size_t i = 0; i < 1000; ++i)
    CHECK(wild_back.examples[i].x[0] == wild.examples[i].x[0]);
}

TEST_CASE("loader rejects malformed bits with a line number") {
  const std::string path = "/tmp/rulemem_test_bad.jsonl";
  {
    std::ofstream os(path);
    os << R"({"generator":{"kind":"pairsum","digits":2,"noise_sigma":0.0,)"
       << R"("n_examples":2,"seed":1,"dropped_concepts":[]},)"
       << R"("concept_names":["a"],"task_names":["y"],"ground_truth":null})"
       << "\n";
    os << R"({"x":[0.5],"c":[0],"y":[0]})" << "\n";
    os << R"({"x":[0.5],"c":[2],"y":[0]})" << "\n";
  }
  CHECK_THROWS_WITH_AS(data::load_jsonl(path), doctest::Contains("line 3"),
                       std::runtime_error);
  // Dimension mismatches carry the line number too.
  {
    std::ofstream os(path);
    os << R"({"generator":{"kind":"pairsum","digits":2,"noise_sigma":0.0,)"
       << R"("n_examples":1,"seed":1,"dropped_concepts":[]},)"
       << R"("concept_names":["a"],"task_names":["y"],"ground_truth":null})"
       << "\n";
    os << R"({"x":[0.5],"c":[0,1],"y":[0]})" << "\n";
  }
  CHECK_THROWS_WITH_AS(data::load_jsonl(path), doctest::Contains("line 2"),
                       std::runtime_error);
}

TEST_CASE("generation is reproducible bit for bit") {
  for (data::Kind kind : {data::Kind::PairSum, data::Kind::ParityColor,
                          data::Kind::PairSumIncomplete}) {
    GeneratorSpec spec = spec_of(kind, 4, 0.3, 300, 11);
    Dataset a = data::generate(spec);
    Dataset b = data::generate(spec);
    REQUIRE(a.examples.size() == b.examples.size());
    for (std::size_t n = 0; n < a.examples.size(); ++n) {
      CHECK(a.examples[n].x == b.examples[n].x);
      CHECK(a.examples[n].c == b.examples[n].c);
      CHECK(a.examples[n].y == b.examples[n].y);
    }
  }
}

TEST_CASE("generator specs validate their fields") {
  CHECK_THROWS_AS(data::gen_pairsum(spec_of(data::Kind::PairSum, 1, 0.3, 10, 1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      data::gen_pairsum(spec_of(data::Kind::PairSum, 4, -0.1, 10, 1)),
      std::invalid_argument);
  GeneratorSpec bad = spec_of(data::Kind::PairSumIncomplete, 4, 0.3, 10, 1);
  bad.dropped_concepts = {9};
  CHECK_THROWS_AS(data::gen_pairsum_incomplete(bad), std::invalid_argument);
}

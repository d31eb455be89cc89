#pragma once

// Synthetic concept/task generators with known ground-truth rulebooks, plus
// JSONL dataset IO. Inputs are noisy indicator vectors: each digit is a
// one-hot block with N(0, sigma^2) noise per coordinate, so concept learning
// is nontrivial while the rule structure stays exact.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rulemem/model.hpp"
#include "rulemem/rng.hpp"
#include "rulemem/rules.hpp"

namespace rulemem::data {

struct Example {
  std::vector<double> x;
  std::vector<std::uint8_t> c;
  std::vector<std::uint8_t> y;
};

enum class Kind { PairSum, ParityColor, PairSumIncomplete };

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::PairSum: return "pairsum";
    case Kind::ParityColor: return "paritycolor";
    default: return "pairsum_incomplete";
  }
}

inline Kind kind_from_name(const std::string& s) {
  if (s == "pairsum") return Kind::PairSum;
  if (s == "paritycolor") return Kind::ParityColor;
  if (s == "pairsum_incomplete") return Kind::PairSumIncomplete;
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

struct GeneratorSpec {
  Kind kind = Kind::PairSum;
  std::size_t digits = 4;
  double noise_sigma = 0.3;
  std::size_t n_examples = 10000;
  std::uint64_t seed = 1;
  std::vector<std::size_t> dropped_concepts{0, 1};  // incomplete variant only

  void validate() const {
    if (digits < 2) throw std::invalid_argument("generator: digits must be >= 2");
    if (noise_sigma < 0.0)
      throw std::invalid_argument("generator: sigma must be >= 0");
  }
};

struct Dataset {
  GeneratorSpec spec;
  std::vector<std::string> concept_names;
  std::vector<std::string> task_names;
  std::vector<Example> examples;
  std::optional<rules::Rulebook> ground_truth;

  std::size_t n_inputs() const {
    return examples.empty() ? 0 : examples[0].x.size();
  }
  std::size_t n_concepts() const { return concept_names.size(); }
  std::size_t n_tasks() const { return task_names.size(); }
};

// Draw order per example: first digit, second digit, then one noise draw per
// x coordinate. This order is part of the reproducibility contract.
inline Dataset gen_pairsum(const GeneratorSpec& spec) {
  spec.validate();
  const std::size_t D = spec.digits;
  Dataset ds;
  ds.spec = spec;
  ds.spec.kind = Kind::PairSum;
  for (std::size_t img = 0; img < 2; ++img)
    for (std::size_t d = 0; d < D; ++d)
      ds.concept_names.push_back("c_" + std::to_string(img) + "_" +
                                 std::to_string(d));
  for (std::size_t k = 0; k <= 2 * (D - 1); ++k)
    ds.task_names.push_back("y_" + std::to_string(k));

  Rng rng = Rng::substream(spec.seed, "gen");
  ds.examples.reserve(spec.n_examples);
  for (std::size_t n = 0; n < spec.n_examples; ++n) {
    Example ex;
    const std::size_t d0 = rng.below(D);
    const std::size_t d1 = rng.below(D);
    ex.x.resize(2 * D);
    for (std::size_t i = 0; i < 2 * D; ++i) {
      const double hot = (i < D ? i == d0 : i - D == d1) ? 1.0 : 0.0;
      ex.x[i] = hot + rng.normal(0.0, spec.noise_sigma);
    }
    ex.c.assign(2 * D, 0);
    ex.c[d0] = 1;
    ex.c[D + d1] = 1;
    ex.y.assign(2 * D - 1, 0);
    ex.y[d0 + d1] = 1;
    ds.examples.push_back(std::move(ex));
  }

  rules::Rulebook gt;
  gt.concepts = ds.concept_names;
  for (std::size_t k = 0; k <= 2 * (D - 1); ++k) {
    rules::TaskRules task;
    task.name = ds.task_names[k];
    for (std::size_t i = 0; i < D; ++i) {
      if (k < i || k - i >= D) continue;
      const std::size_t j = k - i;
      rules::SymbolicRule r;
      r.roles.assign(2 * D, rules::Role::N);
      r.roles[i] = rules::Role::P;
      r.roles[D + j] = rules::Role::P;
      task.rules.push_back(std::move(r));
    }
    gt.tasks.push_back(std::move(task));
  }
  ds.ground_truth = std::move(gt);
  return ds;
}

// Draw order per example: digit, color, then one noise draw per coordinate.
inline Dataset gen_paritycolor(const GeneratorSpec& spec) {
  spec.validate();
  const std::size_t D = spec.digits;
  Dataset ds;
  ds.spec = spec;
  ds.spec.kind = Kind::ParityColor;
  for (std::size_t d = 0; d < D; ++d)
    ds.concept_names.push_back("c_" + std::to_string(d));
  ds.concept_names.push_back("red");
  ds.concept_names.push_back("green");
  ds.task_names = {"y_even", "y_odd"};

  Rng rng = Rng::substream(spec.seed, "gen");
  ds.examples.reserve(spec.n_examples);
  for (std::size_t n = 0; n < spec.n_examples; ++n) {
    Example ex;
    const std::size_t digit = rng.below(D);
    const std::size_t color = rng.below(2);
    ex.x.resize(D + 2);
    for (std::size_t i = 0; i < D + 2; ++i) {
      const double hot =
          (i < D ? i == digit : i - D == color) ? 1.0 : 0.0;
      ex.x[i] = hot + rng.normal(0.0, spec.noise_sigma);
    }
    ex.c.assign(D + 2, 0);
    ex.c[digit] = 1;
    ex.c[D + color] = 1;
    ex.y = {static_cast<std::uint8_t>(digit % 2 == 0 ? 1 : 0),
            static_cast<std::uint8_t>(digit % 2 == 1 ? 1 : 0)};
    ds.examples.push_back(std::move(ex));
  }

  rules::Rulebook gt;
  gt.concepts = ds.concept_names;
  for (std::size_t parity = 0; parity < 2; ++parity) {
    rules::TaskRules task;
    task.name = ds.task_names[parity];
    for (std::size_t d = parity; d < D; d += 2) {
      rules::SymbolicRule r;
      r.roles.assign(D + 2, rules::Role::N);
      r.roles[d] = rules::Role::P;
      r.roles[D] = rules::Role::I;      // colors are irrelevant by construction
      r.roles[D + 1] = rules::Role::I;
      task.rules.push_back(std::move(r));
    }
    gt.tasks.push_back(std::move(task));
  }
  ds.ground_truth = std::move(gt);
  return ds;
}

// PairSum with the concept columns of the dropped digits removed from both
// image blocks; inputs and tasks are untouched. No complete concept-only
// rulebook exists, so no ground truth is attached.
inline Dataset gen_pairsum_incomplete(const GeneratorSpec& spec) {
  Dataset full = gen_pairsum(spec);
  const std::size_t D = spec.digits;
  std::vector<bool> dropped(D, false);
  for (std::size_t d : spec.dropped_concepts) {
    if (d >= D)
      throw std::invalid_argument("generator: dropped digit out of range");
    dropped[d] = true;
  }
  std::vector<std::size_t> keep;
  for (std::size_t img = 0; img < 2; ++img)
    for (std::size_t d = 0; d < D; ++d)
      if (!dropped[d]) keep.push_back(img * D + d);

  Dataset ds;
  ds.spec = spec;
  ds.spec.kind = Kind::PairSumIncomplete;
  for (std::size_t k : keep) ds.concept_names.push_back(full.concept_names[k]);
  ds.task_names = full.task_names;
  ds.examples.reserve(full.examples.size());
  for (Example& ex : full.examples) {
    Example slim;
    slim.x = std::move(ex.x);
    slim.y = std::move(ex.y);
    slim.c.reserve(keep.size());
    for (std::size_t k : keep) slim.c.push_back(ex.c[k]);
    ds.examples.push_back(std::move(slim));
  }
  return ds;
}

inline Dataset generate(const GeneratorSpec& spec) {
  switch (spec.kind) {
    case Kind::PairSum: return gen_pairsum(spec);
    case Kind::ParityColor: return gen_paritycolor(spec);
    default: return gen_pairsum_incomplete(spec);
  }
}

// Best achievable subset accuracy for any predictor that sees only the
// concept bits: group examples by concept pattern and count the majority
// task vector within each group.
inline double bottleneck_ceiling(const Dataset& ds) {
  std::map<std::vector<std::uint8_t>, std::map<std::vector<std::uint8_t>, std::size_t>>
      table;
  for (const Example& ex : ds.examples) ++table[ex.c][ex.y];
  std::size_t best = 0;
  for (const auto& [c, ys] : table) {
    std::size_t top = 0;
    for (const auto& [y, count] : ys) top = std::max(top, count);
    best += top;
  }
  return static_cast<double>(best) / static_cast<double>(ds.examples.size());
}

// --- JSONL -------------------------------------------------------------

inline nlohmann::json spec_to_json(const GeneratorSpec& spec) {
  return nlohmann::json{{"kind", kind_name(spec.kind)},
                        {"digits", spec.digits},
                        {"noise_sigma", spec.noise_sigma},
                        {"n_examples", spec.n_examples},
                        {"seed", spec.seed},
                        {"dropped_concepts", spec.dropped_concepts}};
}

inline GeneratorSpec spec_from_json(const nlohmann::json& j) {
  GeneratorSpec spec;
  spec.kind = kind_from_name(j.at("kind").get<std::string>());
  spec.digits = j.at("digits").get<std::size_t>();
  spec.noise_sigma = j.at("noise_sigma").get<double>();
  spec.n_examples = j.at("n_examples").get<std::size_t>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.dropped_concepts =
      j.value("dropped_concepts", std::vector<std::size_t>{});
  return spec;
}

inline void save_jsonl(const Dataset& ds, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    nlohmann::json meta;
    meta["generator"] = spec_to_json(ds.spec);
    meta["concept_names"] = ds.concept_names;
    meta["task_names"] = ds.task_names;
    if (ds.ground_truth)
      meta["ground_truth"] = rules::rulebook_to_json(*ds.ground_truth);
    else
      meta["ground_truth"] = nullptr;
    os << meta.dump() << "\n";
    for (const Example& ex : ds.examples) {
      nlohmann::json line;
      line["x"] = ex.x;
      line["c"] = ex.c;
      line["y"] = ex.y;
      os << line.dump() << "\n";
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

inline std::vector<std::uint8_t> read_bits(const nlohmann::json& arr,
                                           std::size_t line_no,
                                           const char* field) {
  std::vector<std::uint8_t> bits;
  bits.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number_integer() ||
        (v.get<std::int64_t>() != 0 && v.get<std::int64_t>() != 1)) {
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": field '" + field + "' has non-bit value " +
                               v.dump());
    }
    bits.push_back(static_cast<std::uint8_t>(v.get<std::int64_t>()));
  }
  return bits;
}

inline Dataset load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error(path + ": missing metadata line");
  nlohmann::json meta = nlohmann::json::parse(line);
  Dataset ds;
  ds.spec = spec_from_json(meta.at("generator"));
  ds.concept_names = meta.at("concept_names").get<std::vector<std::string>>();
  ds.task_names = meta.at("task_names").get<std::vector<std::string>>();
  if (!meta.at("ground_truth").is_null())
    ds.ground_truth = rules::rulebook_from_json(meta.at("ground_truth"));
  std::size_t line_no = 1;
  std::size_t dim_x = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Example ex;
    ex.x = j.at("x").get<std::vector<double>>();
    ex.c = read_bits(j.at("c"), line_no, "c");
    ex.y = read_bits(j.at("y"), line_no, "y");
    if (ds.examples.empty()) dim_x = ex.x.size();
    if (ex.x.size() != dim_x || ex.c.size() != ds.concept_names.size() ||
        ex.y.size() != ds.task_names.size()) {
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": inconsistent dimensions");
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

// --- batching ------------------------------------------------------------

inline model::Batch make_batch(const Dataset& ds,
                               const std::vector<std::size_t>& indices) {
  model::Batch b;
  const std::size_t d = ds.n_inputs();
  b.x = model::Tensor::zeros({indices.size(), d});
  b.c.reserve(indices.size());
  b.y.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Example& ex = ds.examples[indices[r]];
    std::copy(ex.x.begin(), ex.x.end(), b.x.values().begin() + r * d);
    b.c.push_back(ex.c);
    b.y.push_back(ex.y);
  }
  return b;
}

inline model::Batch make_batch(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(ds, idx);
}

}  // namespace rulemem::data

#pragma once

// The rule-memory mixture model. A shared trunk embeds the input; a concept
// head predicts independent concept probabilities p(c_i|x); a selector head
// produces per-task mixing weights p(s|x) over that task's rule slots; a
// shared role decoder maps each rule embedding to per-concept role
// distributions p(r_i|s) over [P, N, I]. The exact task likelihood
//   p(y=1|c,s) = prod_i ( p(I_i|s) + p(P_i|s)*[c_i=1] + p(N_i|s)*[c_i=0] )
// makes the whole objective tractable without sampling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rulemem/adamw.hpp"
#include "rulemem/mlp.hpp"
#include "rulemem/ops.hpp"
#include "rulemem/rng.hpp"
#include "rulemem/rules.hpp"
#include "rulemem/tape.hpp"

namespace rulemem::model {

using diff::AdamW;
using diff::Linear;
using diff::Mlp;
using diff::NamedParams;
using diff::NumericError;
using diff::Tape;
using diff::Tensor;
namespace ops = diff::ops;

enum class SelectorInput { Embedding, ConceptProbs };

struct ModelConfig {
  std::size_t n_inputs = 0;
  std::size_t n_concepts = 0;
  std::size_t n_tasks = 1;
  std::size_t n_rules = 1;
  std::size_t rule_emb_size = 64;
  std::vector<std::size_t> encoder_hidden{100, 100};
  std::vector<std::size_t> selector_hidden{100};
  std::vector<std::size_t> decoder_hidden{100};
  double beta = 1.0;
  SelectorInput selector_input = SelectorInput::Embedding;
  double positive_weight = 1.0;
  // Optional groups of mutually exclusive concepts; each listed group gets a
  // softmax over its logits, remaining concepts use independent sigmoids.
  std::vector<std::vector<std::size_t>> concept_groups;
  bool unfreeze_manual_rules = false;

  void validate() const {
    if (n_inputs == 0 || n_concepts == 0 || n_tasks == 0)
      throw std::invalid_argument("config: dimensions must be positive");
    if (n_rules < 1) throw std::invalid_argument("config: n_rules must be >= 1");
    if (beta < 0.0) throw std::invalid_argument("config: beta must be >= 0");
    for (std::size_t w : encoder_hidden)
      if (w == 0) throw std::invalid_argument("config: zero hidden width");
    for (std::size_t w : selector_hidden)
      if (w == 0) throw std::invalid_argument("config: zero hidden width");
    for (std::size_t w : decoder_hidden)
      if (w == 0) throw std::invalid_argument("config: zero hidden width");
    std::vector<bool> seen(n_concepts, false);
    for (const auto& g : concept_groups) {
      for (std::size_t i : g) {
        if (i >= n_concepts)
          throw std::invalid_argument("config: concept group index out of range");
        if (seen[i])
          throw std::invalid_argument("config: concept groups must be disjoint");
        seen[i] = true;
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"n_inputs", c.n_inputs},
      {"n_concepts", c.n_concepts},
      {"n_tasks", c.n_tasks},
      {"n_rules", c.n_rules},
      {"rule_emb_size", c.rule_emb_size},
      {"encoder_hidden", c.encoder_hidden},
      {"selector_hidden", c.selector_hidden},
      {"decoder_hidden", c.decoder_hidden},
      {"beta", c.beta},
      {"selector_input", c.selector_input == SelectorInput::Embedding
                             ? "embedding"
                             : "concept_probs"},
      {"positive_weight", c.positive_weight},
      {"concept_groups", c.concept_groups},
      {"unfreeze_manual_rules", c.unfreeze_manual_rules}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_inputs = j.value("n_inputs", d.n_inputs);
  c.n_concepts = j.value("n_concepts", d.n_concepts);
  c.n_tasks = j.value("n_tasks", d.n_tasks);
  c.n_rules = j.value("n_rules", d.n_rules);
  c.rule_emb_size = j.value("rule_emb_size", d.rule_emb_size);
  c.encoder_hidden = j.value("encoder_hidden", d.encoder_hidden);
  c.selector_hidden = j.value("selector_hidden", d.selector_hidden);
  c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
  c.beta = j.value("beta", d.beta);
  const std::string si = j.value("selector_input", "embedding");
  if (si == "embedding")
    c.selector_input = SelectorInput::Embedding;
  else if (si == "concept_probs")
    c.selector_input = SelectorInput::ConceptProbs;
  else
    throw std::invalid_argument("config: unknown selector_input '" + si + "'");
  c.positive_weight = j.value("positive_weight", d.positive_weight);
  c.concept_groups = j.value("concept_groups", d.concept_groups);
  c.unfreeze_manual_rules = j.value("unfreeze_manual_rules", d.unfreeze_manual_rules);
}

struct PinnedRole {
  std::size_t task = 0;
  std::size_t rule = 0;
  std::size_t concept_idx = 0;
  // Which logits are masked out (set to the large negative constant).
  bool mask_p = false, mask_n = false, mask_i = false;
};

inline constexpr double kPinConstant = -1e9;

struct RuleSlot {
  Tensor embedding;  // (1, q)
  rules::Provenance provenance = rules::Provenance::Learned;
};

struct ModelParams {
  ModelConfig config;
  std::vector<std::string> concept_names;
  std::vector<std::string> task_names;

  Mlp trunk;            // n_inputs -> encoder_hidden...
  Linear concept_head;  // emb -> n_concepts
  Mlp selector_trunk;   // selector input -> selector_hidden...
  Linear selector_out;  // -> total_rules()
  std::vector<std::vector<RuleSlot>> rulebook;  // [task][slot]
  Mlp decoder_trunk;    // q -> decoder_hidden...
  Linear decoder_out;   // -> 3 * n_concepts
  std::vector<PinnedRole> pins;
  Tensor pin_mask;      // (total_rules * n_concepts, 3), constants

  std::size_t rule_count(std::size_t task) const {
    return rulebook[task].size();
  }
  std::size_t total_rules() const {
    std::size_t n = 0;
    for (const auto& t : rulebook) n += t.size();
    return n;
  }
  std::size_t rule_offset(std::size_t task) const {
    std::size_t off = 0;
    for (std::size_t t = 0; t < task; ++t) off += rulebook[t].size();
    return off;
  }

  NamedParams named_parameters() const {
    NamedParams out;
    diff::collect_params(trunk, "encoder.trunk", out);
    diff::collect_params(concept_head, "encoder.head", out);
    diff::collect_params(selector_trunk, "selector.trunk", out);
    diff::collect_params(selector_out, "selector.out", out);
    for (std::size_t t = 0; t < rulebook.size(); ++t)
      for (std::size_t j = 0; j < rulebook[t].size(); ++j)
        out.emplace_back("rulebook.t" + std::to_string(t) + ".r" +
                             std::to_string(j),
                         rulebook[t][j].embedding);
    diff::collect_params(decoder_trunk, "decoder.trunk", out);
    diff::collect_params(decoder_out, "decoder.out", out);
    return out;
  }

  NamedParams selector_parameters() const {
    NamedParams out;
    diff::collect_params(selector_trunk, "selector.trunk", out);
    diff::collect_params(selector_out, "selector.out", out);
    return out;
  }

  void zero_grads() const {
    for (auto& [name, p] : named_parameters()) {
      Tensor t = p;
      t.zero_grad();
    }
  }

  void rebuild_pin_mask() {
    const std::size_t rows = total_rules() * config.n_concepts;
    pin_mask = Tensor::zeros({rows, 3}, false);
    for (const PinnedRole& pin : pins) {
      const std::size_t row =
          (rule_offset(pin.task) + pin.rule) * config.n_concepts + pin.concept_idx;
      if (pin.mask_p) pin_mask.values()[row * 3 + 0] = kPinConstant;
      if (pin.mask_n) pin_mask.values()[row * 3 + 1] = kPinConstant;
      if (pin.mask_i) pin_mask.values()[row * 3 + 2] = kPinConstant;
    }
  }

  ModelParams clone() const {
    ModelParams out;
    out.config = config;
    out.concept_names = concept_names;
    out.task_names = task_names;
    auto clone_linear = [](const Linear& l) {
      return Linear{l.w.clone(), l.b.clone()};
    };
    auto clone_mlp = [&](const Mlp& m) {
      Mlp c;
      for (const Linear& l : m.layers) c.layers.push_back(clone_linear(l));
      return c;
    };
    out.trunk = clone_mlp(trunk);
    out.concept_head = clone_linear(concept_head);
    out.selector_trunk = clone_mlp(selector_trunk);
    out.selector_out = clone_linear(selector_out);
    for (const auto& task : rulebook) {
      out.rulebook.emplace_back();
      for (const RuleSlot& s : task)
        out.rulebook.back().push_back(RuleSlot{s.embedding.clone(), s.provenance});
    }
    out.decoder_trunk = clone_mlp(decoder_trunk);
    out.decoder_out = clone_linear(decoder_out);
    out.pins = pins;
    out.rebuild_pin_mask();
    return out;
  }
};

inline std::size_t embedding_width(const ModelConfig& c) {
  return c.encoder_hidden.empty() ? c.n_inputs : c.encoder_hidden.back();
}

// Canonical parameter draw order: trunk, concept head, selector, rulebook
// (task-major), decoder. Selector re-initialization replays only the
// selector part of this order from its own stream.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng = Rng::substream(seed, "init");
  p.trunk = diff::make_mlp(config.n_inputs, config.encoder_hidden, rng);
  p.concept_head = diff::make_linear(embedding_width(config), config.n_concepts, rng);
  const std::size_t sel_in = config.selector_input == SelectorInput::Embedding
                                 ? embedding_width(config)
                                 : config.n_concepts;
  p.selector_trunk = diff::make_mlp(sel_in, config.selector_hidden, rng);
  const std::size_t sel_width =
      config.selector_hidden.empty() ? sel_in : config.selector_hidden.back();
  p.selector_out = diff::make_linear(sel_width, config.n_tasks * config.n_rules, rng);
  for (std::size_t t = 0; t < config.n_tasks; ++t) {
    p.rulebook.emplace_back();
    for (std::size_t j = 0; j < config.n_rules; ++j) {
      Tensor e = Tensor::zeros({1, config.rule_emb_size}, true);
      for (double& v : e.values()) v = rng.normal(0.0, 1.0);
      p.rulebook.back().push_back(RuleSlot{e, rules::Provenance::Learned});
    }
  }
  p.decoder_trunk = diff::make_mlp(config.rule_emb_size, config.decoder_hidden, rng);
  const std::size_t dec_width = config.decoder_hidden.empty()
                                    ? config.rule_emb_size
                                    : config.decoder_hidden.back();
  p.decoder_out = diff::make_linear(dec_width, 3 * config.n_concepts, rng);
  p.concept_names.resize(config.n_concepts);
  for (std::size_t i = 0; i < config.n_concepts; ++i)
    p.concept_names[i] = "c" + std::to_string(i);
  p.task_names.resize(config.n_tasks);
  for (std::size_t t = 0; t < config.n_tasks; ++t)
    p.task_names[t] = "y" + std::to_string(t);
  p.rebuild_pin_mask();
  return p;
}

inline void reset_selector(ModelParams& p, std::uint64_t seed,
                           std::uint64_t reset_index) {
  Rng rng = Rng::substream(seed, "selector_reset", reset_index);
  const std::size_t sel_in = p.config.selector_input == SelectorInput::Embedding
                                 ? embedding_width(p.config)
                                 : p.config.n_concepts;
  p.selector_trunk = diff::make_mlp(sel_in, p.config.selector_hidden, rng);
  const std::size_t sel_width = p.config.selector_hidden.empty()
                                    ? sel_in
                                    : p.config.selector_hidden.back();
  p.selector_out = diff::make_linear(sel_width, p.total_rules(), rng);
}

namespace detail {

inline void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.values()) {
    if (!std::isfinite(v))
      throw NumericError(where + ": non-finite activation");
  }
}

inline Tensor checked_mlp(Tape* tape, const Mlp& m, const Tensor& x,
                          const std::string& name) {
  Tensor h = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    Tensor z = diff::linear_fwd(tape, m.layers[i], h);
    check_finite(z, name + ".layer" + std::to_string(i));
    h = ops::relu(tape, z);
  }
  return h;
}

}  // namespace detail

struct ForwardOut {
  Tensor trunk_emb;                    // (B, emb)
  Tensor concept_probs;                // (B, n_concepts)
  std::vector<Tensor> selector_logits; // per task: (B, rule_count)
  std::vector<Tensor> selector_probs;  // per task: (B, rule_count), rows simplex
  Tensor role_probs;                   // (total_rules * n_concepts, 3), rows simplex
  std::vector<std::size_t> rule_offsets;
  std::size_t n_concepts = 0;

  double role_prob(std::size_t task, std::size_t rule, std::size_t concept_idx,
                   rules::Role role) const {
    const std::size_t row = (rule_offsets[task] + rule) * n_concepts + concept_idx;
    return role_probs.values()[row * 3 + static_cast<std::size_t>(role)];
  }
  // Pointer to the (n_concepts x 3) role block of one rule.
  const double* role_block(std::size_t task, std::size_t rule) const {
    return role_probs.values().data() +
           (rule_offsets[task] + rule) * n_concepts * 3;
  }
};

inline ForwardOut forward(Tape* tape, const ModelParams& p, const Tensor& x) {
  const ModelConfig& cfg = p.config;
  if (x.rank() != 2 || x.shape()[1] != cfg.n_inputs) {
    throw std::invalid_argument("forward: input " + diff::shape_str(x.shape()) +
                                " does not match n_inputs=" +
                                std::to_string(cfg.n_inputs));
  }
  ForwardOut out;
  out.n_concepts = cfg.n_concepts;
  out.rule_offsets.resize(p.rulebook.size());
  for (std::size_t t = 0; t < p.rulebook.size(); ++t)
    out.rule_offsets[t] = p.rule_offset(t);

  out.trunk_emb = detail::checked_mlp(tape, p.trunk, x, "encoder.trunk");
  Tensor concept_logits = diff::linear_fwd(tape, p.concept_head, out.trunk_emb);
  detail::check_finite(concept_logits, "encoder.head");

  if (cfg.concept_groups.empty()) {
    out.concept_probs = ops::sigmoid(tape, concept_logits);
  } else {
    // Grouped columns get a softmax, the rest a sigmoid; reassemble in the
    // original column order.
    std::vector<bool> grouped(cfg.n_concepts, false);
    std::vector<std::size_t> perm;
    std::vector<Tensor> parts;
    for (const auto& g : cfg.concept_groups) {
      for (std::size_t i : g) {
        grouped[i] = true;
        perm.push_back(i);
      }
      parts.push_back(ops::softmax(tape, ops::gather_cols(tape, concept_logits, g), 1));
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < cfg.n_concepts; ++i)
      if (!grouped[i]) {
        rest.push_back(i);
        perm.push_back(i);
      }
    if (!rest.empty())
      parts.push_back(ops::sigmoid(tape, ops::gather_cols(tape, concept_logits, rest)));
    Tensor stacked = parts.size() == 1 ? parts[0] : ops::concat(tape, parts, 1);
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    out.concept_probs = ops::gather_cols(tape, stacked, inv);
  }

  const Tensor& sel_in = cfg.selector_input == SelectorInput::Embedding
                             ? out.trunk_emb
                             : out.concept_probs;
  Tensor sel_h = detail::checked_mlp(tape, p.selector_trunk, sel_in, "selector.trunk");
  Tensor sel_logits = diff::linear_fwd(tape, p.selector_out, sel_h);
  detail::check_finite(sel_logits, "selector.out");
  out.selector_logits.reserve(p.rulebook.size());
  out.selector_probs.reserve(p.rulebook.size());
  for (std::size_t t = 0; t < p.rulebook.size(); ++t) {
    std::vector<std::size_t> cols(p.rule_count(t));
    std::iota(cols.begin(), cols.end(), out.rule_offsets[t]);
    Tensor lt = ops::gather_cols(tape, sel_logits, cols);
    out.selector_logits.push_back(lt);
    out.selector_probs.push_back(ops::softmax(tape, lt, 1));
  }

  // Role distributions depend only on the rulebook and decoder, never on x.
  std::vector<Tensor> embs;
  embs.reserve(p.total_rules());
  for (const auto& task : p.rulebook)
    for (const RuleSlot& s : task) embs.push_back(s.embedding);
  Tensor stacked = embs.size() == 1 ? embs[0] : ops::concat(tape, embs, 0);
  Tensor dec_h = detail::checked_mlp(tape, p.decoder_trunk, stacked, "decoder.trunk");
  Tensor role_logits = diff::linear_fwd(tape, p.decoder_out, dec_h);
  detail::check_finite(role_logits, "decoder.out");
  Tensor flat = ops::reshape(tape, role_logits,
                             {p.total_rules() * cfg.n_concepts, 3});
  Tensor masked = ops::add(tape, flat, p.pin_mask);
  out.role_probs = ops::softmax(tape, masked, 1);
  return out;
}

// Selector branch alone for a caller-supplied input matrix (used when
// concept interventions have to reach a concept-fed selector).
inline std::vector<Tensor> selector_forward(const ModelParams& p,
                                            const Tensor& sel_in) {
  Tensor h = detail::checked_mlp(nullptr, p.selector_trunk, sel_in,
                                 "selector.trunk");
  Tensor logits = diff::linear_fwd(nullptr, p.selector_out, h);
  std::vector<Tensor> probs;
  probs.reserve(p.rulebook.size());
  for (std::size_t t = 0; t < p.rulebook.size(); ++t) {
    std::vector<std::size_t> cols(p.rule_count(t));
    std::iota(cols.begin(), cols.end(), p.rule_offset(t));
    probs.push_back(
        ops::softmax(nullptr, ops::gather_cols(nullptr, logits, cols), 1));
  }
  return probs;
}

// p(y=1|c,s) for one rule block: prod_i (pI + pP*[c=1] + pN*[c=0]).
// `roles` points at an (n x 3) row-major block ordered [P, N, I].
inline double task_likelihood(const std::vector<std::uint8_t>& c,
                              const double* roles) {
  double p = 1.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double pp = roles[i * 3 + 0];
    const double pn = roles[i * 3 + 1];
    const double pi = roles[i * 3 + 2];
    p *= pi + (c[i] ? pp : pn);
  }
  return p;
}

// p_reg(r = c | s) = prod_i (0.5*pI + pP*[c=1] + pN*[c=0]).
inline double reg_likelihood(const std::vector<std::uint8_t>& c,
                             const double* roles) {
  double p = 1.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double pp = roles[i * 3 + 0];
    const double pn = roles[i * 3 + 1];
    const double pi = roles[i * 3 + 2];
    p *= 0.5 * pi + (c[i] ? pp : pn);
  }
  return p;
}

inline std::vector<std::uint8_t> hard_concepts(const std::vector<double>& probs) {
  std::vector<std::uint8_t> bits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i)
    bits[i] = probs[i] >= 0.5 ? 1 : 0;  // ties at exactly 0.5 map to 1
  return bits;
}

struct Batch {
  Tensor x;                                  // (B, n_inputs), constant
  std::vector<std::vector<std::uint8_t>> c;  // B x n_concepts
  std::vector<std::vector<std::uint8_t>> y;  // B x n_tasks
  std::size_t size() const { return c.size(); }
};

// Negative mean per-example log of the regularized joint:
//   sum_i log p(c_i = c_hat_i | x)
// + sum_t w_t * log sum_s p(s|x) p(y=y_hat|c,s)^beta p_reg(r=c_hat|s)^y_hat
// Task and regularization factors see the ground-truth concepts when
// teacher_force is set, else the thresholded concept predictions.
inline Tensor objective(Tape* tape, const ModelParams& p, const Batch& batch,
                        bool teacher_force = true) {
  const ModelConfig& cfg = p.config;
  const std::size_t B = batch.size();
  if (B == 0) throw std::invalid_argument("objective: empty batch");
  ForwardOut fwd = forward(tape, p, batch.x);

  // Concept bits used by the task term.
  std::vector<std::vector<std::uint8_t>> cbits;
  if (teacher_force) {
    cbits = batch.c;
  } else {
    cbits.reserve(B);
    for (std::size_t n = 0; n < B; ++n) {
      std::vector<double> row(cfg.n_concepts);
      for (std::size_t i = 0; i < cfg.n_concepts; ++i)
        row[i] = fwd.concept_probs.values()[n * cfg.n_concepts + i];
      cbits.push_back(hard_concepts(row));
    }
  }

  Tensor C = Tensor::zeros({B, cfg.n_concepts});
  Tensor notC = Tensor::zeros({B, cfg.n_concepts});
  Tensor Cobs = Tensor::zeros({B, cfg.n_concepts});
  Tensor notCobs = Tensor::zeros({B, cfg.n_concepts});
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t i = 0; i < cfg.n_concepts; ++i) {
      C.values()[n * cfg.n_concepts + i] = cbits[n][i] ? 1.0 : 0.0;
      notC.values()[n * cfg.n_concepts + i] = cbits[n][i] ? 0.0 : 1.0;
      Cobs.values()[n * cfg.n_concepts + i] = batch.c[n][i] ? 1.0 : 0.0;
      notCobs.values()[n * cfg.n_concepts + i] = batch.c[n][i] ? 0.0 : 1.0;
    }
  }

  // Concept log-likelihood (always against observed concepts).
  Tensor ones_bc = Tensor::full({B, cfg.n_concepts}, 1.0);
  Tensor one_minus_probs =
      ops::add(tape, ops::scalar_mul(tape, fwd.concept_probs, -1.0), ones_bc);
  Tensor concept_ll = ops::sum_all(
      tape, ops::add(tape, ops::mul(tape, Cobs, ops::log(tape, fwd.concept_probs)),
                     ops::mul(tape, notCobs, ops::log(tape, one_minus_probs))));

  // Per-concept log factors shared by all tasks: (U, n_concepts) each.
  const std::size_t U = p.total_rules();
  Tensor pP = ops::reshape(tape, ops::gather_cols(tape, fwd.role_probs, {0}),
                           {U, cfg.n_concepts});
  Tensor pN = ops::reshape(tape, ops::gather_cols(tape, fwd.role_probs, {1}),
                           {U, cfg.n_concepts});
  Tensor pI = ops::reshape(tape, ops::gather_cols(tape, fwd.role_probs, {2}),
                           {U, cfg.n_concepts});
  Tensor L1 = ops::log(tape, ops::add(tape, pI, pP));
  Tensor L0 = ops::log(tape, ops::add(tape, pI, pN));
  Tensor halfI = ops::scalar_mul(tape, pI, 0.5);
  Tensor R1 = ops::log(tape, ops::add(tape, halfI, pP));
  Tensor R0 = ops::log(tape, ops::add(tape, halfI, pN));

  Tensor total = concept_ll;
  for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
    const std::size_t count = p.rule_count(t);
    std::vector<std::size_t> rows(count);
    std::iota(rows.begin(), rows.end(), fwd.rule_offsets[t]);
    Tensor L1t = ops::transpose(tape, ops::gather_rows(tape, L1, rows));
    Tensor L0t = ops::transpose(tape, ops::gather_rows(tape, L0, rows));
    Tensor R1t = ops::transpose(tape, ops::gather_rows(tape, R1, rows));
    Tensor R0t = ops::transpose(tape, ops::gather_rows(tape, R0, rows));

    // log p(y=1 | c, s=j) for every example/rule pair.
    Tensor logp1 = ops::add(tape, ops::matmul(tape, C, L1t),
                            ops::matmul(tape, notC, L0t));  // (B, count)
    Tensor p1 = ops::exp(tape, logp1);
    Tensor ones_bt = Tensor::full({B, count}, 1.0);
    Tensor logp0 =
        ops::log(tape, ops::add(tape, ops::scalar_mul(tape, p1, -1.0), ones_bt));

    Tensor ymask = Tensor::zeros({B, count});
    Tensor not_ymask = Tensor::zeros({B, count});
    Tensor weights = Tensor::zeros({B});
    for (std::size_t n = 0; n < B; ++n) {
      const bool pos = batch.y[n][t] != 0;
      for (std::size_t j = 0; j < count; ++j) {
        ymask.values()[n * count + j] = pos ? 1.0 : 0.0;
        not_ymask.values()[n * count + j] = pos ? 0.0 : 1.0;
      }
      weights.values()[n] = pos ? cfg.positive_weight : 1.0;
    }

    Tensor logpy = ops::add(tape, ops::mul(tape, ymask, logp1),
                            ops::mul(tape, not_ymask, logp0));
    Tensor logreg = ops::add(tape, ops::matmul(tape, C, R1t),
                             ops::matmul(tape, notC, R0t));
    Tensor inner = ops::add(
        tape,
        ops::add(tape, ops::log_softmax(tape, fwd.selector_logits[t], 1),
                 ops::scalar_mul(tape, logpy, cfg.beta)),
        ops::mul(tape, ymask, logreg));
    Tensor task_term = ops::logsumexp(tape, inner, 1);  // (B)
    total = ops::add(tape, total,
                     ops::sum_all(tape, ops::mul(tape, task_term, weights)));
  }

  Tensor loss = ops::scalar_mul(tape, total, -1.0 / static_cast<double>(B));
  if (!std::isfinite(loss.item()))
    throw NumericError("objective: non-finite loss");
  return loss;
}

// Mean per-example concept log-likelihood, for metrics and logging.
inline double concept_bce(const ModelParams& p, const Batch& batch) {
  ForwardOut fwd = forward(nullptr, p, batch.x);
  const std::size_t nc = p.config.n_concepts;
  double total = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (std::size_t i = 0; i < nc; ++i) {
      const double prob = fwd.concept_probs.values()[n * nc + i];
      const double q = batch.c[n][i] ? prob : 1.0 - prob;
      total += std::log(std::min(ops::kLogClampHi, std::max(ops::kLogClampLo, q)));
    }
  }
  return total / static_cast<double>(batch.size());
}

// Argmax decode of the whole rulebook into a symbolic theory.
inline rules::Rulebook decode_rulebook(const ModelParams& p) {
  ForwardOut fwd = forward(nullptr, p, Tensor::zeros({1, p.config.n_inputs}));
  rules::Rulebook book;
  book.concepts = p.concept_names;
  for (std::size_t t = 0; t < p.rulebook.size(); ++t) {
    rules::TaskRules task;
    task.name = p.task_names[t];
    for (std::size_t j = 0; j < p.rulebook[t].size(); ++j) {
      rules::SymbolicRule rule;
      rule.provenance = p.rulebook[t][j].provenance;
      const double* block = fwd.role_block(t, j);
      for (std::size_t i = 0; i < p.config.n_concepts; ++i) {
        rule.roles.push_back(rules::decode_role(
            block[i * 3 + 0], block[i * 3 + 1], block[i * 3 + 2]));
      }
      task.rules.push_back(std::move(rule));
    }
    book.tasks.push_back(std::move(task));
  }
  return book;
}

}  // namespace rulemem::model

#pragma once

// Rule interventions on a live model: pinning decoder logits so a concept's
// role is constrained under any future update, and inserting manual rules by
// fitting a fresh embedding against the frozen shared decoder.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "rulemem/adamw.hpp"
#include "rulemem/model.hpp"
#include "rulemem/rng.hpp"
#include "rulemem/rules.hpp"

namespace rulemem::rules {

enum class PinKind { ForbidP, ForbidN, ForceI, ForceRole };

struct RolePin {
  std::size_t task = 0;
  std::size_t rule = 0;
  std::size_t concept_index = 0;
  PinKind kind = PinKind::ForceI;
  Role role = Role::I;  // used by ForceRole
};

// Applies pins by masking the decoder logits at -1e9 (pre-softmax). The
// masked entries underflow to probability zero in 64-bit, so the decoded
// role respects the pin under any parameter update and the pinned logits
// receive exactly zero gradient through the softmax.
inline void pin_roles(model::ModelParams& params,
                      const std::vector<RolePin>& pins) {
  for (const RolePin& pin : pins) {
    if (pin.task >= params.rulebook.size() ||
        pin.rule >= params.rulebook[pin.task].size() ||
        pin.concept_index >= params.config.n_concepts) {
      throw std::invalid_argument("pin_roles: pin index out of range");
    }
    model::PinnedRole p;
    p.task = pin.task;
    p.rule = pin.rule;
    p.concept_idx = pin.concept_index;
    switch (pin.kind) {
      case PinKind::ForbidP:
        p.mask_p = true;
        break;
      case PinKind::ForbidN:
        p.mask_n = true;
        break;
      case PinKind::ForceI:
        p.mask_p = p.mask_n = true;
        break;
      case PinKind::ForceRole:
        p.mask_p = pin.role != Role::P;
        p.mask_n = pin.role != Role::N;
        p.mask_i = pin.role != Role::I;
        break;
    }
    params.pins.push_back(p);
  }
  params.rebuild_pin_mask();
}

struct EmbedFitConfig {
  std::size_t max_steps = 5000;
  double lr = 1e-2;
  double target_prob = 0.95;  // per-concept margin before declaring the fit done
};

namespace detail {

// Decodes one free embedding through the (frozen) decoder; returns the role
// probabilities as an (n_concepts x 3) value matrix.
inline model::Tensor decode_embedding(model::Tape* tape,
                                      const model::ModelParams& params,
                                      const model::Tensor& emb) {
  namespace ops = diff::ops;
  model::Tensor h = emb;
  for (const auto& l : params.decoder_trunk.layers)
    h = ops::relu(tape, diff::linear_fwd(tape, l, h));
  model::Tensor logits = diff::linear_fwd(tape, params.decoder_out, h);
  return ops::reshape(tape, logits, {params.config.n_concepts, 3});
}

}  // namespace detail

// Appends a manual rule to the model: a new rule embedding is optimized
// against the frozen shared decoder until its argmax decode reproduces the
// requested roles, then installed as a new (frozen by default) slot for the
// task. The selector head gains one zero-initialized logit for the slot.
// Throws if the fit budget is exhausted without reproducing the rule.
inline std::size_t extend_model(model::ModelParams& params,
                                diff::AdamW* optimizer, std::size_t task,
                                const SymbolicRule& rule, Rng& rng,
                                const EmbedFitConfig& fit = {}) {
  namespace ops = diff::ops;
  using model::Tensor;
  const model::ModelConfig& cfg = params.config;
  if (task >= params.rulebook.size())
    throw std::invalid_argument("extend_model: task index out of range");
  if (rule.roles.size() != cfg.n_concepts)
    throw std::invalid_argument("extend_model: rule length " +
                                std::to_string(rule.roles.size()) +
                                " does not match n_concepts=" +
                                std::to_string(cfg.n_concepts));

  Tensor emb = Tensor::zeros({1, cfg.rule_emb_size}, true);
  for (double& v : emb.values()) v = rng.normal(0.0, 1.0);

  Tensor target = Tensor::zeros({cfg.n_concepts, 3});
  for (std::size_t i = 0; i < cfg.n_concepts; ++i)
    target.values()[i * 3 + static_cast<std::size_t>(rule.roles[i])] = 1.0;

  diff::AdamW fit_opt(diff::AdamConfig{fit.lr, 0.9, 0.999, 1e-8, 0.0});
  diff::NamedParams fit_params{{"embedding", emb}};
  auto argmax_match = [&](const Tensor& probs) {
    for (std::size_t i = 0; i < cfg.n_concepts; ++i) {
      const double* row = probs.values().data() + i * 3;
      if (decode_role(row[0], row[1], row[2]) != rule.roles[i]) return false;
    }
    return true;
  };
  auto margin_ok = [&](const Tensor& probs) {
    for (std::size_t i = 0; i < cfg.n_concepts; ++i) {
      if (probs.values()[i * 3 + static_cast<std::size_t>(rule.roles[i])] <
          fit.target_prob)
        return false;
    }
    return true;
  };

  // Success means the argmax decode reproduces the rule; the probability
  // margin is pursued with whatever budget remains so later decoder updates
  // are less likely to flip the decode.
  for (std::size_t step = 0; step < fit.max_steps; ++step) {
    model::Tape tape;
    Tensor logits = detail::decode_embedding(&tape, params, emb);
    Tensor logp = ops::log_softmax(&tape, logits, 1);
    Tensor loss =
        ops::scalar_mul(&tape, ops::sum_all(&tape, ops::mul(&tape, logp, target)),
                        -1.0);
    {
      Tensor probs = ops::softmax(nullptr, logits, 1);
      if (argmax_match(probs) && margin_ok(probs)) break;
    }
    emb.zero_grad();
    tape.backward(loss);
    fit_opt.step(fit_params);
  }
  const bool fitted = [&] {
    Tensor logits = detail::decode_embedding(nullptr, params, emb);
    return argmax_match(ops::softmax(nullptr, logits, 1));
  }();
  // The fit propagated gradients into the decoder; discard them.
  for (auto& [name, t] : params.named_parameters()) {
    Tensor tensor = t;
    tensor.zero_grad();
  }
  if (!fitted) {
    throw std::runtime_error(
        "extend_model: embedding fit failed to reproduce rule '" +
        rule.role_string() + "' within " + std::to_string(fit.max_steps) +
        " steps");
  }

  emb.set_requires_grad(cfg.unfreeze_manual_rules);
  const std::size_t slot = params.rulebook[task].size();
  const std::size_t pos = params.rule_offset(task) + slot;  // global position
  const std::size_t old_total = params.total_rules();
  params.rulebook[task].push_back(
      model::RuleSlot{emb, Provenance::Manual});

  // Widen the selector head by one output at `pos` with a zero row so the
  // new option enters with neutral mass.
  const std::size_t in_dim = params.selector_out.in_dim();
  Tensor new_w = Tensor::zeros({in_dim, old_total + 1}, true);
  Tensor new_b = Tensor::zeros({old_total + 1}, true);
  std::vector<std::size_t> col_map(old_total);
  for (std::size_t c = 0; c < old_total; ++c)
    col_map[c] = c < pos ? c : c + 1;
  for (std::size_t r = 0; r < in_dim; ++r)
    for (std::size_t c = 0; c < old_total; ++c)
      new_w.values()[r * (old_total + 1) + col_map[c]] =
          params.selector_out.w.values()[r * old_total + c];
  for (std::size_t c = 0; c < old_total; ++c)
    new_b.values()[col_map[c]] = params.selector_out.b.values()[c];
  params.selector_out.w = new_w;
  params.selector_out.b = new_b;

  if (optimizer != nullptr) {
    std::vector<std::pair<std::size_t, std::size_t>> wmoves, bmoves;
    for (std::size_t r = 0; r < in_dim; ++r)
      for (std::size_t c = 0; c < old_total; ++c)
        wmoves.emplace_back(r * old_total + c, r * (old_total + 1) + col_map[c]);
    for (std::size_t c = 0; c < old_total; ++c)
      bmoves.emplace_back(c, col_map[c]);
    optimizer->remap("selector.out.w", in_dim * (old_total + 1), wmoves);
    optimizer->remap("selector.out.b", old_total + 1, bmoves);
  }

  params.rebuild_pin_mask();
  return slot;
}

}  // namespace rulemem::rules

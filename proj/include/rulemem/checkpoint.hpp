#pragma once

// Checkpoint file: one JSON document holding the model config, every
// parameter tensor, optimizer state, step counter and the RNG seed plus
// training progress. Written atomically (temp file + rename).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "rulemem/adamw.hpp"
#include "rulemem/model.hpp"

namespace rulemem::model {

struct Checkpoint {
  ModelParams params;
  AdamW optimizer;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t completed_epochs = 0;
};

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"values", t.values()}};
}

inline void load_tensor(Tensor& t, const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  auto values = j.at("values").get<std::vector<double>>();
  if (shape != t.shape() || values.size() != t.size()) {
    throw std::runtime_error("checkpoint: tensor shape mismatch");
  }
  t.values() = std::move(values);
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "rulemem-checkpoint-v1";
  j["config"] = ck.params.config;
  j["concept_names"] = ck.params.concept_names;
  j["task_names"] = ck.params.task_names;
  nlohmann::json counts = nlohmann::json::array();
  nlohmann::json prov = nlohmann::json::array();
  nlohmann::json frozen = nlohmann::json::array();
  for (const auto& task : ck.params.rulebook) {
    counts.push_back(task.size());
    nlohmann::json tp = nlohmann::json::array();
    nlohmann::json tf = nlohmann::json::array();
    for (const RuleSlot& s : task) {
      tp.push_back(s.provenance == rules::Provenance::Manual ? "manual"
                                                             : "learned");
      tf.push_back(!s.embedding.requires_grad());
    }
    prov.push_back(std::move(tp));
    frozen.push_back(std::move(tf));
  }
  j["rule_counts"] = std::move(counts);
  j["rule_provenance"] = std::move(prov);
  j["rule_frozen"] = std::move(frozen);
  nlohmann::json pins = nlohmann::json::array();
  for (const PinnedRole& pin : ck.params.pins) {
    pins.push_back({{"task", pin.task},
                    {"rule", pin.rule},
                    {"concept", pin.concept_idx},
                    {"mask_p", pin.mask_p},
                    {"mask_n", pin.mask_n},
                    {"mask_i", pin.mask_i}});
  }
  j["pins"] = std::move(pins);
  nlohmann::json params;
  for (const auto& [name, t] : ck.params.named_parameters())
    params[name] = detail::tensor_to_json(t);
  j["params"] = std::move(params);
  nlohmann::json opt;
  opt["lr"] = ck.optimizer.config().lr;
  opt["beta1"] = ck.optimizer.config().beta1;
  opt["beta2"] = ck.optimizer.config().beta2;
  opt["eps"] = ck.optimizer.config().eps;
  opt["weight_decay"] = ck.optimizer.config().weight_decay;
  opt["step"] = ck.optimizer.step_count();
  nlohmann::json moments;
  for (const auto& [name, mo] : ck.optimizer.moments())
    moments[name] = {{"m", mo.m}, {"v", mo.v}, {"t", mo.t}};
  opt["moments"] = std::move(moments);
  j["optimizer"] = std::move(opt);
  j["step"] = ck.step;
  j["seed"] = ck.seed;
  j["rng"] = {{"completed_epochs", ck.completed_epochs}};
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint ck;
  ModelConfig cfg = j.at("config").get<ModelConfig>();
  ck.seed = j.at("seed").get<std::uint64_t>();
  ck.params = init_params(cfg, ck.seed);
  ck.params.concept_names =
      j.value("concept_names", ck.params.concept_names);
  ck.params.task_names = j.value("task_names", ck.params.task_names);

  // Grow the rulebook / selector to the checkpointed structure before
  // loading values: counts may exceed config.n_rules after interventions.
  const auto counts = j.at("rule_counts").get<std::vector<std::size_t>>();
  const auto prov = j.at("rule_provenance");
  const auto frozen = j.at("rule_frozen");
  std::size_t total = 0;
  for (std::size_t t = 0; t < counts.size(); ++t) {
    while (ck.params.rulebook[t].size() < counts[t]) {
      Tensor e = Tensor::zeros({1, cfg.rule_emb_size}, true);
      ck.params.rulebook[t].push_back(RuleSlot{e, rules::Provenance::Learned});
    }
    for (std::size_t r = 0; r < counts[t]; ++r) {
      ck.params.rulebook[t][r].provenance =
          prov[t][r].get<std::string>() == "manual" ? rules::Provenance::Manual
                                                    : rules::Provenance::Learned;
      ck.params.rulebook[t][r].embedding.set_requires_grad(
          !frozen[t][r].get<bool>());
    }
    total += counts[t];
  }
  const std::size_t sel_width = cfg.selector_hidden.empty()
                                    ? (cfg.selector_input == SelectorInput::Embedding
                                           ? embedding_width(cfg)
                                           : cfg.n_concepts)
                                    : cfg.selector_hidden.back();
  if (ck.params.selector_out.out_dim() != total) {
    ck.params.selector_out.w = Tensor::zeros({sel_width, total}, true);
    ck.params.selector_out.b = Tensor::zeros({total}, true);
  }
  for (const auto& jp : j.at("pins")) {
    PinnedRole pin;
    pin.task = jp.at("task").get<std::size_t>();
    pin.rule = jp.at("rule").get<std::size_t>();
    pin.concept_idx = jp.at("concept").get<std::size_t>();
    pin.mask_p = jp.at("mask_p").get<bool>();
    pin.mask_n = jp.at("mask_n").get<bool>();
    pin.mask_i = jp.at("mask_i").get<bool>();
    ck.params.pins.push_back(pin);
  }
  ck.params.rebuild_pin_mask();

  const auto& jparams = j.at("params");
  for (auto& [name, t] : ck.params.named_parameters()) {
    Tensor tensor = t;
    detail::load_tensor(tensor, jparams.at(name));
  }

  const auto& jopt = j.at("optimizer");
  diff::AdamConfig ocfg;
  ocfg.lr = jopt.at("lr").get<double>();
  ocfg.beta1 = jopt.at("beta1").get<double>();
  ocfg.beta2 = jopt.at("beta2").get<double>();
  ocfg.eps = jopt.at("eps").get<double>();
  ocfg.weight_decay = jopt.at("weight_decay").get<double>();
  ck.optimizer = AdamW(ocfg);
  ck.optimizer.set_step_count(jopt.at("step").get<std::uint64_t>());
  for (const auto& [name, mo] : jopt.at("moments").items()) {
    AdamW::Moments m;
    m.m = mo.at("m").get<std::vector<double>>();
    m.v = mo.at("v").get<std::vector<double>>();
    m.t = mo.at("t").get<std::uint64_t>();
    ck.optimizer.moments()[name] = std::move(m);
  }
  ck.step = j.at("step").get<std::uint64_t>();
  ck.completed_epochs = j.at("rng").at("completed_epochs").get<std::uint64_t>();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << checkpoint_to_json(ck).dump() << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  is >> j;
  return checkpoint_from_json(j);
}

}  // namespace rulemem::model

// Command-line front end: dataset generation, training, evaluation, rulebook
// decoding, property verification, rule/pin interventions and the built-in
// numeric oracles. stdout carries machine-readable JSON; logs go to stderr.
//
// Exit codes: 0 success (or all properties entailed), 1 verification failure,
// 2 usage error, 3 numeric abort.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rulemem/checkpoint.hpp"
#include "rulemem/datasets.hpp"
#include "rulemem/intervention.hpp"
#include "rulemem/model.hpp"
#include "rulemem/rules.hpp"
#include "rulemem/trainkit.hpp"
#include "rulemem/verify.hpp"

using namespace rulemem;

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  is >> j;
  return j;
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(2) << "\n";
}

void fill_dims_from_data(model::ModelConfig& cfg, const data::Dataset& ds) {
  if (cfg.n_inputs == 0) cfg.n_inputs = ds.n_inputs();
  if (cfg.n_concepts == 0) cfg.n_concepts = ds.n_concepts();
  if (cfg.n_tasks <= 1) cfg.n_tasks = ds.n_tasks();
}

void log_config(const nlohmann::json& j, std::uint64_t seed) {
  std::cerr << "config: " << j.dump() << "\n";
  std::cerr << "seed: " << seed << "\n";
}

std::size_t task_index(const model::ModelParams& params, const nlohmann::json& v) {
  if (v.is_number_unsigned() || v.is_number_integer())
    return v.get<std::size_t>();
  const std::string name = v.get<std::string>();
  for (std::size_t t = 0; t < params.task_names.size(); ++t)
    if (params.task_names[t] == name) return t;
  throw std::runtime_error("unknown task '" + name + "'");
}

std::size_t concept_index(const model::ModelParams& params,
                          const nlohmann::json& v) {
  if (v.is_number_unsigned() || v.is_number_integer())
    return v.get<std::size_t>();
  const std::string name = v.get<std::string>();
  for (std::size_t i = 0; i < params.concept_names.size(); ++i)
    if (params.concept_names[i] == name) return i;
  throw std::runtime_error("unknown concept '" + name + "'");
}

// --- oracle-check ------------------------------------------------------------

bool oracle_eval(const std::vector<int>& assign,
                 const std::vector<std::uint8_t>& c) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (assign[i] == 0 && c[i] == 0) return false;
    if (assign[i] == 1 && c[i] != 0) return false;
  }
  return true;
}

// Full 3^n_C role-assignment marginal of p(y | c, s).
double oracle_task_prob(const double* roles, const std::vector<std::uint8_t>& c,
                        bool y) {
  const std::size_t n = c.size();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= 3;
  double prob = 0.0;
  std::vector<int> assign(n);
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t rem = code;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = static_cast<int>(rem % 3);
      rem /= 3;
    }
    double p = 1.0;
    for (std::size_t i = 0; i < n; ++i) p *= roles[i * 3 + assign[i]];
    if (oracle_eval(assign, c) == y) prob += p;
  }
  return prob;
}

int run_oracle_check(const model::Checkpoint& ck, const data::Dataset& ds,
                     std::size_t n_cases) {
  const model::ModelParams& params = ck.params;
  if (params.config.n_concepts > 12) {
    std::cerr << "oracle-check: " << params.config.n_concepts
              << " concepts exceed the 12-concept enumeration budget\n";
    return 2;
  }
  Rng rng = Rng::substream(ck.seed, "oracle_check");
  double max_lik_dev = 0.0;
  for (std::size_t k = 0; k < n_cases; ++k) {
    const std::size_t idx = rng.below(ds.examples.size());
    model::Batch b = data::make_batch(ds, {idx});
    model::ForwardOut fwd = model::forward(nullptr, params, b.x);
    const data::Example& ex = ds.examples[idx];
    for (std::size_t t = 0; t < params.config.n_tasks; ++t) {
      double factored = 0.0, brute = 0.0;
      const std::size_t count = params.rule_count(t);
      for (std::size_t j = 0; j < count; ++j) {
        const double sel = fwd.selector_probs[t].values()[j];
        const double p1 = model::task_likelihood(ex.c, fwd.role_block(t, j));
        factored += sel * (ex.y[t] ? p1 : 1.0 - p1);
        brute += sel * oracle_task_prob(fwd.role_block(t, j), ex.c, ex.y[t] != 0);
      }
      max_lik_dev = std::max(max_lik_dev, std::fabs(factored - brute));
    }
  }

  // Finite-difference gradient oracle on a small probe batch.
  std::vector<std::size_t> probe_idx;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, ds.examples.size()); ++i)
    probe_idx.push_back(i);
  model::Batch probe = data::make_batch(ds, probe_idx);
  model::ModelParams work = params.clone();
  diff::Tape tape;
  diff::Tensor loss = model::objective(&tape, work, probe);
  work.zero_grads();
  tape.backward(loss);
  double max_grad_err = 0.0;
  const double h = 1e-5;
  for (auto& [name, t] : work.named_parameters()) {
    diff::Tensor p = t;
    for (int c = 0; c < 3; ++c) {
      const std::size_t i = rng.below(p.size());
      const double keep = p.values()[i];
      p.values()[i] = keep + h;
      const double up = model::objective(nullptr, work, probe).item();
      p.values()[i] = keep - h;
      const double down = model::objective(nullptr, work, probe).item();
      p.values()[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad()[i];
      max_grad_err = std::max(
          max_grad_err,
          std::fabs(analytic - numeric) /
              std::max({1.0, std::fabs(analytic), std::fabs(numeric)}));
    }
  }
  nlohmann::json out{{"cases", n_cases},
                     {"max_likelihood_deviation", max_lik_dev},
                     {"max_gradient_rel_error", max_grad_err}};
  std::cout << out.dump() << "\n";
  std::cerr << "oracle-check: max likelihood deviation " << max_lik_dev
            << ", max gradient relative error " << max_grad_err << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concept-rule mixture models: train, decode, verify"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_kind = "pairsum";
  data::GeneratorSpec gen_spec;
  std::string gen_out;
  std::vector<std::size_t> gen_drop{0, 1};
  gen->add_option("--kind", gen_kind, "pairsum | paritycolor | pairsum_incomplete");
  gen->add_option("--digits", gen_spec.digits, "digits per image");
  gen->add_option("--sigma", gen_spec.noise_sigma, "input noise level");
  gen->add_option("--n", gen_spec.n_examples, "number of examples");
  gen->add_option("--seed", gen_spec.seed, "generator seed");
  gen->add_option("--drop", gen_drop, "digits whose concepts are dropped");
  gen->add_option("--out", gen_out, "output JSONL path")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model from a config");
  std::string tr_config, tr_data, tr_out, tr_history;
  tr->add_option("--config", tr_config, "flat JSON train+model config")->required();
  tr->add_option("--data", tr_data, "training dataset (JSONL)")->required();
  tr->add_option("--out", tr_out, "checkpoint output path")->required();
  tr->add_option("--history", tr_history, "metrics history output (JSONL)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset path")->required();

  // decode
  auto* de = app.add_subcommand("decode", "decode the rulebook of a checkpoint");
  std::string de_ckpt, de_out;
  de->add_option("--ckpt", de_ckpt, "checkpoint path")->required();
  de->add_option("--out", de_out, "rulebook JSON output path")->required();

  // verify
  auto* ve = app.add_subcommand("verify", "check properties against a rulebook");
  std::string ve_rules, ve_props, ve_report;
  ve->add_option("--rules", ve_rules, "rulebook JSON path")->required();
  ve->add_option("--props", ve_props, "property file (one formula per line)")
      ->required();
  ve->add_option("--report", ve_report, "write the JSON report here too");

  // intervene
  auto* iv = app.add_subcommand("intervene", "edit a checkpoint mid-training");
  std::string iv_ckpt, iv_data, iv_out, iv_add, iv_pins, iv_config;
  std::size_t iv_resume = 0;
  iv->add_option("--ckpt", iv_ckpt, "checkpoint path")->required();
  iv->add_option("--data", iv_data, "training dataset path")->required();
  iv->add_option("--out", iv_out, "output checkpoint path")->required();
  iv->add_option("--config", iv_config, "train config (defaults if omitted)");
  iv->add_option("--add-rules", iv_add, "JSON list of {task, roles} to add");
  iv->add_option("--pins", iv_pins, "JSON list of {task, rule, concept, pin}");
  iv->add_option("--resume-epochs", iv_resume, "epochs to continue after the edit");

  // oracle-check
  auto* oc = app.add_subcommand("oracle-check", "run the built-in numeric oracles");
  std::string oc_ckpt, oc_data;
  std::size_t oc_cases = 100;
  oc->add_option("--ckpt", oc_ckpt, "checkpoint path")->required();
  oc->add_option("--data", oc_data, "dataset path")->required();
  oc->add_option("--n-cases", oc_cases, "number of sampled cases");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      gen_spec.kind = data::kind_from_name(gen_kind);
      gen_spec.dropped_concepts = gen_drop;
      log_config(data::spec_to_json(gen_spec), gen_spec.seed);
      data::Dataset ds = data::generate(gen_spec);
      data::save_jsonl(ds, gen_out);
      std::cout << nlohmann::json{{"examples", ds.examples.size()},
                                  {"n_concepts", ds.n_concepts()},
                                  {"n_tasks", ds.n_tasks()},
                                  {"out", gen_out}}
                       .dump()
                << "\n";
      return 0;
    }

    if (tr->parsed()) {
      nlohmann::json raw = read_json_file(tr_config);
      train::TrainConfig tc = raw.get<train::TrainConfig>();
      model::ModelConfig mc = raw.get<model::ModelConfig>();
      data::Dataset ds = data::load_jsonl(tr_data);
      fill_dims_from_data(mc, ds);
      mc.validate();
      nlohmann::json resolved, jm;
      to_json(resolved, tc);
      to_json(jm, mc);
      resolved.update(jm);
      log_config(resolved, tc.seed);

      model::ModelParams params = model::init_params(mc, tc.seed);
      params.concept_names = ds.concept_names;
      params.task_names = ds.task_names;
      tc.checkpoint_path = tr_out;
      train::History hist = train::train_model(params, ds, tc);
      if (!tr_history.empty()) train::save_history(hist, tr_history);
      train::MetricsReport m =
          ds.ground_truth
              ? train::evaluate_with_reference(params, ds, *ds.ground_truth)
              : train::evaluate(params, ds);
      nlohmann::json out{{"checkpoint", tr_out},
                         {"epochs", tc.epochs},
                         {"final_train_metrics", train::metrics_to_json(m)}};
      std::cout << out.dump() << "\n";
      return 0;
    }

    if (ev->parsed()) {
      model::Checkpoint ck = model::load_checkpoint(ev_ckpt);
      data::Dataset ds = data::load_jsonl(ev_data);
      nlohmann::json jm;
      to_json(jm, ck.params.config);
      log_config(jm, ck.seed);
      train::MetricsReport m =
          ds.ground_truth
              ? train::evaluate_with_reference(ck.params, ds, *ds.ground_truth)
              : train::evaluate(ck.params, ds);
      std::cout << train::metrics_to_json(m).dump() << "\n";
      return 0;
    }

    if (de->parsed()) {
      model::Checkpoint ck = model::load_checkpoint(de_ckpt);
      nlohmann::json jm;
      to_json(jm, ck.params.config);
      log_config(jm, ck.seed);
      rules::Rulebook book = model::decode_rulebook(ck.params);
      rules::save_rulebook(book, de_out);
      std::cout << rules::rulebook_to_json(book).dump() << "\n";
      std::cerr << rules::render_rulebook(book);
      return 0;
    }

    if (ve->parsed()) {
      log_config(nlohmann::json{{"rules", ve_rules}, {"props", ve_props}}, 0);
      rules::Rulebook book = rules::load_rulebook(ve_rules);
      verify::PropertyReport report = verify::check_property_file(book, ve_props);
      nlohmann::json j = verify::report_to_json(report, book);
      std::cout << j.dump() << "\n";
      if (!ve_report.empty()) write_json_file(j, ve_report);
      for (const verify::PropertyResult& r : report.results) {
        std::cerr << (r.verdict.entailed ? "entailed    " : "FALSIFIED   ")
                  << r.source << "\n";
      }
      return report.all_entailed ? 0 : 1;
    }

    if (iv->parsed()) {
      model::Checkpoint ck = model::load_checkpoint(iv_ckpt);
      data::Dataset ds = data::load_jsonl(iv_data);
      train::TrainConfig tc;
      if (!iv_config.empty())
        tc = read_json_file(iv_config).get<train::TrainConfig>();
      else
        tc.learning_rate = ck.optimizer.config().lr;
      tc.seed = ck.seed;  // stream continuity with the original run
      tc.checkpoint_path = iv_out;
      nlohmann::json jt;
      to_json(jt, tc);
      log_config(jt, ck.seed);

      train::Trainer trn(std::move(ck.params), ds, tc);
      trn.restore_state(ck.optimizer, ck.completed_epochs, ck.step);

      std::size_t edits = 0;
      if (!iv_add.empty()) {
        nlohmann::json adds = read_json_file(iv_add);
        std::size_t counter = 0;
        for (const auto& ja : adds) {
          const std::size_t task = task_index(trn.params(), ja.at("task"));
          rules::SymbolicRule rule = rules::SymbolicRule::from_string(
              ja.at("roles").get<std::string>(), rules::Provenance::Manual);
          Rng rng = Rng::substream(ck.seed, "manual", counter++);
          rules::extend_model(trn.params(), &trn.optimizer(), task, rule, rng);
          std::cerr << "added rule " << ja.at("roles").get<std::string>()
                    << " to task " << trn.params().task_names[task] << "\n";
          ++edits;
        }
      }
      if (!iv_pins.empty()) {
        nlohmann::json jpins = read_json_file(iv_pins);
        std::vector<rules::RolePin> pins;
        for (const auto& jp : jpins) {
          rules::RolePin pin;
          pin.task = task_index(trn.params(), jp.at("task"));
          pin.rule = jp.at("rule").get<std::size_t>();
          pin.concept_index = concept_index(trn.params(), jp.at("concept"));
          const std::string kind = jp.at("pin").get<std::string>();
          if (kind == "forbid_P") {
            pin.kind = rules::PinKind::ForbidP;
          } else if (kind == "forbid_N") {
            pin.kind = rules::PinKind::ForbidN;
          } else if (kind == "force_I") {
            pin.kind = rules::PinKind::ForceI;
          } else if (kind == "force_P") {
            pin.kind = rules::PinKind::ForceRole;
            pin.role = rules::Role::P;
          } else if (kind == "force_N") {
            pin.kind = rules::PinKind::ForceRole;
            pin.role = rules::Role::N;
          } else {
            throw std::runtime_error("unknown pin kind '" + kind + "'");
          }
          pins.push_back(pin);
        }
        rules::pin_roles(trn.params(), pins);
        std::cerr << "applied " << pins.size() << " pins\n";
        edits += pins.size();
      }
      if (edits > 0) trn.reset_best();
      trn.run_epochs(iv_resume);
      trn.finalize();
      nlohmann::json out{{"checkpoint", iv_out},
                         {"resumed_epochs", iv_resume},
                         {"total_epochs", trn.epoch()}};
      std::cout << out.dump() << "\n";
      return 0;
    }

    if (oc->parsed()) {
      model::Checkpoint ck = model::load_checkpoint(oc_ckpt);
      data::Dataset ds = data::load_jsonl(oc_data);
      nlohmann::json jm;
      to_json(jm, ck.params.config);
      log_config(jm, ck.seed);
      return run_oracle_check(ck, ds, oc_cases);
    }
  } catch (const diff::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

#pragma once

// Training loop with periodic selector re-initialization, best-checkpoint
// restore, evaluation metrics and scripted rule interventions. All
// randomness is derived from (seed, purpose, epoch index), so a run can be
// split into phases (train / intervene / resume) without perturbing the
// stream: an intervention with an empty addition list reproduces a plain
// run bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rulemem/checkpoint.hpp"
#include "rulemem/datasets.hpp"
#include "rulemem/intervention.hpp"
#include "rulemem/model.hpp"
#include "rulemem/rng.hpp"
#include "rulemem/rules.hpp"

namespace rulemem::train {

using diff::AdamW;
using model::ModelParams;
using model::Tensor;

enum class RestorePolicy { BestValLoss, BestTrainLoss, Last };

inline std::string policy_name(RestorePolicy p) {
  switch (p) {
    case RestorePolicy::BestValLoss: return "best_val_loss";
    case RestorePolicy::BestTrainLoss: return "best_train_loss";
    default: return "last";
  }
}

inline RestorePolicy policy_from_name(const std::string& s) {
  if (s == "best_val_loss") return RestorePolicy::BestValLoss;
  if (s == "best_train_loss") return RestorePolicy::BestTrainLoss;
  if (s == "last") return RestorePolicy::Last;
  throw std::invalid_argument("unknown restore policy '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::size_t selector_reset_every = 40;  // epochs; 0 = never
  bool teacher_force_concepts = true;
  std::string checkpoint_path;  // empty = keep snapshots in memory only
  std::size_t eval_every = 10;  // epochs
  double beta = 1.0;            // forwarded into the model config
  double positive_weight = 1.0; // forwarded into the model config
  double weight_decay = 0.0;
  RestorePolicy restore_policy = RestorePolicy::BestValLoss;
  double val_fraction = 0.1;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"seed", c.seed},
                     {"selector_reset_every", c.selector_reset_every},
                     {"teacher_force_concepts", c.teacher_force_concepts},
                     {"checkpoint_path", c.checkpoint_path},
                     {"eval_every", c.eval_every},
                     {"beta", c.beta},
                     {"positive_weight", c.positive_weight},
                     {"weight_decay", c.weight_decay},
                     {"restore_policy", policy_name(c.restore_policy)},
                     {"val_fraction", c.val_fraction}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.seed = j.value("seed", d.seed);
  c.selector_reset_every = j.value("selector_reset_every", d.selector_reset_every);
  c.teacher_force_concepts =
      j.value("teacher_force_concepts", d.teacher_force_concepts);
  c.checkpoint_path = j.value("checkpoint_path", d.checkpoint_path);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.beta = j.value("beta", d.beta);
  c.positive_weight = j.value("positive_weight", d.positive_weight);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.restore_policy =
      policy_from_name(j.value("restore_policy", policy_name(d.restore_policy)));
  c.val_fraction = j.value("val_fraction", d.val_fraction);
}

struct MetricsReport {
  double task_subset_accuracy = 0.0;
  std::vector<double> concept_accuracy;
  double mean_concept_accuracy = 0.0;
  double nll = 0.0;
  std::optional<rules::RecoveryScore> rule_recovery;
};

inline nlohmann::json metrics_to_json(const MetricsReport& m) {
  nlohmann::json j{{"task_subset_accuracy", m.task_subset_accuracy},
                   {"concept_accuracy", m.concept_accuracy},
                   {"mean_concept_accuracy", m.mean_concept_accuracy},
                   {"nll", m.nll}};
  if (m.rule_recovery) {
    j["rule_recovery"] = {{"matched", m.rule_recovery->matched},
                          {"missing", m.rule_recovery->missing},
                          {"spurious", m.rule_recovery->spurious}};
  }
  return j;
}

struct EvalRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double task_subset_accuracy = 0.0;
  double mean_concept_accuracy = 0.0;
};

using History = std::vector<EvalRecord>;

inline void save_history(const History& h, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const EvalRecord& r : h) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"step", r.step},
                     {"train_loss", r.train_loss},
                     {"task_subset_accuracy", r.task_subset_accuracy},
                     {"mean_concept_accuracy", r.mean_concept_accuracy}};
    if (r.val_loss) j["val_loss"] = *r.val_loss;
    os << j.dump() << "\n";
  }
}

// Hard prediction pipeline: decoded rulebook (one-hot role collapse),
// thresholded concepts, argmax selector, symbolic evaluation.
struct HardPredictions {
  std::vector<std::vector<std::uint8_t>> concepts;   // thresholded predictions
  std::vector<std::vector<std::size_t>> selections;  // argmax rule per task
  std::vector<std::vector<std::uint8_t>> tasks;      // rule evaluations
};

inline HardPredictions predict_hard(const ModelParams& params,
                                    const data::Dataset& ds,
                                    bool intervene_concepts = false,
                                    std::size_t chunk = 2048) {
  const rules::Rulebook book = model::decode_rulebook(params);
  HardPredictions out;
  const std::size_t N = ds.examples.size();
  out.concepts.reserve(N);
  out.selections.reserve(N);
  out.tasks.reserve(N);
  // An intervention replaces the concept distribution with the ground truth
  // everywhere downstream; a concept-fed selector therefore sees the true
  // bits too.
  const bool intervene_selector =
      intervene_concepts &&
      params.config.selector_input == model::SelectorInput::ConceptProbs;
  for (std::size_t start = 0; start < N; start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, N - start));
    std::iota(idx.begin(), idx.end(), start);
    model::Batch batch = data::make_batch(ds, idx);
    model::ForwardOut fwd = model::forward(nullptr, params, batch.x);
    std::vector<Tensor> sel_probs = fwd.selector_probs;
    if (intervene_selector) {
      Tensor true_c = Tensor::zeros({idx.size(), params.config.n_concepts});
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t i = 0; i < params.config.n_concepts; ++i)
          true_c.values()[r * params.config.n_concepts + i] =
              ds.examples[idx[r]].c[i] ? 1.0 : 0.0;
      sel_probs = model::selector_forward(params, true_c);
    }
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<double> probs(params.config.n_concepts);
      for (std::size_t i = 0; i < probs.size(); ++i)
        probs[i] = fwd.concept_probs.values()[r * probs.size() + i];
      std::vector<std::uint8_t> chat = model::hard_concepts(probs);
      std::vector<std::size_t> sel(params.config.n_tasks);
      for (std::size_t t = 0; t < params.config.n_tasks; ++t) {
        const Tensor& sp = sel_probs[t];
        const std::size_t count = sp.shape()[1];
        std::size_t best = 0;
        for (std::size_t jr = 1; jr < count; ++jr)
          if (sp.values()[r * count + jr] > sp.values()[r * count + best])
            best = jr;
        sel[t] = best;
      }
      const std::vector<std::uint8_t>& eval_bits =
          intervene_concepts ? ds.examples[idx[r]].c : chat;
      out.tasks.push_back(rules::global_predict(book, sel, eval_bits));
      out.concepts.push_back(std::move(chat));
      out.selections.push_back(std::move(sel));
    }
  }
  return out;
}

inline MetricsReport evaluate(const ModelParams& params,
                              const data::Dataset& ds,
                              bool intervene_concepts = false) {
  MetricsReport m;
  const std::size_t N = ds.examples.size();
  if (N == 0) throw std::invalid_argument("evaluate: empty dataset");
  HardPredictions pred = predict_hard(params, ds, intervene_concepts);
  m.concept_accuracy.assign(params.config.n_concepts, 0.0);
  std::size_t subset_ok = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < params.config.n_concepts; ++i)
      if (pred.concepts[n][i] == ds.examples[n].c[i])
        m.concept_accuracy[i] += 1.0;
    if (pred.tasks[n] == ds.examples[n].y) ++subset_ok;
  }
  for (double& a : m.concept_accuracy) a /= static_cast<double>(N);
  m.mean_concept_accuracy =
      std::accumulate(m.concept_accuracy.begin(), m.concept_accuracy.end(), 0.0) /
      static_cast<double>(std::max<std::size_t>(1, m.concept_accuracy.size()));
  m.task_subset_accuracy = static_cast<double>(subset_ok) / static_cast<double>(N);

  // Mean negative log-likelihood of (concepts, tasks) under the exact model.
  double nll = 0.0;
  const std::size_t chunk = 2048;
  for (std::size_t start = 0; start < N; start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, N - start));
    std::iota(idx.begin(), idx.end(), start);
    model::Batch batch = data::make_batch(ds, idx);
    model::ForwardOut fwd = model::forward(nullptr, params, batch.x);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const data::Example& ex = ds.examples[idx[r]];
      double ll = 0.0;
      for (std::size_t i = 0; i < params.config.n_concepts; ++i) {
        const double p =
            fwd.concept_probs.values()[r * params.config.n_concepts + i];
        const double q = ex.c[i] ? p : 1.0 - p;
        ll += std::log(std::max(1e-12, std::min(1.0, q)));
      }
      for (std::size_t t = 0; t < params.config.n_tasks; ++t) {
        const std::size_t count = params.rule_count(t);
        double py = 0.0;
        for (std::size_t jr = 0; jr < count; ++jr) {
          const double p1 = model::task_likelihood(ex.c, fwd.role_block(t, jr));
          const double sel = fwd.selector_probs[t].values()[r * count + jr];
          py += sel * (ex.y[t] ? p1 : 1.0 - p1);
        }
        ll += std::log(std::max(1e-12, std::min(1.0, py)));
      }
      nll -= ll;
    }
  }
  m.nll = nll / static_cast<double>(N);
  return m;
}

inline MetricsReport evaluate_with_reference(const ModelParams& params,
                                             const data::Dataset& ds,
                                             const rules::Rulebook& reference) {
  MetricsReport m = evaluate(params, ds);
  m.rule_recovery =
      rules::rule_recovery_score(model::decode_rulebook(params), reference);
  return m;
}

// Task accuracies before and after replacing predicted concepts with ground
// truth at the task-prediction stage.
struct InterventionEffect {
  double before = 0.0;
  double after = 0.0;
};

inline InterventionEffect concept_intervention_eval(const ModelParams& params,
                                                    const data::Dataset& ds) {
  InterventionEffect fx;
  fx.before = evaluate(params, ds, false).task_subset_accuracy;
  fx.after = evaluate(params, ds, true).task_subset_accuracy;
  return fx;
}

class Trainer {
 public:
  Trainer(ModelParams params, data::Dataset dataset, TrainConfig config)
      : params_(std::move(params)), dataset_(std::move(dataset)), cfg_(config) {
    params_.config.beta = cfg_.beta;
    params_.config.positive_weight = cfg_.positive_weight;
    optimizer_ = AdamW(diff::AdamConfig{cfg_.learning_rate, 0.9, 0.999, 1e-8,
                                        cfg_.weight_decay});
    std::vector<std::size_t> all(dataset_.examples.size());
    std::iota(all.begin(), all.end(), 0);
    if (cfg_.restore_policy == RestorePolicy::BestValLoss &&
        cfg_.val_fraction > 0.0) {
      Rng split = Rng::substream(cfg_.seed, "split");
      split.shuffle(all);
      const std::size_t n_val = static_cast<std::size_t>(
          cfg_.val_fraction * static_cast<double>(all.size()));
      val_idx_.assign(all.begin(), all.begin() + n_val);
      train_idx_.assign(all.begin() + n_val, all.end());
      std::sort(val_idx_.begin(), val_idx_.end());
      std::sort(train_idx_.begin(), train_idx_.end());
    } else {
      train_idx_ = std::move(all);
    }
  }

  void run_epochs(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      if (cfg_.selector_reset_every > 0 && epoch_ > 0 &&
          epoch_ % cfg_.selector_reset_every == 0) {
        model::reset_selector(params_, cfg_.seed, epoch_);
        optimizer_.reset_prefix("selector.");
      }
      run_one_epoch();
      ++epoch_;
      if (cfg_.eval_every > 0 && epoch_ % cfg_.eval_every == 0) eval_point();
    }
  }

  // Restores weights per policy and writes the final checkpoint.
  void finalize() {
    if (cfg_.eval_every == 0 || epoch_ % cfg_.eval_every != 0) eval_point();
    if (cfg_.restore_policy != RestorePolicy::Last && best_params_) {
      params_ = best_params_->clone();
    }
    write_checkpoint();
  }

  // Interventions change the model; snapshots taken before them have the old
  // structure, so best-so-far tracking restarts.
  void reset_best() {
    best_params_.reset();
    best_loss_ = std::numeric_limits<double>::infinity();
  }

  // Resumes from checkpointed progress: epoch-indexed streams continue where
  // the original run stopped. The passed optimizer keeps its own settings.
  void restore_state(AdamW optimizer, std::size_t completed_epochs,
                     std::uint64_t steps) {
    optimizer_ = std::move(optimizer);
    epoch_ = completed_epochs;
    step_ = steps;
  }

  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  AdamW& optimizer() { return optimizer_; }
  const History& history() const { return history_; }
  std::size_t epoch() const { return epoch_; }
  std::uint64_t step() const { return step_; }
  const data::Dataset& dataset() const { return dataset_; }
  const std::vector<std::size_t>& train_indices() const { return train_idx_; }
  const std::vector<std::size_t>& val_indices() const { return val_idx_; }
  const TrainConfig& config() const { return cfg_; }

  double full_loss(const std::vector<std::size_t>& indices) {
    if (indices.empty()) return 0.0;
    double total = 0.0;
    const std::size_t chunk = 2048;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
      std::vector<std::size_t> slice(
          indices.begin() + start,
          indices.begin() + std::min(indices.size(), start + chunk));
      model::Batch batch = data::make_batch(dataset_, slice);
      Tensor loss =
          model::objective(nullptr, params_, batch, cfg_.teacher_force_concepts);
      total += loss.item() * static_cast<double>(slice.size());
    }
    return total / static_cast<double>(indices.size());
  }

 private:
  void run_one_epoch() {
    std::vector<std::size_t> order = train_idx_;
    Rng shuffle = Rng::substream(cfg_.seed, "shuffle", epoch_);
    shuffle.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += cfg_.batch_size) {
      std::vector<std::size_t> slice(
          order.begin() + start,
          order.begin() + std::min(order.size(), start + cfg_.batch_size));
      model::Batch batch = data::make_batch(dataset_, slice);
      diff::Tape tape;
      Tensor loss;
      try {
        loss = model::objective(&tape, params_, batch,
                                cfg_.teacher_force_concepts);
      } catch (const diff::NumericError& e) {
        throw diff::NumericError("epoch " + std::to_string(epoch_) + " step " +
                                 std::to_string(step_) + ": " + e.what());
      }
      params_.zero_grads();
      tape.backward(loss);
      optimizer_.step(params_.named_parameters());
      ++step_;
    }
  }

  void eval_point() {
    EvalRecord rec;
    rec.epoch = epoch_;
    rec.step = step_;
    rec.train_loss = full_loss(train_idx_);
    double tracked = rec.train_loss;
    if (!val_idx_.empty()) {
      rec.val_loss = full_loss(val_idx_);
      if (cfg_.restore_policy == RestorePolicy::BestValLoss)
        tracked = *rec.val_loss;
    }
    const std::vector<std::size_t>& metric_idx =
        val_idx_.empty() ? train_idx_ : val_idx_;
    data::Dataset sub;
    sub.spec = dataset_.spec;
    sub.concept_names = dataset_.concept_names;
    sub.task_names = dataset_.task_names;
    for (std::size_t i : metric_idx) sub.examples.push_back(dataset_.examples[i]);
    MetricsReport m = evaluate(params_, sub);
    rec.task_subset_accuracy = m.task_subset_accuracy;
    rec.mean_concept_accuracy = m.mean_concept_accuracy;
    history_.push_back(rec);
    if (cfg_.restore_policy != RestorePolicy::Last && tracked < best_loss_) {
      best_loss_ = tracked;
      best_params_ = params_.clone();
    }
    write_checkpoint();
  }

  void write_checkpoint() {
    if (cfg_.checkpoint_path.empty()) return;
    model::Checkpoint ck;
    ck.params = params_.clone();
    ck.optimizer = optimizer_;
    ck.step = step_;
    ck.seed = cfg_.seed;
    ck.completed_epochs = epoch_;
    model::save_checkpoint(ck, cfg_.checkpoint_path);
  }

  ModelParams params_;
  data::Dataset dataset_;
  TrainConfig cfg_;
  AdamW optimizer_;
  std::vector<std::size_t> train_idx_, val_idx_;
  std::size_t epoch_ = 0;
  std::uint64_t step_ = 0;
  History history_;
  std::optional<ModelParams> best_params_;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

inline History train_model(ModelParams& params, const data::Dataset& ds,
                           const TrainConfig& cfg, AdamW* out_optimizer = nullptr,
                           std::uint64_t* out_steps = nullptr) {
  Trainer tr(std::move(params), ds, cfg);
  tr.run_epochs(cfg.epochs);
  tr.finalize();
  params = std::move(tr.params());
  if (out_optimizer) *out_optimizer = tr.optimizer();
  if (out_steps) *out_steps = tr.step();
  return tr.history();
}

struct InterventionSchedule {
  TrainConfig config;
  std::size_t epochs_before = 300;
  std::size_t epochs_after = 100;
  std::vector<std::pair<std::size_t, rules::SymbolicRule>> additions;
};

inline History run_rule_intervention(ModelParams& params,
                                     const data::Dataset& ds,
                                     const InterventionSchedule& sched,
                                     AdamW* out_optimizer = nullptr) {
  Trainer tr(std::move(params), ds, sched.config);
  tr.run_epochs(sched.epochs_before);
  for (std::size_t i = 0; i < sched.additions.size(); ++i) {
    Rng rng = Rng::substream(sched.config.seed, "manual", i);
    rules::extend_model(tr.params(), &tr.optimizer(), sched.additions[i].first,
                        sched.additions[i].second, rng);
  }
  if (!sched.additions.empty()) tr.reset_best();
  tr.run_epochs(sched.epochs_after);
  tr.finalize();
  params = std::move(tr.params());
  if (out_optimizer) *out_optimizer = tr.optimizer();
  return tr.history();
}

}  // namespace rulemem::train

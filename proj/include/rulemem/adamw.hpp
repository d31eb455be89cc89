#pragma once

// AdamW: Adam moment estimates with decoupled weight decay. Moments are
// keyed by parameter name so that state survives structural edits to the
// model (added rule slots, re-drawn selector layers).

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rulemem/tensor.hpp"

namespace rulemem::diff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

class AdamW {
 public:
  struct Moments {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };

  AdamW() = default;
  explicit AdamW(AdamConfig cfg) : cfg_(cfg) {}

  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }

  // Applies one update to every parameter with requires_grad. Gradients are
  // left untouched; the caller zeroes them. A non-finite gradient aborts the
  // whole step before any parameter is modified.
  void step(const NamedParams& params) {
    for (const auto& [name, p] : params) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (double g : p.grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("adam_step: non-finite gradient in parameter '" +
                             name + "'");
        }
      }
    }
    ++step_;
    for (const auto& [name, p] : params) {
      Tensor t = p;
      if (!t.requires_grad() || !t.has_grad()) continue;
      Moments& mo = moments_[name];
      if (mo.m.size() != t.size()) {
        mo.m.assign(t.size(), 0.0);
        mo.v.assign(t.size(), 0.0);
        mo.t = 0;
      }
      ++mo.t;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mo.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mo.t));
      const std::vector<double>& g = t.grad();
      std::vector<double>& w = t.values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g[i];
        mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = mo.m[i] / bc1;
        const double vhat = mo.v[i] / bc2;
        w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                           cfg_.weight_decay * w[i]);
      }
    }
  }

  void reset_param(const std::string& name) { moments_.erase(name); }

  // Drops state for every parameter whose name starts with the prefix.
  void reset_prefix(const std::string& prefix) {
    for (auto it = moments_.begin(); it != moments_.end();) {
      if (it->first.rfind(prefix, 0) == 0)
        it = moments_.erase(it);
      else
        ++it;
    }
  }

  // Reshapes a parameter's moment buffers when the parameter grows: each
  // (old_index, new_index) move copies state, unmapped entries start at zero.
  void remap(const std::string& name, std::size_t new_size,
             const std::vector<std::pair<std::size_t, std::size_t>>& moves) {
    auto it = moments_.find(name);
    if (it == moments_.end()) return;
    Moments next;
    next.t = it->second.t;
    next.m.assign(new_size, 0.0);
    next.v.assign(new_size, 0.0);
    for (const auto& [from, to] : moves) {
      next.m[to] = it->second.m[from];
      next.v[to] = it->second.v[from];
    }
    it->second = std::move(next);
  }

  const std::map<std::string, Moments>& moments() const { return moments_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace rulemem::diff

#pragma once

// Small feed-forward pieces shared by the encoder, selector and decoder.

#include <cstddef>
#include <string>
#include <vector>

#include "rulemem/adamw.hpp"
#include "rulemem/ops.hpp"
#include "rulemem/rng.hpp"

namespace rulemem::diff {

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (out)

  std::size_t in_dim() const { return w.shape()[0]; }
  std::size_t out_dim() const { return w.shape()[1]; }
};

// Weights ~ N(0, 1/fan_in), biases zero.
inline Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  l.w = Tensor::zeros({in, out}, true);
  const double std = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : l.w.values()) v = rng.normal(0.0, std);
  l.b = Tensor::zeros({out}, true);
  return l;
}

inline Tensor linear_fwd(Tape* tape, const Linear& l, const Tensor& x) {
  return ops::add(tape, ops::matmul(tape, x, l.w), l.b);
}

// Hidden stack with ReLU after every layer; the last entry of `widths` is
// the output width of the stack.
struct Mlp {
  std::vector<Linear> layers;
};

inline Mlp make_mlp(std::size_t in, const std::vector<std::size_t>& widths,
                    Rng& rng) {
  Mlp m;
  std::size_t prev = in;
  for (std::size_t w : widths) {
    m.layers.push_back(make_linear(prev, w, rng));
    prev = w;
  }
  return m;
}

inline Tensor mlp_relu_fwd(Tape* tape, const Mlp& m, const Tensor& x) {
  Tensor h = x;
  for (const Linear& l : m.layers) h = ops::relu(tape, linear_fwd(tape, l, h));
  return h;
}

inline void collect_params(const Mlp& m, const std::string& prefix,
                           NamedParams& out) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    out.emplace_back(prefix + "." + std::to_string(i) + ".w", m.layers[i].w);
    out.emplace_back(prefix + "." + std::to_string(i) + ".b", m.layers[i].b);
  }
}

inline void collect_params(const Linear& l, const std::string& prefix,
                           NamedParams& out) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

}  // namespace rulemem::diff

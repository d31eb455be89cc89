#pragma once

// Reverse-mode tape. Ops append a backward closure when any input requires
// a gradient; backward() seeds the scalar loss with 1 and replays every
// recorded node exactly once in reverse. Repeated backward calls without
// zeroing accumulate, as do multiple uses of the same tensor.

#include <functional>
#include <stdexcept>
#include <vector>

#include "rulemem/tensor.hpp"

namespace rulemem::diff {

class Tape {
 public:
  using BackFn = std::function<void()>;

  std::size_t record(Tensor& out, BackFn fn) {
    nodes_.push_back(std::move(fn));
    outputs_.push_back(out);
    out.set_producer(this, nodes_.size() - 1);
    return nodes_.size() - 1;
  }

  // Returns the number of nodes replayed. Gradients of op outputs are
  // transient and reset per call; leaf gradients accumulate across calls.
  std::size_t backward(Tensor& loss) {
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) +
                                  " is not a scalar");
    }
    if (loss.producer_tape() != this) {
      throw std::invalid_argument("backward: loss was not produced on this tape");
    }
    for (Tensor& out : outputs_) out.zero_grad();
    loss.grad()[0] += 1.0;
    for (std::size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1]();
    return nodes_.size();
  }

  void clear() {
    nodes_.clear();
    outputs_.clear();
  }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<BackFn> nodes_;
  std::vector<Tensor> outputs_;
};

}  // namespace rulemem::diff

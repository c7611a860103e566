#pragma once

// A named, trainable tensor with its gradient buffer. Layers own Params;
// the model exposes them in one deterministic list for the optimizer,
// checkpointing, and parameter accounting.

#include <string>
#include <utility>

#include "dsmoe/tensor.hpp"

namespace dsmoe {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // layer-norm gains/biases opt out of weight decay

  Param() = default;
  Param(std::string name_, Shape shape, bool decay_ = true)
      : name(std::move(name_)), value(shape), grad(std::move(shape)),
        decay(decay_) {}

  int64_t numel() const { return value.numel(); }
  void zero_grad() { grad.fill(0.0); }
};

}  // namespace dsmoe

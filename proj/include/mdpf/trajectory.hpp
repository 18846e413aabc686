#pragma once

#include <optional>
#include <vector>

#include "mdpf/tensor.hpp"

namespace mdpf {

// One ground-truth rollout: states and observations share the step axis,
// actions (when present) too.  `labels` holds the 0-based steps whose true
// state is available to the loss; evaluation sets label every step.
struct Trajectory {
  Tensor states;        // T x D
  std::vector<int> labels;
  Tensor observations;  // T x obs-dim
  std::optional<Tensor> actions;  // T x act-dim

  int length() const { return states.dim(0); }
  int state_dim() const { return states.dim(1); }

  void validate() const;
};

}  // namespace mdpf

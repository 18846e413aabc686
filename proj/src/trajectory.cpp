#include "mdpf/trajectory.hpp"

#include <stdexcept>
#include <string>

namespace mdpf {

void Trajectory::validate() const {
  if (states.rank() != 2 || observations.rank() != 2) {
    throw std::invalid_argument("trajectory states and observations must be rank-2");
  }
  if (states.dim(0) != observations.dim(0)) {
    throw std::invalid_argument("trajectory has " + std::to_string(states.dim(0)) +
                                " states but " + std::to_string(observations.dim(0)) +
                                " observations");
  }
  if (states.dim(0) < 1) throw std::invalid_argument("trajectory needs at least one step");
  if (actions) {
    if (actions->rank() != 2 || actions->dim(0) != states.dim(0)) {
      throw std::invalid_argument("trajectory actions must be rank-2 with one row per step");
    }
  }
  for (int l : labels) {
    if (l < 0 || l >= states.dim(0)) {
      throw std::invalid_argument("trajectory label step " + std::to_string(l) +
                                  " outside [0, " + std::to_string(states.dim(0)) + ")");
    }
  }
}

}  // namespace mdpf

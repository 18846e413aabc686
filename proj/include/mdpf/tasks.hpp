#pragma once

#include <string>
#include <vector>

#include "mdpf/filter.hpp"
#include "mdpf/rng.hpp"
#include "mdpf/tensor.hpp"
#include "mdpf/trajectory.hpp"

namespace mdpf {

// A generated corpus plus the config that produced it (JSON text, echoed into
// saved files for provenance).  `clean_observations` holds the noiseless
// observation per step for tasks that define one (the bearings task's true
// bearing); empty otherwise, else one T x obs-dim tensor per trajectory.
struct Dataset {
  std::vector<Trajectory> trajectories;
  std::vector<Tensor> clean_observations;
  std::string generator;

  void validate() const;
};

// Radar station watching a car: bearing-only observations contaminated by
// uniform outliers.  The car drives a bounded random-walk speed and heading;
// its state is (x, y, heading) with the heading dimension circular.
struct BearingsWorld {
  double station_x = 0.0;
  double station_y = 0.0;
  double outlier_rate = 0.15;
  double concentration = 50.0;
  double speed_min = 0.05;
  double speed_max = 0.5;
  double speed_walk = 0.02;
  double heading_walk = 0.1;
  double radius_min = 1.0;
  double radius_max = 3.0;
  int label_stride = 4;       // true state revealed every 4th step
  bool dense_labels = false;  // evaluation sets label every step

  void validate() const;
};

// Scalar linear-Gaussian state with the two-branch observation mixture, actions
// uniform on (-1, 1), and only the final step labeled.
Dataset gen_synthetic(const SyntheticTruth& truth, int n_seq, int T, RngStream& rng);

// Car trajectories with bearing observations; labels follow world.label_stride
// (0-based steps stride-1, 2*stride-1, ...) or every step when dense.
Dataset gen_bearings(const BearingsWorld& world, int n_seq, int T, RngStream& rng);

// True bearing from the station to each state row, one column per step row.
Tensor clean_bearings(const BearingsWorld& world, const Tensor& states);

// Binary container: 8-byte magic, little-endian u32 version and u64 header
// size, a JSON header (dims, lengths, label/clean layout, generator echo),
// then per-trajectory blocks of little-endian 64-bit floats.  Round trips are
// bit exact.  Bad magic, unknown version, or short files raise runtime_error.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace mdpf

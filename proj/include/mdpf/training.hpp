#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdpf/filter.hpp"
#include "mdpf/trajectory.hpp"

namespace mdpf {

enum class LossKind { kNll, kMse };

struct TrainConfig {
  LossKind loss = LossKind::kNll;
  double lr_net = 1e-3;
  double lr_bandwidth = 1e-2;
  int batch_size = 64;
  double clip_norm = 100.0;
  int tbptt_window = 4;
  int label_stride = 4;
  int epochs = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

// Bias-corrected Adam moments, keyed by parameter identity; one state per
// learning-rate group.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int step = 0;
  int skipped = 0;  // updates dropped on non-finite gradients

  struct Moments {
    Tensor m;
    Tensor v;
  };
  std::unordered_map<const ad::Node*, Moments> slots;
};

// One update on a parameter group.  Returns false and leaves both the group
// and the moments untouched when any gradient entry is non-finite.
bool adam_step(AdamState& state, const std::vector<Parameter*>& params,
               const std::vector<Tensor>& grads, double lr);

// Scales grads in place so their joint L2 norm is at most max_norm; returns
// the factor applied.  A non-finite norm leaves the grads untouched (the
// optimizer step will skip them).
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

// Mean of -log m(x_t) over the trajectory's labeled steps.
ad::Var nll_loss(const std::vector<MixtureDensity>& posteriors, const Trajectory& traj);

// Mean over labeled steps of the squared error between the weighted-mean
// state and the label; circular dims use the wrapped difference.
ad::Var mse_loss(const std::vector<StateSummary>& summaries, const Trajectory& traj);

// Builds one trajectory's filter run inside ctx; the caller fixes models,
// kernels, and particle initialization, and must thread the given TBPTT
// window through to the filter.  Losses are derived from the run.
using RunFn = std::function<FilterRun(Ctx&, const Trajectory&, RngStream&, int tbptt_window)>;

struct ParamGroups {
  std::vector<Parameter*> net;
  std::vector<Parameter*> bandwidth;
};

// Drops the learning rate by `factor` when the observed validation loss fails
// to improve by `threshold` over `patience` consecutive evaluations.
struct PlateauScheduler {
  double factor = 0.1;
  int patience = 5;
  double threshold = 1e-3;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;

  bool observe(double val_loss);
};

struct TrainState {
  double lr_net = 0.0;
  double lr_bandwidth = 0.0;
  AdamState adam_net;
  AdamState adam_bandwidth;
  PlateauScheduler plateau;

  static TrainState init(const TrainConfig& cfg);
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;  // mean over elements that produced a finite loss
  std::optional<double> val_nll;
  std::optional<double> val_rmse;
  double lr_net = 0.0;
  double lr_bandwidth = 0.0;
  double grad_norm_mean = 0.0;  // pre-clip global norm, averaged over batches
  double grad_norm_max = 0.0;
  int skipped_updates = 0;  // optimizer steps dropped on non-finite gradients
  int dropped_elements = 0;  // batch elements whose loss was non-finite
};

std::string epoch_metrics_json(const EpochMetrics& m);

// One pass over train_set in shuffled batches: run filters, accumulate the
// configured loss at labeled steps, backward, clip, Adam per group.  When
// val_set is non-empty, evaluates NLL and RMSE on it afterwards and lets the
// plateau scheduler cut both learning rates.
EpochMetrics train_epoch(const TrainConfig& cfg, const RunFn& run_fn, const ParamGroups& params,
                         TrainState& state, const std::vector<Trajectory>& train_set,
                         const std::vector<Trajectory>& val_set, RngStream& rng);

// cfg.epochs epochs of train_epoch with persistent optimizer/scheduler state.
std::vector<EpochMetrics> fit(const TrainConfig& cfg, const RunFn& run_fn,
                              const ParamGroups& params, const std::vector<Trajectory>& train_set,
                              const std::vector<Trajectory>& val_set, RngStream& rng);

// Phase 1 trains with NLL, phase 2 refines with MSE (meant to run at lowered
// learning rates).  Returns the concatenated per-epoch metrics.
std::vector<EpochMetrics> train_two_phase(const TrainConfig& nll_cfg, const TrainConfig& mse_cfg,
                                          const RunFn& run_fn, const ParamGroups& params,
                                          const std::vector<Trajectory>& train_set,
                                          const std::vector<Trajectory>& val_set, RngStream& rng);

// Baseline protocol: train everything with MSE, then freeze the networks and
// fit only the bandwidths by NLL.
std::vector<EpochMetrics> train_baseline(const TrainConfig& mse_cfg,
                                         const TrainConfig& bandwidth_cfg, const RunFn& run_fn,
                                         const ParamGroups& params,
                                         const std::vector<Trajectory>& train_set,
                                         const std::vector<Trajectory>& val_set, RngStream& rng);

// Measurement-model warm-up: repeatedly pick a labeled state, perturb it into
// a particle cloud with the given kernels (bandwidths held fixed), weigh the
// cloud with the paired observation, and minimize the NLL of the true state
// under the resulting KDE.  Returns the per-step loss trace.
std::vector<double> pretrain_measurement(MeasurementModel& meas,
                                         const std::vector<Trajectory>& data,
                                         const std::vector<KernelSpec>& kernels, int steps,
                                         int n_particles, double lr, RngStream& rng);

}  // namespace mdpf

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdpf/mixture.hpp"
#include "mdpf/resamplers.hpp"
#include "mdpf/rng.hpp"
#include "mdpf/tensor.hpp"
#include "mdpf/trajectory.hpp"

namespace mdpf {

// Detached mean of -log m(x_t) over the trajectory's labeled steps.
double eval_nll(const std::vector<MixtureDensity>& posteriors, const Trajectory& traj);
// Dataset figure: mean of the per-trajectory values.
double eval_nll(const std::vector<std::vector<MixtureDensity>>& posteriors,
                const std::vector<Trajectory>& trajs);

// Wrap-aware RMSE over labeled steps; the topology comes from each summary's
// source particle set.  Aggregations:
//   combined: sqrt( sum_t sum_d e_td^2 / (|T| * D) ) -- per-dimension RMSE, so
//             a constant offset delta on one of D dims contributes delta/sqrt(D)
//   position: sqrt( sum_t ||e_t restricted to linear dims||^2 / |T| )
//   angular:  sqrt( sum_t sum_{circular d} wrap(e_td)^2 / |T| )
struct RmseReport {
  double combined = 0.0;
  double position = 0.0;
  double angular = 0.0;
};
RmseReport eval_rmse(const std::vector<StateSummary>& summaries, const Trajectory& traj);
// Dataset figure: squared errors pooled over every labeled step of every
// trajectory before taking the roots.
RmseReport eval_rmse(const std::vector<std::vector<StateSummary>>& summaries,
                     const std::vector<Trajectory>& trajs);

// Controlled estimator diagnostic: a K-component Gaussian KDE on a linear state
// whose centers and (unnormalized) weights are the probed parameters.  Each
// replicate resamples `draws` particles with the chosen estimator, applies
// `loss`, and backpropagates.  The common-random-number finite-difference
// reference differentiates the expectation of the estimator family's own draw
// law (component pick plus kernel noise for mixture resamplers, plain ancestor
// picks otherwise); it exists pathwise only for the centers -- weight changes
// move the draw boundaries, so weights get moments but no FD column.
struct ProbeSpec {
  Tensor centers;         // K or K x D component locations
  Tensor weights;         // K strictly positive masses, normalized in-graph
  double bandwidth = 0.5; // shared Gaussian kernel bandwidth
  int draws = 0;          // mixture-resampler draws per replicate; 0 means K.
                          // Atom resamplers always output K regardless.
};
struct ProbeResult {
  Tensor center_mean;      // K x D, mean gradient over replicates
  Tensor center_variance;  // K x D, sample variance
  Tensor center_se;        // K x D, standard error of the mean
  Tensor center_fd;        // K x D, CRN finite-difference reference
  Tensor weight_mean;      // K, raw-mass gradients
  Tensor weight_variance;  // K
  Tensor weight_se;        // K
  int replicates = 0;

  // Sample variance summed over every probed coordinate (centers and weights).
  double total_variance() const;
};
using ProbeLoss = std::function<ad::Var(const ParticleSet&)>;
// Canonical probe loss: weighted mean of the per-particle coordinate sums.
ad::Var probe_mean_loss(const ParticleSet& ps);
ProbeResult gradient_probe(ResamplerKind kind, const ProbeSpec& spec, const ProbeLoss& loss,
                           int replicates, RngStream& rng);

// Wall-time scaling: run work(n) for each size (keeping the best of `repeats`
// trials) and fit the log-log least-squares slope.  Needs >= 4 sizes.
struct ScalingReport {
  std::vector<int> n_values;
  std::vector<double> seconds;
  double slope = 0.0;
};
ScalingReport runtime_scaling(const std::function<void(int)>& work,
                              const std::vector<int>& n_values, int repeats);
double fitted_loglog_slope(const std::vector<int>& n_values, const std::vector<double>& seconds);

// One full filter pass over a T-step trajectory at each particle count, either
// as a training step (forward + NLL backward) or an inference step (no-grad
// forward only).
enum class ScalingMode { kTrainStep, kInferenceStep };
ScalingReport filter_runtime_scaling(const ResamplerConfig& resampler, ScalingMode mode,
                                     const std::vector<int>& n_values, int repeats, int T,
                                     RngStream& rng);

// Box-plot export: one row per (method, seed, metric, value).
struct MetricRow {
  std::string method;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};
std::string metrics_csv(const std::vector<MetricRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace mdpf

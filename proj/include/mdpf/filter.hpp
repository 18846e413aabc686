#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mdpf/models.hpp"
#include "mdpf/resamplers.hpp"
#include "mdpf/trajectory.hpp"

namespace mdpf {

// Assembly of one filtering step.  Posterior kernels (bandwidth beta) shape the
// loss-facing mixture; the optional resampling kernels (beta-tilde) decouple the
// mixture particles are drawn from.  dual_measurement adds a second measurement
// model that produces separate resampling weights.
struct FilterConfig {
  int n_particles = 25;
  ResamplerConfig resampler;
  std::vector<KernelSpec> posterior_kernels;
  std::optional<std::vector<KernelSpec>> resampling_kernels;
  bool dual_measurement = false;

  void validate() const;
};

struct ModelSet {
  const DynamicsModel* dynamics = nullptr;
  const MeasurementModel* measurement = nullptr;
  const MeasurementModel* measurement_resampling = nullptr;  // required iff dual_measurement
};

// One step's outputs: the post-measurement pre-resampling set (loss target),
// both mixtures, and the resampled set that feeds the next step.  When the
// config has no separate resampling kernels and a single measurement model,
// `resampling` aliases `posterior` (same graph nodes).
struct FilterStepResult {
  ParticleSet weighted;
  MixtureDensity posterior;
  MixtureDensity resampling;
  ParticleSet resampled;
  bool converged = true;
};

FilterStepResult filter_step(const FilterConfig& cfg, Ctx& ctx, const DynamicsModel& dyn,
                             const MeasurementModel& meas, const MeasurementModel* meas_resample,
                             const ParticleSet& ps, const Tensor& obs,
                             const std::optional<Tensor>& action, RngStream& rng);

struct FilterRun {
  std::vector<MixtureDensity> posteriors;  // one per step, loss-ready
  std::vector<StateSummary> summaries;     // weighted mean of each posterior
  ParticleSet final_particles;             // post-resampling set after the last step
  bool converged = true;
};

// Iterates filter_step over the trajectory's observations/actions.  A positive
// tbptt_window detaches the recursion state every `window` steps so gradients
// propagate at most that many steps back.
FilterRun run_filter(const FilterConfig& cfg, Ctx& ctx, const ModelSet& models,
                     const Trajectory& traj, const ParticleSet& init, RngStream& rng,
                     int tbptt_window = 0);

// Particle cloud around a known state: per-dimension kernel noise at the
// spec'd bandwidths, uniform weights, detached from the graph.
ParticleSet init_particles(const Tensor& state, const std::vector<KernelSpec>& noise, int n,
                           Ctx& ctx, RngStream& rng);

// Scalar linear-Gaussian dynamics with a two-branch Gaussian observation
// mixture; sigma and gamma stay fixed while the rest may require grad.
// Branch weights come from a single logit v: w1 = sigmoid(-v), w2 = sigmoid(v).
struct SyntheticModelParams {
  ad::Var A, B, sigma, C1, c1, C2, c2, gamma, v;

  static SyntheticModelParams constants(double A, double B, double sigma, double C1, double c1,
                                        double C2, double c2, double gamma, double v);
  std::pair<ad::Var, ad::Var> branch_weights() const;  // (w1, w2)
  void validate() const;
};

struct GenerativeStepResult {
  ParticleSet weighted;
  MixtureDensity posterior;   // Gaussian KDE at posterior_bandwidth
  MixtureDensity resampling;  // Gaussian KDE at resampling_bandwidth
  ParticleSet resampled;
  bool converged = true;
};

// Classical PF step for the synthetic model: reparameterized propose from the
// dynamics, closed-form mixture likelihood weighting, resample per `resampler`.
GenerativeStepResult generative_pf_step(const SyntheticModelParams& p, const ParticleSet& ps,
                                        double action, double obs,
                                        const ResamplerConfig& resampler, RngStream& rng,
                                        double resampling_bandwidth = 0.05,
                                        double posterior_bandwidth = 0.5);

// Ground-truth generating values for the synthetic task.
struct SyntheticTruth {
  double A = 0.9;
  double B = 0.5;
  double sigma = 0.1;
  double C1 = 1.0;
  double c1 = 0.75;
  double C2 = -1.0;
  double c2 = -0.75;
  double gamma = 0.25;
  double w2 = 0.6;
};

SyntheticModelParams synthetic_truth_params();

// Learnable synthetic parameters as persistent leaves; sigma and gamma stay
// pinned to their true values.  The branch logit is a logistic-pair parameter
// so w2 can be read back with pair_values().
struct SyntheticTrainable {
  Parameter A, B, C1, c1, C2, c2, v;

  static SyntheticTrainable make(const std::string& prefix, double A0, double B0, double C1_0,
                                 double c1_0, double C2_0, double c2_0, double w2_0);
  SyntheticModelParams bind(Ctx& ctx) const;
  std::vector<Parameter*> parameters();
};

// Runs generative_pf_step over a scalar trajectory (actions required).
// Particles start from the standard normal prior.  A positive tbptt_window
// detaches the recursion state every `window` steps.
FilterRun run_synthetic_filter(const SyntheticModelParams& p, const Trajectory& traj,
                               int n_particles, const ResamplerConfig& resampler, RngStream& rng,
                               double resampling_bandwidth = 0.05,
                               double posterior_bandwidth = 0.5, int tbptt_window = 0);

// Exact-inference oracle: scalar Gaussian mixture belief updated in closed form.
struct GaussianComponent {
  ad::Var weight;
  ad::Var mean;
  ad::Var var;
};

struct GaussianMixtureBelief {
  std::vector<GaussianComponent> components;

  static GaussianMixtureBelief single(double mean, double var);
  int size() const { return static_cast<int>(components.size()); }
  void validate() const;
};

inline constexpr int kMixtureKfComponentCap = 1 << 10;

GaussianMixtureBelief mixture_kf_predict(const GaussianMixtureBelief& belief, const ad::Var& A,
                                         const ad::Var& B, const ad::Var& sigma, double action);

// Conditions every prior component on obs under both observation branches;
// component count doubles.  Weights pick up the branch prior times the
// marginal likelihood of obs, then renormalize.
GaussianMixtureBelief mixture_kf_update(const GaussianMixtureBelief& belief, const ad::Var& C1,
                                        const ad::Var& c1, const ad::Var& C2, const ad::Var& c2,
                                        const ad::Var& gamma, const ad::Var& w1, const ad::Var& w2,
                                        double obs, int component_cap = kMixtureKfComponentCap);

ad::Var mixture_kf_nll(const GaussianMixtureBelief& belief, double x_true);

// Value-level readouts for oracles and metrics.
double belief_mean(const GaussianMixtureBelief& belief);
double belief_density(const GaussianMixtureBelief& belief, double x);

// One JSON object per posterior: centers, weights, per-dim kernel family,
// topology, and bandwidth.
std::string posterior_json_line(const MixtureDensity& mix);
void dump_posteriors_jsonl(const std::vector<MixtureDensity>& posteriors, std::ostream& os);

}  // namespace mdpf

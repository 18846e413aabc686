#pragma once

#include <optional>

#include "mdpf/mixture.hpp"
#include "mdpf/rng.hpp"

namespace mdpf {

enum class ResamplerKind {
  kTgDiscrete,
  kDis,
  kSr,
  kConcrete,
  kOt,
  kTgMixture,
  kIrg,
  kIwsg,
};

const char* resampler_kind_name(ResamplerKind k);
ResamplerKind resampler_kind_from_name(const std::string& name);

struct ResamplerConfig {
  ResamplerKind kind = ResamplerKind::kIwsg;
  double sr_lambda = 0.1;
  double concrete_temperature = 0.5;
  double ot_epsilon = 0.5;
  double ot_scaling = 0.9;
  double ot_threshold = 1e-3;
  int ot_max_iters = 500;

  void validate() const;
  bool needs_mixture() const {
    return kind == ResamplerKind::kTgMixture || kind == ResamplerKind::kIrg ||
           kind == ResamplerKind::kIwsg;
  }
};

struct SinkhornResult {
  ad::Var coupling;  // N x N, rows sum to 1/N, columns to w_j
  bool converged = false;
  int iterations = 0;
};

// Entropic OT in the log domain with epsilon-scaling; value iterations run
// graph-free, then the last 10 updates are unrolled on the graph for gradients.
SinkhornResult sinkhorn(const ad::Var& cost, const ad::Var& weights, double epsilon,
                        double scaling, double threshold, int max_iters);

// Discrete resamplers (ancestor draws from ps.weights).
ParticleSet resample_tg_discrete(const ParticleSet& ps, RngStream& rng);
ParticleSet resample_dis(const ParticleSet& ps, RngStream& rng);
ParticleSet resample_sr(const ParticleSet& ps, double lambda, RngStream& rng);
ParticleSet resample_concrete(const ParticleSet& ps, double temperature, RngStream& rng);

struct OtResample {
  ParticleSet set;
  bool converged = false;
};
OtResample resample_ot(const ParticleSet& ps, const ResamplerConfig& cfg);

// Mixture resamplers (draws from the KDE mixture).
ParticleSet resample_tg_mixture(const MixtureDensity& mix, int n, RngStream& rng);
ParticleSet resample_irg(const MixtureDensity& mix, int n, RngStream& rng);
ParticleSet resample_iwsg(const MixtureDensity& mix, int n, RngStream& rng);

struct ResampleResult {
  ParticleSet set;
  bool converged = true;
};

// Dispatch on cfg.kind; mixture kinds require mix.
ResampleResult resample(const ResamplerConfig& cfg, const ParticleSet& ps,
                        const std::optional<MixtureDensity>& mix, int n_out, RngStream& rng);

}  // namespace mdpf

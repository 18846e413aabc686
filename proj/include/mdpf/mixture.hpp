#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "mdpf/autodiff.hpp"
#include "mdpf/kernels.hpp"
#include "mdpf/rng.hpp"

namespace mdpf {

inline constexpr double kKdeLogFloor = -690.77552789821368067;  // log(1e-300)

// Weighted particle cloud over a product state space.  The optional second
// weight vector is the resampling distribution used by the dual-weight filter.
struct ParticleSet {
  ad::Var particles;  // N x D
  ad::Var weights;    // N, simplex
  std::optional<ad::Var> resampling_weights;
  std::vector<Topology> dim_topology;

  int n() const { return particles->value.dim(0); }
  int d() const { return particles->value.dim(1); }

  // Enforces shape, simplex, and circular-range invariants; throws on violation.
  void validate() const;
};

// KDE mixture: per-dimension product kernels around weighted centers.
struct MixtureDensity {
  ad::Var centers;  // N x D
  ad::Var weights;  // N, simplex
  std::vector<KernelVar> kernels;

  int n() const { return centers->value.dim(0); }
  int d() const { return centers->value.dim(1); }
  std::vector<Topology> topology() const;
};

// Binds per-dimension kernel specs into ctx and assembles the mixture.
MixtureDensity make_mixture(ad::Var centers, ad::Var weights,
                            const std::vector<KernelSpec>& specs, Ctx& ctx);

struct StateSummary {
  Tensor mean;                    // D, circular dims wrapped to [-pi, pi)
  ad::Var mean_node;              // D vector on the graph
  std::vector<bool> degenerate;   // circular dims with (near-)zero resultant
  ParticleSet source;
};

// log m(x) via per-dimension kernels and logsumexp over components; floored at
// log(1e-300).  x is a D vector (single query, scalar result) or an M x D
// matrix (M queries, rank-1 result).  Differentiable in centers, weights,
// bandwidths, and x.
ad::Var kde_log_density(const MixtureDensity& mix, const ad::Var& x);

// Ancestor + kernel-noise draws; values are detached from the graph.
struct KdeDraws {
  Tensor samples;  // n x D
  std::vector<int> ancestors;
};
KdeDraws kde_sample(const MixtureDensity& mix, int n, RngStream& rng);

// Distributional-transform component: M(x_d | x_{<d}) = sum_i omega_i(x_{<d}) CDF_d(x_d - c_id),
// with omega  the posterior component responsibilities of the conditioning dims.
// Throws on Epanechnikov kernels in any dimension <= d (no continuous CDF path).
ad::Var conditional_cdf(const MixtureDensity& mix, const ad::Var& x, int d);

// Linear dims: weighted average.  Circular dims: resultant-vector mean via
// atan2; a (near-)zero resultant yields mean 0 with the degenerate flag set.
StateSummary weighted_mean(const ParticleSet& ps);

// Circular-aware barycenter rows: out_i = combine(sum_j alpha_ij x_j) where
// circular dims go through unit vectors and atan2.  alpha rows need not be
// normalized (OT couplings scaled by N).
ad::Var barycenter_rows(const ad::Var& alpha, const ad::Var& particles,
                        const std::vector<Topology>& topology);

}  // namespace mdpf

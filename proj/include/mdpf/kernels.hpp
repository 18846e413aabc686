#pragma once

#include "mdpf/autodiff.hpp"
#include "mdpf/rng.hpp"
#include "mdpf/tensor.hpp"

namespace mdpf {

enum class KernelFamily { kGaussian, kEpanechnikov, kVonMises };
enum class Topology { kLinear, kCircular };

const char* kernel_family_name(KernelFamily f);

// One per-dimension kernel: family, the manifold it lives on, and a learnable
// strictly-positive bandwidth (sigma / support half-width / concentration).
struct KernelSpec {
  KernelFamily family;
  Topology topology;
  Parameter bandwidth;

  KernelSpec(KernelFamily f, Topology t, Parameter bw);
};

// In-graph view of a kernel for one forward pass.
struct KernelVar {
  KernelFamily family;
  Topology topology;
  ad::Var bandwidth;
};

KernelVar bind(const KernelSpec& spec, Ctx& ctx);

// ---- value-level kernel math (u is a displacement; wrapped for circular) ----
double kernel_log_density_val(KernelFamily f, double u, double bw);
double kernel_density_val(KernelFamily f, double u, double bw);
// CDF from -inf (linear) or from the cut point -pi (circular).
double kernel_cdf_val(KernelFamily f, double u, double bw);
double kernel_sample_val(KernelFamily f, double bw, RngStream& rng);

double kernel_cdf(const KernelSpec& spec, double u);
double kernel_sample(const KernelSpec& spec, RngStream& rng);

// ---- differentiable kernel math ----
// log of the normalized density at displacement u (elementwise; bw scalar).
// Epanechnikov logs are floored at log(1e-300) outside the support.
ad::Var kernel_log_density(KernelFamily f, const ad::Var& u, const ad::Var& bw);
ad::Var kernel_log_density(const KernelSpec& spec, Ctx& ctx, const ad::Var& u);

// Gaussian CDF at x for kernel centered at `mean` with scale `sigma`.
ad::Var gaussian_cdf(const ad::Var& x, const ad::Var& mean, const ad::Var& sigma);

// von Mises CDF measured from the cut at -pi: F(x; c, kappa) = ∫_{-pi}^{x} vm(t - c) dt,
// x in [-pi, pi).  Quadrature-backed custom op (abs err <= 1e-10), differentiable
// in x, center, and kappa.  kappa must be scalar.
ad::Var von_mises_cdf(const ad::Var& x, const ad::Var& center, const ad::Var& kappa);

// Inverse-CDF draw over the cumulative sum of a normalized weight vector.
int categorical_sample(const Tensor& weights, RngStream& rng);

// Prefix sums for repeated draws from the same weights: one uniform per draw,
// same draw law and accumulation order as categorical_sample, O(log N) lookup.
std::vector<double> categorical_prefix(const Tensor& weights);
int categorical_sample_prefix(const std::vector<double>& prefix, RngStream& rng);

// Standard Gumbel draw -log(-log U) with U clamped away from {0, 1}.
double gumbel_sample(RngStream& rng);

}  // namespace mdpf

#include "mdpf/kernels.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_map>

#include "mdpf/special.hpp"

namespace mdpf {

using special::kPi;
using special::kTwoPi;

namespace {

constexpr double kDensityFloor = 1e-300;
constexpr double kLogHalf2Pi = 0.91893853320467274178;  // 0.5*log(2*pi)

double log_i0_cached(double kappa) {
  thread_local std::unordered_map<std::uint64_t, double> cache;
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(kappa));
  std::memcpy(&bits, &kappa, sizeof(bits));
  auto found = cache.find(bits);
  if (found != cache.end()) return found->second;
  const double v = special::log_bessel_i0(kappa);
  if (cache.size() > 4096) cache.clear();
  cache.emplace(bits, v);
  return v;
}

double vm_density(double u, double kappa) {
  return std::exp(kappa * std::cos(u) - special::kLogTwoPi - log_i0_cached(kappa));
}

// F(x; c, kappa) from the cut at -pi, via adaptive quadrature of the density.
double vm_cdf_value(double x, double c, double kappa) {
  if (x <= -kPi) return 0.0;
  const double hi = std::min(x, kPi);
  const double v =
      special::integrate([c, kappa](double t) { return vm_density(t - c, kappa); }, -kPi, hi, 1e-10);
  return std::min(std::max(v, 0.0), 1.0);
}

// dF/dkappa: ∫ vm(t-c) (cos(t-c) - I1/I0) dt over [-pi, x].
double vm_cdf_dkappa(double x, double c, double kappa) {
  if (x <= -kPi) return 0.0;
  const double ratio = special::bessel_i1(kappa) / special::bessel_i0(kappa);
  const double hi = std::min(x, kPi);
  return special::integrate(
      [c, kappa, ratio](double t) {
        return vm_density(t - c, kappa) * (std::cos(t - c) - ratio);
      },
      -kPi, hi, 1e-10);
}

void check_bandwidth(double bw) {
  if (!(bw > 0.0)) throw std::invalid_argument("bandwidth must be > 0, got " + std::to_string(bw));
}

}  // namespace

const char* kernel_family_name(KernelFamily f) {
  switch (f) {
    case KernelFamily::kGaussian:
      return "gaussian";
    case KernelFamily::kEpanechnikov:
      return "epanechnikov";
    case KernelFamily::kVonMises:
      return "von_mises";
  }
  return "?";
}

KernelSpec::KernelSpec(KernelFamily f, Topology t, Parameter bw)
    : family(f), topology(t), bandwidth(std::move(bw)) {
  const bool circular = t == Topology::kCircular;
  if ((f == KernelFamily::kVonMises) != circular) {
    throw std::invalid_argument(std::string(kernel_family_name(f)) + " kernel on " +
                                (circular ? "circular" : "linear") + " topology");
  }
  if (bandwidth.constraint() != Constraint::kPositive) {
    throw std::invalid_argument("kernel bandwidth '" + bandwidth.name() +
                                "' must be a positive-constrained parameter");
  }
}

KernelVar bind(const KernelSpec& spec, Ctx& ctx) {
  return {spec.family, spec.topology, ctx.value(spec.bandwidth)};
}

double kernel_log_density_val(KernelFamily f, double u, double bw) {
  check_bandwidth(bw);
  switch (f) {
    case KernelFamily::kGaussian: {
      const double z = u / bw;
      return -0.5 * z * z - std::log(bw) - kLogHalf2Pi;
    }
    case KernelFamily::kEpanechnikov: {
      const double z = u / bw;
      const double d = 0.75 / bw * (1.0 - z * z);
      return std::log(std::max(d, kDensityFloor));
    }
    case KernelFamily::kVonMises:
      return bw * std::cos(u) - special::kLogTwoPi - log_i0_cached(bw);
  }
  throw std::logic_error("unknown kernel family");
}

double kernel_density_val(KernelFamily f, double u, double bw) {
  if (f == KernelFamily::kEpanechnikov) {
    const double z = u / bw;
    return std::fabs(z) <= 1.0 ? 0.75 / bw * (1.0 - z * z) : 0.0;
  }
  return std::exp(kernel_log_density_val(f, u, bw));
}

double kernel_cdf_val(KernelFamily f, double u, double bw) {
  check_bandwidth(bw);
  switch (f) {
    case KernelFamily::kGaussian:
      return special::normal_cdf(u / bw);
    case KernelFamily::kEpanechnikov: {
      const double z = std::min(std::max(u / bw, -1.0), 1.0);
      return 0.25 * (2.0 + 3.0 * z - z * z * z);
    }
    case KernelFamily::kVonMises:
      return vm_cdf_value(u, 0.0, bw);
  }
  throw std::logic_error("unknown kernel family");
}

double kernel_sample_val(KernelFamily f, double bw, RngStream& rng) {
  check_bandwidth(bw);
  switch (f) {
    case KernelFamily::kGaussian:
      return bw * rng.gaussian();
    case KernelFamily::kEpanechnikov: {
      // Median of three uniforms on [-bw, bw] has the Epanechnikov density.
      const double a = rng.uniform(-bw, bw);
      const double b = rng.uniform(-bw, bw);
      const double c = rng.uniform(-bw, bw);
      const double lo = std::min(a, std::min(b, c));
      const double hi = std::max(a, std::max(b, c));
      return a + b + c - lo - hi;
    }
    case KernelFamily::kVonMises: {
      const double kappa = bw;
      if (kappa < 1e-8) return rng.uniform(-kPi, kPi);
      // Best-Fisher (1979) rejection sampler.
      const double a = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
      const double b = (a - std::sqrt(2.0 * a)) / (2.0 * kappa);
      const double r = (1.0 + b * b) / (2.0 * b);
      for (;;) {
        const double z = std::cos(kPi * rng.uniform01());
        const double fv = (1.0 + r * z) / (r + z);
        const double c = kappa * (r - fv);
        const double u2 = rng.uniform01();
        if (c * (2.0 - c) - u2 > 0.0 || (u2 > 0.0 && std::log(c / u2) + 1.0 - c >= 0.0)) {
          const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
          return special::wrap_angle(sign * std::acos(fv));
        }
      }
    }
  }
  throw std::logic_error("unknown kernel family");
}

double kernel_cdf(const KernelSpec& spec, double u) {
  return kernel_cdf_val(spec.family, u, spec.bandwidth.constrained_scalar());
}

double kernel_sample(const KernelSpec& spec, RngStream& rng) {
  return kernel_sample_val(spec.family, spec.bandwidth.constrained_scalar(), rng);
}

ad::Var kernel_log_density(KernelFamily f, const ad::Var& u, const ad::Var& bw) {
  using namespace ad;
  check_bandwidth(bw->value.item());
  switch (f) {
    case KernelFamily::kGaussian: {
      Var z = div(u, bw);
      return sub(sub(mul(mul(z, z), -0.5), log(bw)), kLogHalf2Pi);
    }
    case KernelFamily::kEpanechnikov: {
      Var z = div(u, bw);
      Var d = mul(div(constant(0.75), bw), sub(1.0, mul(z, z)));
      return log(clamp_min(d, kDensityFloor));
    }
    case KernelFamily::kVonMises:
      return sub(sub(mul(cos(u), bw), special::kLogTwoPi), log(bessel_i0(bw)));
  }
  throw std::logic_error("unknown kernel family");
}

ad::Var kernel_log_density(const KernelSpec& spec, Ctx& ctx, const ad::Var& u) {
  return kernel_log_density(spec.family, u, ctx.value(spec.bandwidth));
}

ad::Var gaussian_cdf(const ad::Var& x, const ad::Var& mean, const ad::Var& sigma) {
  using namespace ad;
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  return mul(add(erf(mul(div(sub(x, mean), sigma), kInvSqrt2)), 1.0), 0.5);
}

ad::Var von_mises_cdf(const ad::Var& x, const ad::Var& center, const ad::Var& kappa) {
  using ad::Edge;
  using ad::Var;
  if (kappa->value.numel() != 1) {
    throw std::invalid_argument("von_mises_cdf expects scalar kappa");
  }
  const double kv = kappa->value.item();
  check_bandwidth(kv);
  Tensor value = bcast_binary(x->value, center->value,
                              [kv](double xv, double cv) { return vm_cdf_value(xv, cv, kv); });
  std::vector<Edge> edges;
  edges.push_back({x, [x, center, kv](const Tensor& g) {
                     Tensor d = bcast_binary(x->value, center->value, [kv](double xv, double cv) {
                       return vm_density(xv - cv, kv);
                     });
                     Tensor gd = bcast_binary(g, d, [](double a, double b) { return a * b; });
                     return reduce_to_shape(gd, x->value.shape());
                   }});
  edges.push_back({center, [x, center, kv](const Tensor& g) {
                     Tensor d = bcast_binary(x->value, center->value, [kv](double xv, double cv) {
                       return -(vm_density(xv - cv, kv) - vm_density(-kPi - cv, kv));
                     });
                     Tensor gd = bcast_binary(g, d, [](double a, double b) { return a * b; });
                     return reduce_to_shape(gd, center->value.shape());
                   }});
  edges.push_back({kappa, [x, center, kv](const Tensor& g) {
                     Tensor d = bcast_binary(x->value, center->value, [kv](double xv, double cv) {
                       return vm_cdf_dkappa(xv, cv, kv);
                     });
                     Tensor gd = bcast_binary(g, d, [](double a, double b) { return a * b; });
                     return reduce_to_shape(gd, std::vector<int>{});
                   }});
  return ad::make_node(std::move(value), std::move(edges));
}

int categorical_sample(const Tensor& weights, RngStream& rng) {
  if (weights.rank() != 1 || weights.numel() == 0) {
    throw std::invalid_argument("categorical_sample needs a nonempty rank-1 weight vector");
  }
  double total = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) {
    if (weights[i] < 0.0) throw std::invalid_argument("categorical_sample: negative weight");
    total += weights[i];
  }
  if (total == 0.0) throw std::invalid_argument("categorical_sample: all-zero weights");
  if (std::fabs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("categorical_sample: weights sum to " + std::to_string(total));
  }
  const double u = rng.uniform01() * total;
  double cum = 0.0;
  int last_pos = 0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) {
    if (weights[i] > 0.0) last_pos = static_cast<int>(i);
    cum += weights[i];
    if (u < cum) return static_cast<int>(i);
  }
  return last_pos;  // u landed on the accumulated round-off tail
}

std::vector<double> categorical_prefix(const Tensor& weights) {
  if (weights.rank() != 1 || weights.numel() == 0) {
    throw std::invalid_argument("categorical_prefix needs a nonempty rank-1 weight vector");
  }
  std::vector<double> prefix(static_cast<size_t>(weights.numel()));
  double cum = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) {
    if (weights[i] < 0.0) throw std::invalid_argument("categorical_prefix: negative weight");
    cum += weights[i];
    prefix[static_cast<size_t>(i)] = cum;
  }
  if (cum == 0.0) throw std::invalid_argument("categorical_prefix: all-zero weights");
  if (std::fabs(cum - 1.0) > 1e-9) {
    throw std::invalid_argument("categorical_prefix: weights sum to " + std::to_string(cum));
  }
  return prefix;
}

int categorical_sample_prefix(const std::vector<double>& prefix, RngStream& rng) {
  const double u = rng.uniform01() * prefix.back();
  const auto it = std::upper_bound(prefix.begin(), prefix.end(), u);
  if (it != prefix.end()) return static_cast<int>(it - prefix.begin());
  // u landed on the accumulated round-off tail: last index with positive mass.
  for (size_t i = prefix.size(); i-- > 0;) {
    if (prefix[i] > (i == 0 ? 0.0 : prefix[i - 1])) return static_cast<int>(i);
  }
  return 0;
}

double gumbel_sample(RngStream& rng) {
  double u = rng.uniform01();
  u = std::min(std::max(u, DBL_EPSILON), 1.0 - DBL_EPSILON);
  return -std::log(-std::log(u));
}

}  // namespace mdpf

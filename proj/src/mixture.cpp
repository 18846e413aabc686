#include "mdpf/mixture.hpp"

#include <cmath>
#include <stdexcept>

#include "mdpf/special.hpp"

namespace mdpf {

using special::kPi;

namespace {

void check_simplex(const Tensor& w, const char* who) {
  if (w.rank() != 1) {
    throw std::invalid_argument(std::string(who) + " must be rank-1, got " + w.shape_str());
  }
  double total = 0.0;
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    if (w[i] < 0.0) throw std::invalid_argument(std::string(who) + " has a negative entry");
    total += w[i];
  }
  if (std::fabs(total - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(who) + " sums to " + std::to_string(total));
  }
}

}  // namespace

void ParticleSet::validate() const {
  if (particles->value.rank() != 2) {
    throw std::invalid_argument("particles must be N x D, got " + particles->value.shape_str());
  }
  if (static_cast<int>(dim_topology.size()) != d()) {
    throw std::invalid_argument("dim_topology size does not match particle dimension");
  }
  check_simplex(weights->value, "weights");
  if (weights->value.numel() != n()) {
    throw std::invalid_argument("weights length does not match particle count");
  }
  if (resampling_weights) {
    check_simplex((*resampling_weights)->value, "resampling_weights");
    if ((*resampling_weights)->value.numel() != n()) {
      throw std::invalid_argument("resampling_weights length does not match particle count");
    }
  }
  for (int j = 0; j < d(); ++j) {
    if (dim_topology[static_cast<size_t>(j)] != Topology::kCircular) continue;
    for (int i = 0; i < n(); ++i) {
      const double v = particles->value.at(i, j);
      if (v < -kPi || v >= kPi) {
        throw std::invalid_argument("circular dim " + std::to_string(j) +
                                    " holds out-of-range angle " + std::to_string(v));
      }
    }
  }
}

std::vector<Topology> MixtureDensity::topology() const {
  std::vector<Topology> t;
  t.reserve(kernels.size());
  for (const auto& k : kernels) t.push_back(k.topology);
  return t;
}

MixtureDensity make_mixture(ad::Var centers, ad::Var weights,
                            const std::vector<KernelSpec>& specs, Ctx& ctx) {
  if (centers->value.rank() != 2 ||
      centers->value.dim(1) != static_cast<int>(specs.size())) {
    throw std::invalid_argument("mixture centers/kernels dimension mismatch");
  }
  MixtureDensity mix{std::move(centers), std::move(weights), {}};
  mix.kernels.reserve(specs.size());
  for (const auto& s : specs) mix.kernels.push_back(bind(s, ctx));
  return mix;
}

namespace {

// Per-dimension displacement grid: queries (M) against centers (N) -> M x N,
// wrapped on circular dims.
ad::Var displacement_grid(const ad::Var& queries_col, const ad::Var& centers_row, Topology topo) {
  ad::Var diff = ad::sub(queries_col, centers_row);
  return topo == Topology::kCircular ? ad::wrap_angle(diff) : diff;
}

// Sum of per-dimension log kernel values for the first `upto` dims: M x N.
ad::Var log_kernel_grid(const MixtureDensity& mix, const ad::Var& x2d, int upto) {
  const int m = x2d->value.dim(0);
  const int n = mix.n();
  ad::Var total;
  for (int d = 0; d < upto; ++d) {
    const KernelVar& k = mix.kernels[static_cast<size_t>(d)];
    ad::Var q = ad::reshape(ad::select_col(x2d, d), {m, 1});
    ad::Var c = ad::reshape(ad::select_col(mix.centers, d), {1, n});
    ad::Var u = displacement_grid(q, c, k.topology);
    ad::Var lk = kernel_log_density(k.family, u, k.bandwidth);
    total = d == 0 ? lk : ad::add(total, lk);
  }
  return total;
}

}  // namespace

ad::Var kde_log_density(const MixtureDensity& mix, const ad::Var& x) {
  const bool single = x->value.rank() == 1;
  if (single && x->value.numel() != mix.d()) {
    throw std::invalid_argument("query length does not match mixture dimension");
  }
  if (!single && (x->value.rank() != 2 || x->value.dim(1) != mix.d())) {
    throw std::invalid_argument("queries must be M x D, got " + x->value.shape_str());
  }
  ad::Var x2d = single ? ad::reshape(x, {1, mix.d()}) : x;
  ad::Var logk = log_kernel_grid(mix, x2d, mix.d());  // M x N
  ad::Var logw = ad::log(ad::clamp_min(mix.weights, 1e-300));
  ad::Var scored = ad::add(logk, ad::reshape(logw, {1, mix.n()}));
  ad::Var lse = ad::logsumexp(scored, 1);  // M
  ad::Var floored = ad::clamp_min(lse, kKdeLogFloor);
  return single ? ad::reshape(floored, {}) : floored;
}

KdeDraws kde_sample(const MixtureDensity& mix, int n, RngStream& rng) {
  if (n < 1) throw std::invalid_argument("kde_sample needs n >= 1");
  const int d = mix.d();
  KdeDraws out;
  out.samples = Tensor({n, d});
  out.ancestors.resize(static_cast<size_t>(n));
  const std::vector<double> prefix = categorical_prefix(mix.weights->value);
  for (int i = 0; i < n; ++i) {
    const int a = categorical_sample_prefix(prefix, rng);
    out.ancestors[static_cast<size_t>(i)] = a;
    for (int j = 0; j < d; ++j) {
      const KernelVar& k = mix.kernels[static_cast<size_t>(j)];
      const double noise = kernel_sample_val(k.family, k.bandwidth->value.item(), rng);
      double v = mix.centers->value.at(a, j) + noise;
      if (k.topology == Topology::kCircular) v = special::wrap_angle(v);
      out.samples.at(i, j) = v;
    }
  }
  return out;
}

ad::Var conditional_cdf(const MixtureDensity& mix, const ad::Var& x, int d) {
  if (d < 0 || d >= mix.d()) throw std::invalid_argument("conditional_cdf: dimension out of range");
  if (x->value.rank() != 1 || x->value.numel() != mix.d()) {
    throw std::invalid_argument("conditional_cdf expects a D vector query");
  }
  for (int j = 0; j <= d; ++j) {
    if (mix.kernels[static_cast<size_t>(j)].family == KernelFamily::kEpanechnikov) {
      throw std::invalid_argument(
          "conditional_cdf: epanechnikov kernels induce discontinuous CDFs and are unsupported");
    }
  }
  const int n = mix.n();
  // responsibilities from the conditioning dims (uniform in w when d == 0)
  ad::Var logw = ad::log(ad::clamp_min(mix.weights, 1e-300));
  ad::Var omega;
  if (d == 0) {
    omega = ad::softmax(logw);
  } else {
    ad::Var x2d = ad::reshape(x, {1, mix.d()});
    ad::Var logk = log_kernel_grid(mix, x2d, d);  // 1 x N over dims < d
    ad::Var scored = ad::add(ad::reshape(logk, {n}), logw);
    omega = ad::softmax(scored);
  }
  const KernelVar& k = mix.kernels[static_cast<size_t>(d)];
  ad::Var xd = ad::reshape(ad::gather(ad::reshape(x, {mix.d()}), {d}), {});
  ad::Var centers_d = ad::select_col(mix.centers, d);
  ad::Var cdfs;
  if (k.family == KernelFamily::kGaussian) {
    cdfs = gaussian_cdf(xd, centers_d, k.bandwidth);
  } else {
    cdfs = von_mises_cdf(xd, centers_d, k.bandwidth);
  }
  return ad::dot(omega, cdfs);
}

StateSummary weighted_mean(const ParticleSet& ps) {
  const int d = ps.d();
  std::vector<ad::Var> dims;
  std::vector<bool> degenerate(static_cast<size_t>(d), false);
  dims.reserve(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) {
    ad::Var col = ad::select_col(ps.particles, j);
    if (ps.dim_topology[static_cast<size_t>(j)] == Topology::kLinear) {
      dims.push_back(ad::reshape(ad::dot(ps.weights, col), {1}));
      continue;
    }
    ad::Var s = ad::dot(ps.weights, ad::sin(col));
    ad::Var c = ad::dot(ps.weights, ad::cos(col));
    const double resultant = std::hypot(s->value.item(), c->value.item());
    if (resultant < 1e-12) {
      degenerate[static_cast<size_t>(j)] = true;
      dims.push_back(ad::constant(Tensor({1}, {0.0})));
    } else {
      dims.push_back(ad::reshape(ad::wrap_angle(ad::atan2(s, c)), {1}));
    }
  }
  ad::Var mean_node = ad::concat(dims, 0);
  return StateSummary{mean_node->value, mean_node, std::move(degenerate), ps};
}

ad::Var barycenter_rows(const ad::Var& alpha, const ad::Var& particles,
                        const std::vector<Topology>& topology) {
  const int d = particles->value.dim(1);
  if (static_cast<int>(topology.size()) != d) {
    throw std::invalid_argument("barycenter_rows topology size mismatch");
  }
  std::vector<ad::Var> cols;
  cols.reserve(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) {
    ad::Var col = ad::select_col(particles, j);
    const int n = particles->value.dim(0);
    if (topology[static_cast<size_t>(j)] == Topology::kLinear) {
      cols.push_back(ad::select_col(ad::matmul(alpha, ad::reshape(col, {n, 1})), 0));
    } else {
      ad::Var sc = ad::matmul(alpha, ad::stack_cols({ad::sin(col), ad::cos(col)}));
      cols.push_back(ad::wrap_angle(ad::atan2(ad::select_col(sc, 0), ad::select_col(sc, 1))));
    }
  }
  return ad::stack_cols(cols);
}

}  // namespace mdpf

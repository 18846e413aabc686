#include "mdpf/resamplers.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdpf/special.hpp"

namespace mdpf {

namespace {

ad::Var uniform_weights(int n) {
  return ad::constant(Tensor({n}, 1.0 / static_cast<double>(n)));
}

std::vector<int> draw_ancestors(const Tensor& weights, int n, RngStream& rng) {
  const std::vector<double> prefix = categorical_prefix(weights);
  std::vector<int> idx(static_cast<size_t>(n));
  for (auto& i : idx) i = categorical_sample_prefix(prefix, rng);
  return idx;
}

}  // namespace

const char* resampler_kind_name(ResamplerKind k) {
  switch (k) {
    case ResamplerKind::kTgDiscrete: return "tg_discrete";
    case ResamplerKind::kDis: return "dis";
    case ResamplerKind::kSr: return "sr";
    case ResamplerKind::kConcrete: return "concrete";
    case ResamplerKind::kOt: return "ot";
    case ResamplerKind::kTgMixture: return "tg_mixture";
    case ResamplerKind::kIrg: return "irg";
    case ResamplerKind::kIwsg: return "iwsg";
  }
  return "?";
}

ResamplerKind resampler_kind_from_name(const std::string& name) {
  for (ResamplerKind k :
       {ResamplerKind::kTgDiscrete, ResamplerKind::kDis, ResamplerKind::kSr,
        ResamplerKind::kConcrete, ResamplerKind::kOt, ResamplerKind::kTgMixture,
        ResamplerKind::kIrg, ResamplerKind::kIwsg}) {
    if (name == resampler_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown resampler kind '" + name + "'");
}

void ResamplerConfig::validate() const {
  if (sr_lambda < 0.0 || sr_lambda > 1.0) throw std::invalid_argument("sr_lambda must be in [0,1]");
  if (!(concrete_temperature > 0.0)) throw std::invalid_argument("concrete_temperature must be > 0");
  if (!(ot_epsilon > 0.0)) throw std::invalid_argument("ot_epsilon must be > 0");
  if (!(ot_scaling > 0.0 && ot_scaling < 1.0)) throw std::invalid_argument("ot_scaling must be in (0,1)");
  if (!(ot_threshold > 0.0)) throw std::invalid_argument("ot_threshold must be > 0");
  if (ot_max_iters < 1) throw std::invalid_argument("ot_max_iters must be >= 1");
}

// ---------------------------------------------------------------------------
// Sinkhorn
// ---------------------------------------------------------------------------

namespace {

// One value-level half-update: u_i = eps*(log_a_i - lse_j((v_j - C_ij)/eps)).
void sinkhorn_update_rows(std::vector<double>& u, const std::vector<double>& v,
                          const Tensor& cost, const std::vector<double>& log_marg, double eps) {
  const int n = static_cast<int>(u.size());
  for (int i = 0; i < n; ++i) {
    double m = -1e300;
    for (int j = 0; j < n; ++j) m = std::max(m, (v[static_cast<size_t>(j)] - cost.at(i, j)) / eps);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp((v[static_cast<size_t>(j)] - cost.at(i, j)) / eps - m);
    u[static_cast<size_t>(i)] = eps * (log_marg[static_cast<size_t>(i)] - (m + std::log(s)));
  }
}

void sinkhorn_update_cols(const std::vector<double>& u, std::vector<double>& v,
                          const Tensor& cost, const std::vector<double>& log_marg, double eps) {
  const int n = static_cast<int>(v.size());
  for (int j = 0; j < n; ++j) {
    double m = -1e300;
    for (int i = 0; i < n; ++i) m = std::max(m, (u[static_cast<size_t>(i)] - cost.at(i, j)) / eps);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp((u[static_cast<size_t>(i)] - cost.at(i, j)) / eps - m);
    v[static_cast<size_t>(j)] = eps * (log_marg[static_cast<size_t>(j)] - (m + std::log(s)));
  }
}

// L1 marginal residual of the coupling implied by (u, v) at eps.
double sinkhorn_residual(const std::vector<double>& u, const std::vector<double>& v,
                         const Tensor& cost, const std::vector<double>& a,
                         const std::vector<double>& b, double eps) {
  const int n = static_cast<int>(u.size());
  double err = 0.0;
  std::vector<double> colsum(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double rowsum = 0.0;
    for (int j = 0; j < n; ++j) {
      const double p =
          std::exp((u[static_cast<size_t>(i)] + v[static_cast<size_t>(j)] - cost.at(i, j)) / eps);
      rowsum += p;
      colsum[static_cast<size_t>(j)] += p;
    }
    err += std::fabs(rowsum - a[static_cast<size_t>(i)]);
  }
  for (int j = 0; j < n; ++j) err += std::fabs(colsum[static_cast<size_t>(j)] - b[static_cast<size_t>(j)]);
  return err;
}

}  // namespace

SinkhornResult sinkhorn(const ad::Var& cost, const ad::Var& weights, double epsilon,
                        double scaling, double threshold, int max_iters) {
  const Tensor& c = cost->value;
  if (c.rank() != 2 || c.dim(0) != c.dim(1)) {
    throw std::invalid_argument("sinkhorn cost must be square, got " + c.shape_str());
  }
  const int n = c.dim(0);
  if (weights->value.numel() != n) throw std::invalid_argument("sinkhorn weights length mismatch");
  for (std::int64_t i = 0; i < c.numel(); ++i) {
    if (!std::isfinite(c[i])) throw std::invalid_argument("sinkhorn cost has non-finite entries");
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> a(static_cast<size_t>(n), inv_n);
  std::vector<double> b(static_cast<size_t>(n));
  std::vector<double> log_a(static_cast<size_t>(n), -std::log(static_cast<double>(n)));
  std::vector<double> log_b(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    b[static_cast<size_t>(j)] = std::max(weights->value[j], 1e-30);
    log_b[static_cast<size_t>(j)] = std::log(b[static_cast<size_t>(j)]);
  }

  double cmax = 0.0;
  for (std::int64_t i = 0; i < c.numel(); ++i) cmax = std::max(cmax, c[i]);
  double eps_cur = std::max(epsilon, cmax);

  std::vector<double> u(static_cast<size_t>(n), 0.0), v(static_cast<size_t>(n), 0.0);
  bool converged = false;
  int iters = 0;
  while (iters < max_iters) {
    sinkhorn_update_rows(u, v, c, log_a, eps_cur);
    sinkhorn_update_cols(u, v, c, log_b, eps_cur);
    ++iters;
    if (eps_cur > epsilon) {
      eps_cur = std::max(epsilon, eps_cur * scaling);
      continue;  // keep annealing before testing convergence
    }
    if (sinkhorn_residual(u, v, c, a, b, eps_cur) < threshold) {
      converged = true;
      break;
    }
  }

  // Unroll the last 10 updates at the target eps on the graph; entering at the
  // (near-)fixed point, the forward values stay put while gradients flow into
  // the cost and the weights.
  using ad::Var;
  const double eps = epsilon;
  Var log_a_node = ad::constant(Tensor({n}, -std::log(static_cast<double>(n))));
  Var log_b_node = ad::log(ad::clamp_min(weights, 1e-30));
  Var cost_t = ad::transpose(cost);
  Var un = ad::constant(Tensor({n}, std::vector<double>(u)));
  Var vn = ad::constant(Tensor({n}, std::vector<double>(v)));
  for (int k = 0; k < 10; ++k) {
    Var mrow = ad::div(ad::sub(ad::reshape(vn, {1, n}), cost), eps);
    un = ad::mul(ad::sub(log_a_node, ad::logsumexp(mrow, 1)), eps);
    Var mcol = ad::div(ad::sub(ad::reshape(un, {1, n}), cost_t), eps);
    vn = ad::mul(ad::sub(log_b_node, ad::logsumexp(mcol, 1)), eps);
  }
  Var log_coupling = ad::div(
      ad::sub(ad::add(ad::reshape(un, {n, 1}), ad::reshape(vn, {1, n})), cost), eps);
  return SinkhornResult{ad::exp(log_coupling), converged, iters};
}

// ---------------------------------------------------------------------------
// Discrete resamplers
// ---------------------------------------------------------------------------

ParticleSet resample_tg_discrete(const ParticleSet& ps, RngStream& rng) {
  const int n = ps.n(), d = ps.d();
  const std::vector<int> idx = draw_ancestors(ps.weights->value, n, rng);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) = ps.particles->value.at(idx[static_cast<size_t>(i)], j);
  return ParticleSet{ad::constant(std::move(out)), uniform_weights(n), std::nullopt,
                     ps.dim_topology};
}

ParticleSet resample_dis(const ParticleSet& ps, RngStream& rng) {
  const int n = ps.n();
  const std::vector<int> idx = draw_ancestors(ps.weights->value, n, rng);
  ad::Var parts = ad::gather_rows(ps.particles, idx);
  ad::Var wsel = ad::gather(ps.weights, idx);
  // forward value 1, gradient of w_{j_i}/v with v detached at w_{j_i}
  ad::Var what = ad::div(wsel, ad::stop_gradient(wsel));
  ad::Var wnorm = ad::div(what, ad::sum(what));
  return ParticleSet{parts, wnorm, std::nullopt, ps.dim_topology};
}

ParticleSet resample_sr(const ParticleSet& ps, double lambda, RngStream& rng) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("sr lambda must be in [0,1]");
  const int n = ps.n();
  const double unif = lambda / static_cast<double>(n);
  Tensor v({n});
  for (int i = 0; i < n; ++i) v[i] = (1.0 - lambda) * ps.weights->value[i] + unif;
  const std::vector<int> idx = draw_ancestors(v, n, rng);
  ad::Var parts = ad::gather_rows(ps.particles, idx);
  ad::Var wsel = ad::gather(ps.weights, idx);
  // gradient flows through numerator AND denominator of w/((1-l)w + l/N)
  ad::Var den = ad::add(ad::mul(wsel, 1.0 - lambda), unif);
  ad::Var what = ad::div(wsel, den);
  ad::Var wnorm = ad::div(what, ad::sum(what));
  return ParticleSet{parts, wnorm, std::nullopt, ps.dim_topology};
}

ParticleSet resample_concrete(const ParticleSet& ps, double temperature, RngStream& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("concrete temperature must be > 0");
  const int n = ps.n();
  Tensor gumbels({n, n});
  for (std::int64_t i = 0; i < gumbels.numel(); ++i) gumbels[i] = gumbel_sample(rng);
  ad::Var logw = ad::log(ad::clamp_min(ps.weights, 1e-30));
  ad::Var logits =
      ad::div(ad::add(ad::reshape(logw, {1, n}), ad::constant(std::move(gumbels))), temperature);
  ad::Var alpha = ad::softmax(logits);
  ad::Var parts = barycenter_rows(alpha, ps.particles, ps.dim_topology);
  return ParticleSet{parts, uniform_weights(n), std::nullopt, ps.dim_topology};
}

OtResample resample_ot(const ParticleSet& ps, const ResamplerConfig& cfg) {
  const int n = ps.n(), d = ps.d();
  ad::Var cost;
  for (int j = 0; j < d; ++j) {
    ad::Var col = ad::select_col(ps.particles, j);
    ad::Var diff = ad::sub(ad::reshape(col, {n, 1}), ad::reshape(col, {1, n}));
    ad::Var sq;
    if (ps.dim_topology[static_cast<size_t>(j)] == Topology::kCircular) {
      // squared chordal distance on the unit circle: |e^{ia} - e^{ib}|^2 = 2 - 2cos(a-b)
      sq = ad::sub(2.0, ad::mul(ad::cos(diff), 2.0));
    } else {
      sq = ad::mul(diff, diff);
    }
    cost = j == 0 ? sq : ad::add(cost, sq);
  }
  SinkhornResult sk = sinkhorn(cost, ps.weights, cfg.ot_epsilon, cfg.ot_scaling, cfg.ot_threshold,
                               cfg.ot_max_iters);
  ad::Var parts = barycenter_rows(ad::mul(sk.coupling, static_cast<double>(n)), ps.particles,
                                  ps.dim_topology);
  return OtResample{ParticleSet{parts, uniform_weights(n), std::nullopt, ps.dim_topology},
                    sk.converged};
}

// ---------------------------------------------------------------------------
// Mixture resamplers
// ---------------------------------------------------------------------------

ParticleSet resample_tg_mixture(const MixtureDensity& mix, int n, RngStream& rng) {
  KdeDraws draws = kde_sample(mix, n, rng);
  return ParticleSet{ad::constant(std::move(draws.samples)), uniform_weights(n), std::nullopt,
                     mix.topology()};
}

ParticleSet resample_iwsg(const MixtureDensity& mix, int n, RngStream& rng) {
  KdeDraws draws = kde_sample(mix, n, rng);
  ad::Var z = ad::constant(std::move(draws.samples));
  if (!ad::grad_enabled()) {
    // forward weights are exactly 1/n; skip the O(n^2) density pass in inference
    return ParticleSet{z, uniform_weights(n), std::nullopt, mix.topology()};
  }
  ad::Var logm = kde_log_density(mix, z);  // n-vector, live in mixture parameters
  // forward exp(0) = 1 exactly; gradient = grad(log m) = grad(m)/m at the draw
  ad::Var ratio = ad::exp(ad::sub(logm, ad::stop_gradient(logm)));
  ad::Var w = ad::div(ratio, static_cast<double>(n));
  return ParticleSet{z, w, std::nullopt, mix.topology()};
}

ParticleSet resample_irg(const MixtureDensity& mix, int n, RngStream& rng) {
  for (const auto& k : mix.kernels) {
    if (k.family == KernelFamily::kEpanechnikov) {
      throw std::invalid_argument("irg resampling does not support epanechnikov kernels");
    }
  }
  const int d = mix.d();
  KdeDraws draws = kde_sample(mix, n, rng);
  if (!ad::grad_enabled()) {
    // the surrogate's forward value is the raw draw; skip the Jacobian work
    return ParticleSet{ad::constant(std::move(draws.samples)), uniform_weights(n), std::nullopt,
                       mix.topology()};
  }
  std::vector<ad::Var> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor zrow({d});
    for (int j = 0; j < d; ++j) zrow[j] = draws.samples.at(i, j);
    // z enters as a throwaway leaf so the conditional-CDF Jacobian can be read
    // off the same graph that carries the mixture-parameter dependence.
    ad::Var z = ad::variable(zrow);
    std::vector<ad::Var> s(static_cast<size_t>(d));
    std::vector<Tensor> jac(static_cast<size_t>(d));
    for (int k = 0; k < d; ++k) {
      s[static_cast<size_t>(k)] = conditional_cdf(mix, z, k);
      jac[static_cast<size_t>(k)] = ad::partials(s[static_cast<size_t>(k)], {z})[0];
    }
    // invert the lower-triangular Jacobian by forward substitution
    std::vector<std::vector<double>> inv(static_cast<size_t>(d),
                                         std::vector<double>(static_cast<size_t>(d), 0.0));
    for (int col = 0; col < d; ++col) {
      for (int row = col; row < d; ++row) {
        double rhs = row == col ? 1.0 : 0.0;
        for (int l = col; l < row; ++l) {
          rhs -= jac[static_cast<size_t>(row)][l] * inv[static_cast<size_t>(l)][static_cast<size_t>(col)];
        }
        double diag = jac[static_cast<size_t>(row)][row];
        if (std::fabs(diag) < 1e-300) diag = diag < 0.0 ? -1e-300 : 1e-300;
        inv[static_cast<size_t>(row)][static_cast<size_t>(col)] = rhs / diag;
      }
    }
    // surrogate: value = z, gradient = -J^{-1} grad_phi S  (implicit function theorem)
    std::vector<ad::Var> comps(static_cast<size_t>(d));
    for (int k = 0; k < d; ++k) {
      ad::Var zk = ad::constant(draws.samples.at(i, k));
      for (int l = 0; l <= k; ++l) {
        const double coef = inv[static_cast<size_t>(k)][static_cast<size_t>(l)];
        if (coef == 0.0) continue;
        ad::Var delta = ad::sub(s[static_cast<size_t>(l)],
                                ad::constant(s[static_cast<size_t>(l)]->value.item()));
        zk = ad::sub(zk, ad::mul(delta, coef));
      }
      comps[static_cast<size_t>(k)] = ad::reshape(zk, {1});
    }
    rows.push_back(ad::reshape(ad::concat(comps, 0), {1, d}));
  }
  return ParticleSet{ad::concat(rows, 0), uniform_weights(n), std::nullopt, mix.topology()};
}

ResampleResult resample(const ResamplerConfig& cfg, const ParticleSet& ps,
                        const std::optional<MixtureDensity>& mix, int n_out, RngStream& rng) {
  cfg.validate();
  if (cfg.needs_mixture() && !mix) {
    throw std::invalid_argument(std::string("resampler '") + resampler_kind_name(cfg.kind) +
                                "' needs a mixture density");
  }
  switch (cfg.kind) {
    case ResamplerKind::kTgDiscrete:
      return {resample_tg_discrete(ps, rng), true};
    case ResamplerKind::kDis:
      return {resample_dis(ps, rng), true};
    case ResamplerKind::kSr:
      return {resample_sr(ps, cfg.sr_lambda, rng), true};
    case ResamplerKind::kConcrete:
      return {resample_concrete(ps, cfg.concrete_temperature, rng), true};
    case ResamplerKind::kOt: {
      OtResample r = resample_ot(ps, cfg);
      return {std::move(r.set), r.converged};
    }
    case ResamplerKind::kTgMixture:
      return {resample_tg_mixture(*mix, n_out, rng), true};
    case ResamplerKind::kIrg:
      return {resample_irg(*mix, n_out, rng), true};
    case ResamplerKind::kIwsg:
      return {resample_iwsg(*mix, n_out, rng), true};
  }
  throw std::logic_error("unknown resampler kind");
}

}  // namespace mdpf

#include "mdpf/filter.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "json.hpp"
#include "mdpf/special.hpp"

namespace mdpf {

namespace {

Tensor row_of(const Tensor& m, int r) {
  Tensor out({m.dim(1)});
  for (int j = 0; j < m.dim(1); ++j) out[j] = m.at(r, j);
  return out;
}

// log N(resid | 0, scale^2) for a scalar/elementwise residual.
ad::Var log_gaussian(const ad::Var& resid, const ad::Var& variance) {
  ad::Var quad = ad::mul(ad::div(ad::mul(resid, resid), variance), -0.5);
  return ad::sub(quad, ad::mul(ad::log(ad::mul(variance, 2.0 * special::kPi)), 0.5));
}

ad::Var as_len1(const ad::Var& scalar) { return ad::reshape(scalar, {1}); }

void check_scalar(const ad::Var& v, const char* who) {
  if (!v || v->value.numel() != 1) {
    throw std::invalid_argument(std::string(who) + " must be a scalar node");
  }
}

}  // namespace

void FilterConfig::validate() const {
  if (n_particles < 1) throw std::invalid_argument("filter needs n_particles >= 1");
  resampler.validate();
  if (posterior_kernels.empty()) throw std::invalid_argument("filter needs posterior kernels");
  if (dual_measurement && !resampling_kernels) {
    throw std::invalid_argument("dual_measurement requires resampling kernels");
  }
  if (resampling_kernels) {
    if (resampling_kernels->size() != posterior_kernels.size()) {
      throw std::invalid_argument("resampling kernels must cover the same dims as posterior kernels");
    }
    for (size_t j = 0; j < posterior_kernels.size(); ++j) {
      if ((*resampling_kernels)[j].topology != posterior_kernels[j].topology) {
        throw std::invalid_argument("resampling kernel topology mismatch at dim " + std::to_string(j));
      }
    }
  }
}

FilterStepResult filter_step(const FilterConfig& cfg, Ctx& ctx, const DynamicsModel& dyn,
                             const MeasurementModel& meas, const MeasurementModel* meas_resample,
                             const ParticleSet& ps, const Tensor& obs,
                             const std::optional<Tensor>& action, RngStream& rng) {
  cfg.validate();
  if (cfg.dual_measurement != (meas_resample != nullptr)) {
    throw std::invalid_argument(cfg.dual_measurement
                                    ? "dual_measurement needs a resampling measurement model"
                                    : "resampling measurement model given without dual_measurement");
  }
  if (ps.n() != cfg.n_particles) {
    throw std::invalid_argument("particle set has " + std::to_string(ps.n()) +
                                " particles, config expects " + std::to_string(cfg.n_particles));
  }
  if (ps.d() != static_cast<int>(cfg.posterior_kernels.size())) {
    throw std::invalid_argument("posterior kernels cover " +
                                std::to_string(cfg.posterior_kernels.size()) +
                                " dims, particles have " + std::to_string(ps.d()));
  }

  ParticleSet proposed = dyn.propose(ctx, ps, action, rng);
  ParticleSet weighted = meas.weigh(ctx, proposed, obs);
  weighted.resampling_weights.reset();
  MixtureDensity posterior =
      make_mixture(weighted.particles, weighted.weights, cfg.posterior_kernels, ctx);

  ad::Var resample_w = weighted.weights;
  MixtureDensity resampling = posterior;
  if (cfg.dual_measurement) {
    ParticleSet prior = proposed;
    if (prior.resampling_weights) prior.weights = *prior.resampling_weights;
    resample_w = meas_resample->weigh(ctx, prior, obs).weights;
    resampling = make_mixture(weighted.particles, resample_w, *cfg.resampling_kernels, ctx);
    weighted.resampling_weights = resample_w;
  } else if (cfg.resampling_kernels) {
    resampling = make_mixture(weighted.particles, weighted.weights, *cfg.resampling_kernels, ctx);
  }

  ParticleSet base{weighted.particles, resample_w, std::nullopt, weighted.dim_topology};
  ResampleResult rr = resample(cfg.resampler, base, resampling, cfg.n_particles, rng);
  return {std::move(weighted), std::move(posterior), std::move(resampling), std::move(rr.set),
          rr.converged};
}

FilterRun run_filter(const FilterConfig& cfg, Ctx& ctx, const ModelSet& models,
                     const Trajectory& traj, const ParticleSet& init, RngStream& rng,
                     int tbptt_window) {
  traj.validate();
  if (!models.dynamics || !models.measurement) {
    throw std::invalid_argument("run_filter needs dynamics and measurement models");
  }
  if (tbptt_window < 0) throw std::invalid_argument("tbptt_window must be >= 0");

  FilterRun out;
  ParticleSet ps = init;
  const int steps = traj.length();
  for (int t = 0; t < steps; ++t) {
    std::optional<Tensor> action;
    if (traj.actions) action = row_of(*traj.actions, t);
    FilterStepResult step = filter_step(cfg, ctx, *models.dynamics, *models.measurement,
                                        models.measurement_resampling, ps,
                                        row_of(traj.observations, t), action, rng);
    out.converged = out.converged && step.converged;
    out.summaries.push_back(weighted_mean(step.weighted));
    out.posteriors.push_back(std::move(step.posterior));
    ps = std::move(step.resampled);
    if (tbptt_window > 0 && (t + 1) % tbptt_window == 0) {
      ps.particles = ad::stop_gradient(ps.particles);
      ps.weights = ad::stop_gradient(ps.weights);
      if (ps.resampling_weights) ps.resampling_weights = ad::stop_gradient(*ps.resampling_weights);
    }
  }
  out.final_particles = std::move(ps);
  return out;
}

ParticleSet init_particles(const Tensor& state, const std::vector<KernelSpec>& noise, int n,
                           Ctx& ctx, RngStream& rng) {
  if (n < 1) throw std::invalid_argument("init_particles needs n >= 1");
  if (state.rank() != 1 || state.numel() != static_cast<std::int64_t>(noise.size())) {
    throw std::invalid_argument("init_particles: state dim must match kernel count");
  }
  const int d = static_cast<int>(noise.size());
  Tensor center({1, d});
  for (int j = 0; j < d; ++j) center.at(0, j) = state[j];
  MixtureDensity around =
      make_mixture(ad::constant(center), ad::constant(Tensor({1}, 1.0)), noise, ctx);
  KdeDraws draws = kde_sample(around, n, rng);
  std::vector<Topology> topo;
  topo.reserve(noise.size());
  for (const KernelSpec& s : noise) topo.push_back(s.topology);
  return {ad::constant(draws.samples), ad::constant(Tensor({n}, 1.0 / n)), std::nullopt,
          std::move(topo)};
}

SyntheticModelParams SyntheticModelParams::constants(double A, double B, double sigma, double C1,
                                                     double c1, double C2, double c2, double gamma,
                                                     double v) {
  return {ad::constant(A),  ad::constant(B),  ad::constant(sigma),
          ad::constant(C1), ad::constant(c1), ad::constant(C2),
          ad::constant(c2), ad::constant(gamma), ad::constant(v)};
}

std::pair<ad::Var, ad::Var> SyntheticModelParams::branch_weights() const {
  return {ad::sigmoid(ad::neg(v)), ad::sigmoid(v)};
}

void SyntheticModelParams::validate() const {
  check_scalar(A, "A");
  check_scalar(B, "B");
  check_scalar(sigma, "sigma");
  check_scalar(C1, "C1");
  check_scalar(c1, "c1");
  check_scalar(C2, "C2");
  check_scalar(c2, "c2");
  check_scalar(gamma, "gamma");
  check_scalar(v, "v");
  if (!(sigma->value.item() > 0.0) || !(gamma->value.item() > 0.0)) {
    throw std::invalid_argument("sigma and gamma must be positive");
  }
  if (sigma->requires_grad || gamma->requires_grad) {
    throw std::invalid_argument("sigma and gamma are fixed; they must not require grad");
  }
}

GenerativeStepResult generative_pf_step(const SyntheticModelParams& p, const ParticleSet& ps,
                                        double action, double obs,
                                        const ResamplerConfig& resampler, RngStream& rng,
                                        double resampling_bandwidth, double posterior_bandwidth) {
  p.validate();
  ps.validate();
  if (ps.d() != 1 || ps.dim_topology[0] != Topology::kLinear) {
    throw std::invalid_argument("generative_pf_step expects a scalar linear state");
  }
  if (!(resampling_bandwidth > 0.0) || !(posterior_bandwidth > 0.0)) {
    throw std::invalid_argument("bandwidths must be positive");
  }
  const int n = ps.n();

  Tensor eta({n, 1});
  for (int i = 0; i < n; ++i) eta.at(i, 0) = rng.gaussian();
  ad::Var x = ad::add(ad::add(ad::mul(ps.particles, p.A), ad::mul(p.B, action)),
                      ad::mul(p.sigma, ad::constant(eta)));

  ad::Var xv = ad::reshape(x, {n});
  ad::Var gamma2 = ad::mul(p.gamma, p.gamma);
  ad::Var ll1 = log_gaussian(ad::sub(obs, ad::add(ad::mul(xv, p.C1), p.c1)), gamma2);
  ad::Var ll2 = log_gaussian(ad::sub(obs, ad::add(ad::mul(xv, p.C2), p.c2)), gamma2);
  ad::Var log_w1 = ad::neg(ad::softplus(p.v));
  ad::Var log_w2 = ad::neg(ad::softplus(ad::neg(p.v)));
  ad::Var loglik =
      ad::logsumexp(ad::stack_cols({ad::add(ll1, log_w1), ad::add(ll2, log_w2)}), 1);
  ad::Var w = ad::softmax(ad::add(loglik, ad::log(ad::clamp_min(ps.weights, 1e-300))));

  auto gaussian_kernels = [](double bw) {
    return std::vector<KernelVar>{{KernelFamily::kGaussian, Topology::kLinear, ad::constant(bw)}};
  };
  MixtureDensity posterior{x, w, gaussian_kernels(posterior_bandwidth)};
  MixtureDensity resampling{x, w, gaussian_kernels(resampling_bandwidth)};
  ParticleSet weighted{x, w, std::nullopt, ps.dim_topology};
  ResampleResult rr = resample(resampler, weighted, resampling, n, rng);
  return {std::move(weighted), std::move(posterior), std::move(resampling), std::move(rr.set),
          rr.converged};
}

SyntheticModelParams synthetic_truth_params() {
  const SyntheticTruth t;
  return SyntheticModelParams::constants(t.A, t.B, t.sigma, t.C1, t.c1, t.C2, t.c2, t.gamma,
                                         std::log(t.w2 / (1.0 - t.w2)));
}

SyntheticTrainable SyntheticTrainable::make(const std::string& prefix, double A0, double B0,
                                            double C1_0, double c1_0, double C2_0, double c2_0,
                                            double w2_0) {
  SyntheticTrainable out;
  out.A = Parameter(prefix + ".A", Tensor::scalar(A0));
  out.B = Parameter(prefix + ".B", Tensor::scalar(B0));
  out.C1 = Parameter(prefix + ".C1", Tensor::scalar(C1_0));
  out.c1 = Parameter(prefix + ".c1", Tensor::scalar(c1_0));
  out.C2 = Parameter(prefix + ".C2", Tensor::scalar(C2_0));
  out.c2 = Parameter(prefix + ".c2", Tensor::scalar(c2_0));
  out.v = Parameter::logistic_pair(prefix + ".w", 1.0 - w2_0);
  return out;
}

SyntheticModelParams SyntheticTrainable::bind(Ctx& ctx) const {
  const SyntheticTruth t;
  return {ctx.value(A),  ctx.value(B),  ad::constant(t.sigma),
          ctx.value(C1), ctx.value(c1), ctx.value(C2),
          ctx.value(c2), ad::constant(t.gamma), ctx.leaf(v)};
}

std::vector<Parameter*> SyntheticTrainable::parameters() {
  return {&A, &B, &C1, &c1, &C2, &c2, &v};
}

FilterRun run_synthetic_filter(const SyntheticModelParams& p, const Trajectory& traj,
                               int n_particles, const ResamplerConfig& resampler, RngStream& rng,
                               double resampling_bandwidth, double posterior_bandwidth,
                               int tbptt_window) {
  traj.validate();
  if (!traj.actions) throw std::invalid_argument("run_synthetic_filter needs actions");
  if (traj.state_dim() != 1 || traj.observations.dim(1) != 1) {
    throw std::invalid_argument("synthetic state and observation are scalar");
  }
  if (n_particles < 1) throw std::invalid_argument("n_particles must be >= 1");
  if (tbptt_window < 0) throw std::invalid_argument("tbptt_window must be >= 0");

  Tensor x0({n_particles, 1});
  for (int i = 0; i < n_particles; ++i) x0.at(i, 0) = rng.gaussian();
  ParticleSet ps{ad::constant(x0),
                 ad::constant(Tensor::full({n_particles}, 1.0 / n_particles)),
                 std::nullopt,
                 {Topology::kLinear}};

  FilterRun out;
  for (int t = 0; t < traj.length(); ++t) {
    GenerativeStepResult step =
        generative_pf_step(p, ps, traj.actions->at(t, 0), traj.observations.at(t, 0), resampler,
                           rng, resampling_bandwidth, posterior_bandwidth);
    out.converged = out.converged && step.converged;
    out.summaries.push_back(weighted_mean(step.weighted));
    out.posteriors.push_back(std::move(step.posterior));
    ps = std::move(step.resampled);
    if (tbptt_window > 0 && (t + 1) % tbptt_window == 0) {
      ps.particles = ad::stop_gradient(ps.particles);
      ps.weights = ad::stop_gradient(ps.weights);
      if (ps.resampling_weights) ps.resampling_weights = ad::stop_gradient(*ps.resampling_weights);
    }
  }
  out.final_particles = std::move(ps);
  return out;
}

GaussianMixtureBelief GaussianMixtureBelief::single(double mean, double var) {
  if (!(var > 0.0)) throw std::invalid_argument("belief variance must be positive");
  return {{{ad::constant(1.0), ad::constant(mean), ad::constant(var)}}};
}

void GaussianMixtureBelief::validate() const {
  if (components.empty()) throw std::invalid_argument("belief needs at least one component");
  double total = 0.0;
  for (const GaussianComponent& c : components) {
    check_scalar(c.weight, "component weight");
    check_scalar(c.mean, "component mean");
    check_scalar(c.var, "component variance");
    const double w = c.weight->value.item();
    if (!(w >= -1e-12)) throw std::invalid_argument("belief weight " + std::to_string(w) + " < 0");
    if (!(c.var->value.item() > 0.0)) {
      throw std::invalid_argument("belief variance must be positive");
    }
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("belief weights sum to " + std::to_string(total));
  }
}

GaussianMixtureBelief mixture_kf_predict(const GaussianMixtureBelief& belief, const ad::Var& A,
                                         const ad::Var& B, const ad::Var& sigma, double action) {
  belief.validate();
  check_scalar(A, "A");
  check_scalar(B, "B");
  check_scalar(sigma, "sigma");
  ad::Var a2 = ad::mul(A, A);
  ad::Var shift = ad::mul(B, action);
  ad::Var noise = ad::mul(sigma, sigma);
  GaussianMixtureBelief out;
  out.components.reserve(belief.components.size());
  for (const GaussianComponent& c : belief.components) {
    out.components.push_back(
        {c.weight, ad::add(ad::mul(A, c.mean), shift), ad::add(ad::mul(a2, c.var), noise)});
  }
  return out;
}

GaussianMixtureBelief mixture_kf_update(const GaussianMixtureBelief& belief, const ad::Var& C1,
                                        const ad::Var& c1, const ad::Var& C2, const ad::Var& c2,
                                        const ad::Var& gamma, const ad::Var& w1, const ad::Var& w2,
                                        double obs, int component_cap) {
  belief.validate();
  check_scalar(gamma, "gamma");
  check_scalar(w1, "w1");
  check_scalar(w2, "w2");
  if (2 * belief.size() > component_cap) {
    throw std::runtime_error("mixture KF would exceed " + std::to_string(component_cap) +
                             " components; filter shorter sequences or raise the cap");
  }
  ad::Var gamma2 = ad::mul(gamma, gamma);
  struct Branch {
    ad::Var slope, offset, log_w;
  };
  const Branch branches[2] = {{C1, c1, ad::log(ad::clamp_min(w1, 1e-300))},
                              {C2, c2, ad::log(ad::clamp_min(w2, 1e-300))}};

  GaussianMixtureBelief out;
  std::vector<ad::Var> log_w;
  for (const GaussianComponent& k : belief.components) {
    ad::Var log_prior = ad::log(ad::clamp_min(k.weight, 1e-300));
    for (const Branch& br : branches) {
      ad::Var predicted = ad::add(ad::mul(br.slope, k.mean), br.offset);
      ad::Var innovation_var = ad::add(ad::mul(ad::mul(br.slope, br.slope), k.var), gamma2);
      ad::Var resid = ad::sub(obs, predicted);
      ad::Var gain = ad::div(ad::mul(k.var, br.slope), innovation_var);
      out.components.push_back({ad::Var{}, ad::add(k.mean, ad::mul(gain, resid)),
                                ad::div(ad::mul(k.var, gamma2), innovation_var)});
      log_w.push_back(
          ad::add(ad::add(log_prior, br.log_w), log_gaussian(resid, innovation_var)));
    }
  }

  std::vector<ad::Var> stacked;
  stacked.reserve(log_w.size());
  for (const ad::Var& lw : log_w) stacked.push_back(as_len1(lw));
  ad::Var lse = ad::logsumexp(ad::concat(stacked, 0));
  for (size_t i = 0; i < out.components.size(); ++i) {
    out.components[i].weight = ad::exp(ad::sub(log_w[i], lse));
  }
  return out;
}

ad::Var mixture_kf_nll(const GaussianMixtureBelief& belief, double x_true) {
  belief.validate();
  std::vector<ad::Var> terms;
  terms.reserve(belief.components.size());
  for (const GaussianComponent& c : belief.components) {
    ad::Var log_pdf = log_gaussian(ad::sub(x_true, c.mean), c.var);
    terms.push_back(as_len1(ad::add(ad::log(ad::clamp_min(c.weight, 1e-300)), log_pdf)));
  }
  return ad::neg(ad::logsumexp(ad::concat(terms, 0)));
}

double belief_mean(const GaussianMixtureBelief& belief) {
  belief.validate();
  double m = 0.0;
  for (const GaussianComponent& c : belief.components) {
    m += c.weight->value.item() * c.mean->value.item();
  }
  return m;
}

double belief_density(const GaussianMixtureBelief& belief, double x) {
  belief.validate();
  double dens = 0.0;
  for (const GaussianComponent& c : belief.components) {
    const double mu = c.mean->value.item();
    const double var = c.var->value.item();
    dens += c.weight->value.item() * std::exp(-0.5 * (x - mu) * (x - mu) / var) /
            std::sqrt(2.0 * special::kPi * var);
  }
  return dens;
}

std::string posterior_json_line(const MixtureDensity& mix) {
  nlohmann::json j;
  const int n = mix.n();
  const int d = mix.d();
  std::vector<std::vector<double>> centers(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    centers[static_cast<size_t>(i)].resize(static_cast<size_t>(d));
    for (int k = 0; k < d; ++k) {
      centers[static_cast<size_t>(i)][static_cast<size_t>(k)] = mix.centers->value.at(i, k);
    }
  }
  std::vector<double> weights(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) weights[static_cast<size_t>(i)] = mix.weights->value[i];
  nlohmann::json kernels = nlohmann::json::array();
  for (const KernelVar& k : mix.kernels) {
    kernels.push_back({{"family", kernel_family_name(k.family)},
                       {"topology", k.topology == Topology::kCircular ? "circular" : "linear"},
                       {"bandwidth", k.bandwidth->value.item()}});
  }
  j["centers"] = centers;
  j["weights"] = weights;
  j["kernels"] = kernels;
  return j.dump();
}

void dump_posteriors_jsonl(const std::vector<MixtureDensity>& posteriors, std::ostream& os) {
  for (const MixtureDensity& m : posteriors) os << posterior_json_line(m) << '\n';
}

}  // namespace mdpf

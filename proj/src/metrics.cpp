#include "mdpf/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "mdpf/filter.hpp"
#include "mdpf/special.hpp"
#include "mdpf/training.hpp"

namespace mdpf {

double eval_nll(const std::vector<MixtureDensity>& posteriors, const Trajectory& traj) {
  ad::NoGradGuard guard;
  return nll_loss(posteriors, traj)->value.item();
}

double eval_nll(const std::vector<std::vector<MixtureDensity>>& posteriors,
                const std::vector<Trajectory>& trajs) {
  if (posteriors.size() != trajs.size()) {
    throw std::invalid_argument("posterior runs do not match trajectory count");
  }
  if (trajs.empty()) throw std::invalid_argument("eval_nll needs at least one trajectory");
  double total = 0.0;
  for (size_t i = 0; i < trajs.size(); ++i) total += eval_nll(posteriors[i], trajs[i]);
  return total / static_cast<double>(trajs.size());
}

namespace {

struct SquaredErrors {
  double all = 0.0;
  double linear = 0.0;
  double circular = 0.0;
  std::int64_t steps = 0;
  int dims = 0;
};

void accumulate_squared_errors(SquaredErrors& acc, const std::vector<StateSummary>& summaries,
                               const Trajectory& traj) {
  traj.validate();
  if (traj.labels.empty()) throw std::invalid_argument("eval_rmse needs at least one labeled step");
  if (static_cast<int>(summaries.size()) != traj.length()) {
    throw std::invalid_argument("summary count does not match trajectory length");
  }
  for (int t : traj.labels) {
    const StateSummary& s = summaries[static_cast<size_t>(t)];
    const std::vector<Topology>& topo = s.source.dim_topology;
    if (static_cast<int>(topo.size()) != traj.state_dim() ||
        s.mean.numel() != traj.state_dim()) {
      throw std::invalid_argument("summary dimension does not match trajectory state");
    }
    if (acc.dims == 0) {
      acc.dims = traj.state_dim();
    } else if (acc.dims != traj.state_dim()) {
      throw std::invalid_argument("trajectories disagree on state dimension");
    }
    for (int d = 0; d < traj.state_dim(); ++d) {
      double e = s.mean[d] - traj.states.at(t, d);
      if (topo[static_cast<size_t>(d)] == Topology::kCircular) {
        e = special::wrap_angle(e);
        acc.circular += e * e;
      } else {
        acc.linear += e * e;
      }
      acc.all += e * e;
    }
    ++acc.steps;
  }
}

RmseReport report_from(const SquaredErrors& acc) {
  const double steps = static_cast<double>(acc.steps);
  RmseReport out;
  out.combined = std::sqrt(acc.all / (steps * static_cast<double>(acc.dims)));
  out.position = std::sqrt(acc.linear / steps);
  out.angular = std::sqrt(acc.circular / steps);
  return out;
}

}  // namespace

RmseReport eval_rmse(const std::vector<StateSummary>& summaries, const Trajectory& traj) {
  SquaredErrors acc;
  accumulate_squared_errors(acc, summaries, traj);
  return report_from(acc);
}

RmseReport eval_rmse(const std::vector<std::vector<StateSummary>>& summaries,
                     const std::vector<Trajectory>& trajs) {
  if (summaries.size() != trajs.size()) {
    throw std::invalid_argument("summary runs do not match trajectory count");
  }
  if (trajs.empty()) throw std::invalid_argument("eval_rmse needs at least one trajectory");
  SquaredErrors acc;
  for (size_t i = 0; i < trajs.size(); ++i) accumulate_squared_errors(acc, summaries[i], trajs[i]);
  return report_from(acc);
}

double ProbeResult::total_variance() const {
  double total = 0.0;
  for (std::int64_t i = 0; i < center_variance.numel(); ++i) total += center_variance[i];
  for (std::int64_t i = 0; i < weight_variance.numel(); ++i) total += weight_variance[i];
  return total;
}

ad::Var probe_mean_loss(const ParticleSet& ps) {
  return ad::dot(ps.weights, ad::sum(ps.particles, 1));
}

ProbeResult gradient_probe(ResamplerKind kind, const ProbeSpec& spec, const ProbeLoss& loss,
                           int replicates, RngStream& rng) {
  if (replicates < 2) throw std::invalid_argument("gradient_probe needs >= 2 replicates");
  if (!loss) throw std::invalid_argument("gradient_probe needs a loss");
  Tensor centers = spec.centers;
  if (centers.rank() == 1) {
    centers = Tensor({centers.dim(0), 1},
                     std::vector<double>(centers.data(), centers.data() + centers.numel()));
  }
  if (centers.rank() != 2 || centers.dim(0) < 1 || centers.dim(1) < 1) {
    throw std::invalid_argument("probe centers must be K or K x D");
  }
  const int K = centers.dim(0);
  const int D = centers.dim(1);
  if (spec.weights.rank() != 1 || spec.weights.dim(0) != K) {
    throw std::invalid_argument("probe weights must be a K-vector");
  }
  double mass = 0.0;
  for (std::int64_t i = 0; i < spec.weights.numel(); ++i) {
    if (!(spec.weights[i] > 0.0)) {
      throw std::invalid_argument("probe weights must be strictly positive");
    }
    mass += spec.weights[i];
  }
  if (!(spec.bandwidth > 0.0)) throw std::invalid_argument("probe bandwidth must be positive");
  if (spec.draws < 0) throw std::invalid_argument("probe draws must be >= 0");
  ResamplerConfig rc;
  rc.kind = kind;
  rc.validate();
  // atom resamplers emit one output per input atom, whatever n_out says
  const int n_out = rc.needs_mixture() && spec.draws > 0 ? spec.draws : K;

  Parameter center_param("probe.centers", centers);
  Parameter weight_param("probe.weights", spec.weights);
  std::vector<KernelSpec> kernels;
  for (int d = 0; d < D; ++d) {
    kernels.emplace_back(KernelFamily::kGaussian, Topology::kLinear,
                         Parameter::positive("probe.bw" + std::to_string(d), spec.bandwidth));
  }
  const std::vector<Topology> topo(static_cast<size_t>(D), Topology::kLinear);

  Tensor c_sum({K, D});
  Tensor c_sumsq({K, D});
  Tensor w_sum({K});
  Tensor w_sumsq({K});
  const RngStream base = rng.split(rng.next_u64());
  for (int r = 0; r < replicates; ++r) {
    RngStream rep = base.split(static_cast<std::uint64_t>(r));
    Ctx ctx;
    ad::Var c = ctx.value(center_param);
    ad::Var raw = ctx.value(weight_param);
    // reshape keeps the K = 1 case rank-1 through the scalar division
    ad::Var w = ad::reshape(ad::div(raw, ad::sum(raw)), {K});
    ParticleSet ps{c, w, std::nullopt, topo};
    std::optional<MixtureDensity> mix;
    if (rc.needs_mixture()) mix = make_mixture(c, w, kernels, ctx);
    const ResampleResult out = resample(rc, ps, mix, n_out, rep);
    ad::backward(loss(out.set));
    const Tensor gc = ctx.grad(center_param);
    const Tensor gw = ctx.grad(weight_param);
    for (std::int64_t i = 0; i < gc.numel(); ++i) {
      c_sum[i] += gc[i];
      c_sumsq[i] += gc[i] * gc[i];
    }
    for (std::int64_t i = 0; i < gw.numel(); ++i) {
      w_sum[i] += gw[i];
      w_sumsq[i] += gw[i] * gw[i];
    }
  }

  const double R = static_cast<double>(replicates);
  auto finish = [&](const Tensor& sum, const Tensor& sumsq, Tensor& mean, Tensor& var,
                    Tensor& se) {
    mean = Tensor(sum.shape());
    var = Tensor(sum.shape());
    se = Tensor(sum.shape());
    for (std::int64_t i = 0; i < sum.numel(); ++i) {
      mean[i] = sum[i] / R;
      var[i] = std::max(0.0, (sumsq[i] - R * mean[i] * mean[i]) / (R - 1.0));
      se[i] = std::sqrt(var[i] / R);
    }
  };
  ProbeResult out;
  out.replicates = replicates;
  finish(c_sum, c_sumsq, out.center_mean, out.center_variance, out.center_se);
  finish(w_sum, w_sumsq, out.weight_mean, out.weight_variance, out.weight_se);

  // CRN finite differences of the draw-law expectation, centers only
  Tensor weights_norm = spec.weights;
  for (std::int64_t i = 0; i < weights_norm.numel(); ++i) weights_norm[i] /= mass;
  const bool mixture_family = rc.needs_mixture();
  const std::vector<double> prefix = categorical_prefix(weights_norm);
  auto loss_at = [&](const Tensor& shifted, RngStream s) {
    ad::NoGradGuard guard;
    Tensor z({n_out, D});
    for (int i = 0; i < n_out; ++i) {
      const int a = categorical_sample_prefix(prefix, s);
      for (int d = 0; d < D; ++d) {
        double v = shifted.at(a, d);
        if (mixture_family) {
          v += kernel_sample_val(KernelFamily::kGaussian, spec.bandwidth, s);
        }
        z.at(i, d) = v;
      }
    }
    const ParticleSet set{ad::constant(std::move(z)),
                          ad::constant(Tensor({n_out}, 1.0 / static_cast<double>(n_out))),
                          std::nullopt, topo};
    return loss(set)->value.item();
  };
  const double h = 1e-4;
  out.center_fd = Tensor({K, D});
  for (int k = 0; k < K; ++k) {
    for (int d = 0; d < D; ++d) {
      Tensor plus = centers;
      Tensor minus = centers;
      plus.at(k, d) += h;
      minus.at(k, d) -= h;
      double acc = 0.0;
      for (int r = 0; r < replicates; ++r) {
        const RngStream s = base.split(static_cast<std::uint64_t>(r));
        acc += (loss_at(plus, s) - loss_at(minus, s)) / (2.0 * h);
      }
      out.center_fd.at(k, d) = acc / R;
    }
  }
  return out;
}

double fitted_loglog_slope(const std::vector<int>& n_values, const std::vector<double>& seconds) {
  if (n_values.size() != seconds.size() || n_values.size() < 2) {
    throw std::invalid_argument("slope fit needs matching lists of >= 2 points");
  }
  std::vector<double> xs;
  std::vector<double> ys;
  for (size_t i = 0; i < n_values.size(); ++i) {
    if (n_values[i] < 1 || !(seconds[i] > 0.0)) {
      throw std::invalid_argument("slope fit needs positive sizes and times");
    }
    xs.push_back(std::log(static_cast<double>(n_values[i])));
    ys.push_back(std::log(seconds[i]));
  }
  double mx = 0.0;
  double my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxy = 0.0;
  double sxx = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("slope fit needs at least two distinct sizes");
  return sxy / sxx;
}

ScalingReport runtime_scaling(const std::function<void(int)>& work,
                              const std::vector<int>& n_values, int repeats) {
  if (!work) throw std::invalid_argument("runtime_scaling needs a workload");
  if (n_values.size() < 4) throw std::invalid_argument("runtime scaling needs >= 4 sizes");
  if (repeats < 1) throw std::invalid_argument("runtime scaling needs >= 1 repeat");
  ScalingReport report;
  report.n_values = n_values;
  for (int n : n_values) {
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < repeats; ++r) {
      const auto start = std::chrono::steady_clock::now();
      work(n);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
      best = std::min(best, std::max(dt.count(), 1e-9));
    }
    report.seconds.push_back(best);
  }
  report.slope = fitted_loglog_slope(report.n_values, report.seconds);
  return report;
}

ScalingReport filter_runtime_scaling(const ResamplerConfig& resampler, ScalingMode mode,
                                     const std::vector<int>& n_values, int repeats, int T,
                                     RngStream& rng) {
  if (T < 1) throw std::invalid_argument("filter scaling needs T >= 1");
  RngStream setup = rng.split(rng.next_u64());
  const std::vector<Topology> state_topo{Topology::kLinear, Topology::kLinear};
  const DynamicsModel dyn = DynamicsModel::make("scaling.dyn", state_topo, 0, setup, false, 64);
  const MeasurementModel meas =
      MeasurementModel::make("scaling.meas", state_topo, {Topology::kLinear}, setup, 64);
  const ModelSet models{&dyn, &meas, nullptr};

  FilterConfig cfg;
  cfg.resampler = resampler;
  cfg.posterior_kernels.emplace_back(KernelFamily::kGaussian, Topology::kLinear,
                                     Parameter::positive("scaling.b0", 0.4));
  cfg.posterior_kernels.emplace_back(KernelFamily::kGaussian, Topology::kLinear,
                                     Parameter::positive("scaling.b1", 0.4));
  std::vector<KernelSpec> noise;
  noise.emplace_back(KernelFamily::kGaussian, Topology::kLinear,
                     Parameter::positive("scaling.n0", 0.3));
  noise.emplace_back(KernelFamily::kGaussian, Topology::kLinear,
                     Parameter::positive("scaling.n1", 0.3));

  Tensor states({T, 2});
  Tensor obs({T, 1});
  std::vector<int> labels;
  double x = 0.0;
  double y = 0.0;
  for (int t = 0; t < T; ++t) {
    x = 0.9 * x + 0.2 * setup.gaussian();
    y = 0.9 * y + 0.2 * setup.gaussian();
    states.at(t, 0) = x;
    states.at(t, 1) = y;
    obs.at(t, 0) = x + y + 0.1 * setup.gaussian();
    labels.push_back(t);
  }
  const Trajectory traj{std::move(states), std::move(labels), std::move(obs), std::nullopt};
  Tensor first({2});
  first[0] = traj.states.at(0, 0);
  first[1] = traj.states.at(0, 1);
  const std::uint64_t work_seed = setup.next_u64();

  volatile double sink = 0.0;
  auto work = [&](int n) {
    cfg.n_particles = n;
    RngStream wrng = RngStream::seeded(work_seed);
    if (mode == ScalingMode::kTrainStep) {
      Ctx ctx;
      const ParticleSet init = init_particles(first, noise, n, ctx, wrng);
      const FilterRun run = run_filter(cfg, ctx, models, traj, init, wrng, 0);
      ad::backward(nll_loss(run.posteriors, traj));
      sink = run.summaries.back().mean[0];
    } else {
      ad::NoGradGuard guard;
      Ctx ctx;
      const ParticleSet init = init_particles(first, noise, n, ctx, wrng);
      const FilterRun run = run_filter(cfg, ctx, models, traj, init, wrng, 0);
      sink = eval_nll(run.posteriors, traj);
    }
  };
  ScalingReport report = runtime_scaling(work, n_values, repeats);
  (void)sink;
  return report;
}

namespace {

void check_csv_token(const std::string& s) {
  if (s.empty() || s.find_first_of(",\"\n\r") != std::string::npos) {
    throw std::invalid_argument("csv fields must be non-empty simple tokens: '" + s + "'");
  }
}

}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "method,seed,metric,value\n";
  char buf[64];
  for (const MetricRow& r : rows) {
    check_csv_token(r.method);
    check_csv_token(r.metric);
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out += r.method;
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += r.metric;
    out += ',';
    out += buf;
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  const std::string body = metrics_csv(rows);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << body;
  out.close();
  if (!out) throw std::runtime_error("metrics csv write failed: " + path);
}

}  // namespace mdpf

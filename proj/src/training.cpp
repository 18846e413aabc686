#include "mdpf/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "mdpf/mixture.hpp"

namespace mdpf {

namespace {

Tensor row_of(const Tensor& m, int r) {
  Tensor out({m.dim(1)});
  for (int j = 0; j < m.dim(1); ++j) out[j] = m.at(r, j);
  return out;
}

bool all_finite(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) return false;
  }
  return true;
}

double squared_sum(const std::vector<Tensor>& grads) {
  double ss = 0.0;
  for (const Tensor& g : grads) {
    for (std::int64_t i = 0; i < g.numel(); ++i) ss += g[i] * g[i];
  }
  return ss;
}

std::vector<Tensor> zero_like(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) {
    if (!p) throw std::invalid_argument("null parameter in group");
    out.emplace_back(p->raw().shape());
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_net > 0.0) || !(lr_bandwidth > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (tbptt_window < 1) throw std::invalid_argument("tbptt_window must be >= 1");
  if (label_stride < 1) throw std::invalid_argument("label_stride must be >= 1");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
}

bool adam_step(AdamState& state, const std::vector<Parameter*>& params,
               const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("params/grads size mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i]) throw std::invalid_argument("null parameter");
    if (!grads[i].same_shape(params[i]->raw()) || grads[i].numel() != params[i]->raw().numel()) {
      throw std::invalid_argument("gradient shape mismatch for '" + params[i]->name() + "'");
    }
    if (!all_finite(grads[i])) {
      ++state.skipped;
      return false;
    }
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const Tensor& g = grads[i];
    AdamState::Moments& mo = state.slots[p.node().get()];
    if (!mo.m.same_shape(g) || mo.m.numel() != g.numel()) {
      mo.m = Tensor(g.shape());
      mo.v = Tensor(g.shape());
    }
    Tensor& raw = p.raw();
    for (std::int64_t e = 0; e < g.numel(); ++e) {
      mo.m[e] = state.beta1 * mo.m[e] + (1.0 - state.beta1) * g[e];
      mo.v[e] = state.beta2 * mo.v[e] + (1.0 - state.beta2) * g[e] * g[e];
      raw[e] -= lr * (mo.m[e] / bc1) / (std::sqrt(mo.v[e] / bc2) + state.eps);
    }
  }
  return true;
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("max_norm must be positive");
  const double norm = std::sqrt(squared_sum(grads));
  if (!std::isfinite(norm) || norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (Tensor& g : grads) g *= factor;
  return factor;
}

ad::Var nll_loss(const std::vector<MixtureDensity>& posteriors, const Trajectory& traj) {
  traj.validate();
  if (traj.labels.empty()) throw std::invalid_argument("nll_loss needs at least one labeled step");
  if (static_cast<int>(posteriors.size()) != traj.length()) {
    throw std::invalid_argument("posterior count does not match trajectory length");
  }
  ad::Var total;
  for (int t : traj.labels) {
    ad::Var term =
        ad::neg(kde_log_density(posteriors[static_cast<size_t>(t)],
                                ad::constant(row_of(traj.states, t))));
    total = total ? ad::add(total, term) : term;
  }
  return ad::mul(total, 1.0 / static_cast<double>(traj.labels.size()));
}

ad::Var mse_loss(const std::vector<StateSummary>& summaries, const Trajectory& traj) {
  traj.validate();
  if (traj.labels.empty()) throw std::invalid_argument("mse_loss needs at least one labeled step");
  if (static_cast<int>(summaries.size()) != traj.length()) {
    throw std::invalid_argument("summary count does not match trajectory length");
  }
  ad::Var total;
  for (int t : traj.labels) {
    const StateSummary& s = summaries[static_cast<size_t>(t)];
    const std::vector<Topology>& topo = s.source.dim_topology;
    if (static_cast<int>(topo.size()) != traj.state_dim()) {
      throw std::invalid_argument("summary dimension does not match trajectory state");
    }
    ad::Var diff = ad::sub(s.mean_node, ad::constant(row_of(traj.states, t)));
    bool any_circular = false;
    Tensor mask({traj.state_dim()});
    for (size_t d = 0; d < topo.size(); ++d) {
      if (topo[d] == Topology::kCircular) {
        mask[static_cast<std::int64_t>(d)] = 1.0;
        any_circular = true;
      }
    }
    if (any_circular) diff = ad::where(mask, ad::wrap_angle(diff), diff);
    ad::Var term = ad::dot(diff, diff);
    total = total ? ad::add(total, term) : term;
  }
  return ad::mul(total, 1.0 / static_cast<double>(traj.labels.size()));
}

bool PlateauScheduler::observe(double val_loss) {
  if (val_loss < best - threshold) {
    best = val_loss;
    stale = 0;
    return false;
  }
  ++stale;
  if (stale >= patience) {
    stale = 0;
    return true;
  }
  return false;
}

TrainState TrainState::init(const TrainConfig& cfg) {
  TrainState st;
  st.lr_net = cfg.lr_net;
  st.lr_bandwidth = cfg.lr_bandwidth;
  return st;
}

std::string epoch_metrics_json(const EpochMetrics& m) {
  nlohmann::json j;
  j["step"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["val_nll"] = m.val_nll ? nlohmann::json(*m.val_nll) : nlohmann::json(nullptr);
  j["val_rmse"] = m.val_rmse ? nlohmann::json(*m.val_rmse) : nlohmann::json(nullptr);
  j["lr_net"] = m.lr_net;
  j["lr_bandwidth"] = m.lr_bandwidth;
  j["grad_norm_mean"] = m.grad_norm_mean;
  j["grad_norm_max"] = m.grad_norm_max;
  j["skipped_updates"] = m.skipped_updates;
  j["dropped_elements"] = m.dropped_elements;
  return j.dump();
}

EpochMetrics train_epoch(const TrainConfig& cfg, const RunFn& run_fn, const ParamGroups& params,
                         TrainState& state, const std::vector<Trajectory>& train_set,
                         const std::vector<Trajectory>& val_set, RngStream& rng) {
  cfg.validate();
  if (!run_fn) throw std::invalid_argument("run_fn must be set");
  if (train_set.empty()) throw std::invalid_argument("empty training set");

  const size_t n = train_set.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = n - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }
  const RngStream epoch_stream = rng.split(rng.next_u64());

  EpochMetrics out;
  const int skipped_before = state.adam_net.skipped + state.adam_bandwidth.skipped;
  double loss_sum = 0.0;
  int loss_count = 0;
  double norm_sum = 0.0;
  int stepped_batches = 0;

  for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
    const size_t stop = std::min(n, start + static_cast<size_t>(cfg.batch_size));
    std::vector<Tensor> grads_net = zero_like(params.net);
    std::vector<Tensor> grads_bw = zero_like(params.bandwidth);
    int batch_elems = 0;

    for (size_t k = start; k < stop; ++k) {
      const Trajectory& traj = train_set[order[k]];
      Ctx ctx;
      RngStream element_rng = epoch_stream.split(static_cast<std::uint64_t>(k));
      FilterRun run = run_fn(ctx, traj, element_rng, cfg.tbptt_window);
      ad::Var loss = cfg.loss == LossKind::kNll ? nll_loss(run.posteriors, traj)
                                                : mse_loss(run.summaries, traj);
      const double lv = loss->value.item();
      if (!std::isfinite(lv)) {
        ++out.dropped_elements;
        continue;
      }
      loss_sum += lv;
      ++loss_count;
      ad::backward(loss);
      for (size_t i = 0; i < params.net.size(); ++i) grads_net[i] += ctx.grad(*params.net[i]);
      for (size_t i = 0; i < params.bandwidth.size(); ++i) {
        grads_bw[i] += ctx.grad(*params.bandwidth[i]);
      }
      ++batch_elems;
    }
    if (batch_elems == 0) continue;

    const double inv = 1.0 / static_cast<double>(batch_elems);
    for (Tensor& g : grads_net) g *= inv;
    for (Tensor& g : grads_bw) g *= inv;

    std::vector<Tensor> all;
    all.reserve(grads_net.size() + grads_bw.size());
    for (Tensor& g : grads_net) all.push_back(std::move(g));
    for (Tensor& g : grads_bw) all.push_back(std::move(g));
    const double norm = std::sqrt(squared_sum(all));
    norm_sum += norm;
    out.grad_norm_max = std::max(out.grad_norm_max, norm);
    ++stepped_batches;
    clip_global_norm(all, cfg.clip_norm);

    if (!params.net.empty()) {
      std::vector<Tensor> g(std::make_move_iterator(all.begin()),
                            std::make_move_iterator(all.begin() + params.net.size()));
      adam_step(state.adam_net, params.net, g, state.lr_net);
    }
    if (!params.bandwidth.empty()) {
      std::vector<Tensor> g(std::make_move_iterator(all.begin() + params.net.size()),
                            std::make_move_iterator(all.end()));
      adam_step(state.adam_bandwidth, params.bandwidth, g, state.lr_bandwidth);
    }
  }

  out.train_loss = loss_count > 0 ? loss_sum / loss_count
                                  : std::numeric_limits<double>::quiet_NaN();
  out.grad_norm_mean = stepped_batches > 0 ? norm_sum / stepped_batches : 0.0;
  out.skipped_updates = state.adam_net.skipped + state.adam_bandwidth.skipped - skipped_before;

  if (!val_set.empty()) {
    const RngStream val_stream = rng.split(rng.next_u64());
    ad::NoGradGuard no_grad;
    double nll_sum = 0.0;
    double mse_sum = 0.0;
    for (size_t i = 0; i < val_set.size(); ++i) {
      Ctx ctx;
      RngStream element_rng = val_stream.split(static_cast<std::uint64_t>(i));
      FilterRun run = run_fn(ctx, val_set[i], element_rng, cfg.tbptt_window);
      nll_sum += nll_loss(run.posteriors, val_set[i])->value.item();
      mse_sum += mse_loss(run.summaries, val_set[i])->value.item();
    }
    out.val_nll = nll_sum / static_cast<double>(val_set.size());
    out.val_rmse = std::sqrt(mse_sum / static_cast<double>(val_set.size()));
    const double observed = cfg.loss == LossKind::kNll ? *out.val_nll : *out.val_rmse;
    if (state.plateau.observe(observed)) {
      state.lr_net *= state.plateau.factor;
      state.lr_bandwidth *= state.plateau.factor;
    }
  }

  out.lr_net = state.lr_net;
  out.lr_bandwidth = state.lr_bandwidth;
  return out;
}

std::vector<EpochMetrics> fit(const TrainConfig& cfg, const RunFn& run_fn,
                              const ParamGroups& params, const std::vector<Trajectory>& train_set,
                              const std::vector<Trajectory>& val_set, RngStream& rng) {
  cfg.validate();
  TrainState state = TrainState::init(cfg);
  std::vector<EpochMetrics> out;
  out.reserve(static_cast<size_t>(cfg.epochs));
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochMetrics m = train_epoch(cfg, run_fn, params, state, train_set, val_set, rng);
    m.epoch = e;
    out.push_back(std::move(m));
  }
  return out;
}

namespace {

std::vector<EpochMetrics> concat_phases(std::vector<EpochMetrics> first,
                                        std::vector<EpochMetrics> second) {
  const int offset = static_cast<int>(first.size());
  for (EpochMetrics& m : second) {
    m.epoch += offset;
    first.push_back(std::move(m));
  }
  return first;
}

}  // namespace

std::vector<EpochMetrics> train_two_phase(const TrainConfig& nll_cfg, const TrainConfig& mse_cfg,
                                          const RunFn& run_fn, const ParamGroups& params,
                                          const std::vector<Trajectory>& train_set,
                                          const std::vector<Trajectory>& val_set, RngStream& rng) {
  TrainConfig phase1 = nll_cfg;
  phase1.loss = LossKind::kNll;
  TrainConfig phase2 = mse_cfg;
  phase2.loss = LossKind::kMse;
  std::vector<EpochMetrics> first = fit(phase1, run_fn, params, train_set, val_set, rng);
  std::vector<EpochMetrics> second = fit(phase2, run_fn, params, train_set, val_set, rng);
  return concat_phases(std::move(first), std::move(second));
}

std::vector<EpochMetrics> train_baseline(const TrainConfig& mse_cfg,
                                         const TrainConfig& bandwidth_cfg, const RunFn& run_fn,
                                         const ParamGroups& params,
                                         const std::vector<Trajectory>& train_set,
                                         const std::vector<Trajectory>& val_set, RngStream& rng) {
  TrainConfig phase1 = mse_cfg;
  phase1.loss = LossKind::kMse;
  TrainConfig phase2 = bandwidth_cfg;
  phase2.loss = LossKind::kNll;
  std::vector<EpochMetrics> first = fit(phase1, run_fn, params, train_set, val_set, rng);
  ParamGroups bandwidth_only{{}, params.bandwidth};
  std::vector<EpochMetrics> second =
      fit(phase2, run_fn, bandwidth_only, train_set, val_set, rng);
  return concat_phases(std::move(first), std::move(second));
}

std::vector<double> pretrain_measurement(MeasurementModel& meas,
                                         const std::vector<Trajectory>& data,
                                         const std::vector<KernelSpec>& kernels, int steps,
                                         int n_particles, double lr, RngStream& rng) {
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (n_particles < 1) throw std::invalid_argument("n_particles must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (steps == 0) return {};

  std::vector<std::pair<size_t, int>> pool;
  for (size_t i = 0; i < data.size(); ++i) {
    data[i].validate();
    for (int t : data[i].labels) pool.emplace_back(i, t);
  }
  if (pool.empty()) throw std::invalid_argument("pretraining needs labeled steps");

  std::vector<Parameter*> model_params;
  meas.collect_params(model_params);
  AdamState adam;
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    const auto [ti, t] = pool[static_cast<size_t>(rng.uniform_int(
        static_cast<std::int64_t>(pool.size())))];
    const Trajectory& traj = data[ti];
    Ctx ctx;
    const Tensor state = row_of(traj.states, t);
    ParticleSet cloud = init_particles(state, kernels, n_particles, ctx, rng);
    ParticleSet weighted = meas.weigh(ctx, cloud, row_of(traj.observations, t));
    MixtureDensity mix = make_mixture(weighted.particles, weighted.weights, kernels, ctx);
    ad::Var loss = ad::neg(kde_log_density(mix, ad::constant(state)));
    trace.push_back(loss->value.item());
    ad::backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(model_params.size());
    for (Parameter* p : model_params) grads.push_back(ctx.grad(*p));
    adam_step(adam, model_params, grads, lr);
  }
  return trace;
}

}  // namespace mdpf

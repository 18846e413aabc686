#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdpf/resamplers.hpp"
#include "mdpf/special.hpp"
#include "testutil.hpp"

using mdpf::KernelFamily;
using mdpf::KernelVar;
using mdpf::MixtureDensity;
using mdpf::ParticleSet;
using mdpf::ResamplerConfig;
using mdpf::ResamplerKind;
using mdpf::RngStream;
using mdpf::Tensor;
using mdpf::Topology;
namespace ad = mdpf::ad;
namespace special = mdpf::special;

namespace {

KernelVar gauss_k(ad::Var bw) { return {KernelFamily::kGaussian, Topology::kLinear, bw}; }

ParticleSet linear_ps(const Tensor& particles, const std::vector<double>& weights) {
  const int d = particles.dim(1);
  return ParticleSet{ad::constant(particles), ad::constant(Tensor::from_vector(weights)),
                     std::nullopt, std::vector<Topology>(static_cast<size_t>(d), Topology::kLinear)};
}

// 1-D particle set whose column is the particle index, so ancestors can be
// read back off the output values.
ParticleSet index_ps(const std::vector<double>& weights) {
  const int n = static_cast<int>(weights.size());
  Tensor p({n, 1});
  for (int i = 0; i < n; ++i) p.at(i, 0) = static_cast<double>(i);
  return linear_ps(p, weights);
}

std::vector<int> read_ancestors(const ParticleSet& out) {
  std::vector<int> idx(static_cast<size_t>(out.n()));
  for (int i = 0; i < out.n(); ++i) {
    idx[static_cast<size_t>(i)] = static_cast<int>(std::lround(out.particles->value.at(i, 0)));
  }
  return idx;
}

MixtureDensity mix1d(ad::Var centers, ad::Var weights, ad::Var bw) {
  return MixtureDensity{centers, weights, {gauss_k(bw)}};
}

Tensor col_tensor(const std::vector<double>& v) {
  Tensor t({static_cast<int>(v.size()), 1});
  for (size_t i = 0; i < v.size(); ++i) t.at(static_cast<int>(i), 0) = v[i];
  return t;
}

double chi2_counts(const std::vector<int>& counts, const std::vector<double>& p) {
  double total = 0.0, stat = 0.0;
  for (int c : counts) total += c;
  for (size_t k = 0; k < p.size(); ++k) {
    const double e = total * p[k];
    const double d = counts[k] - e;
    stat += d * d / e;
  }
  return stat;
}

double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_var(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace

TEST_CASE("resampler kind names round trip") {
  for (ResamplerKind k : {ResamplerKind::kTgDiscrete, ResamplerKind::kDis, ResamplerKind::kSr,
                          ResamplerKind::kConcrete, ResamplerKind::kOt, ResamplerKind::kTgMixture,
                          ResamplerKind::kIrg, ResamplerKind::kIwsg}) {
    CHECK(mdpf::resampler_kind_from_name(mdpf::resampler_kind_name(k)) == k);
  }
  CHECK_THROWS_AS(mdpf::resampler_kind_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("resampler config validation") {
  ResamplerConfig ok;
  CHECK_NOTHROW(ok.validate());
  ResamplerConfig bad = ok;
  bad.sr_lambda = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.concrete_temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.ot_epsilon = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.ot_scaling = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.ot_threshold = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.ot_max_iters = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("tg discrete: degenerate weights and gradient truncation") {
  Tensor p({3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  ParticleSet ps{ad::variable(p), ad::variable(Tensor({3}, {1.0, 0.0, 0.0})), std::nullopt,
                 {Topology::kLinear, Topology::kLinear}};
  RngStream rng = RngStream::seeded(11);
  ParticleSet out = mdpf::resample_tg_discrete(ps, rng);

  for (int i = 0; i < 3; ++i) {
    CHECK(out.particles->value.at(i, 0) == 1.0);
    CHECK(out.particles->value.at(i, 1) == 2.0);
    CHECK(out.weights->value[i] == 1.0 / 3.0);
  }

  // truncation: the output graph is fully detached from the inputs
  CHECK_FALSE(out.particles->requires_grad);
  CHECK_FALSE(out.weights->requires_grad);
  std::vector<Tensor> g = ad::partials(ad::sum(out.particles), {ps.particles, ps.weights});
  for (const Tensor& t : g) {
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  }
}

TEST_CASE("dis forward is bit-identical to tg and weighs exactly 1/N") {
  RngStream seed_rng = RngStream::seeded(404);
  Tensor p = testutil::random_tensor({6, 2}, seed_rng, -3.0, 3.0);
  std::vector<double> w = {0.05, 0.3, 0.05, 0.25, 0.15, 0.2};

  RngStream r1 = RngStream::seeded(77);
  RngStream r2 = RngStream::seeded(77);
  ParticleSet out_tg = mdpf::resample_tg_discrete(linear_ps(p, w), r1);
  ParticleSet out_dis = mdpf::resample_dis(linear_ps(p, w), r2);

  for (std::int64_t i = 0; i < out_tg.particles->value.numel(); ++i) {
    CHECK(out_tg.particles->value[i] == out_dis.particles->value[i]);
  }
  for (int i = 0; i < 6; ++i) {
    CHECK(out_tg.weights->value[i] == 1.0 / 6.0);
    CHECK(out_dis.weights->value[i] == 1.0 / 6.0);  // bitwise, not approx
  }
  // graph connectivity appears once the inputs are leaves
  ParticleSet live = linear_ps(p, w);
  live.particles = ad::variable(p);
  live.weights = ad::variable(Tensor::from_vector(w));
  RngStream r3 = RngStream::seeded(77);
  ParticleSet out_live = mdpf::resample_dis(live, r3);
  CHECK(out_live.particles->requires_grad);
  CHECK(out_live.weights->requires_grad);
}

TEST_CASE("dis weight adjoints: ancestor problem on N=3") {
  // grad of one normalized output weight w.r.t. the input weights has two
  // parts: the direct ratio term for its own ancestor, and the normalization
  // term that touches every drawn ancestor.
  const std::vector<double> w = {0.5, 0.3, 0.2};
  ParticleSet ps = index_ps(w);
  ps.weights = ad::variable(Tensor::from_vector(w));

  RngStream rng = RngStream::seeded(5);
  ParticleSet out = mdpf::resample_dis(ps, rng);
  const std::vector<int> idx = read_ancestors(out);
  const int n = 3;
  std::vector<int> counts(3, 0);
  for (int j : idx) ++counts[static_cast<size_t>(j)];

  const int i0 = 0;
  std::vector<Tensor> g =
      ad::partials(ad::sum(ad::gather(out.weights, {i0})), {ps.weights});
  for (int k = 0; k < 3; ++k) {
    const double direct = (idx[i0] == k ? 1.0 : 0.0) / (n * w[static_cast<size_t>(k)]);
    const double norm_term =
        counts[static_cast<size_t>(k)] / (static_cast<double>(n) * n * w[static_cast<size_t>(k)]);
    CHECK(g[0][k] == doctest::Approx(direct - norm_term).epsilon(1e-12));
    if (counts[static_cast<size_t>(k)] == 0) CHECK(g[0][k] == 0.0);
    if (counts[static_cast<size_t>(k)] > 0 && idx[i0] != k) {
      CHECK(g[0][k] < 0.0);  // reachable only through the normalization
    }
  }
}

TEST_CASE("dis expectation gradient w.r.t. particles matches finite differences") {
  // loss = sum_i w_out_i * x_out_i; E[loss] = sum_j w_j x_j, so dE/dx_j = w_j.
  const std::vector<double> w = {0.2, 0.5, 0.3};
  const std::vector<double> x = {-1.0, 0.4, 2.0};
  auto closed_form = [&](const std::vector<double>& xs) {
    double s = 0.0;
    for (size_t j = 0; j < w.size(); ++j) s += w[j] * xs[j];
    return s;
  };
  const double h = 1e-5;
  std::vector<double> xp = x, xm = x;
  xp[1] += h;
  xm[1] -= h;
  const double fd = (closed_form(xp) - closed_form(xm)) / (2.0 * h);

  const int reps = 20000;
  std::vector<double> grads(reps);
  for (int r = 0; r < reps; ++r) {
    ParticleSet ps = linear_ps(col_tensor(x), w);
    ps.particles = ad::variable(col_tensor(x));
    RngStream rng = RngStream::seeded(9000 + static_cast<std::uint64_t>(r));
    ParticleSet out = mdpf::resample_dis(ps, rng);
    ad::Var loss = ad::sum(ad::mul(out.weights, ad::select_col(out.particles, 0)));
    grads[static_cast<size_t>(r)] = ad::partials(loss, {ps.particles})[0].at(1, 0);
  }
  const double m = sample_mean(grads);
  const double se = std::sqrt(sample_var(grads) / reps);
  CHECK(std::fabs(m - fd) < 3.0 * se + 1e-12);
}

TEST_CASE("sr weight algebra") {
  // uniform weights: ratio is 1 before normalization, so outputs stay 1/N
  ParticleSet uni = index_ps({0.25, 0.25, 0.25, 0.25});
  RngStream rng = RngStream::seeded(3);
  ParticleSet out = mdpf::resample_sr(uni, 0.35, rng);
  for (int i = 0; i < 4; ++i) CHECK(out.weights->value[i] == doctest::Approx(0.25).epsilon(1e-14));

  // lambda = 1: ancestors uniform, pre-normalization weight N * w_j
  const std::vector<double> w = {0.7, 0.1, 0.15, 0.05};
  ParticleSet ps = index_ps(w);
  RngStream rng2 = RngStream::seeded(4);
  ParticleSet out2 = mdpf::resample_sr(ps, 1.0, rng2);
  const std::vector<int> idx = read_ancestors(out2);
  double denom = 0.0;
  for (int j : idx) denom += w[static_cast<size_t>(j)];
  for (int i = 0; i < 4; ++i) {
    CHECK(out2.weights->value[i] ==
          doctest::Approx(w[static_cast<size_t>(idx[static_cast<size_t>(i)])] / denom).epsilon(1e-12));
  }

  CHECK_THROWS_AS(mdpf::resample_sr(ps, 1.5, rng2), std::invalid_argument);
}

TEST_CASE("sr gradient flows through numerator and denominator") {
  const std::vector<double> w = {0.55, 0.25, 0.2};
  const double lambda = 0.5;
  ParticleSet ps = index_ps(w);
  ps.weights = ad::variable(Tensor::from_vector(w));
  RngStream rng = RngStream::seeded(21);
  ParticleSet out = mdpf::resample_sr(ps, lambda, rng);
  const std::vector<int> idx = read_ancestors(out);

  const std::vector<double> coef = {0.3, -1.2, 0.8};
  ad::Var loss = ad::sum(ad::mul(out.weights, ad::constant(Tensor::from_vector(coef))));
  Tensor g = ad::partials(loss, {ps.weights})[0];

  // replay the forward arithmetic with the drawn ancestors held fixed
  auto value_fn = [&](const Tensor& wt) {
    const int n = 3;
    std::vector<double> what(static_cast<size_t>(n));
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const double wj = wt[idx[static_cast<size_t>(i)]];
      what[static_cast<size_t>(i)] = wj / ((1.0 - lambda) * wj + lambda / n);
      s += what[static_cast<size_t>(i)];
    }
    double loss_v = 0.0;
    for (int i = 0; i < n; ++i) loss_v += coef[static_cast<size_t>(i)] * what[static_cast<size_t>(i)] / s;
    return loss_v;
  };
  CHECK(testutil::max_grad_rel_err(value_fn, ps.weights->value, g) < 1e-6);
}

TEST_CASE("ancestor distributions match their categorical laws") {
  const std::vector<double> w = {0.1, 0.3, 0.05, 0.35, 0.2};
  const double lambda = 0.4;
  const int calls = 20000;  // 1e5 ancestor draws at n = 5

  auto run = [&](auto&& op, const std::vector<double>& law) {
    std::vector<int> counts(5, 0);
    for (int r = 0; r < calls; ++r) {
      ParticleSet ps = index_ps(w);
      RngStream rng = RngStream::seeded(31000 + static_cast<std::uint64_t>(r));
      ParticleSet out = op(ps, rng);
      for (int j : read_ancestors(out)) ++counts[static_cast<size_t>(j)];
    }
    const double pval = testutil::chi2_pvalue(chi2_counts(counts, law), 4);
    CHECK(pval > 0.001);
  };

  run([](const ParticleSet& ps, RngStream& rng) { return mdpf::resample_tg_discrete(ps, rng); }, w);
  run([](const ParticleSet& ps, RngStream& rng) { return mdpf::resample_dis(ps, rng); }, w);
  std::vector<double> v(5);
  for (size_t k = 0; k < 5; ++k) v[k] = (1.0 - lambda) * w[k] + lambda / 5.0;
  run([&](const ParticleSet& ps, RngStream& rng) { return mdpf::resample_sr(ps, lambda, rng); }, v);
}

TEST_CASE("concrete relaxation limits") {
  const std::vector<double> x = {-2.0, 0.5, 4.0};
  const std::vector<double> w = {0.7, 0.2, 0.1};

  // low temperature: every output sits essentially on one input particle
  {
    ParticleSet ps = linear_ps(col_tensor(x), w);
    RngStream rng = RngStream::seeded(61);
    ParticleSet out = mdpf::resample_concrete(ps, 0.01, rng);
    for (int i = 0; i < 3; ++i) {
      const double o = out.particles->value.at(i, 0);
      double best = 1e300;
      for (double xv : x) best = std::min(best, std::fabs(o - xv));
      CHECK(best < 1e-3);
      CHECK(o >= -2.0);
      CHECK(o <= 4.0);  // convex combination stays in the hull
      CHECK(out.weights->value[i] == 1.0 / 3.0);
    }
  }

  // high temperature with uniform weights: every output near the plain mean
  {
    ParticleSet ps = linear_ps(col_tensor(x), {1.0 / 3, 1.0 / 3, 1.0 / 3});
    RngStream rng = RngStream::seeded(62);
    ParticleSet out = mdpf::resample_concrete(ps, 1e3, rng);
    const double mean = (x[0] + x[1] + x[2]) / 3.0;
    for (int i = 0; i < 3; ++i) CHECK(out.particles->value.at(i, 0) == doctest::Approx(mean).epsilon(0.02));
  }

  // zero weight is clamped, all mass lands on the surviving particle
  {
    ParticleSet ps = linear_ps(col_tensor({1.5, -3.0}), {1.0, 0.0});
    RngStream rng = RngStream::seeded(63);
    ParticleSet out = mdpf::resample_concrete(ps, 0.5, rng);
    for (int i = 0; i < 2; ++i) CHECK(out.particles->value.at(i, 0) == doctest::Approx(1.5).epsilon(1e-9));
  }

  CHECK_THROWS_AS(
      [&] {
        ParticleSet ps = linear_ps(col_tensor(x), w);
        RngStream rng = RngStream::seeded(64);
        return mdpf::resample_concrete(ps, 0.0, rng);
      }(),
      std::invalid_argument);
}

TEST_CASE("concrete on a circular dimension combines across the seam") {
  // two angles hugging -pi/+pi; a naive linear average would sit near 0
  Tensor p({2, 1}, {special::kPi - 0.05, -special::kPi + 0.05});
  ParticleSet ps{ad::constant(p), ad::constant(Tensor({2}, {0.5, 0.5})), std::nullopt,
                 {Topology::kCircular}};
  RngStream rng = RngStream::seeded(65);
  ParticleSet out = mdpf::resample_concrete(ps, 0.5, rng);
  for (int i = 0; i < 2; ++i) {
    const double a = out.particles->value.at(i, 0);
    CHECK(std::fabs(a) >= special::kPi - 0.05 - 1e-9);
    CHECK(a >= -special::kPi);
    CHECK(a < special::kPi);
  }
}

TEST_CASE("sinkhorn: zero cost gives the product coupling exactly") {
  const int n = 4;
  const std::vector<double> w = {0.1, 0.2, 0.3, 0.4};
  mdpf::SinkhornResult r = mdpf::sinkhorn(ad::constant(Tensor({n, n}, 0.0)),
                                          ad::constant(Tensor::from_vector(w)), 0.5, 0.9, 1e-3, 500);
  CHECK(r.converged);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      CHECK(r.coupling->value.at(i, j) == doctest::Approx(w[static_cast<size_t>(j)] / n).epsilon(1e-12));
    }
  }
}

TEST_CASE("sinkhorn: 2x2 matches the exact assignment") {
  // marginals (1/2,1/2) both sides, cost [[0,1],[1,0]]: couplings are
  // [[a, .5-a],[.5-a, a]] with cost 2(.5-a); the LP optimum is a = 1/2.
  Tensor c({2, 2}, {0.0, 1.0, 1.0, 0.0});
  mdpf::SinkhornResult r = mdpf::sinkhorn(ad::constant(c), ad::constant(Tensor({2}, {0.5, 0.5})),
                                          1e-3, 0.9, 1e-6, 2000);
  CHECK(r.converged);
  CHECK(r.coupling->value.at(0, 0) == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(r.coupling->value.at(1, 1) == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(r.coupling->value.at(0, 1) < 1e-3);
  CHECK(r.coupling->value.at(1, 0) < 1e-3);
}

TEST_CASE("sinkhorn: marginal residuals below threshold at return") {
  const int n = 6;
  RngStream rng = RngStream::seeded(202);
  Tensor c = testutil::random_tensor({n, n}, rng, 0.0, 3.0);
  std::vector<double> w(static_cast<size_t>(n));
  double s = 0.0;
  for (auto& x : w) {
    x = rng.uniform(0.1, 1.0);
    s += x;
  }
  for (auto& x : w) x /= s;

  mdpf::SinkhornResult r =
      mdpf::sinkhorn(ad::constant(c), ad::constant(Tensor::from_vector(w)), 0.5, 0.9, 1e-3, 500);
  CHECK(r.converged);
  CHECK(r.iterations <= 500);

  double resid = 0.0;
  for (int i = 0; i < n; ++i) {
    double rs = 0.0;
    for (int j = 0; j < n; ++j) rs += r.coupling->value.at(i, j);
    resid += std::fabs(rs - 1.0 / n);
  }
  for (int j = 0; j < n; ++j) {
    double cs = 0.0;
    for (int i = 0; i < n; ++i) cs += r.coupling->value.at(i, j);
    resid += std::fabs(cs - w[static_cast<size_t>(j)]);
  }
  CHECK(resid < 1e-3);

  CHECK_THROWS_AS(mdpf::sinkhorn(ad::constant(Tensor({2, 3}, 0.0)),
                                 ad::constant(Tensor({2}, {0.5, 0.5})), 0.5, 0.9, 1e-3, 500),
                  std::invalid_argument);
  Tensor bad({2, 2}, {0.0, std::nan(""), 0.0, 0.0});
  CHECK_THROWS_AS(mdpf::sinkhorn(ad::constant(bad), ad::constant(Tensor({2}, {0.5, 0.5})), 0.5, 0.9,
                                 1e-3, 500),
                  std::invalid_argument);
}

TEST_CASE("sinkhorn: unrolled gradients match finite differences of the solve") {
  const int n = 3;
  RngStream rng = RngStream::seeded(301);
  Tensor c0 = testutil::random_tensor({n, n}, rng, 0.0, 1.5);
  const std::vector<double> w0 = {0.5, 0.2, 0.3};
  Tensor a = testutil::random_tensor({n, n}, rng, -1.0, 1.0);

  const double eps = 1.0, thresh = 1e-12;
  auto loss_of = [&](const Tensor& cv, const Tensor& wv) {
    mdpf::SinkhornResult r =
        mdpf::sinkhorn(ad::constant(cv), ad::constant(wv), eps, 0.9, thresh, 5000);
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * r.coupling->value[i];
    return s;
  };

  ad::Var cost = ad::variable(c0);
  ad::Var weights = ad::variable(Tensor::from_vector(w0));
  mdpf::SinkhornResult r = mdpf::sinkhorn(cost, weights, eps, 0.9, thresh, 5000);
  ad::Var loss = ad::sum(ad::mul(r.coupling, ad::constant(a)));
  std::vector<Tensor> g = ad::partials(loss, {cost, weights});

  CHECK(testutil::max_grad_rel_err([&](const Tensor& cv) { return loss_of(cv, Tensor::from_vector(w0)); },
                                    c0, g[0], 1e-5) < 1e-3);
  CHECK(testutil::max_grad_rel_err([&](const Tensor& wv) { return loss_of(c0, wv); },
                                    Tensor::from_vector(w0), g[1], 1e-5) < 1e-3);
}

TEST_CASE("ot resampler: near-assignment on a well-separated set") {
  Tensor p = col_tensor({0.0, 3.0, 7.0, 12.0});
  ParticleSet ps = linear_ps(p, {0.25, 0.25, 0.25, 0.25});
  ps.particles = ad::variable(p);
  ResamplerConfig cfg;
  cfg.kind = ResamplerKind::kOt;
  cfg.ot_epsilon = 0.01;
  mdpf::OtResample r = mdpf::resample_ot(ps, cfg);
  CHECK(r.converged);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::fabs(r.set.particles->value.at(i, 0) - p.at(i, 0)) < 1e-3);
    CHECK(r.set.weights->value[i] == 0.25);
  }
  CHECK(r.set.particles->requires_grad);  // gradients flow through the transport
}

TEST_CASE("ot resampler: degenerate cases and exact mean transport") {
  ResamplerConfig cfg;
  cfg.kind = ResamplerKind::kOt;

  // all particles identical -> outputs identical
  {
    Tensor p({3, 2});
    for (int i = 0; i < 3; ++i) {
      p.at(i, 0) = 1.3;
      p.at(i, 1) = -0.4;
    }
    ParticleSet ps = linear_ps(p, {0.2, 0.5, 0.3});
    mdpf::OtResample r = mdpf::resample_ot(ps, cfg);
    for (int i = 0; i < 3; ++i) {
      CHECK(r.set.particles->value.at(i, 0) == doctest::Approx(1.3).epsilon(1e-9));
      CHECK(r.set.particles->value.at(i, 1) == doctest::Approx(-0.4).epsilon(1e-9));
    }
  }

  // weights concentrated on one particle -> everything moves there
  {
    ParticleSet ps = linear_ps(col_tensor({0.0, 5.0, 9.0}), {1.0 - 2e-6, 1e-6, 1e-6});
    ResamplerConfig c2 = cfg;
    c2.ot_epsilon = 0.01;
    mdpf::OtResample r = mdpf::resample_ot(ps, c2);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(r.set.particles->value.at(i, 0)) < 1e-3);
  }

  // column marginals carry the weighted mean onto the uniform output cloud
  {
    RngStream rng = RngStream::seeded(88);
    Tensor p = testutil::random_tensor({6, 2}, rng, -2.0, 2.0);
    std::vector<double> w = {0.1, 0.25, 0.15, 0.2, 0.05, 0.25};
    ParticleSet ps = linear_ps(p, w);
    mdpf::OtResample r = mdpf::resample_ot(ps, cfg);
    CHECK(r.converged);
    for (int dd = 0; dd < 2; ++dd) {
      double want = 0.0, got = 0.0;
      for (int i = 0; i < 6; ++i) {
        want += w[static_cast<size_t>(i)] * p.at(i, dd);
        got += r.set.particles->value.at(i, dd) / 6.0;
      }
      CHECK(got == doctest::Approx(want).epsilon(2e-3));
    }
  }
}

TEST_CASE("ot resampler: circular dims use chordal cost and stay wrapped") {
  Tensor p({4, 1}, {special::kPi - 0.05, -special::kPi + 0.05, 2.0, 2.1});
  ParticleSet ps{ad::constant(p), ad::constant(Tensor({4}, {0.25, 0.25, 0.25, 0.25})), std::nullopt,
                 {Topology::kCircular}};
  ResamplerConfig cfg;
  cfg.kind = ResamplerKind::kOt;
  cfg.ot_epsilon = 5e-4;
  mdpf::OtResample r = mdpf::resample_ot(ps, cfg);
  CHECK(r.converged);
  for (int i = 0; i < 4; ++i) {
    const double a = r.set.particles->value.at(i, 0);
    CHECK(a >= -special::kPi);
    CHECK(a < special::kPi);
    CHECK(std::fabs(special::wrap_angle(a - p.at(i, 0))) < 2e-3);
  }
}

TEST_CASE("tg mixture: tight bandwidth and truncation") {
  ad::Var centers = ad::variable(col_tensor({0.8}));
  ad::Var w = ad::variable(Tensor({1}, {1.0}));
  MixtureDensity mix = mix1d(centers, w, ad::constant(1e-9));
  RngStream rng = RngStream::seeded(71);
  ParticleSet out = mdpf::resample_tg_mixture(mix, 12, rng);
  CHECK(out.n() == 12);
  for (int i = 0; i < 12; ++i) {
    CHECK(out.particles->value.at(i, 0) == doctest::Approx(0.8).epsilon(1e-7));
    CHECK(out.weights->value[i] == 1.0 / 12.0);
  }
  CHECK_FALSE(out.particles->requires_grad);
  std::vector<Tensor> g = ad::partials(ad::sum(out.particles), {centers, w});
  for (const Tensor& t : g) {
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  }
}

TEST_CASE("iwsg forward is bit-identical to tg mixture") {
  ad::Var centers = ad::constant(col_tensor({-1.0, 0.5, 2.0}));
  ad::Var w = ad::constant(Tensor({3}, {0.3, 0.4, 0.3}));
  MixtureDensity mix = mix1d(centers, w, ad::constant(0.5));

  RngStream r1 = RngStream::seeded(123);
  RngStream r2 = RngStream::seeded(123);
  ParticleSet out_tg = mdpf::resample_tg_mixture(mix, 10, r1);
  ParticleSet out_iw = mdpf::resample_iwsg(mix, 10, r2);

  for (std::int64_t i = 0; i < out_tg.particles->value.numel(); ++i) {
    CHECK(out_tg.particles->value[i] == out_iw.particles->value[i]);
  }
  for (int i = 0; i < 10; ++i) {
    CHECK(out_iw.weights->value[i] == 1.0 / 10.0);  // exp(0)/n, bitwise
    CHECK(out_tg.weights->value[i] == 1.0 / 10.0);
  }
  CHECK_FALSE(out_iw.particles->requires_grad);
}

TEST_CASE("iwsg single-gaussian weight adjoint is the score reweighting") {
  const double c = 0.7, sigma = 0.5;
  ad::Var centers = ad::variable(col_tensor({c}));
  MixtureDensity mix = mix1d(centers, ad::constant(Tensor({1}, {1.0})), ad::constant(sigma));
  RngStream rng = RngStream::seeded(17);
  const int n = 6;
  ParticleSet out = mdpf::resample_iwsg(mix, n, rng);
  ad::Var loss = ad::sum(ad::mul(out.weights, ad::select_col(out.particles, 0)));
  Tensor g = ad::partials(loss, {centers})[0];

  double want = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = out.particles->value.at(i, 0);
    want += (z / n) * (z - c) / (sigma * sigma);
  }
  CHECK(g.at(0, 0) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("iwsg gradient is unbiased for the expectation gradient") {
  // E[z] = 0.3 c1 + 0.7 c2 under the mixture, so dE/dc1 = 0.3 (the kernel
  // noise is symmetric).  Finite differences of that closed form give 0.3.
  const double h = 1e-5;
  auto closed_form = [&](double c1) { return 0.3 * c1 + 0.7 * 1.0; };
  const double fd = (closed_form(-1.0 + h) - closed_form(-1.0 - h)) / (2.0 * h);

  const int reps = 10000, n = 16;
  std::vector<double> grads(reps);
  for (int r = 0; r < reps; ++r) {
    ad::Var centers = ad::variable(col_tensor({-1.0, 1.0}));
    MixtureDensity mix =
        mix1d(centers, ad::constant(Tensor({2}, {0.3, 0.7})), ad::constant(0.5));
    RngStream rng = RngStream::seeded(52000 + static_cast<std::uint64_t>(r));
    ParticleSet out = mdpf::resample_iwsg(mix, n, rng);
    ad::Var loss = ad::sum(ad::mul(out.weights, ad::select_col(out.particles, 0)));
    grads[static_cast<size_t>(r)] = ad::partials(loss, {centers})[0].at(0, 0);
  }
  const double m = sample_mean(grads);
  const double se = std::sqrt(sample_var(grads) / reps);
  CHECK(std::fabs(m - fd) < 3.0 * se + 1e-12);
}

TEST_CASE("irg single gaussian reduces to the reparameterization gradient") {
  const double c = 0.3, sigma = 0.8;
  ad::Var centers = ad::variable(col_tensor({c}));
  ad::Var bw = ad::variable(Tensor::scalar(sigma));
  MixtureDensity mix = mix1d(centers, ad::constant(Tensor({1}, {1.0})), bw);
  RngStream rng = RngStream::seeded(19);
  ParticleSet out = mdpf::resample_irg(mix, 5, rng);
  CHECK(out.particles->requires_grad);
  for (int i = 0; i < 5; ++i) {
    ad::Var zi = ad::sum(ad::gather_rows(out.particles, {i}));
    std::vector<Tensor> g = ad::partials(zi, {centers, bw});
    const double z = out.particles->value.at(i, 0);
    CHECK(g[0].at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(g[1].item() == doctest::Approx((z - c) / sigma).epsilon(1e-6));
  }
}

TEST_CASE("irg gradient matches the finite-difference inverse cdf") {
  const std::vector<double> cs = {-1.0, 0.0, 1.2};
  const std::vector<double> ws = {0.3, 0.4, 0.3};
  const double sigma = 0.6;

  auto mix_cdf = [&](double z, const std::vector<double>& cv, double bw) {
    double s = 0.0;
    for (size_t k = 0; k < cv.size(); ++k) s += ws[k] * special::normal_cdf((z - cv[k]) / bw);
    return s;
  };
  auto invert = [&](double u, const std::vector<double>& cv, double bw) {
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (mix_cdf(mid, cv, bw) < u ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  };

  ad::Var centers = ad::variable(col_tensor(cs));
  ad::Var bw = ad::variable(Tensor::scalar(sigma));
  MixtureDensity mix = mix1d(centers, ad::constant(Tensor::from_vector(ws)), bw);
  RngStream rng = RngStream::seeded(23);
  const int n = 8;
  ParticleSet out = mdpf::resample_irg(mix, n, rng);

  const double h = 1e-5;
  for (int i = 0; i < n; ++i) {
    const double z = out.particles->value.at(i, 0);
    const double u = mix_cdf(z, cs, sigma);
    ad::Var zi = ad::sum(ad::gather_rows(out.particles, {i}));
    std::vector<Tensor> g = ad::partials(zi, {centers, bw});
    for (size_t k = 0; k < cs.size(); ++k) {
      std::vector<double> cp = cs, cm = cs;
      cp[k] += h;
      cm[k] -= h;
      const double fd = (invert(u, cp, sigma) - invert(u, cm, sigma)) / (2.0 * h);
      CHECK(g[0].at(static_cast<int>(k), 0) == doctest::Approx(fd).epsilon(1e-3));
    }
    const double fd_bw = (invert(u, cs, sigma + h) - invert(u, cs, sigma - h)) / (2.0 * h);
    CHECK(g[1].item() == doctest::Approx(fd_bw).epsilon(1e-3));
  }
}

TEST_CASE("irg blows up on cdf plateaus between separated modes") {
  // two modes 20 bandwidths apart; at the midpoint the mixture density is
  // astronomically small while dS/dweight is O(1)
  ad::Var centers = ad::constant(col_tensor({-5.0, 5.0}));
  ad::Var w = ad::variable(Tensor({2}, {0.5, 0.5}));
  MixtureDensity mix = mix1d(centers, w, ad::constant(0.5));

  ad::Var z = ad::variable(Tensor({1}, {0.0}));
  ad::Var s = mdpf::conditional_cdf(mix, z, 0);
  const double jac = ad::partials(s, {z})[0][0];
  const double dsdw = ad::partials(s, {w})[0][0];
  CHECK(std::fabs(dsdw / jac) > 1e6);
}

TEST_CASE("irg rejects epanechnikov kernels") {
  ad::Var centers = ad::constant(col_tensor({0.0, 1.0}));
  ad::Var w = ad::constant(Tensor({2}, {0.5, 0.5}));
  MixtureDensity mix{centers, w, {{KernelFamily::kEpanechnikov, Topology::kLinear, ad::constant(0.5)}}};
  RngStream rng = RngStream::seeded(29);
  CHECK_THROWS_AS(mdpf::resample_irg(mix, 4, rng), std::invalid_argument);
}

TEST_CASE("irg gradient variance dwarfs iwsg on separated modes") {
  // modes exactly 10 bandwidths apart
  const int n = 64, reps = 300;
  std::vector<double> g_irg(reps), g_iwsg(reps);
  for (int r = 0; r < reps; ++r) {
    ad::Var centers = ad::constant(col_tensor({-2.0, 2.0}));
    ad::Var w = ad::variable(Tensor({2}, {0.5, 0.5}));
    MixtureDensity mix = mix1d(centers, w, ad::constant(0.4));

    RngStream r1 = RngStream::seeded(91000 + static_cast<std::uint64_t>(r));
    ParticleSet irg = mdpf::resample_irg(mix, n, r1);
    g_irg[static_cast<size_t>(r)] = ad::partials(ad::mean(irg.particles), {w})[0][0];

    RngStream r2 = RngStream::seeded(91000 + static_cast<std::uint64_t>(r));
    ParticleSet iw = mdpf::resample_iwsg(mix, n, r2);
    ad::Var loss = ad::mean(ad::mul(ad::mul(iw.weights, static_cast<double>(n)),
                                    ad::select_col(iw.particles, 0)));
    g_iwsg[static_cast<size_t>(r)] = ad::partials(loss, {w})[0][0];
  }
  CHECK(sample_var(g_irg) >= 100.0 * sample_var(g_iwsg));
}

TEST_CASE("every stochastic resampler preserves the mean") {
  const int n = 16, reps = 1000;
  RngStream setup = RngStream::seeded(555);
  Tensor p = testutil::random_tensor({n, 2}, setup, -2.0, 2.0);
  std::vector<double> w(static_cast<size_t>(n));
  double s = 0.0;
  for (auto& x : w) {
    x = setup.uniform(0.2, 1.0);
    s += x;
  }
  for (auto& x : w) x /= s;
  double target[2] = {0.0, 0.0};
  for (int i = 0; i < n; ++i) {
    target[0] += w[static_cast<size_t>(i)] * p.at(i, 0);
    target[1] += w[static_cast<size_t>(i)] * p.at(i, 1);
  }

  auto check_mean = [&](auto&& op, const double want[2]) {
    std::vector<double> m0(reps), m1(reps);
    for (int r = 0; r < reps; ++r) {
      RngStream rng = RngStream::seeded(70000 + static_cast<std::uint64_t>(r));
      ParticleSet out = op(rng);
      mdpf::StateSummary sm = mdpf::weighted_mean(out);
      m0[static_cast<size_t>(r)] = sm.mean[0];
      m1[static_cast<size_t>(r)] = sm.mean[1];
    }
    const double se0 = std::sqrt(sample_var(m0) / reps), se1 = std::sqrt(sample_var(m1) / reps);
    CHECK(std::fabs(sample_mean(m0) - want[0]) < 3.0 * se0 + 1e-9);
    CHECK(std::fabs(sample_mean(m1) - want[1]) < 3.0 * se1 + 1e-9);
  };

  ParticleSet ps = linear_ps(p, w);
  check_mean([&](RngStream& rng) { return mdpf::resample_tg_discrete(ps, rng); }, target);
  check_mean([&](RngStream& rng) { return mdpf::resample_dis(ps, rng); }, target);
  check_mean([&](RngStream& rng) { return mdpf::resample_sr(ps, 0.3, rng); }, target);
  // concrete at vanishing temperature, where the relaxation is unbiased
  check_mean([&](RngStream& rng) { return mdpf::resample_concrete(ps, 0.02, rng); }, target);
  // concrete at the working temperature with uniform weights (exact by symmetry)
  {
    std::vector<double> uw(static_cast<size_t>(n), 1.0 / n);
    ParticleSet psu = linear_ps(p, uw);
    double utarget[2] = {0.0, 0.0};
    for (int i = 0; i < n; ++i) {
      utarget[0] += p.at(i, 0) / n;
      utarget[1] += p.at(i, 1) / n;
    }
    check_mean([&](RngStream& rng) { return mdpf::resample_concrete(psu, 0.5, rng); }, utarget);
  }

  // mixture resamplers target the mixture mean (symmetric kernels)
  MixtureDensity mix{ad::constant(p), ad::constant(Tensor::from_vector(w)),
                     {gauss_k(ad::constant(0.3)), gauss_k(ad::constant(0.3))}};
  check_mean([&](RngStream& rng) { return mdpf::resample_tg_mixture(mix, n, rng); }, target);
  check_mean([&](RngStream& rng) { return mdpf::resample_iwsg(mix, n, rng); }, target);
  check_mean([&](RngStream& rng) { return mdpf::resample_irg(mix, n, rng); }, target);
}

TEST_CASE("resample dispatcher") {
  Tensor p = col_tensor({0.0, 1.0, 2.0});
  ParticleSet ps = linear_ps(p, {0.2, 0.5, 0.3});
  RngStream rng = RngStream::seeded(31);

  ResamplerConfig cfg;
  cfg.kind = ResamplerKind::kIwsg;
  CHECK_THROWS_AS(mdpf::resample(cfg, ps, std::nullopt, 3, rng), std::invalid_argument);

  cfg.kind = ResamplerKind::kTgDiscrete;
  mdpf::ResampleResult r = mdpf::resample(cfg, ps, std::nullopt, 3, rng);
  CHECK(r.set.n() == 3);
  CHECK(r.converged);

  cfg.kind = ResamplerKind::kOt;
  mdpf::ResampleResult ro = mdpf::resample(cfg, ps, std::nullopt, 3, rng);
  CHECK(ro.set.n() == 3);

  MixtureDensity mix = mix1d(ad::constant(p), ad::constant(Tensor({3}, {0.2, 0.5, 0.3})),
                             ad::constant(0.4));
  cfg.kind = ResamplerKind::kIrg;
  mdpf::ResampleResult ri = mdpf::resample(cfg, ps, mix, 5, rng);
  CHECK(ri.set.n() == 5);
  CHECK(ri.set.d() == 1);

  cfg.kind = ResamplerKind::kConcrete;
  cfg.concrete_temperature = -1.0;
  CHECK_THROWS_AS(mdpf::resample(cfg, ps, std::nullopt, 3, rng), std::invalid_argument);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdpf/kernels.hpp"
#include "mdpf/special.hpp"
#include "testutil.hpp"

using mdpf::KernelFamily;
using mdpf::KernelSpec;
using mdpf::Parameter;
using mdpf::RngStream;
using mdpf::Tensor;
using mdpf::Topology;
namespace ad = mdpf::ad;
namespace special = mdpf::special;

TEST_CASE("kernel spec validation") {
  CHECK_NOTHROW(KernelSpec(KernelFamily::kGaussian, Topology::kLinear, Parameter::positive("s", 1.0)));
  CHECK_NOTHROW(KernelSpec(KernelFamily::kVonMises, Topology::kCircular, Parameter::positive("k", 2.0)));
  CHECK_THROWS_AS(KernelSpec(KernelFamily::kVonMises, Topology::kLinear, Parameter::positive("k", 2.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(KernelSpec(KernelFamily::kGaussian, Topology::kCircular, Parameter::positive("s", 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(KernelSpec(KernelFamily::kGaussian, Topology::kLinear,
                             Parameter("s", Tensor::scalar(1.0))),
                  std::invalid_argument);
}

TEST_CASE("log density reference values") {
  CHECK(mdpf::kernel_log_density_val(KernelFamily::kGaussian, 0.0, 1.0) ==
        doctest::Approx(-0.9189385332046727).epsilon(1e-12));
  CHECK(mdpf::kernel_log_density_val(KernelFamily::kEpanechnikov, 0.0, 1.0) ==
        doctest::Approx(std::log(0.75)).epsilon(1e-12));
  // kappa -> 0 limit: uniform on the circle
  CHECK(mdpf::kernel_log_density_val(KernelFamily::kVonMises, 1.234, 1e-12) ==
        doctest::Approx(std::log(1.0 / special::kTwoPi)).epsilon(1e-9));
  // outside Epanechnikov support: floored sentinel, not -inf
  const double sentinel = mdpf::kernel_log_density_val(KernelFamily::kEpanechnikov, 2.0, 1.0);
  CHECK(std::isfinite(sentinel));
  CHECK(sentinel == doctest::Approx(std::log(1e-300)));
}

TEST_CASE("normalized densities integrate to one") {
  auto mass = [](KernelFamily f, double bw, double lo, double hi) {
    return special::integrate(
        [f, bw](double u) { return mdpf::kernel_density_val(f, u, bw); }, lo, hi, 1e-10);
  };
  CHECK(mass(KernelFamily::kGaussian, 0.7, -9.0, 9.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(mass(KernelFamily::kGaussian, 2.3, -30.0, 30.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(mass(KernelFamily::kEpanechnikov, 1.0, -1.0, 1.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(mass(KernelFamily::kEpanechnikov, 0.05, -0.05, 0.05) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(mass(KernelFamily::kVonMises, 2.0, -special::kPi, special::kPi) ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(mass(KernelFamily::kVonMises, 50.0, -special::kPi, special::kPi) ==
        doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cdf reference points and quadrature consistency") {
  CHECK(mdpf::kernel_cdf_val(KernelFamily::kGaussian, 0.0, 1.0) == doctest::Approx(0.5));
  CHECK(mdpf::kernel_cdf_val(KernelFamily::kEpanechnikov, 1.0, 1.0) == doctest::Approx(1.0));
  CHECK(mdpf::kernel_cdf_val(KernelFamily::kEpanechnikov, -1.0, 1.0) == doctest::Approx(0.0));
  CHECK(mdpf::kernel_cdf_val(KernelFamily::kVonMises, 0.0, 2.0) ==
        doctest::Approx(0.5).epsilon(1e-9));

  // CDF equals the quadrature integral of the density at random points
  RngStream rng = RngStream::seeded(5);
  struct Case { KernelFamily f; double bw; double lo; double hi; };
  const Case cases[] = {
      {KernelFamily::kGaussian, 0.8, -4.0, 4.0},
      {KernelFamily::kEpanechnikov, 1.2, -1.2, 1.2},
      {KernelFamily::kVonMises, 3.0, -special::kPi, special::kPi - 1e-9},
  };
  for (const auto& c : cases) {
    const double base = c.f == KernelFamily::kVonMises ? -special::kPi : c.lo - 6.0 * c.bw;
    for (int i = 0; i < 100; ++i) {
      const double u = rng.uniform(c.lo, c.hi);
      const double via_quad = special::integrate(
          [&](double t) { return mdpf::kernel_density_val(c.f, t, c.bw); }, base, u, 1e-9);
      CHECK(std::fabs(mdpf::kernel_cdf_val(c.f, u, c.bw) - via_quad) < 1e-6);
    }
  }
}

TEST_CASE("sampling moments") {
  RngStream rng = RngStream::seeded(17);
  const int n = 1000000;

  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += mdpf::kernel_sample_val(KernelFamily::kGaussian, 1.0, rng);
  mean /= n;
  CHECK(std::fabs(mean) < 0.004);  // 3+ standard errors

  double var = 0.0;
  double m2 = 0.0;
  bool in_support = true;
  for (int i = 0; i < n; ++i) {
    const double x = mdpf::kernel_sample_val(KernelFamily::kEpanechnikov, 1.0, rng);
    in_support = in_support && (x >= -1.0 && x <= 1.0);
    m2 += x;
    var += x * x;
  }
  m2 /= n;
  var = var / n - m2 * m2;
  CHECK(in_support);
  CHECK(var == doctest::Approx(0.2).epsilon(0.01));  // Var = bw^2/5

  // von Mises resultant length ≈ I1(kappa)/I0(kappa)
  double cs = 0.0, sn = 0.0;
  const int nv = 200000;
  for (int i = 0; i < nv; ++i) {
    const double th = mdpf::kernel_sample_val(KernelFamily::kVonMises, 50.0, rng);
    CHECK(th >= -special::kPi);
    CHECK(th < special::kPi);
    cs += std::cos(th);
    sn += std::sin(th);
  }
  const double r = std::sqrt(cs * cs + sn * sn) / nv;
  const double expect = special::bessel_i1(50.0) / special::bessel_i0(50.0);
  CHECK(r == doctest::Approx(expect).epsilon(0.001));
}

TEST_CASE("samples agree with cdf (Kolmogorov-Smirnov at 0.001)") {
  struct Case { KernelFamily f; double bw; };
  const Case cases[] = {
      {KernelFamily::kGaussian, 0.7},
      {KernelFamily::kEpanechnikov, 1.3},
      {KernelFamily::kVonMises, 2.0},
  };
  const size_t n = 100000;
  int salt = 0;
  for (const auto& c : cases) {
    RngStream rng = RngStream::seeded(100 + salt++);
    std::vector<double> draws(n);
    for (auto& d : draws) d = mdpf::kernel_sample_val(c.f, c.bw, rng);
    const double ks = testutil::ks_statistic(
        draws, [&](double u) { return mdpf::kernel_cdf_val(c.f, u, c.bw); });
    CHECK(ks < testutil::ks_critical_001(n));
  }
}

TEST_CASE("categorical sampling") {
  RngStream rng = RngStream::seeded(23);
  for (int i = 0; i < 50; ++i) {
    CHECK(mdpf::categorical_sample(Tensor({3}, {1.0, 0.0, 0.0}), rng) == 0);
  }
  int c0 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    c0 += mdpf::categorical_sample(Tensor({2}, {0.5, 0.5}), rng) == 0 ? 1 : 0;
  }
  CHECK(std::fabs(static_cast<double>(c0) / n - 0.5) < 0.005);

  const std::vector<double> probs{0.2, 0.3, 0.5};
  std::vector<int> counts(3, 0);
  for (int i = 0; i < n; ++i) ++counts[mdpf::categorical_sample(Tensor::from_vector(probs), rng)];
  double stat = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double expect = probs[k] * n;
    stat += (counts[k] - expect) * (counts[k] - expect) / expect;
  }
  CHECK(testutil::chi2_pvalue(stat, 2) > 0.001);

  CHECK_THROWS_AS(mdpf::categorical_sample(Tensor({2}, {0.0, 0.0}), rng), std::invalid_argument);
  CHECK_THROWS_AS(mdpf::categorical_sample(Tensor({2}, {0.9, 0.2}), rng), std::invalid_argument);
  CHECK_THROWS_AS(mdpf::categorical_sample(Tensor({2}, {-0.1, 1.1}), rng), std::invalid_argument);
}

TEST_CASE("gumbel moments and finiteness") {
  RngStream rng = RngStream::seeded(29);
  const int n = 1000000;
  double m = 0.0, s2 = 0.0;
  bool finite = true;
  for (int i = 0; i < n; ++i) {
    const double g = mdpf::gumbel_sample(rng);
    finite = finite && std::isfinite(g);
    m += g;
    s2 += g * g;
  }
  m /= n;
  s2 = s2 / n - m * m;
  CHECK(finite);
  CHECK(m == doctest::Approx(special::kEulerGamma).epsilon(0.01));
  CHECK(s2 == doctest::Approx(special::kPi * special::kPi / 6.0).epsilon(0.02));
  // clamp keeps the transform finite even at the uniform extremes
  CHECK(std::isfinite(-std::log(-std::log(2.220446049250313e-16))));
}

TEST_CASE("log density gradients match finite differences") {
  struct Case { KernelFamily f; double bw; double u; };
  const Case cases[] = {
      {KernelFamily::kGaussian, 0.6, 0.4},
      {KernelFamily::kEpanechnikov, 1.1, 0.5},
      {KernelFamily::kVonMises, 3.0, -1.2},
  };
  for (const auto& c : cases) {
    ad::Var u = ad::variable(c.u);
    ad::Var bw = ad::variable(c.bw);
    ad::backward(mdpf::kernel_log_density(c.f, u, bw));
    auto f_u = [&](const Tensor& t) {
      return mdpf::kernel_log_density(c.f, ad::constant(t), ad::constant(c.bw))->value.item();
    };
    auto f_bw = [&](const Tensor& t) {
      return mdpf::kernel_log_density(c.f, ad::constant(c.u), ad::constant(t))->value.item();
    };
    CHECK(testutil::max_grad_rel_err(f_u, Tensor::scalar(c.u), u->grad) < 1e-4);
    CHECK(testutil::max_grad_rel_err(f_bw, Tensor::scalar(c.bw), bw->grad) < 1e-4);
  }

  // vectorized displacement path
  ad::Var uv = ad::variable(Tensor({3}, {-0.3, 0.1, 0.8}));
  ad::Var bwv = ad::variable(0.9);
  ad::backward(ad::sum(mdpf::kernel_log_density(KernelFamily::kGaussian, uv, bwv)));
  auto fv = [&](const Tensor& t) {
    return ad::sum(mdpf::kernel_log_density(KernelFamily::kGaussian, ad::constant(t),
                                            ad::constant(0.9)))
        ->value.item();
  };
  CHECK(testutil::max_grad_rel_err(fv, Tensor({3}, {-0.3, 0.1, 0.8}), uv->grad) < 1e-4);
}

TEST_CASE("differentiable gaussian cdf") {
  ad::Var x = ad::variable(0.3);
  ad::Var mu = ad::variable(-0.2);
  ad::Var sg = ad::variable(0.8);
  ad::Var f = mdpf::gaussian_cdf(x, mu, sg);
  CHECK(f->value.item() == doctest::Approx(special::normal_cdf(0.5 / 0.8)).epsilon(1e-12));
  ad::backward(f);
  auto fx = [&](const Tensor& t) {
    return mdpf::gaussian_cdf(ad::constant(t), ad::constant(-0.2), ad::constant(0.8))->value.item();
  };
  auto fm = [&](const Tensor& t) {
    return mdpf::gaussian_cdf(ad::constant(0.3), ad::constant(t), ad::constant(0.8))->value.item();
  };
  auto fs = [&](const Tensor& t) {
    return mdpf::gaussian_cdf(ad::constant(0.3), ad::constant(-0.2), ad::constant(t))->value.item();
  };
  CHECK(testutil::max_grad_rel_err(fx, Tensor::scalar(0.3), x->grad) < 1e-4);
  CHECK(testutil::max_grad_rel_err(fm, Tensor::scalar(-0.2), mu->grad) < 1e-4);
  CHECK(testutil::max_grad_rel_err(fs, Tensor::scalar(0.8), sg->grad) < 1e-4);
}

TEST_CASE("differentiable von Mises cdf") {
  // value: symmetric about the center, total mass one at the far cut
  ad::Var x0 = ad::variable(0.0);
  ad::Var c0 = ad::constant(0.0);
  ad::Var k0 = ad::constant(2.5);
  CHECK(mdpf::von_mises_cdf(x0, c0, k0)->value.item() == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(mdpf::von_mises_cdf(ad::constant(special::kPi - 1e-12), c0, k0)->value.item() ==
        doctest::Approx(1.0).epsilon(1e-9));

  ad::Var x = ad::variable(0.7);
  ad::Var c = ad::variable(-0.4);
  ad::Var k = ad::variable(3.0);
  ad::backward(mdpf::von_mises_cdf(x, c, k));
  auto fx = [&](const Tensor& t) {
    return mdpf::von_mises_cdf(ad::constant(t), ad::constant(-0.4), ad::constant(3.0))
        ->value.item();
  };
  auto fc = [&](const Tensor& t) {
    return mdpf::von_mises_cdf(ad::constant(0.7), ad::constant(t), ad::constant(3.0))
        ->value.item();
  };
  auto fk = [&](const Tensor& t) {
    return mdpf::von_mises_cdf(ad::constant(0.7), ad::constant(-0.4), ad::constant(t))
        ->value.item();
  };
  CHECK(testutil::max_grad_rel_err(fx, Tensor::scalar(0.7), x->grad) < 1e-4);
  CHECK(testutil::max_grad_rel_err(fc, Tensor::scalar(-0.4), c->grad) < 1e-4);
  CHECK(testutil::max_grad_rel_err(fk, Tensor::scalar(3.0), k->grad) < 1e-4);

  // broadcast form: query column vs center row
  ad::Var xs = ad::variable(Tensor({3, 1}, {-0.5, 0.2, 2.0}));
  ad::Var cs = ad::variable(Tensor({1, 2}, {0.3, -1.0}));
  ad::Var ks = ad::variable(2.0);
  ad::Var grid = mdpf::von_mises_cdf(xs, cs, ks);
  CHECK(grid->value.shape() == std::vector<int>{3, 2});
  ad::backward(ad::sum(grid));
  auto fxs = [&](const Tensor& t) {
    return ad::sum(mdpf::von_mises_cdf(ad::constant(t), ad::constant(Tensor({1, 2}, {0.3, -1.0})),
                                       ad::constant(2.0)))
        ->value.item();
  };
  CHECK(testutil::max_grad_rel_err(fxs, Tensor({3, 1}, {-0.5, 0.2, 2.0}), xs->grad) < 1e-4);
}

TEST_CASE("wrap_angle canonicalizes to [-pi, pi)") {
  CHECK(special::wrap_angle(special::kPi) == doctest::Approx(-special::kPi));
  CHECK(special::wrap_angle(-special::kPi) == doctest::Approx(-special::kPi));
  CHECK(special::wrap_angle(3.0 * special::kPi / 2.0) == doctest::Approx(-special::kPi / 2.0));
  CHECK(special::wrap_angle(-7.0) == doctest::Approx(-7.0 + 2.0 * special::kTwoPi - special::kTwoPi));
  for (double x : {-100.0, -3.2, 0.0, 3.1, 99.9}) {
    const double w = special::wrap_angle(x);
    CHECK(w >= -special::kPi);
    CHECK(w < special::kPi);
    CHECK(std::fabs(std::remainder(w - x, special::kTwoPi)) < 1e-9);
  }
}

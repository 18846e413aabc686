#include "mdpf/special.hpp"

#include <cmath>
#include <stdexcept>

namespace mdpf::special {

double wrap_angle(double x) {
  double w = x - kTwoPi * std::floor((x + kPi) / kTwoPi);
  // floor rounding can land exactly on pi; fold it back to -pi.
  if (w >= kPi) w -= kTwoPi;
  return w;
}

// Ascending power series: all terms positive, so no cancellation; terminates
// when the next term stops moving the sum.  Good to machine precision for any
// x that does not overflow I0 itself (|x| < ~713).
double bessel_i0(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k < 4000; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}

// I1(x) = (x/2) * sum_k (x^2/4)^k / (k! (k+1)!); odd in x.
double bessel_i1(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k < 4000; ++k) {
    term *= q / (static_cast<double>(k) * (k + 1));
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return 0.5 * x * sum;
}

double log_bessel_i0(double x) {
  const double ax = std::fabs(x);
  if (ax < 700.0) return std::log(bessel_i0(ax));
  // asymptotic expansion: I0(x) ~ e^x/sqrt(2 pi x) (1 + 1/(8x) + 9/(128x^2) + ...)
  const double r = 1.0 / ax;
  const double corr = 1.0 + r * (0.125 + r * (0.0703125 + r * 0.0732421875));
  return ax - 0.5 * std::log(kTwoPi * ax) + std::log(corr);
}

namespace {

double simpson(double fa, double fm, double fb, double h) { return h / 6.0 * (fa + 4.0 * fm + fb); }

double adaptive(const std::function<double(double)>& f, double a, double b, double fa, double fm,
                double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(fa, flm, fm, m - a);
  const double right = simpson(fm, frm, fb, b - m);
  const double delta = left + right - whole;
  if (depth <= 0 || std::fabs(delta) <= 15.0 * tol) {
    return left + right + delta / 15.0;
  }
  return adaptive(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1) +
         adaptive(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1);
}

}  // namespace

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  if (!(b >= a)) throw std::invalid_argument("integrate: b < a");
  if (a == b) return 0.0;
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  return adaptive(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 48);
}

double normal_cdf(double z) { return 0.5 * (1.0 + std::erf(z / 1.41421356237309504880)); }

}  // namespace mdpf::special

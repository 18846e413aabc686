#pragma once

#include <functional>

namespace mdpf::special {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 6.28318530717958647692;
inline constexpr double kLogTwoPi = 1.83787706640934548356;  // log(2*pi)
inline constexpr double kEulerGamma = 0.57721566490153286061;

// Wrap to [-pi, pi).
double wrap_angle(double x);

// Modified Bessel functions of the first kind, orders 0 and 1
// (polynomial/asymptotic approximations, |rel err| < 2e-7).
double bessel_i0(double x);
double bessel_i1(double x);

// log I0(x), safe for large x (asymptotic: x - log(2*pi*x)/2 regime handled
// through the scaled polynomial form).
double log_bessel_i0(double x);

// Adaptive Simpson quadrature of f over [a, b] to absolute tolerance tol.
double integrate(const std::function<double(double)>& f, double a, double b, double tol);

// Standard normal CDF.
double normal_cdf(double z);

}  // namespace mdpf::special

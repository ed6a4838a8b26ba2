#pragma once

// Summary statistics and the one-sided one-sample t-test on per-run gains.

#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <span>
#include <string>

#include "agr/tensor.hpp"

namespace agr {

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw Error("mean of an empty sample");
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline double sample_std(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

struct TTestResult {
  double t = 0;
  std::size_t df = 0;
  double p = 0;  // P(T >= t) under H0: mean 0
};

/// Thrown when every value is identical, so t is undefined.
class ZeroVarianceError : public Error {
 public:
  ZeroVarianceError(const std::string& what, double value) : Error(what), value_(value) {}
  double value() const { return value_; }
  bool all_positive() const { return value_ > 0; }
  bool all_zero() const { return value_ == 0; }

 private:
  double value_;
};

/// Upper tail P(T >= t) of Student's t with df degrees of freedom.
inline double student_t_upper_tail(double t, double df) {
  const double x = df / (df + t * t);
  const double half = 0.5 * boost::math::ibeta(0.5 * df, 0.5, x);
  return t >= 0 ? half : 1.0 - half;
}

/// Tests H1: mean > 0.
inline TTestResult one_sample_t_test(std::span<const double> deltas) {
  if (deltas.size() < 2) throw Error("t-test needs at least 2 values, got " + std::to_string(deltas.size()));
  bool identical = true;
  for (double d : deltas) identical = identical && d == deltas[0];
  if (identical) {
    const double v = deltas[0];
    const std::string kind = v > 0 ? "all positive" : (v < 0 ? "all negative" : "all zero");
    throw ZeroVarianceError("t-test undefined: every value equals " + std::to_string(v) + " (" + kind + ")", v);
  }
  const double n = static_cast<double>(deltas.size());
  TTestResult r;
  r.df = deltas.size() - 1;
  r.t = mean(deltas) / (sample_std(deltas) / std::sqrt(n));
  r.p = student_t_upper_tail(r.t, static_cast<double>(r.df));
  return r;
}

}  // namespace agr

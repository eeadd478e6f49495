#pragma once

// Central finite-difference gradient checker for scalar-valued graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tbattr/tbattr.hpp"

namespace gradcheck {

struct Result {
  double rel_error = 0;    // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0;      // largest entrywise deviation
  double grad_norm = 0;    // ||analytic||
  std::size_t checked = 0;
};

// f rebuilds the graph from the current leaf values and returns a one-element Var.
// Up to max_entries coordinates per input are probed, chosen by a fixed stride.
inline Result check(const std::function<tbattr::Var()>& f, const std::vector<tbattr::Var>& inputs, double h = 1e-6,
                    std::size_t max_entries = 48) {
  for (auto v : inputs) v.zero_grad();
  tbattr::backward(f());
  std::vector<double> analytic, numeric;
  for (auto v : inputs) {
    const tbattr::Tensor g = v.grad();
    auto vals = v.mutable_value().values();
    const std::size_t n = vals.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = f().value()[0];
      vals[i] = orig - h;
      const double down = f().value()[0];
      vals[i] = orig;
      analytic.push_back(g[i]);
      numeric.push_back((up - down) / (2 * h));
    }
  }
  Result r;
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
    r.max_abs = std::max(r.max_abs, std::abs(analytic[i] - numeric[i]));
  }
  r.grad_norm = std::sqrt(na);
  r.rel_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  r.checked = analytic.size();
  return r;
}

inline tbattr::Var random_leaf(tbattr::Shape shape, tbattr::Rng& rng, double scale = 1.0) {
  tbattr::Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.uniform(-1.0, 1.0);
  return tbattr::leaf(std::move(t));
}

// Weighted sum with fixed random coefficients: turns any output into a scalar loss.
inline tbattr::Var probe(const tbattr::Var& y, std::uint64_t seed = 99) {
  tbattr::Rng rng(seed);
  tbattr::Tensor w(tbattr::Shape{static_cast<int>(y.size())});
  for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return tbattr::sum(tbattr::mul(tbattr::reshape(y, {static_cast<int>(y.size())}), tbattr::constant(std::move(w))));
}

}  // namespace gradcheck

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "tbattr/autograd.hpp"
#include "tbattr/random.hpp"

namespace tbattr {

// Named trainable tensors. Names are hierarchical ("backbone.stem.w"); iteration
// order is lexicographic, which fixes the optimizer and checkpoint order.
class ParamStore {
 public:
  Var& add(const std::string& name, Tensor init) {
    auto [it, inserted] = params_.emplace(name, leaf(std::move(init), true));
    if (!inserted) throw ConfigError("duplicate parameter " + name);
    return it->second;
  }

  const Var& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Var> params_;
};

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

// He-normal init for a (Cout, Cin/groups, k, k) kernel.
inline Tensor he_conv(int cout, int cin_per_group, int k, Rng& rng) {
  return normal_tensor({cout, cin_per_group, k, k}, std::sqrt(2.0 / (cin_per_group * k * k)), rng);
}

// Adam with decoupled weight decay.
struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  void step(ParamStore& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opts_.beta2, t_);
    for (auto& [name, p] : params) {
      auto& st = state_[name];
      Tensor& w = p.mutable_value();
      if (st.m.size() != w.size()) {
        st.m = Tensor(w.shape());
        st.v = Tensor(w.shape());
      }
      const bool has_grad = p.node().has_grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = has_grad ? p.node().grad[i] : 0.0;
        st.m[i] = opts_.beta1 * st.m[i] + (1.0 - opts_.beta1) * g;
        st.v[i] = opts_.beta2 * st.v[i] + (1.0 - opts_.beta2) * g * g;
        const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * w[i]);
      }
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  AdamOptions opts_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace tbattr

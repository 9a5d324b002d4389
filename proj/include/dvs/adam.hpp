#pragma once

#include <cmath>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dvs/common.hpp"
#include "dvs/tensor.hpp"

namespace dvs {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

// Adam with bias correction.  Parameters registered twice (shared storage
// under two names) are deduplicated by node identity so a shared tensor is
// stepped exactly once per iteration.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    DVS_CHECK(cfg_.lr > 0, "adam: learning rate must be positive, got ", cfg_.lr);
  }

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return t_; }

  void add_param(const std::string& name, Tensor<T> p) {
    DVS_CHECK(p.defined(), "adam: undefined parameter '", name, "'");
    if (seen_.count(p.node().get())) return;
    seen_.insert(p.node().get());
    slots_.push_back(Slot{name, std::move(p),
                          std::vector<T>(),
                          std::vector<T>()});
  }

  std::size_t size() const { return slots_.size(); }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  // Parameters that accumulated no gradient this step are left untouched.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      const std::vector<T>& g = s.param.grad();
      bool any = false;
      for (T x : g)
        if (x != T(0)) { any = true; break; }
      if (!any && s.m.empty()) continue;
      if (s.m.empty()) {
        s.m.assign(g.size(), T(0));
        s.v.assign(g.size(), T(0));
      }
      T* w = s.param.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = double(g[i]);
        const double m = cfg_.beta1 * double(s.m[i]) + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * double(s.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        s.m[i] = T(m);
        s.v[i] = T(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        w[i] = T(double(w[i]) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  // Moment tensors for checkpointing, keyed "adam/<param>/m" and ".../v".
  std::vector<std::pair<std::string, std::vector<T>*>> state_vectors() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (auto& s : slots_) {
      out.emplace_back("adam/" + s.name + "/m", &s.m);
      out.emplace_back("adam/" + s.name + "/v", &s.v);
    }
    return out;
  }

  void set_step_count(long t) { t_ = t; }

  // Ensures moment buffers exist (zeroed) so checkpoint save/load is stable
  // even before the first step touches a parameter.
  void materialize_state() {
    for (auto& s : slots_) {
      if (s.m.empty()) {
        s.m.assign(std::size_t(s.param.numel()), T(0));
        s.v.assign(std::size_t(s.param.numel()), T(0));
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> m, v;
  };

  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Slot> slots_;
  std::unordered_set<Node<T>*> seen_;
};

}  // namespace dvs

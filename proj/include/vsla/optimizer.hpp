#pragma once

#include "vsla/params.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace vsla {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // L2 term added to the gradient
};

/// Adam with bias correction. Only parameters that receive a gradient move.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& store, const std::map<std::string, Matrix>& grads, double lr);

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  /// First/second moments keyed "m/<param>" and "v/<param>".
  std::map<std::string, Matrix> state() const;
  void load_state(const std::map<std::string, Matrix>& state, std::int64_t steps);

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
};

}  // namespace vsla

#include "vsla/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace vsla {

void Adam::step(ParamStore& store, const std::map<std::string, Matrix>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g0] : grads) {
    Parameter& p = store.at(name);
    Matrix g = g0;
    if (cfg_.weight_decay > 0) g += cfg_.weight_decay * p.value;
    auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

std::map<std::string, Matrix> Adam::state() const {
  std::map<std::string, Matrix> out;
  for (const auto& [k, m] : m_) out.emplace("m/" + k, m);
  for (const auto& [k, v] : v_) out.emplace("v/" + k, v);
  return out;
}

void Adam::load_state(const std::map<std::string, Matrix>& state, std::int64_t steps) {
  m_.clear();
  v_.clear();
  for (const auto& [k, mat] : state) {
    if (k.rfind("m/", 0) == 0) {
      m_.emplace(k.substr(2), mat);
    } else if (k.rfind("v/", 0) == 0) {
      v_.emplace(k.substr(2), mat);
    } else {
      throw std::invalid_argument("unknown optimizer state entry '" + k + "'");
    }
  }
  t_ = steps;
}

}  // namespace vsla

#include "hstgcn/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace hstgcn {

double AdamState::effective_lr(int epoch) const {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  return base_lr * std::pow(decay_rate, epoch);
}

void adam_step(AdamState& state, ParameterStore& params, const NamedTensors& grads, int epoch) {
  const double lr = state.effective_lr(epoch);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape())
      throw std::invalid_argument("gradient shape " + shape_str(g.shape()) + " does not match parameter '" +
                                  name + "' " + shape_str(it->second.shape()));
    if (!g.all_finite()) throw std::runtime_error("non-finite gradient for parameter '" + name + "'");
  }

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, m_new] = state.first_moment.try_emplace(name, g.shape(), 0.0);
    auto [vit, v_new] = state.second_moment.try_emplace(name, g.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps_hat);
    }
  }
}

}  // namespace hstgcn

#include "lmreg/optim.hpp"

#include <cmath>
#include <string>

#include "lmreg/common.hpp"

namespace lmreg::tensor {

void AdamConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("adam: weight_decay must be non-negative");
}

template <class T> void adam_step(std::span<Tensor<T>> params, AdamState<T> &state, const AdamConfig &cfg) {
    if (state.first_moment.empty()) {
        for (const auto &p : params) {
            state.first_moment.emplace_back(p.numel(), T(0));
            state.second_moment.emplace_back(p.numel(), T(0));
        }
    }
    if (state.first_moment.size() != params.size()) throw ConfigError("adam: parameter count changed between steps");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.lr), wd = static_cast<T>(cfg.weight_decay), eps = static_cast<T>(cfg.epsilon);
    const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t n = 0; n < params.size(); ++n) {
        auto &p = params[n];
        auto &m = state.first_moment[n];
        auto &v = state.second_moment[n];
        if (m.size() != p.numel()) {
            throw ConfigError("adam: parameter " + std::to_string(n) + " changed shape to " + shape_string(p.shape()));
        }
        auto value = p.values();
        auto grad = p.grad();
        for (std::size_t e = 0; e < value.size(); ++e) {
            T g = grad[e];
            if (cfg.decoupled_weight_decay) {
                value[e] -= lr * wd * value[e];
            } else {
                g += wd * value[e];
            }
            m[e] = b1 * m[e] + (T(1) - b1) * g;
            v[e] = b2 * v[e] + (T(1) - b2) * g * g;
            const T mhat = m[e] * inv_bc1;
            const T vhat = v[e] * inv_bc2;
            value[e] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

template <class T> Adam<T>::Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
}

template <class T> void Adam<T>::step() { adam_step<T>(params_, state_, cfg_); }

template <class T> void Adam<T>::zero_grad() {
    for (auto &p : params_) p.zero_grad();
}

template void adam_step<float>(std::span<Tensor<float>>, AdamState<float> &, const AdamConfig &);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double> &, const AdamConfig &);
template class Adam<float>;
template class Adam<double>;

} // namespace lmreg::tensor

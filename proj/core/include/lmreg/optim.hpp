// optim.hpp - Adam with decoupled (or optionally coupled L2) weight decay.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lmreg/tensor.hpp"

namespace lmreg::tensor {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-4;
    // true: p <- p - lr * wd * p before the Adam update; false: g <- g + wd * p.
    bool decoupled_weight_decay = true;

    void validate() const;
};

template <class T> struct AdamState {
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    std::int64_t step = 0;
};

// One update of every parameter from its accumulated grad. Moments are allocated on the first
// call; a later call with differently shaped parameters throws ConfigError.
template <class T> void adam_step(std::span<Tensor<T>> params, AdamState<T> &state, const AdamConfig &cfg);

template <class T> class Adam {
  public:
    Adam(std::vector<Tensor<T>> params, AdamConfig cfg);
    void step();
    void zero_grad();
    const AdamState<T> &state() const { return state_; }
    const AdamConfig &config() const { return cfg_; }

  private:
    std::vector<Tensor<T>> params_;
    AdamConfig cfg_;
    AdamState<T> state_;
};

extern template class Adam<float>;
extern template class Adam<double>;

} // namespace lmreg::tensor

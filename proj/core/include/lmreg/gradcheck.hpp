// gradcheck.hpp - central finite-difference verification of analytic gradients.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmreg/rng.hpp"
#include "lmreg/tensor.hpp"

namespace lmreg {

struct GradCheckResult {
    std::string name;
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    double tolerance = 0.0;
    bool passed() const { return max_relative_error < tolerance; }
};

// |a - n| / max(|a|, |n|, floor), the per-coordinate comparison used by every check.
double relative_gradient_error(double analytic, double numeric, double floor = 1e-6);

using LossOfLeaves = std::function<tensor::Tensor<double>(std::span<const tensor::Tensor<double>>)>;

// Runs backward once for analytic grads, then perturbs up to `max_checks` coordinates (all when 0;
// otherwise a seeded random subset) by +-h across the leaves that require grad.
GradCheckResult check_tensor_gradient(const std::string &name, const LossOfLeaves &loss,
                                      std::vector<tensor::Tensor<double>> leaves, double h = 1e-6,
                                      std::size_t max_checks = 0, std::uint64_t seed = 0, double tolerance = 1e-4);

// Finite-difference check of a generic scalar function with a supplied analytic gradient.
GradCheckResult check_function_gradient(const std::string &name, const std::function<double(std::span<const double>)> &f,
                                        std::span<const double> x, std::span<const double> analytic,
                                        std::span<const std::size_t> coords, double h, double tolerance);

// One check per differentiable tensor op on seeded random inputs, all in double precision.
std::vector<GradCheckResult> tensor_op_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-4);

} // namespace lmreg

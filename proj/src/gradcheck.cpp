#include "vkan/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace vkan {

namespace {

double rel_error(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

double eval_scalar(const ScalarFn& fn, const std::vector<Var>& inputs) {
    NoGradGuard ng;
    return fn(inputs).value().scalar();
}

}  // namespace

double finite_diff_check(const ScalarFn& fn, std::vector<Var> inputs, double step) {
    std::vector<std::pair<std::size_t, std::int64_t>> coords;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::int64_t i = 0; i < inputs[k].numel(); ++i) coords.emplace_back(k, i);
    }
    return finite_diff_check_coords(fn, std::move(inputs), coords, step);
}

double finite_diff_check_coords(const ScalarFn& fn, std::vector<Var> inputs,
                                const std::vector<std::pair<std::size_t, std::int64_t>>& coords,
                                double step) {
    for (const auto& v : inputs) {
        if (v.dtype() != DType::F64) {
            throw std::invalid_argument("finite_diff_check requires f64 inputs");
        }
    }
    Var y = fn(inputs);
    if (y.numel() != 1) {
        throw std::invalid_argument("finite_diff_check requires a scalar-valued function");
    }
    backward(y);
    std::vector<Tensor> analytic;
    analytic.reserve(inputs.size());
    for (auto& v : inputs) {
        analytic.push_back(v.has_grad() ? v.grad()
                                        : Tensor::zeros(DType::F64, v.value().shape()));
        v.zero_grad();
    }

    double worst = 0.0;
    for (const auto& [k, i] : coords) {
        auto vals = inputs[k].value_mut().data<double>();
        const double saved = vals[static_cast<std::size_t>(i)];
        vals[static_cast<std::size_t>(i)] = saved + step;
        const double fp = eval_scalar(fn, inputs);
        vals[static_cast<std::size_t>(i)] = saved - step;
        const double fm = eval_scalar(fn, inputs);
        vals[static_cast<std::size_t>(i)] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[k].data<double>()[static_cast<std::size_t>(i)];
        worst = std::max(worst, rel_error(a, numeric));
    }
    return worst;
}

}  // namespace vkan

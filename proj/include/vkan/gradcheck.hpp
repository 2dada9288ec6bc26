#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vkan/ops.hpp"

namespace vkan {

using ScalarFn = std::function<Var(const std::vector<Var>&)>;

/// Central-difference verification of the tape against (f(x+h)-f(x-h))/2h,
/// coordinate by coordinate over every f64 input. Returns the max over
/// coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const ScalarFn& fn, std::vector<Var> inputs, double step = 1e-5);

/// Same check restricted to chosen coordinates, given as (input index, flat
/// element index) pairs. Used for sampled whole-model checks.
double finite_diff_check_coords(const ScalarFn& fn, std::vector<Var> inputs,
                                const std::vector<std::pair<std::size_t, std::int64_t>>& coords,
                                double step = 1e-5);

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Named f64 gradient suites, one per module group; "all" runs everything.
std::vector<GradCheckCase> run_gradcheck_module(const std::string& module, std::uint64_t seed);
std::vector<std::string> gradcheck_module_names();

}  // namespace vkan

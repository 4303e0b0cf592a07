#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcac/tensor.hpp"

namespace dcac {

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct GradCheckReport {
    std::vector<GradCheckCase> cases;
    bool all_passed() const {
        for (const auto& c : cases)
            if (!c.passed) return false;
        return true;
    }
};

// Compares tape gradients of the scalar built by `loss_fn` against central finite
// differences over every element of every leaf. Relative error per element is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
GradCheckCase check_gradients(const std::string& name, const std::vector<TensorPtr>& leaves,
                              const std::function<TensorPtr(Tape&)>& loss_fn,
                              double epsilon = 1e-4, double tolerance = 1e-4);

// Built-in suite covering every differentiable op at small shapes.
GradCheckReport run_builtin_gradcheck(std::uint64_t seed);

}  // namespace dcac

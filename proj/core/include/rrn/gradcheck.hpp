#pragma once

#include "rrn/tape.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rrn::diff {

struct GradReport {
    std::string op;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
    std::size_t checked = 0;
    /// Entries rejected because a kink of the function fell inside the stencil.
    std::size_t skipped = 0;
};

/// A scalar-valued probe of a recorded computation. `build` records the
/// operator under test on the tape, given the tape handles of `inputs`, and
/// returns its output; the checked function is <output, r> for a fixed random r.
/// `params` are extra buffers captured by `build` whose gradients the closure
/// accumulates into the matching `param_grads` span.
struct GradProblem {
    std::string name;
    std::vector<Tensor<double>> inputs;
    std::function<Var(Tape<double>&, const std::vector<Var>&)> build;
    std::vector<std::span<double>> params;
    std::vector<std::span<double>> param_grads;
    /// Entries sampled per input or parameter buffer; 0 checks all of them.
    std::size_t samples_per_buffer = 0;
};

struct GradOptions {
    double step = 1e-4;
    double tol = 1e-4;
    std::uint64_t seed = 1;
    /// Multiplies the analytic gradient before comparison (1.0 = honest).
    double corrupt = 1.0;
};

/// Central differences vs. the tape's reverse pass. The error of one entry is
/// |a - n| / max(|a|, |n|, 1e-6 * max(1, max|n|)).
GradReport gradcheck(const GradProblem& problem, const GradOptions& opts = {});

/// Named problems covering every differentiable operator of the engine.
std::vector<GradProblem> operator_problems(std::uint64_t seed);

/// Loss through the full registration network on a `dims`^3 pair with random,
/// non-zero output layers; parameters are sampled per tensor.
GradProblem end_to_end_problem(std::uint64_t seed, int dims = 16);

}  // namespace rrn::diff

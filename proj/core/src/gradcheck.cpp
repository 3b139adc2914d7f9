#include "rrn/gradcheck.hpp"

#include "rrn/costvolume.hpp"
#include "rrn/losses.hpp"
#include "rrn/model.hpp"
#include "rrn/network.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

namespace rrn::diff {

namespace {

using net::SplitMix64;

double probe(const Tensor<double>& out, const Tensor<double>& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
    return s;
}

std::vector<std::size_t> pick(std::size_t n, std::size_t k, SplitMix64& rng) {
    std::vector<std::size_t> idx;
    if (k == 0 || k >= n) {
        idx.resize(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        return idx;
    }
    std::set<std::size_t> seen;
    while (seen.size() < k) seen.insert(static_cast<std::size_t>(rng.next() % n));
    return {seen.begin(), seen.end()};
}

}  // namespace

GradReport gradcheck(const GradProblem& problem, const GradOptions& opts) {
    GradReport rep;
    rep.op = problem.name;
    rep.tol = opts.tol;
    if (problem.params.size() != problem.param_grads.size()) {
        throw ValidationError("gradcheck: params and param_grads differ in count");
    }

    // Analytic pass.
    for (auto g : problem.param_grads) std::fill(g.begin(), g.end(), 0.0);
    Tensor<double> r;
    std::vector<Tensor<double>> analytic_inputs;
    {
        Tape<double> tape(true);
        std::vector<Var> vars;
        for (const auto& x : problem.inputs) vars.push_back(tape.input(x));
        const Var out = problem.build(tape, vars);
        r = Tensor<double>(tape.value(out).channels(), tape.value(out).dims());
        SplitMix64 rng(opts.seed ^ 0x5bd1e995u);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = 2.0 * rng.uniform() - 1.0;
        const Var root = dot_const(tape, out, r);
        tape.backward(root);
        for (auto v : vars) {
            analytic_inputs.push_back(tape.has_grad(v) ? tape.grad(v) : Tensor<double>(tape.value(v).channels(),
                                                                                        tape.value(v).dims()));
        }
    }
    std::vector<std::vector<double>> analytic_params;
    for (auto g : problem.param_grads) analytic_params.emplace_back(g.begin(), g.end());

    auto inputs = problem.inputs;
    auto evaluate = [&]() {
        Tape<double> tape(false);
        std::vector<Var> vars;
        for (const auto& x : inputs) vars.push_back(tape.constant(x));
        return probe(tape.value(problem.build(tape, vars)), r);
    };
    const double f0 = evaluate();
    const double h = opts.step;

    struct Pair {
        double a, n;
    };
    std::vector<Pair> pairs;
    SplitMix64 rng(opts.seed);
    // Returns false when a kink of the function lies inside the stencil: either
    // the one-sided slopes disagree outright, or the estimates at h and h/2 do.
    auto central = [&](double* slot, double& num) {
        const double orig = *slot;
        auto eval_at = [&](double x) {
            *slot = x;
            const double f = evaluate();
            *slot = orig;
            return f;
        };
        const double noise = 1e-10 * std::max(1.0, std::abs(f0));
        const double fp = eval_at(orig + h);
        const double fm = eval_at(orig - h);
        num = (fp - fm) / (2.0 * h);
        if (std::abs(fp + fm - 2.0 * f0) > 0.05 * std::abs(fp - fm) + noise) return false;
        const double half = (eval_at(orig + 0.5 * h) - eval_at(orig - 0.5 * h)) / h;
        return std::abs(num - half) <= 1e-6 * std::max(std::abs(num), std::abs(half)) + noise;
    };
    auto run_buffer = [&](double* data, std::size_t n, const std::vector<double>& analytic) {
        const bool exhaustive = problem.samples_per_buffer == 0 || problem.samples_per_buffer >= n;
        for (std::size_t i : pick(n, problem.samples_per_buffer, rng)) {
            for (int attempt = 0; attempt < 8; ++attempt) {
                double num = 0.0;
                if (central(data + i, num)) {
                    pairs.push_back({analytic[i] * opts.corrupt, num});
                    break;
                }
                ++rep.skipped;
                if (exhaustive) break;
                i = static_cast<std::size_t>(rng.next() % n);
            }
        }
    };
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        run_buffer(inputs[b].data(), inputs[b].size(), analytic_inputs[b].values());
    }
    for (std::size_t b = 0; b < problem.params.size(); ++b) {
        run_buffer(problem.params[b].data(), problem.params[b].size(), analytic_params[b]);
    }

    double nmax = 0.0;
    for (const auto& p : pairs) nmax = std::max(nmax, std::abs(p.n));
    const double floor = 1e-6 * std::max(1.0, nmax);
    for (const auto& p : pairs) {
        const double err = std::abs(p.a - p.n) / std::max({std::abs(p.a), std::abs(p.n), floor});
        rep.max_rel_err = std::max(rep.max_rel_err, err);
    }
    rep.checked = pairs.size();
    rep.pass = rep.checked > 0 && rep.max_rel_err < rep.tol;
    return rep;
}

namespace {

Tensor<double> random_tensor(int c, Grid3 dims, SplitMix64& rng, double lo, double hi) {
    Tensor<double> t(c, dims);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
    return t;
}

/// Values with magnitude in [0.1, 1] and random sign.
Tensor<double> away_from_zero(int c, Grid3 dims, SplitMix64& rng) {
    Tensor<double> t(c, dims);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double m = 0.1 + 0.9 * rng.uniform();
        t[i] = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

/// Displacements whose fractional parts stay in [0.15, 0.85].
Tensor<double> fractional_dvf(Grid3 dims, SplitMix64& rng, int max_int) {
    Tensor<double> t(3, dims);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const int k = static_cast<int>(rng.next() % static_cast<std::uint64_t>(2 * max_int + 1)) - max_int;
        t[i] = k + 0.15 + 0.7 * rng.uniform();
    }
    return t;
}

GradProblem conv_problem(const std::string& name, int cin, int cout, int stride, int dilation, Grid3 dims,
                         SplitMix64& rng) {
    auto w = std::make_shared<ConvWeights<double>>(cin, cout, stride, dilation);
    auto g = std::make_shared<ConvWeights<double>>(cin, cout, stride, dilation);
    for (auto& v : w->weight) v = 2.0 * rng.uniform() - 1.0;
    for (auto& v : w->bias) v = 2.0 * rng.uniform() - 1.0;
    GradProblem p;
    p.name = name;
    p.inputs = {random_tensor(cin, dims, rng, -1.0, 1.0)};
    p.build = [w, g](Tape<double>& t, const std::vector<Var>& v) { return conv3(t, v[0], *w, g.get()); };
    p.params = {std::span<double>(w->weight), std::span<double>(w->bias)};
    p.param_grads = {std::span<double>(g->weight), std::span<double>(g->bias)};
    return p;
}

/// Problem over one estimator block of a full random model. Only the block's
/// own parameter buffers are perturbed.
GradProblem estimator_problem(const std::string& name, int level, Grid3 dims, std::uint64_t seed) {
    using net::ModelParams;
    net::ArchConfig arch;
    auto params = std::make_shared<ModelParams<double>>(net::init_params<double>(seed, arch, false));
    auto grads = std::make_shared<ModelParams<double>>(ModelParams<double>::zeros(arch));
    SplitMix64 rng(seed + 17);
    const int feat = net::kPyramidChannels[level - 1];
    const int k = arch.matching_channels(feat);
    GradProblem p;
    p.name = name;
    p.inputs = {random_tensor(k, dims, rng, -1.0, 1.0), random_tensor(feat, dims, rng, -1.0, 1.0)};
    if (level < net::kLevels) {
        p.inputs.push_back(random_tensor(3, dims, rng, -1.0, 1.0));
        p.inputs.push_back(random_tensor(net::kContextChannels, dims, rng, -1.0, 1.0));
    }
    p.build = [params, grads, level](Tape<double>& t, const std::vector<Var>& v) {
        if (level == net::kLevels) {
            const auto [dvf, ctx] = net::estimate_initial<double>(t, *params, grads.get(), v[0], v[1]);
            return concat(t, {dvf, ctx});
        }
        if (level > 1) {
            const auto [dvf, ctx] = net::estimate_intermediate<double>(t, *params, grads.get(), level, v[0], v[1], v[2], v[3]);
            // Both outputs of the block enter the probe.
            return concat(t, {dvf, ctx});
        }
        return net::estimate_final<double>(t, *params, grads.get(), v[0], v[1], v[2], v[3]);
    };
    p.samples_per_buffer = 6;
    const std::string prefix = level == 1 ? "final." : "estimator.l" + std::to_string(level) + ".";
    params->for_each([&](const std::string& n, std::span<double> s) {
        if (n.rfind(prefix, 0) == 0) p.params.push_back(s);
    });
    grads->for_each([&](const std::string& n, std::span<double> s) {
        if (n.rfind(prefix, 0) == 0) p.param_grads.push_back(s);
    });
    return p;
}

}  // namespace

std::vector<GradProblem> operator_problems(std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<GradProblem> out;

    out.push_back(conv_problem("conv3 stride1", 2, 2, 1, 1, {5, 5, 5}, rng));
    out.push_back(conv_problem("conv3 stride2", 2, 3, 2, 1, {6, 5, 4}, rng));
    out.push_back(conv_problem("conv3 dilation2", 2, 2, 1, 2, {5, 6, 5}, rng));
    out.push_back(conv_problem("conv3 dilation4", 1, 2, 1, 4, {6, 6, 6}, rng));

    {
        GradProblem p;
        p.name = "leaky_relu";
        p.inputs = {away_from_zero(2, {4, 4, 4}, rng)};
        p.build = [](Tape<double>& t, const std::vector<Var>& v) { return leaky_relu(t, v[0], 0.1); };
        out.push_back(std::move(p));
    }
    for (bool scale : {false, true}) {
        GradProblem p;
        p.name = scale ? "upsample2x scaled" : "upsample2x";
        p.inputs = {random_tensor(scale ? 3 : 2, {3, 2, 3}, rng, -1.0, 1.0)};
        p.build = [scale](Tape<double>& t, const std::vector<Var>& v) { return upsample2x(t, v[0], scale); };
        out.push_back(std::move(p));
    }
    for (auto pad : {Padding::zeros, Padding::border}) {
        GradProblem p;
        p.name = pad == Padding::zeros ? "warp" : "warp border";
        p.inputs = {random_tensor(2, {6, 6, 6}, rng, -1.0, 1.0), fractional_dvf({6, 6, 6}, rng, 1)};
        p.build = [pad](Tape<double>& t, const std::vector<Var>& v) { return warp(t, v[0], v[1], pad); };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "concat";
        p.inputs = {random_tensor(1, {3, 3, 3}, rng, -1, 1), random_tensor(2, {3, 3, 3}, rng, -1, 1),
                    random_tensor(3, {3, 3, 3}, rng, -1, 1)};
        p.build = [](Tape<double>& t, const std::vector<Var>& v) { return concat(t, v); };
        out.push_back(std::move(p));
    }
    for (auto stats : {cost::NormStats::per_map, cost::NormStats::per_channel}) {
        GradProblem p;
        p.name = "normalize_features " + cost::to_string(stats);
        p.inputs = {random_tensor(3, {4, 4, 4}, rng, -2.0, 3.0)};
        p.build = [stats](Tape<double>& t, const std::vector<Var>& v) { return cost::normalize(t, v[0], stats); };
        out.push_back(std::move(p));
    }
    for (auto norm : {cost::Neighborhood::l1, cost::Neighborhood::linf}) {
        for (int radius : {1, 2}) {
            GradProblem p;
            p.name = "correlate " + cost::to_string(norm) + " r" + std::to_string(radius);
            p.inputs = {random_tensor(3, {5, 5, 5}, rng, -1, 1), random_tensor(3, {5, 5, 5}, rng, -1, 1)};
            p.build = [norm, radius](Tape<double>& t, const std::vector<Var>& v) {
                return cost::correlate(t, v[0], v[1], radius, norm);
            };
            out.push_back(std::move(p));
        }
    }
    for (int window : {3, 5}) {
        GradProblem p;
        p.name = "lcc window" + std::to_string(window);
        auto fixed = std::make_shared<Tensor<double>>(random_tensor(1, {6, 6, 6}, rng, 0.0, 1.0));
        p.inputs = {random_tensor(1, {6, 6, 6}, rng, 0.0, 1.0)};
        p.build = [fixed, window](Tape<double>& t, const std::vector<Var>& v) {
            return loss::lcc_mean(t, t.constant(*fixed), v[0], window);
        };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "tv";
        p.inputs = {random_tensor(3, {5, 5, 5}, rng, -2.0, 2.0)};
        p.build = [](Tape<double>& t, const std::vector<Var>& v) { return loss::tv(t, v[0]); };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "total_loss";
        auto mov = std::make_shared<Tensor<double>>(random_tensor(1, {6, 6, 6}, rng, 0.0, 1.0));
        auto fix = std::make_shared<Tensor<double>>(random_tensor(1, {6, 6, 6}, rng, 0.0, 1.0));
        p.inputs = {fractional_dvf({6, 6, 6}, rng, 0)};
        p.build = [mov, fix](Tape<double>& t, const std::vector<Var>& v) {
            const Var warped = warp(t, t.constant(*mov), v[0]);
            return loss::total_loss(t, t.constant(*fix), warped, v[0], 0.01, 3).total;
        };
        out.push_back(std::move(p));
    }
    out.push_back(estimator_problem("estimator initial", 4, {2, 2, 2}, seed + 101));
    out.push_back(estimator_problem("estimator intermediate l3", 3, {2, 3, 2}, seed + 102));
    out.push_back(estimator_problem("estimator intermediate l2", 2, {3, 2, 2}, seed + 103));
    out.push_back(estimator_problem("estimator final", 1, {3, 3, 3}, seed + 104));
    return out;
}

GradProblem end_to_end_problem(std::uint64_t seed, int dims) {
    using net::ModelParams;
    net::ArchConfig arch;
    auto params = std::make_shared<ModelParams<double>>(net::init_params<double>(seed, arch, false));
    auto grads = std::make_shared<ModelParams<double>>(ModelParams<double>::zeros(arch));
    SplitMix64 rng(seed + 3);
    const Grid3 g{dims, dims, dims};
    auto fix = std::make_shared<Tensor<double>>(random_tensor(1, g, rng, 0.0, 1.0));
    GradProblem p;
    p.name = "register+loss " + std::to_string(dims) + "^3";
    p.inputs = {random_tensor(1, g, rng, 0.0, 1.0)};
    p.build = [params, grads, fix](Tape<double>& t, const std::vector<Var>& v) {
        const Var f = t.constant(*fix);
        const auto fw = net::forward<double>(t, *params, grads.get(), v[0], f);
        return loss::total_loss(t, f, fw.warped, fw.dvf_full, 0.01, 7).total;
    };
    p.samples_per_buffer = 2;
    params->for_each([&](const std::string&, std::span<double> s) { p.params.push_back(s); });
    grads->for_each([&](const std::string&, std::span<double> s) { p.param_grads.push_back(s); });
    return p;
}

}  // namespace rrn::diff

#pragma once

#include "rrn/losses.hpp"
#include "rrn/model.hpp"
#include "rrn/textio.hpp"
#include "rrn/voldata.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rrn::train {

enum class Precision { f32, f64 };

/// Every field is addressable as a `key = value` line (see to_key_values).
struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double lambda = 0.01;
    int batch_size = 1;
    int lcc_window = 7;
    int plateau_window = 50;
    double plateau_tol = 1e-3;
    std::int64_t max_iters = 2000;
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
    net::ArchConfig arch{};

    void validate() const;
    [[nodiscard]] io::KeyValues to_key_values() const;
    /// Applies `kv` on top of this config; unknown keys are rejected.
    void apply(const io::KeyValues& kv);
    static const std::vector<std::string>& keys();
};

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::int64_t step = 0;

    static AdamState zeros(const net::ModelParams<T>& params);
};

/// One Adam update; throws NumericalError naming the first parameter with a
/// non-finite gradient (parameters are left untouched in that case).
template <typename T>
void adam_step(net::ModelParams<T>& params, const net::ModelParams<T>& grads, AdamState<T>& state,
               const TrainConfig& cfg);

/// Scalar form of the same recursion, for closed-form checks.
struct ScalarAdam {
    double m = 0.0;
    double v = 0.0;
    std::int64_t t = 0;
    double step(double theta, double g, const TrainConfig& cfg);
};

struct TrainCase {
    Volume moving;
    Volume fixed;
};

struct IterRecord {
    std::int64_t iter = 0;
    loss::LossValue loss;
};

enum class StopReason { plateau, max_iters, non_finite };
std::string to_string(StopReason r);

struct TrainHistory {
    std::vector<IterRecord> records;
    double wall_seconds = 0.0;
    StopReason reason = StopReason::max_iters;
    std::string diagnostic;
};

/// Everything needed to continue training bit-identically.
template <typename T>
struct TrainState {
    net::ModelParams<T> params;
    AdamState<T> adam;
    std::int64_t iteration = 0;
    std::vector<double> lcc_history;

    static TrainState fresh(const TrainConfig& cfg);
};

struct TrainHooks {
    std::function<void(const IterRecord&)> on_iteration;
    /// Called after every `checkpoint_every` completed iterations (0 disables).
    std::int64_t checkpoint_every = 0;
    std::function<void(std::int64_t iteration)> on_checkpoint;
};

/// True when the mean lcc of the last `window` iterations moved by less than
/// `tol` (relative) from the mean of the `window` iterations before them.
bool plateaued(const std::vector<double>& lcc_history, int window, double tol);

/// Adam over the cases in fixed order, one pair per iteration, until plateau or
/// `cfg.max_iters` total iterations. On a non-finite loss, `state` keeps the
/// last good parameters.
template <typename T>
TrainHistory train(const std::vector<TrainCase>& cases, const TrainConfig& cfg, TrainState<T>& state,
                   const TrainHooks& hooks = {});

/// Single forward/backward; returns the loss and fills `grads`.
template <typename T>
loss::LossValue loss_and_grad(const net::ModelParams<T>& params, const TrainCase& c, const TrainConfig& cfg,
                              net::ModelParams<T>& grads);

template <typename T>
void save_checkpoint(const TrainState<T>& state, const TrainConfig& cfg, const std::filesystem::path& path);

/// Verifies the stored manifest against the architecture in `cfg`.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg);

/// Reads only the configuration block stored in a checkpoint.
TrainConfig checkpoint_config(const std::filesystem::path& path);

/// `iter, total, lcc_mean, tv` lines.
std::string render_metrics(const TrainHistory& h);

}  // namespace rrn::train

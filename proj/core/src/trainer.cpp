#include "rrn/trainer.hpp"

#include "rrn/network.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>

namespace rrn::train {

// --- configuration --------------------------------------------------------------

const std::vector<std::string>& TrainConfig::keys() {
    static const std::vector<std::string> k{"lr",           "beta1",      "beta2",       "adam_eps",  "weight_decay",
                                            "lambda",       "batch_size", "lcc_window",  "radius",    "neighborhood",
                                            "mode",         "norm_stats", "slope",       "padding",   "plateau_window",
                                            "plateau_tol",  "max_iters",  "seed",        "precision"};
    return k;
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ValidationError("adam_eps must be > 0");
    if (weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
    if (lambda < 0.0) throw ValidationError("lambda must be >= 0");
    if (batch_size != 1) throw ValidationError("batch_size must be 1");
    if (lcc_window < 3 || lcc_window % 2 == 0) throw ValidationError("lcc_window must be odd and >= 3");
    if (arch.radius < 1) throw ValidationError("radius must be >= 1");
    if (!(arch.slope > 0.0 && arch.slope < 1.0)) throw ValidationError("slope must lie in (0, 1)");
    if (plateau_window < 1) throw ValidationError("plateau_window must be >= 1");
    if (plateau_tol < 0.0) throw ValidationError("plateau_tol must be >= 0");
    if (max_iters < 0) throw ValidationError("max_iters must be >= 0");
}

io::KeyValues TrainConfig::to_key_values() const {
    io::KeyValues kv;
    kv.set("lr", io::fmt_real(lr));
    kv.set("beta1", io::fmt_real(beta1));
    kv.set("beta2", io::fmt_real(beta2));
    kv.set("adam_eps", io::fmt_real(adam_eps));
    kv.set("weight_decay", io::fmt_real(weight_decay));
    kv.set("lambda", io::fmt_real(lambda));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("lcc_window", std::to_string(lcc_window));
    kv.set("radius", std::to_string(arch.radius));
    kv.set("neighborhood", cost::to_string(arch.neighborhood));
    kv.set("mode", net::to_string(arch.mode));
    kv.set("norm_stats", cost::to_string(arch.norm_stats));
    kv.set("slope", io::fmt_real(arch.slope));
    kv.set("padding", arch.padding == diff::Padding::zeros ? "zeros" : "border");
    kv.set("plateau_window", std::to_string(plateau_window));
    kv.set("plateau_tol", io::fmt_real(plateau_tol));
    kv.set("max_iters", std::to_string(max_iters));
    kv.set("seed", std::to_string(seed));
    kv.set("precision", precision == Precision::f32 ? "f32" : "f64");
    return kv;
}

namespace {

double real_of(const io::KeyValues& kv, const std::string& k) { return io::parse_reals(kv.get(k), 1, k)[0]; }
int int_of(const io::KeyValues& kv, const std::string& k) { return io::parse_ints(kv.get(k), 1, k)[0]; }
std::int64_t i64_of(const io::KeyValues& kv, const std::string& k) {
    const auto& s = kv.get(k);
    std::int64_t v = 0;
    std::istringstream ss(s);
    if (!(ss >> v) || !ss.eof()) throw ValidationError(k + ": cannot parse `" + s + "`");
    return v;
}

}  // namespace

void TrainConfig::apply(const io::KeyValues& kv) {
    const auto& known = keys();
    for (const auto& k : kv.keys()) {
        if (std::find(known.begin(), known.end(), k) == known.end()) throw ValidationError("unknown config key `" + k + "`");
    }
    if (kv.has("lr")) lr = real_of(kv, "lr");
    if (kv.has("beta1")) beta1 = real_of(kv, "beta1");
    if (kv.has("beta2")) beta2 = real_of(kv, "beta2");
    if (kv.has("adam_eps")) adam_eps = real_of(kv, "adam_eps");
    if (kv.has("weight_decay")) weight_decay = real_of(kv, "weight_decay");
    if (kv.has("lambda")) lambda = real_of(kv, "lambda");
    if (kv.has("batch_size")) batch_size = int_of(kv, "batch_size");
    if (kv.has("lcc_window")) lcc_window = int_of(kv, "lcc_window");
    if (kv.has("radius")) arch.radius = int_of(kv, "radius");
    if (kv.has("neighborhood")) arch.neighborhood = cost::parse_neighborhood(kv.get("neighborhood"));
    if (kv.has("mode")) arch.mode = net::parse_mode(kv.get("mode"));
    if (kv.has("norm_stats")) arch.norm_stats = cost::parse_norm_stats(kv.get("norm_stats"));
    if (kv.has("slope")) arch.slope = real_of(kv, "slope");
    if (kv.has("padding")) {
        const auto& p = kv.get("padding");
        if (p == "zeros") arch.padding = diff::Padding::zeros;
        else if (p == "border") arch.padding = diff::Padding::border;
        else throw ValidationError("padding must be zeros or border");
    }
    if (kv.has("plateau_window")) plateau_window = int_of(kv, "plateau_window");
    if (kv.has("plateau_tol")) plateau_tol = real_of(kv, "plateau_tol");
    if (kv.has("max_iters")) max_iters = i64_of(kv, "max_iters");
    if (kv.has("seed")) {
        const auto v = i64_of(kv, "seed");
        if (v < 0) throw ValidationError("seed must be >= 0");
        seed = static_cast<std::uint64_t>(v);
    }
    if (kv.has("precision")) {
        const auto& p = kv.get("precision");
        if (p == "f32") precision = Precision::f32;
        else if (p == "f64") precision = Precision::f64;
        else throw ValidationError("precision must be f32 or f64");
    }
}

std::string to_string(StopReason r) {
    switch (r) {
        case StopReason::plateau: return "plateau";
        case StopReason::max_iters: return "max_iters";
        case StopReason::non_finite: return "non_finite";
    }
    return "?";
}

// --- Adam ---------------------------------------------------------------------

template <typename T>
AdamState<T> AdamState<T>::zeros(const net::ModelParams<T>& params) {
    AdamState s;
    params.for_each([&](const std::string&, std::span<const T> p) {
        s.m.emplace_back(p.size(), T(0));
        s.v.emplace_back(p.size(), T(0));
    });
    return s;
}

template <typename T>
void adam_step(net::ModelParams<T>& params, const net::ModelParams<T>& grads, AdamState<T>& state,
               const TrainConfig& cfg) {
    std::vector<std::pair<std::string, std::span<const T>>> g;
    grads.for_each([&](const std::string& name, std::span<const T> s) { g.emplace_back(name, s); });
    if (g.size() != state.m.size()) throw ValidationError("adam_step: optimizer state does not match the parameter manifest");
    for (const auto& [name, s] : g) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!std::isfinite(static_cast<double>(s[i]))) {
                throw NumericalError("non-finite gradient in parameter " + name + " at index " + std::to_string(i));
            }
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::size_t k = 0;
    params.for_each([&](const std::string&, std::span<T> p) {
        const auto gs = g[k].second;
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != p.size()) throw ValidationError("adam_step: moment shape mismatch for " + g[k].first);
        for (std::size_t i = 0; i < p.size(); ++i) {
            double gi = static_cast<double>(gs[i]);
            if (cfg.weight_decay > 0.0) gi += cfg.weight_decay * static_cast<double>(p[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p[i] = static_cast<T>(static_cast<double>(p[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
        ++k;
    });
}

double ScalarAdam::step(double theta, double g, const TrainConfig& cfg) {
    t += 1;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
    return theta - cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
}

// --- training loop ----------------------------------------------------------------

template <typename T>
TrainState<T> TrainState<T>::fresh(const TrainConfig& cfg) {
    TrainState s;
    s.params = net::init_params<T>(cfg.seed, cfg.arch);
    s.adam = AdamState<T>::zeros(s.params);
    return s;
}

bool plateaued(const std::vector<double>& h, int window, double tol) {
    const auto n = h.size();
    const auto w = static_cast<std::size_t>(window);
    if (n < 2 * w) return false;
    double recent = 0.0, before = 0.0;
    for (std::size_t i = n - w; i < n; ++i) recent += h[i];
    for (std::size_t i = n - 2 * w; i < n - w; ++i) before += h[i];
    recent /= static_cast<double>(w);
    before /= static_cast<double>(w);
    const double denom = std::max(std::abs(before), 1e-12);
    return std::abs(recent - before) / denom < tol;
}

template <typename T>
loss::LossValue loss_and_grad(const net::ModelParams<T>& params, const TrainCase& c, const TrainConfig& cfg,
                              net::ModelParams<T>& grads) {
    diff::Tape<T> tape;
    const auto mov = tape.constant(c.moving.as_tensor<T>());
    const auto fix = tape.constant(c.fixed.as_tensor<T>());
    const auto fw = net::forward<T>(tape, params, &grads, mov, fix);
    const auto l = loss::total_loss<T>(tape, fix, fw.warped, fw.dvf_full, cfg.lambda, cfg.lcc_window);
    if (!std::isfinite(l.value.total)) return l.value;
    tape.backward(l.total);
    return l.value;
}

template <typename T>
TrainHistory train(const std::vector<TrainCase>& cases, const TrainConfig& cfg, TrainState<T>& state,
                   const TrainHooks& hooks) {
    cfg.validate();
    TrainHistory hist;
    const auto start = std::chrono::steady_clock::now();
    if (state.iteration < cfg.max_iters && cases.empty()) throw ValidationError("train: no cases");
    const auto dims = cases.empty() ? Grid3{} : cases.front().moving.dims();
    for (const auto& c : cases) {
        if (!(c.moving.dims() == dims) || !(c.fixed.dims() == dims)) {
            throw ValidationError("train: all cases must share the same preprocessed dims");
        }
    }
    auto grads = net::ModelParams<T>::zeros(cfg.arch);
    hist.reason = StopReason::max_iters;
    while (state.iteration < cfg.max_iters) {
        if (plateaued(state.lcc_history, cfg.plateau_window, cfg.plateau_tol)) {
            hist.reason = StopReason::plateau;
            break;
        }
        grads.for_each([](const std::string&, std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
        const auto& c = cases[static_cast<std::size_t>(state.iteration % static_cast<std::int64_t>(cases.size()))];
        const auto value = loss_and_grad(state.params, c, cfg, grads);
        if (!std::isfinite(value.total)) {
            hist.reason = StopReason::non_finite;
            hist.diagnostic = "non-finite loss at iteration " + std::to_string(state.iteration);
            break;
        }
        try {
            adam_step(state.params, grads, state.adam, cfg);
        } catch (const NumericalError& e) {
            hist.reason = StopReason::non_finite;
            hist.diagnostic = e.what();
            break;
        }
        IterRecord rec{state.iteration, value};
        state.lcc_history.push_back(value.lcc);
        state.iteration += 1;
        hist.records.push_back(rec);
        if (hooks.on_iteration) hooks.on_iteration(rec);
        if (hooks.checkpoint_every > 0 && hooks.on_checkpoint && state.iteration % hooks.checkpoint_every == 0) {
            hooks.on_checkpoint(state.iteration);
        }
    }
    if (hist.reason == StopReason::max_iters && state.iteration >= cfg.max_iters &&
        plateaued(state.lcc_history, cfg.plateau_window, cfg.plateau_tol) && !hist.records.empty()) {
        hist.reason = StopReason::plateau;
    }
    hist.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return hist;
}

std::string render_metrics(const TrainHistory& h) {
    std::string out = "iter, total, lcc_mean, tv\n";
    char buf[160];
    for (const auto& r : h.records) {
        std::snprintf(buf, sizeof(buf), "%lld, %.9g, %.9g, %.9g\n", static_cast<long long>(r.iter), r.loss.total,
                      r.loss.lcc, r.loss.tv);
        out += buf;
    }
    return out;
}

// --- checkpoints -----------------------------------------------------------------

namespace {

constexpr const char* kMagic = "RRNCKPT";
constexpr int kVersion = 1;

template <typename T>
const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void append_raw(std::string& out, std::span<const T> s) {
    const auto off = out.size();
    out.resize(off + s.size_bytes());
    std::memcpy(out.data() + off, s.data(), s.size_bytes());
}

struct Header {
    int version = 0;
    io::KeyValues config;
    std::int64_t iteration = 0;
    std::int64_t adam_step = 0;
    std::size_t history = 0;
    std::string dtype;
    std::vector<net::ParamInfo> manifest;
    std::size_t payload_offset = 0;
};

Header parse_header(const std::string& bytes, const std::string& src) {
    Header h;
    std::size_t pos = 0;
    auto next_line = [&]() {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw ValidationError(src + ": truncated checkpoint header");
        auto line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != kMagic) throw ValidationError(src + ": not a checkpoint (bad magic)");
    std::string config_text;
    for (;;) {
        const auto line = next_line();
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "version") ss >> h.version;
        else if (tag == "iteration") ss >> h.iteration;
        else if (tag == "adam_step") ss >> h.adam_step;
        else if (tag == "history") ss >> h.history;
        else if (tag == "dtype") ss >> h.dtype;
        else if (tag == "config") config_text += io::trim(line.substr(6)) + "\n";
        else if (tag == "param") {
            net::ParamInfo info;
            std::string dt;
            ss >> info.name >> dt;
            int d;
            while (ss >> d) info.shape.push_back(d);
            h.manifest.push_back(std::move(info));
        } else {
            throw ValidationError(src + ": unknown checkpoint header line `" + line + "`");
        }
    }
    if (h.version != kVersion) throw ValidationError(src + ": unsupported checkpoint version " + std::to_string(h.version));
    h.config = io::KeyValues::parse(config_text, src);
    h.payload_offset = pos;
    return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const TrainState<T>& state, const TrainConfig& cfg, const std::filesystem::path& path) {
    std::string out = std::string(kMagic) + "\n";
    out += "version " + std::to_string(kVersion) + "\n";
    out += std::string("dtype ") + dtype_name<T>() + "\n";
    const auto kv = cfg.to_key_values();
    for (const auto& k : kv.keys()) out += "config " + k + " = " + kv.get(k) + "\n";
    out += "iteration " + std::to_string(state.iteration) + "\n";
    out += "adam_step " + std::to_string(state.adam.step) + "\n";
    out += "history " + std::to_string(state.lcc_history.size()) + "\n";
    for (const auto& info : state.params.manifest()) {
        out += "param " + info.name + " " + dtype_name<T>();
        for (int d : info.shape) out += " " + std::to_string(d);
        out += "\n";
    }
    out += "end_header\n";
    state.params.for_each([&](const std::string&, std::span<const T> s) { append_raw(out, s); });
    for (const auto& m : state.adam.m) append_raw(out, std::span<const T>(m));
    for (const auto& v : state.adam.v) append_raw(out, std::span<const T>(v));
    append_raw(out, std::span<const double>(state.lcc_history));
    io::atomic_write(path, out);
}

TrainConfig checkpoint_config(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    const auto h = parse_header(bytes, path.string());
    TrainConfig cfg;
    cfg.apply(h.config);
    return cfg;
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg) {
    const auto bytes = io::read_file(path);
    const auto h = parse_header(bytes, path.string());
    if (h.dtype != dtype_name<T>()) {
        throw ValidationError(path.string() + ": checkpoint dtype " + h.dtype + " does not match requested precision");
    }
    TrainState<T> s;
    s.params = net::ModelParams<T>::zeros(cfg.arch);
    const auto expected = s.params.manifest();
    if (expected.size() != h.manifest.size()) {
        throw ValidationError(path.string() + ": manifest has " + std::to_string(h.manifest.size()) +
                              " tensors, architecture expects " + std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (expected[i].name != h.manifest[i].name || expected[i].shape != h.manifest[i].shape) {
            throw ValidationError(path.string() + ": manifest mismatch at " + h.manifest[i].name +
                                  " (architecture expects " + expected[i].name + ")");
        }
    }
    s.adam = AdamState<T>::zeros(s.params);
    s.adam.step = h.adam_step;
    s.iteration = h.iteration;
    s.lcc_history.resize(h.history);
    std::size_t total = 0;
    for (const auto& info : expected) total += info.count();
    const std::size_t need = 3 * total * sizeof(T) + h.history * sizeof(double);
    if (bytes.size() - h.payload_offset != need) {
        throw ValidationError(path.string() + ": payload size does not match the manifest");
    }
    const char* p = bytes.data() + h.payload_offset;
    auto take = [&](std::span<T> dst) {
        std::memcpy(dst.data(), p, dst.size_bytes());
        p += dst.size_bytes();
    };
    s.params.for_each([&](const std::string&, std::span<T> dst) { take(dst); });
    for (auto& m : s.adam.m) take(std::span<T>(m));
    for (auto& v : s.adam.v) take(std::span<T>(v));
    std::memcpy(s.lcc_history.data(), p, h.history * sizeof(double));
    return s;
}

#define RRN_INSTANTIATE_TRAIN(T)                                                                               \
    template struct AdamState<T>;                                                                              \
    template struct TrainState<T>;                                                                             \
    template void adam_step(net::ModelParams<T>&, const net::ModelParams<T>&, AdamState<T>&, const TrainConfig&); \
    template TrainHistory train(const std::vector<TrainCase>&, const TrainConfig&, TrainState<T>&,             \
                                const TrainHooks&);                                                            \
    template loss::LossValue loss_and_grad(const net::ModelParams<T>&, const TrainCase&, const TrainConfig&,   \
                                           net::ModelParams<T>&);                                              \
    template void save_checkpoint(const TrainState<T>&, const TrainConfig&, const std::filesystem::path&);     \
    template TrainState<T> load_checkpoint(const std::filesystem::path&, const TrainConfig&);

RRN_INSTANTIATE_TRAIN(float)
RRN_INSTANTIATE_TRAIN(double)

}  // namespace rrn::train

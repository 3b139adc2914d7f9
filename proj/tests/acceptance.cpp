// Acceptance checks, one line per criterion. `--only N` runs a single one.

#include "oracles.hpp"
#include "support.hpp"

#include "rrn/costvolume.hpp"
#include "rrn/evalkit.hpp"
#include "rrn/gradcheck.hpp"
#include "rrn/losses.hpp"
#include "rrn/network.hpp"
#include "rrn/ops.hpp"
#include "rrn/textio.hpp"
#include "rrn/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>

using namespace rrn;
namespace fs = std::filesystem;
using rrn::testing::same_bytes;
using rrn::testing::TempDir;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
    Status status;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

// --- 1 -------------------------------------------------------------------------

Outcome gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> failed;
    double worst = 0.0;
    std::uint64_t i = 0;
    for (const auto& p : diff::operator_problems(1)) {
        diff::GradOptions o;
        o.tol = 1e-4;
        o.seed = 1 + i++;
        const auto r = diff::gradcheck(p, o);
        worst = std::max(worst, r.max_rel_err);
        if (!r.pass) failed.push_back(r.op + " (" + fmt(r.max_rel_err) + ")");
    }
    diff::GradOptions o;
    o.tol = 1e-3;
    o.seed = 1 + i;
    const auto e2e = diff::gradcheck(diff::end_to_end_problem(1, 16), o);
    if (!e2e.pass) failed.push_back("end-to-end (" + fmt(e2e.max_rel_err) + ")");
    const double secs = seconds_since(t0);
    std::string detail = "operators worst " + fmt(worst) + ", end-to-end 16^3 " + fmt(e2e.max_rel_err) + " over " +
                         std::to_string(e2e.checked) + " entries, " + fmt(secs, 4) + " s";
    if (secs >= 300.0) failed.push_back("runtime");
    if (!failed.empty()) {
        detail += "; failing:";
        for (const auto& f : failed) detail += " " + f;
        return {Status::fail, detail};
    }
    return {Status::pass, detail};
}

// --- 2 -------------------------------------------------------------------------

Outcome correlation() {
    double worst = 0.0;
    int configs = 0;
    std::uint64_t seed = 0;
    for (int d : {3, 4, 5})
        for (int h : {3, 4, 5})
            for (int w : {3, 4, 5})
                for (int c : {1, 2, 3})
                    for (int r : {1, 2})
                        for (auto norm : {cost::Neighborhood::l1, cost::Neighborhood::linf}) {
                            const Grid3 g{d, h, w};
                            const auto a = rrn::testing::random_tensor<double>(c, g, ++seed);
                            const auto b = rrn::testing::random_tensor<double>(c, g, ++seed);
                            const auto fast = cost::correlate(a, b, r, norm);
                            const auto slow = cost::correlate_naive(a, b, r, norm);
                            if (!fast.data.same_shape(slow.data)) return {Status::fail, "shape mismatch at " + g.str()};
                            for (std::size_t i = 0; i < fast.data.size(); ++i) {
                                worst = std::max(worst, std::abs(fast.data[i] - slow.data[i]));
                            }
                            ++configs;
                        }
    const std::string detail = std::to_string(configs) + " configurations, max |diff| " + fmt(worst);
    return {worst <= 1e-6 ? Status::pass : Status::fail, detail};
}

// --- 3 -------------------------------------------------------------------------

Outcome identities() {
    std::vector<std::string> failed;
    const Grid3 g{32, 32, 32};
    const auto m = rrn::testing::random_tensor<float>(1, g, 3, 0.0, 1.0);
    const Tensor<float> zero(3, g);
    for (auto pad : {diff::Padding::zeros, diff::Padding::border}) {
        if (!same_bytes(diff::warp_forward(m, zero, pad).values(), m.values())) failed.push_back("zero warp");
    }

    train::TrainConfig cfg;
    const auto sc = eval::make_synthetic_case(g, 3.0, 6.0, 2);
    for (auto mode : {net::Mode::cost_volume, net::Mode::feature_concat}) {
        auto arch = cfg.arch;
        arch.mode = mode;
        const auto pm = net::init_params<float>(cfg.seed, arch);
        const auto r = net::register_pair(pm, sc.moving, sc.fixed, mode);
        bool zero_dvf = true;
        for (float v : r.dvf_full.values()) zero_dvf = zero_dvf && v == 0.0f;
        for (const auto& l : r.per_level_dvfs)
            for (float v : l.values()) zero_dvf = zero_dvf && v == 0.0f;
        if (!zero_dvf) failed.push_back("fresh dvf (" + net::to_string(mode) + ")");
        if (!same_bytes(r.warped_moving.data(), sc.moving.data())) failed.push_back("fresh warp (" + net::to_string(mode) + ")");
    }

    Tensor<double> c(3, g);
    for (int k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < c.plane(); ++i) c.channel(k)[i] = 0.75 - 2.5 * k;
    const double tv_const = loss::tv(c);
    if (!(tv_const <= 1e-6)) failed.push_back("tv(const)");

    double self = 1.0;
    for (std::uint64_t seed = 10; seed < 13; ++seed) {
        const auto img = rrn::testing::random_tensor<double>(1, g, seed, 0.0, 1.0);
        self = std::min(self, loss::lcc(img, img, cfg.lcc_window) / static_cast<double>(img.size()));
    }
    const auto ph = sc.moving.as_tensor<double>();
    self = std::min(self, loss::lcc(ph, ph, cfg.lcc_window) / static_cast<double>(ph.size()));
    if (!(self >= 0.999)) failed.push_back("lcc(I, I)");

    std::string detail = "tv(const) " + fmt(tv_const) + ", min lcc_mean(I, I) " + fmt(self, 6);
    if (!failed.empty()) {
        detail += "; failing:";
        for (const auto& f : failed) detail += " " + f;
        return {Status::fail, detail};
    }
    return {Status::pass, "zero warp exact, fresh model is the identity in both modes, " + detail};
}

// --- 4 -------------------------------------------------------------------------

Outcome architecture() {
    const Grid3 g{64, 64, 64};
    std::vector<std::string> bad;
    std::size_t checked = 0;
    for (auto mode : {net::Mode::cost_volume, net::Mode::feature_concat}) {
        net::ArchConfig arch;
        arch.mode = mode;
        const auto p = net::init_params<float>(4, arch, false);
        for (const auto& b : rrn::testing::manifest_mismatches(p)) bad.push_back(net::to_string(mode) + ": " + b);
        diff::Tape<float> tape(false);
        net::ShapeTrace trace;
        const auto fw = net::forward<float>(tape, p, nullptr,
                                            tape.constant(rrn::testing::random_tensor<float>(1, g, 1, 0, 1)),
                                            tape.constant(rrn::testing::random_tensor<float>(1, g, 2, 0, 1)), &trace);
        const auto expected = rrn::testing::expected_trace(arch, g);
        checked += expected.size();
        for (const auto& b : rrn::testing::trace_mismatches(trace, expected)) bad.push_back(net::to_string(mode) + ": " + b);
        if (!(tape.value(fw.dvf_full).dims() == g)) bad.push_back(net::to_string(mode) + ": output grid");
    }
    if (!bad.empty()) {
        std::string detail = std::to_string(bad.size()) + " mismatches:";
        for (const auto& b : bad) detail += " [" + b + "]";
        return {Status::fail, detail};
    }
    return {Status::pass, std::to_string(checked) + " traced tensors and both parameter manifests conform on 64^3"};
}

// --- 5 -------------------------------------------------------------------------

constexpr std::uint64_t kSynthSeed = 1;
constexpr double kEpeRatioMax = 0.25;
constexpr double kLccMin = 0.90;

Outcome synthetic_recovery() {
    const auto t0 = std::chrono::steady_clock::now();
    const Grid3 g{48, 48, 48};
    const auto sc = eval::make_synthetic_case(g, 6.0, 8.0, kSynthSeed);
    train::TrainConfig cfg;
    cfg.seed = kSynthSeed;
    cfg.max_iters = 2000;
    auto st = train::TrainState<float>::fresh(cfg);
    const auto h = train::train<float>({{sc.moving, sc.fixed}}, cfg, st);
    const auto r = net::register_pair(st.params, sc.moving, sc.fixed, cfg.arch.mode);
    const double init = eval::magnitude(sc.gt.field).mean;
    const double e = eval::epe(r.dvf_full, sc.gt.field).mean;
    const double lcc = loss::lcc(sc.fixed.as_tensor<float>(), r.warped_moving.as_tensor<float>(), cfg.lcc_window) /
                       static_cast<double>(g.voxels());
    const double ratio = e / init;
    const std::string detail = "seed " + std::to_string(kSynthSeed) + ", " + std::to_string(st.iteration) +
                               " iterations (" + train::to_string(h.reason) + "), EPE " + fmt(e, 4) + " / initial " +
                               fmt(init, 4) + " = " + fmt(ratio, 4) + ", lcc_mean " + fmt(lcc, 4) + ", " +
                               fmt(seconds_since(t0), 4) + " s";
    const bool ok = h.reason != train::StopReason::non_finite && ratio <= kEpeRatioMax && lcc >= kLccMin;
    return {ok ? Status::pass : Status::fail, detail};
}

// --- 6 -------------------------------------------------------------------------

struct DirLabExpectation {
    const char* id;
    double mean;
};
constexpr DirLabExpectation kDirLab[] = {{"copd1", 25.90}, {"copd2", 21.77}, {"copd3", 12.29}, {"copd4", 30.90},
                                         {"copd5", 30.90}, {"copd6", 28.32}, {"copd7", 21.66}, {"copd8", 25.57},
                                         {"copd9", 14.84}, {"copd10", 22.48}};
constexpr double kDirLabOverall = 23.46;
constexpr double kDirLabStd = 5.65;
constexpr double kDirLabTol = 0.3;

std::optional<std::pair<fs::path, fs::path>> find_case_files(const fs::path& root, const std::string& id) {
    std::optional<fs::path> ebh, ibh;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const auto name = e.path().filename().string();
        if (name.rfind(id + "_", 0) != 0 || e.path().extension() != ".txt") continue;
        if (name.find("_eBH_") != std::string::npos) ebh = e.path();
        if (name.find("_iBH_") != std::string::npos) ibh = e.path();
    }
    if (!ebh || !ibh) return std::nullopt;
    return std::pair{*ebh, *ibh};
}

Outcome dirlab() {
    const char* env = std::getenv("RRN_DIRLAB_DIR");
    if (env == nullptr || !fs::is_directory(env)) {
        return {Status::skip, "DirLab COPDGene landmarks not available; set RRN_DIRLAB_DIR to the directory holding "
                              "copdN_300_eBH/iBH landmark files to run this check"};
    }
    std::vector<eval::TreReport> reps;
    std::vector<std::string> bad;
    std::string cells;
    for (const auto& c : kDirLab) {
        const auto files = find_case_files(env, c.id);
        if (!files) return {Status::fail, std::string("landmarks of ") + c.id + " missing under " + env};
        const auto grid = eval::dirlab_copd_grid(c.id);
        const auto lms = load_landmarks(files->first, files->second, "original", grid->dims, grid->spacing);
        reps.push_back(eval::tre_identity(lms, grid->spacing, c.id, "identity"));
        cells += " " + std::string(c.id) + "=" + fmt(reps.back().mean, 4);
        if (std::abs(reps.back().mean - c.mean) > kDirLabTol) bad.push_back(c.id);
    }
    const auto t = eval::build_table(reps);
    const double mean = t.rows[0].mean, sd = t.rows[0].std;
    if (std::abs(mean - kDirLabOverall) > kDirLabTol) bad.push_back("overall");
    if (std::abs(sd - kDirLabStd) > kDirLabTol) bad.push_back("std");
    std::string detail = "per-case" + cells + "; overall " + fmt(mean, 4) + ", std " + fmt(sd, 4);
    if (!bad.empty()) {
        detail += "; off by more than 0.3:";
        for (const auto& b : bad) detail += " " + b;
        return {Status::fail, detail};
    }
    return {Status::pass, detail};
}

// --- 7 -------------------------------------------------------------------------

Outcome persistence() {
    TempDir dir("acceptance7");
    std::vector<std::string> bad;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok) bad.push_back(what);
    };

    const auto sc = eval::make_synthetic_case({16, 16, 16}, 2.0, 4.0, 6);
    const std::vector<train::TrainCase> cases{{sc.moving, sc.fixed}};
    train::TrainConfig cfg;
    cfg.seed = 9;
    cfg.lr = 1e-3;
    cfg.lcc_window = 5;
    cfg.max_iters = 4;

    auto a = train::TrainState<float>::fresh(cfg);
    train::train<float>(cases, cfg, a);
    train::save_checkpoint(a, cfg, dir / "a.ckpt");
    auto b = train::TrainState<float>::fresh(cfg);
    train::train<float>(cases, cfg, b);
    train::save_checkpoint(b, cfg, dir / "b.ckpt");
    check(io::read_file(dir / "a.ckpt") == io::read_file(dir / "b.ckpt"), "training determinism");

    const auto r1 = net::register_pair(a.params, sc.moving, sc.fixed, cfg.arch.mode);
    const auto r2 = net::register_pair(b.params, sc.moving, sc.fixed, cfg.arch.mode);
    check(same_bytes(r1.dvf_full.values(), r2.dvf_full.values()), "registration determinism");

    auto half = cfg;
    half.max_iters = 2;
    auto c = train::TrainState<float>::fresh(half);
    train::train<float>(cases, half, c);
    train::save_checkpoint(c, half, dir / "c.ckpt");
    auto resumed = train::load_checkpoint<float>(dir / "c.ckpt", cfg);
    train::train<float>(cases, cfg, resumed);
    train::save_checkpoint(resumed, cfg, dir / "r.ckpt");
    check(io::read_file(dir / "a.ckpt") == io::read_file(dir / "r.ckpt"), "resume equivalence");

    const auto back = train::load_checkpoint<float>(dir / "a.ckpt", cfg);
    train::save_checkpoint(back, cfg, dir / "a2.ckpt");
    check(io::read_file(dir / "a.ckpt") == io::read_file(dir / "a2.ckpt"), "checkpoint round-trip");

    save_volume(sc.moving, dir / "v.vhdr");
    const auto v = load_volume(dir / "v.vhdr");
    check(same_bytes(v.data(), sc.moving.data()) && v.dims() == sc.moving.dims() && v.spacing() == sc.moving.spacing(),
          "f32 volume round-trip");
    const auto hu = rrn::testing::volume_from({8, 9, 10}, [](int z, int y, int x) { return float(-1000 + 37 * z + 11 * y - 5 * x); },
                                              Units::hu);
    save_volume(hu, dir / "h.vhdr", DType::i16);
    check(same_bytes(load_volume(dir / "h.vhdr").data(), hu.data()), "i16 volume round-trip");

    const Dvf d{r1.dvf_full, {1.5, 0.75, 0.75}, "synthetic"};
    save_dvf(d, dir / "d.f32");
    const auto d2 = load_dvf(dir / "d.f32");
    check(same_bytes(d2.field.values(), d.field.values()) && d2.spacing == d.spacing && d2.grid_tag == d.grid_tag,
          "dvf round-trip");

    LandmarkSet lms;
    lms.dims = {20, 30, 40};
    lms.pairs = {{{0, 0, 0}, {1, 2, 3}}, {{19, 29, 39}, {4, 5, 6}}, {{7, 8, 9}, {10, 11, 12}}};
    save_landmarks(lms, dir / "m.txt", dir / "f.txt");
    const auto l2 = load_landmarks(dir / "m.txt", dir / "f.txt", "", lms.dims, lms.spacing);
    bool lm_ok = l2.pairs.size() == lms.pairs.size();
    for (std::size_t i = 0; lm_ok && i < lms.pairs.size(); ++i) {
        lm_ok = l2.pairs[i].moving == lms.pairs[i].moving && l2.pairs[i].fixed == lms.pairs[i].fixed;
    }
    check(lm_ok, "landmark round-trip");

    const auto text = cfg.to_key_values().render();
    train::TrainConfig cfg2;
    cfg2.apply(io::KeyValues::parse(text));
    check(cfg2.to_key_values().render() == text, "config round-trip");

    const auto tr = GridTransform::crop_resample("original", {121, 512, 512}, {{3, 40, 50}, {118, 470, 460}},
                                                 "preprocessed", {64, 64, 64});
    check(GridTransform::parse(tr.render()).render() == tr.render(), "transform round-trip");

    if (!bad.empty()) {
        std::string detail = "failing:";
        for (const auto& x : bad) detail += " [" + x + "]";
        return {Status::fail, detail};
    }
    return {Status::pass,
            "bitwise training and registration determinism, resume equivalence, round-trips of checkpoint, volume "
            "(f32, i16), dvf, landmarks, config and transform"};
}

constexpr int kSkipExit = 77;

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app("rrn acceptance checks");
    int only = 0;
    app.add_option("--only", only, "run a single criterion (1-7)");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> all{{1, "gradients", gradients},
                                     {2, "correlate vs naive", correlation},
                                     {3, "identity properties", identities},
                                     {4, "architecture conformance", architecture},
                                     {5, "synthetic recovery", synthetic_recovery},
                                     {6, "DirLab without registration", dirlab},
                                     {7, "determinism and persistence", persistence}};
    bool ok = true;
    bool ran = false;
    bool skipped = false;
    for (const auto& c : all) {
        if (only != 0 && c.id != only) continue;
        ran = true;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {Status::fail, std::string("exception: ") + e.what()};
        }
        const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
        std::cout << "criterion " << c.id << " (" << c.name << "): " << tag << " - " << o.detail << std::endl;
        ok = ok && o.status != Status::fail;
        skipped = skipped || o.status == Status::skip;
    }
    if (!ran) {
        std::cerr << "no criterion " << only << "\n";
        return 1;
    }
    if (!ok) return 1;
    // ctest reports a single skipped criterion as skipped rather than passed
    return only != 0 && skipped ? kSkipExit : 0;
}

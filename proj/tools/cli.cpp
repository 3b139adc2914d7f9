#include "cli.hpp"

#include "rrn/costvolume.hpp"
#include "rrn/evalkit.hpp"
#include "rrn/gradcheck.hpp"
#include "rrn/losses.hpp"
#include "rrn/network.hpp"
#include "rrn/trainer.hpp"

#include <CLI11.hpp>
#include <sys/resource.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

namespace rrn::cli {

namespace fs = std::filesystem;

namespace {

std::string dashed(std::string key) {
    for (auto& c : key)
        if (c == '_') c = '-';
    return key;
}

Grid3 grid_from(const std::vector<int>& v, const std::string& what) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw ValidationError(what + " takes 1 or 3 integers");
}

Vec3 vec_from(const std::vector<double>& v, const std::string& what) {
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw ValidationError(what + " takes 3 numbers (z y x)");
}

std::string triple(const Vec3& v) { return io::fmt_real(v[0]) + " " + io::fmt_real(v[1]) + " " + io::fmt_real(v[2]); }

/// Flags shared by every subcommand.
struct Common {
    int threads = 0;
    std::string out;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--threads", c.threads, "worker threads (default: RRN_THREADS, else all cores)");
}

void apply_threads(const Common& c) {
    int n = c.threads;
    if (n <= 0) {
        if (const char* env = std::getenv("RRN_THREADS")) {
            n = io::parse_ints(env, 1, "RRN_THREADS")[0];
        }
    }
    if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    diff::set_num_threads(n);
}

/// One string slot per TrainConfig key, filled only when the flag is given.
struct TrainFlags {
    std::map<std::string, std::string> values;
    std::string config_file;
    bool paper_scale = false;
};

void add_train_flags(CLI::App* app, TrainFlags& f, bool with_seed = true) {
    app->add_option("--config", f.config_file, "flat `key = value` file; flags override it");
    app->add_flag("--paper-scale", f.paper_scale, "published hyper-parameters and 256^3 grids (needs far more memory)");
    for (const auto& key : train::TrainConfig::keys()) {
        if (key == "seed" && !with_seed) continue;
        app->add_option("--" + dashed(key), f.values[key], "config key `" + key + "`");
    }
}

train::TrainConfig resolve_config(const TrainFlags& f, std::ostream& err,
                                  const std::optional<train::TrainConfig>& base = std::nullopt) {
    train::TrainConfig cfg = base.value_or(train::TrainConfig{});
    if (f.paper_scale) {
        cfg.lr = 1e-4;
        cfg.beta1 = 0.9;
        cfg.weight_decay = 0.0;
        cfg.lambda = 0.01;
        cfg.batch_size = 1;
        err << "warning: --paper-scale targets 256^3 volumes; one training step needs tens of GB of memory\n";
    }
    if (!f.config_file.empty()) cfg.apply(io::KeyValues::parse(io::read_file(f.config_file), f.config_file));
    io::KeyValues kv;
    for (const auto& [k, v] : f.values)
        if (!v.empty()) kv.set(k, v);
    cfg.apply(kv);
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& dir, const std::string& name, const std::string& text) {
    io::atomic_write(dir / name, text);
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) throw ValidationError("--out is required");
    fs::create_directories(out);
    return fs::path(out);
}

std::string run_record(const std::string& command, const std::vector<std::pair<std::string, std::string>>& items) {
    io::KeyValues kv;
    kv.set("command", command);
    for (const auto& [k, v] : items) kv.set(k, v);
    return kv.render();
}

// --- preprocess --------------------------------------------------------------------

struct PreprocessArgs {
    Common common;
    std::string moving, fixed;
    std::vector<int> dims{64};
    std::vector<double> clip{-1000.0, -100.0};
    std::vector<int> crop;
    bool auto_crop = false;
    bool paper_scale = false;
    std::string lm_moving, lm_fixed;
};

int do_preprocess(const PreprocessArgs& a, std::ostream& out, std::ostream& err) {
    const auto dir = prepare_out(a.common.out);
    if (a.clip.size() != 2) throw ValidationError("--clip takes 2 numbers");
    Grid3 target = grid_from(a.dims, "--dims");
    if (a.paper_scale) {
        target = {256, 256, 256};
        err << "warning: --paper-scale resamples to 256^3; training at that size needs tens of GB of memory\n";
    }
    const Volume mov = load_volume(a.moving);
    const Volume fix = load_volume(a.fixed);
    if (!(mov.dims() == fix.dims())) {
        throw ValidationError("moving " + mov.dims().str() + " and fixed " + fix.dims().str() + " grids differ");
    }
    CropBox box = CropBox::full(mov.dims());
    if (!a.crop.empty()) {
        if (a.crop.size() != 6) throw ValidationError("--crop takes 6 integers: z0 y0 x0 z1 y1 x1");
        box = {{a.crop[0], a.crop[1], a.crop[2]}, {a.crop[3], a.crop[4], a.crop[5]}};
    } else if (a.auto_crop) {
        const auto bm = auto_lung_box(mov);
        const auto bf = auto_lung_box(fix);
        if (!bm || !bf) throw ValidationError("--auto-crop found no enclosed low-intensity region");
        for (int k = 0; k < 3; ++k) {
            box.lo[k] = std::min(bm->lo[k], bf->lo[k]);
            box.hi[k] = std::max(bm->hi[k], bf->hi[k]);
        }
    }
    box.validate(mov.dims());
    const auto lo = static_cast<float>(a.clip[0]);
    const auto hi = static_cast<float>(a.clip[1]);
    auto prep = [&](const Volume& v) { return rescale_unit(resample(crop(clip_intensities(v, lo, hi), box), target), lo, hi); };
    const Volume pm = prep(mov);
    const Volume pf = prep(fix);
    const auto t = GridTransform::crop_resample("original", mov.dims(), box, "preprocessed", target);
    save_volume(pm, dir / "moving.vhdr");
    save_volume(pf, dir / "fixed.vhdr");
    write_text(dir, "transform.txt", t.render());
    std::vector<std::pair<std::string, std::string>> rec{
        {"moving", a.moving},
        {"fixed", a.fixed},
        {"dims", std::to_string(target.d) + " " + std::to_string(target.h) + " " + std::to_string(target.w)},
        {"clip", io::fmt_real(lo) + " " + io::fmt_real(hi)},
        {"crop", std::to_string(box.lo[0]) + " " + std::to_string(box.lo[1]) + " " + std::to_string(box.lo[2]) + " " +
                     std::to_string(box.hi[0]) + " " + std::to_string(box.hi[1]) + " " + std::to_string(box.hi[2])},
        {"spacing_mm", triple(pm.spacing())}};
    if (!a.lm_moving.empty() || !a.lm_fixed.empty()) {
        if (a.lm_moving.empty() || a.lm_fixed.empty()) {
            throw ValidationError("--landmarks-moving and --landmarks-fixed go together");
        }
        const auto lms = load_landmarks(a.lm_moving, a.lm_fixed, "original", mov.dims(), mov.spacing());
        const auto mapped = map_landmarks(lms, t);
        save_landmarks(mapped.set, dir / "landmarks_moving.txt", dir / "landmarks_fixed.txt");
        std::string outside;
        for (auto i : mapped.outside) outside += (outside.empty() ? "" : " ") + std::to_string(i + 1);
        rec.emplace_back("landmarks", std::to_string(mapped.set.pairs.size()));
        rec.emplace_back("landmarks_outside", outside.empty() ? "none" : outside);
        if (!mapped.outside.empty()) {
            err << "warning: " << mapped.outside.size() << " landmark pair(s) fall outside the preprocessed grid: "
                << outside << "\n";
        }
    }
    write_text(dir, "run.txt", run_record("preprocess", rec));
    out << "preprocessed " << mov.dims().str() << " -> " << target.str() << " into " << dir.string() << "\n";
    return kExitOk;
}

// --- train ---------------------------------------------------------------------------

struct TrainArgs {
    Common common;
    TrainFlags flags;
    std::vector<std::string> moving, fixed;
    std::string resume;
    std::int64_t checkpoint_every = 0;
};

std::vector<train::TrainCase> load_cases(const std::vector<std::string>& mov, const std::vector<std::string>& fix) {
    if (mov.size() != fix.size()) throw ValidationError("--moving and --fixed must be given the same number of times");
    std::vector<train::TrainCase> cases;
    for (std::size_t i = 0; i < mov.size(); ++i) cases.push_back({load_volume(mov[i]), load_volume(fix[i])});
    for (const auto& c : cases) net::check_input_dims(c.moving.dims(), c.fixed.dims());
    return cases;
}

std::string summary_of(const train::TrainHistory& h, std::int64_t iteration) {
    io::KeyValues kv;
    kv.set("iterations", std::to_string(iteration));
    kv.set("iterations_this_run", std::to_string(h.records.size()));
    kv.set("stop_reason", train::to_string(h.reason));
    if (!h.records.empty()) {
        const auto& last = h.records.back().loss;
        kv.set("final_total", io::fmt_real(last.total));
        kv.set("final_lcc_mean", io::fmt_real(last.lcc));
        kv.set("final_tv", io::fmt_real(last.tv));
    }
    if (!h.diagnostic.empty()) kv.set("diagnostic", h.diagnostic);
    return kv.render();
}

template <typename T>
int train_typed(const TrainArgs& a, const train::TrainConfig& cfg, const std::vector<train::TrainCase>& cases,
                const fs::path& dir, std::ostream& out, std::ostream& err) {
    auto state = a.resume.empty() ? train::TrainState<T>::fresh(cfg) : train::load_checkpoint<T>(a.resume, cfg);
    const auto ckpt = dir / "checkpoint.ckpt";
    train::TrainHooks hooks;
    hooks.checkpoint_every = a.checkpoint_every;
    hooks.on_checkpoint = [&](std::int64_t) { train::save_checkpoint(state, cfg, ckpt); };
    hooks.on_iteration = [&](const train::IterRecord& r) {
        if (r.iter % 50 == 0) {
            out << "iter " << r.iter << "  total " << r.loss.total << "  lcc_mean " << r.loss.lcc << "  tv " << r.loss.tv
                << "\n";
        }
    };
    const auto h = train::train<T>(cases, cfg, state, hooks);
    train::save_checkpoint(state, cfg, ckpt);
    write_text(dir, "metrics.csv", train::render_metrics(h));
    write_text(dir, "summary.txt", summary_of(h, state.iteration));
    out << "stopped after " << state.iteration << " iterations (" << train::to_string(h.reason) << ") in "
        << std::fixed << std::setprecision(1) << h.wall_seconds << " s\n";
    out.unsetf(std::ios::floatfield);
    if (h.reason == train::StopReason::non_finite) {
        err << "error: " << h.diagnostic << "; the checkpoint holds the last finite parameters\n";
        return kExitNumerical;
    }
    return kExitOk;
}

int do_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    std::optional<train::TrainConfig> base;
    if (!a.resume.empty() && a.flags.config_file.empty()) base = train::checkpoint_config(a.resume);
    const auto cfg = resolve_config(a.flags, err, base);
    const auto cases = cfg.max_iters == 0 && a.moving.empty() && a.fixed.empty()
                           ? std::vector<train::TrainCase>{}
                           : load_cases(a.moving, a.fixed);
    if (cases.empty() && cfg.max_iters > 0) throw ValidationError("train needs at least one --moving/--fixed pair");
    const auto dir = prepare_out(a.common.out);
    write_text(dir, "config.txt", cfg.to_key_values().render());
    std::vector<std::pair<std::string, std::string>> rec;
    for (std::size_t i = 0; i < a.moving.size(); ++i) {
        rec.emplace_back("moving." + std::to_string(i), a.moving[i]);
        rec.emplace_back("fixed." + std::to_string(i), a.fixed[i]);
    }
    if (!a.resume.empty()) rec.emplace_back("resume", a.resume);
    write_text(dir, "run.txt", run_record("train", rec));
    if (cfg.precision == train::Precision::f64) return train_typed<double>(a, cfg, cases, dir, out, err);
    return train_typed<float>(a, cfg, cases, dir, out, err);
}

// --- register ------------------------------------------------------------------------

struct RegisterArgs {
    Common common;
    std::string checkpoint, moving, fixed, mode, grid_tag = "preprocessed";
    bool levels = false;
};

net::ModelParams<float> load_params_f32(const std::string& path, train::TrainConfig& cfg) {
    cfg = train::checkpoint_config(path);
    if (cfg.precision == train::Precision::f64) {
        return train::load_checkpoint<double>(path, cfg).params.cast<float>();
    }
    return train::load_checkpoint<float>(path, cfg).params;
}

int do_register(const RegisterArgs& a, std::ostream& out, std::ostream&) {
    train::TrainConfig cfg;
    const auto params = load_params_f32(a.checkpoint, cfg);
    const Volume mov = load_volume(a.moving);
    const Volume fix = load_volume(a.fixed);
    const net::Mode mode = a.mode.empty() ? cfg.arch.mode : net::parse_mode(a.mode);
    const auto r = net::register_pair(params, mov, fix, mode);
    const auto dir = prepare_out(a.common.out);
    save_dvf({r.dvf_full, fix.spacing(), a.grid_tag}, dir / "dvf.f32");
    save_volume(r.warped_moving, dir / "warped.vhdr");
    if (a.levels) {
        for (int i = 0; i < 4; ++i) {
            const int level = 4 - i;
            Vec3 sp = fix.spacing();
            for (auto& s : sp) s *= static_cast<double>(1 << level);
            save_dvf({r.per_level_dvfs[static_cast<std::size_t>(i)], sp, a.grid_tag + ".l" + std::to_string(level)},
                     dir / ("dvf_level" + std::to_string(level) + ".f32"));
        }
    }
    const auto fixed_t = fix.as_tensor<float>();
    const auto warped_t = r.warped_moving.as_tensor<float>();
    const double lcc = loss::lcc(fixed_t, warped_t, cfg.lcc_window) / static_cast<double>(fix.dims().voxels());
    const double lcc0 = loss::lcc(fixed_t, mov.as_tensor<float>(), cfg.lcc_window) / static_cast<double>(fix.dims().voxels());
    const double tv = loss::tv(r.dvf_full);
    write_text(dir, "run.txt",
               run_record("register", {{"checkpoint", a.checkpoint},
                                       {"moving", a.moving},
                                       {"fixed", a.fixed},
                                       {"mode", net::to_string(mode)},
                                       {"lcc_mean_before", io::fmt_real(lcc0)},
                                       {"lcc_mean_after", io::fmt_real(lcc)},
                                       {"tv", io::fmt_real(tv)}}));
    out << "lcc_mean " << lcc0 << " -> " << lcc << ", tv " << tv << "\n";
    return kExitOk;
}

// --- eval-tre ------------------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string dvf;
    std::vector<std::string> landmarks;
    std::string lm_moving, lm_fixed, case_id, mode_tag, grid;
    std::vector<double> spacing;
    std::vector<int> dims;
};

struct LandmarkFiles {
    std::string case_id;
    fs::path moving, fixed;
};

/// A DirLab case directory or file prefix: expiration (`eBH`) is the moving side,
/// inspiration (`iBH`) the fixed side.
LandmarkFiles find_dirlab_files(const std::string& where) {
    fs::path dir = where;
    std::string prefix;
    if (!fs::is_directory(dir)) {
        prefix = dir.filename().string();
        dir = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
    }
    if (!fs::is_directory(dir)) throw ValidationError("landmark location `" + where + "` does not exist");
    LandmarkFiles lf;
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    for (const auto& p : entries) {
        const auto name = p.filename().string();
        if (name.rfind(prefix, 0) != 0 || p.extension() != ".txt") continue;
        if (name.find("_eBH_") != std::string::npos) {
            if (!lf.moving.empty()) throw ValidationError("several eBH landmark files match `" + where + "`");
            lf.moving = p;
        } else if (name.find("_iBH_") != std::string::npos) {
            if (!lf.fixed.empty()) throw ValidationError("several iBH landmark files match `" + where + "`");
            lf.fixed = p;
        }
    }
    if (lf.moving.empty() || lf.fixed.empty()) {
        throw ValidationError("no *_eBH_*.txt / *_iBH_*.txt landmark pair found at `" + where + "`");
    }
    const auto name = lf.moving.filename().string();
    lf.case_id = name.substr(0, name.find('_'));
    return lf;
}

int do_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
    if (a.dvf.empty()) throw ValidationError("--dvf is required (a DVF path or `zero`)");
    std::vector<LandmarkFiles> files;
    for (const auto& w : a.landmarks) files.push_back(find_dirlab_files(w));
    if (!a.lm_moving.empty() || !a.lm_fixed.empty()) {
        if (a.lm_moving.empty() || a.lm_fixed.empty()) {
            throw ValidationError("--landmarks-moving and --landmarks-fixed go together");
        }
        files.push_back({a.case_id.empty() ? "case" : a.case_id, a.lm_moving, a.lm_fixed});
    }
    if (files.empty()) throw ValidationError("no landmarks given (--landmarks or --landmarks-moving/--landmarks-fixed)");
    const bool zero = a.dvf == "zero";
    if (!zero && files.size() != 1) throw ValidationError("a DVF file pairs with exactly one landmark set");
    const std::string mode = a.mode_tag.empty() ? (zero ? "identity" : "rrn") : a.mode_tag;

    std::optional<Dvf> field;
    if (!zero) field = load_dvf(a.dvf);
    std::optional<Volume> grid_volume;
    if (!a.grid.empty()) grid_volume = load_volume(a.grid);

    std::vector<eval::TreReport> reports;
    for (const auto& f : files) {
        std::optional<Grid3> dims;
        std::optional<Vec3> spacing;
        std::string tag = "original";
        if (const auto known = eval::dirlab_copd_grid(f.case_id)) {
            dims = known->dims;
            spacing = known->spacing;
        }
        if (grid_volume) {
            dims = grid_volume->dims();
            spacing = grid_volume->spacing();
        }
        if (field) {
            dims = field->field.dims();
            spacing = field->spacing;
            if (!field->grid_tag.empty()) tag = field->grid_tag;
        }
        if (!a.dims.empty()) dims = grid_from(a.dims, "--dims");
        if (!a.spacing.empty()) spacing = vec_from(a.spacing, "--spacing");
        if (!dims || !spacing) {
            throw ValidationError("case `" + f.case_id + "`: unknown grid; pass --dims and --spacing (z y x) or --grid");
        }
        const auto lms = load_landmarks(f.moving, f.fixed, tag, *dims, *spacing);
        reports.push_back(zero ? eval::tre_identity(lms, *spacing, f.case_id, mode)
                               : eval::tre(lms, *field, *spacing, f.case_id, mode));
    }
    const auto table = eval::build_table(reports);
    out << eval::render_text(table);
    if (!a.common.out.empty()) {
        const auto dir = prepare_out(a.common.out);
        write_text(dir, "report.txt", eval::render_text(table));
        write_text(dir, "report.csv", eval::render_csv(table));
        for (const auto& r : reports) write_text(dir, "errors_" + r.case_id + ".txt", eval::per_landmark_lines(r));
    }
    return kExitOk;
}

// --- synth-bench ---------------------------------------------------------------------

struct SynthArgs {
    Common common;
    TrainFlags flags;
    std::vector<int> dims{32};
    double amplitude = 4.0;
    double smoothness = 8.0;
    std::uint64_t seed = 7;
};

int do_synth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
    auto flags = a.flags;
    flags.values["seed"] = std::to_string(a.seed);
    const auto cfg = resolve_config(flags, err);
    const Grid3 dims = grid_from(a.dims, "--dims");
    const auto sc = eval::make_synthetic_case(dims, a.amplitude, a.smoothness, a.seed);
    net::check_input_dims(dims, dims);
    const auto initial = eval::magnitude(sc.gt.field);
    const double nvox = static_cast<double>(dims.voxels());
    const double lcc0 = loss::lcc(sc.fixed.as_tensor<float>(), sc.moving.as_tensor<float>(), cfg.lcc_window) / nvox;

    train::TrainState<float> state = train::TrainState<float>::fresh(cfg);
    const auto h = train::train<float>({{sc.moving, sc.fixed}}, cfg, state);
    const auto r = net::register_pair(state.params, sc.moving, sc.fixed, cfg.arch.mode);
    const auto e = eval::epe(r.dvf_full, sc.gt.field);
    const double lcc = loss::lcc(sc.fixed.as_tensor<float>(), r.warped_moving.as_tensor<float>(), cfg.lcc_window) / nvox;

    io::KeyValues rep;
    rep.set("dims", dims.str());
    rep.set("amplitude", io::fmt_real(a.amplitude));
    rep.set("smoothness", io::fmt_real(a.smoothness));
    rep.set("seed", std::to_string(a.seed));
    rep.set("iterations", std::to_string(state.iteration));
    rep.set("stop_reason", train::to_string(h.reason));
    rep.set("initial_mean_displacement", io::fmt_real(initial.mean));
    rep.set("epe_mean", io::fmt_real(e.mean));
    rep.set("epe_max", io::fmt_real(e.max));
    rep.set("epe_ratio", io::fmt_real(e.mean / initial.mean));
    rep.set("lcc_mean_before", io::fmt_real(lcc0));
    rep.set("lcc_mean_after", io::fmt_real(lcc));
    out << rep.render();
    if (!a.common.out.empty()) {
        const auto dir = prepare_out(a.common.out);
        write_text(dir, "config.txt", cfg.to_key_values().render());
        save_volume(sc.moving, dir / "moving.vhdr");
        save_volume(sc.fixed, dir / "fixed.vhdr");
        save_dvf(sc.gt, dir / "gt.f32");
        save_dvf({r.dvf_full, {1.0, 1.0, 1.0}, "synthetic"}, dir / "dvf.f32");
        train::save_checkpoint(state, cfg, dir / "checkpoint.ckpt");
        write_text(dir, "metrics.csv", train::render_metrics(h));
        write_text(dir, "report.txt", rep.render());
    }
    if (h.reason == train::StopReason::non_finite) {
        err << "error: " << h.diagnostic << "\n";
        return kExitNumerical;
    }
    return kExitOk;
}

// --- gradcheck -----------------------------------------------------------------------

struct GradArgs {
    Common common;
    std::uint64_t seed = 1;
    double tol = 1e-4;
    double e2e_tol = 1e-3;
    int e2e_dims = 16;
    bool skip_e2e = false;
    double corrupt = 1.0;
    std::string only;
};

int do_gradcheck(const GradArgs& a, std::ostream& out, std::ostream&) {
    auto problems = diff::operator_problems(a.seed);
    std::vector<double> tols(problems.size(), a.tol);
    if (!a.skip_e2e) {
        problems.push_back(diff::end_to_end_problem(a.seed, a.e2e_dims));
        tols.push_back(a.e2e_tol);
    }
    std::vector<diff::GradReport> reports;
    for (std::size_t i = 0; i < problems.size(); ++i) {
        if (!a.only.empty() && problems[i].name.find(a.only) == std::string::npos) continue;
        diff::GradOptions o;
        o.tol = tols[i];
        o.seed = a.seed + i;
        o.corrupt = a.corrupt;
        reports.push_back(diff::gradcheck(problems[i], o));
    }
    if (reports.empty()) throw ValidationError("--only `" + a.only + "` matches no operator");
    std::size_t w = 2;
    for (const auto& r : reports) w = std::max(w, r.op.size());
    std::ostringstream table;
    table << std::left << std::setw(static_cast<int>(w)) << "op" << "  " << std::right << std::setw(8) << "checked"
          << std::setw(9) << "skipped" << std::setw(14) << "max_rel_err" << std::setw(9) << "tol"
          << "  status\n";
    bool ok = true;
    for (const auto& r : reports) {
        ok = ok && r.pass;
        std::ostringstream err_s, tol_s;
        err_s << std::scientific << std::setprecision(2) << r.max_rel_err;
        tol_s << std::scientific << std::setprecision(0) << r.tol;
        table << std::left << std::setw(static_cast<int>(w)) << r.op << "  " << std::right << std::setw(8) << r.checked
              << std::setw(9) << r.skipped << std::setw(14) << err_s.str() << std::setw(9) << tol_s.str() << "  "
              << (r.pass ? "PASS" : "FAIL") << "\n";
    }
    out << table.str();
    if (!a.common.out.empty()) write_text(prepare_out(a.common.out), "gradcheck.txt", table.str());
    return ok ? kExitOk : kExitNumerical;
}

// --- bench-costvolume ----------------------------------------------------------------

struct BenchArgs {
    Common common;
    std::vector<int> dims{32};
    int channels = 32;
    int radius = 2;
    std::string neighborhood = "l1";
    int reps = 5;
    std::uint64_t seed = 1;
};

int do_bench(const BenchArgs& a, std::ostream& out, std::ostream&) {
    const Grid3 dims = grid_from(a.dims, "--dims");
    const auto norm = cost::parse_neighborhood(a.neighborhood);
    if (a.reps < 1) throw ValidationError("--reps must be >= 1");
    Tensor<float> fw(a.channels, dims), ff(a.channels, dims);
    net::SplitMix64 rng(a.seed);
    for (std::size_t i = 0; i < fw.size(); ++i) fw[i] = static_cast<float>(rng.uniform() - 0.5);
    for (std::size_t i = 0; i < ff.size(); ++i) ff[i] = static_cast<float>(rng.uniform() - 0.5);
    const auto k = cost::neighborhood_offsets(a.radius, norm).size();
    double best = 1e300;
    for (int r = 0; r < a.reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto cv = cost::correlate(fw, ff, a.radius, norm);
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (cv.data.channels() != static_cast<int>(k)) throw NumericalError("unexpected cost volume size");
        best = std::min(best, s);
    }
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    const double rate = static_cast<double>(dims.voxels()) * static_cast<double>(k) / best;
    out << "dims " << dims.str() << "  channels " << a.channels << "  radius " << a.radius << " ("
        << cost::to_string(norm) << ", K=" << k << ")\n";
    out << "best of " << a.reps << ": " << best * 1e3 << " ms  throughput " << rate << " voxel-offsets/s"
        << "  peak_rss " << static_cast<double>(ru.ru_maxrss) / 1024.0 << " MiB\n";
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Recursive refinement registration of 3D volumes"};
    app.require_subcommand(1);

    PreprocessArgs pre;
    auto* p = app.add_subcommand("preprocess", "clip, crop and resample a moving/fixed pair (and its landmarks)");
    add_common(p, pre.common);
    p->add_option("--moving", pre.moving, "moving volume header (.vhdr or .mhd)")->required();
    p->add_option("--fixed", pre.fixed, "fixed volume header (.vhdr or .mhd)")->required();
    p->add_option("--out", pre.common.out, "output directory")->required();
    p->add_option("--dims", pre.dims, "target grid, 1 or 3 integers (z y x)")->expected(1, 3);
    p->add_option("--clip", pre.clip, "HU clipping window lo hi")->expected(2);
    p->add_option("--crop", pre.crop, "crop box z0 y0 x0 z1 y1 x1 (half-open)")->expected(6);
    p->add_flag("--auto-crop", pre.auto_crop, "bounding box of the enclosed region below -320 HU, padded by 5");
    p->add_flag("--paper-scale", pre.paper_scale, "resample to 256^3");
    p->add_option("--landmarks-moving", pre.lm_moving, "DirLab landmark file of the moving scan");
    p->add_option("--landmarks-fixed", pre.lm_fixed, "DirLab landmark file of the fixed scan");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "optimize network weights on one or more preprocessed pairs");
    add_common(t, tr.common);
    t->add_option("--moving", tr.moving, "moving volume header (repeatable)");
    t->add_option("--fixed", tr.fixed, "fixed volume header (repeatable)");
    t->add_option("--out", tr.common.out, "output directory")->required();
    t->add_option("--resume", tr.resume, "continue from this checkpoint");
    t->add_option("--checkpoint-every", tr.checkpoint_every, "also checkpoint every N iterations");
    add_train_flags(t, tr.flags);

    RegisterArgs rg;
    auto* r = app.add_subcommand("register", "predict the deformation of one pair with a trained checkpoint");
    add_common(r, rg.common);
    r->add_option("--checkpoint", rg.checkpoint, "trained checkpoint")->required();
    r->add_option("--moving", rg.moving, "moving volume header")->required();
    r->add_option("--fixed", rg.fixed, "fixed volume header")->required();
    r->add_option("--out", rg.common.out, "output directory")->required();
    r->add_option("--mode", rg.mode, "cost_volume or feature_concat (must match the checkpoint)");
    r->add_option("--grid-tag", rg.grid_tag, "grid name recorded in the DVF sidecar");
    r->add_flag("--levels", rg.levels, "also write the per-level fields");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval-tre", "landmark target registration error of a DVF");
    add_common(e, ev.common);
    e->add_option("--dvf", ev.dvf, "DVF payload path, or `zero` for the identity");
    e->add_option("--landmarks", ev.landmarks, "DirLab case directory or file prefix (repeatable)");
    e->add_option("--landmarks-moving", ev.lm_moving, "moving landmark file");
    e->add_option("--landmarks-fixed", ev.lm_fixed, "fixed landmark file");
    e->add_option("--case-id", ev.case_id, "case name for explicit landmark files");
    e->add_option("--mode-tag", ev.mode_tag, "row label in the report");
    e->add_option("--grid", ev.grid, "volume header whose dims and spacing the landmarks refer to");
    e->add_option("--dims", ev.dims, "landmark grid dims (z y x)")->expected(1, 3);
    e->add_option("--spacing", ev.spacing, "landmark grid spacing in mm (z y x)")->expected(3);
    e->add_option("--out", ev.common.out, "output directory for report files");

    SynthArgs sy;
    auto* s = app.add_subcommand("synth-bench", "train on a synthetic pair with known deformation and report EPE");
    add_common(s, sy.common);
    s->add_option("--dims", sy.dims, "grid, 1 or 3 integers")->expected(1, 3);
    s->add_option("--amplitude", sy.amplitude, "largest displacement in voxels");
    s->add_option("--smoothness", sy.smoothness, "Gaussian smoothing scale of the field in voxels");
    s->add_option("--seed", sy.seed, "seed of the case and of the weights");
    s->add_option("--out", sy.common.out, "output directory");
    add_train_flags(s, sy.flags, false);

    GradArgs gc;
    auto* g = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
    add_common(g, gc.common);
    g->add_option("--seed", gc.seed, "seed of the random inputs");
    g->add_option("--tol", gc.tol, "tolerance of the operator checks");
    g->add_option("--e2e-tol", gc.e2e_tol, "tolerance of the end-to-end check");
    g->add_option("--e2e-dims", gc.e2e_dims, "grid of the end-to-end check");
    g->add_flag("--skip-e2e", gc.skip_e2e, "operators only");
    g->add_option("--corrupt", gc.corrupt, "scale analytic gradients by this factor (self-test)");
    g->add_option("--only", gc.only, "run only checks whose name contains this text");
    g->add_option("--out", gc.common.out, "output directory");

    BenchArgs bc;
    auto* b = app.add_subcommand("bench-costvolume", "cost-volume throughput and peak memory");
    add_common(b, bc.common);
    b->add_option("--dims", bc.dims, "grid, 1 or 3 integers")->expected(1, 3);
    b->add_option("--channels", bc.channels, "feature channels");
    b->add_option("--radius", bc.radius, "neighborhood radius");
    b->add_option("--neighborhood", bc.neighborhood, "l1 or linf");
    b->add_option("--reps", bc.reps, "repetitions (best time is reported)");
    b->add_option("--seed", bc.seed, "seed of the random features");

    std::vector<std::string> argv_store{"rrn"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (p->parsed()) {
            apply_threads(pre.common);
            return do_preprocess(pre, out, err);
        }
        if (t->parsed()) {
            apply_threads(tr.common);
            return do_train(tr, out, err);
        }
        if (r->parsed()) {
            apply_threads(rg.common);
            return do_register(rg, out, err);
        }
        if (e->parsed()) {
            apply_threads(ev.common);
            return do_eval(ev, out, err);
        }
        if (s->parsed()) {
            apply_threads(sy.common);
            return do_synth(sy, out, err);
        }
        if (g->parsed()) {
            apply_threads(gc.common);
            return do_gradcheck(gc, out, err);
        }
        if (b->parsed()) {
            apply_threads(bc.common);
            return do_bench(bc, out, err);
        }
    } catch (const NumericalError& ex) {
        err << "numerical error: " << ex.what() << "\n";
        return kExitNumerical;
    } catch (const ValidationError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitValidation;
    }
    err << app.help();
    return kExitValidation;
}

}  // namespace rrn::cli

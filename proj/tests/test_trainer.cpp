#include "doctest.h"
#include "support.hpp"

#include "rrn/evalkit.hpp"
#include "rrn/textio.hpp"
#include "rrn/trainer.hpp"

#include <cmath>
#include <limits>

using namespace rrn;
using namespace rrn::train;
using rrn::testing::TempDir;

namespace {

template <typename T>
std::vector<T> flat(const net::ModelParams<T>& p) {
    std::vector<T> out;
    p.for_each([&](const std::string&, std::span<const T> s) { out.insert(out.end(), s.begin(), s.end()); });
    return out;
}

std::vector<TrainCase> small_cases() {
    const auto sc = eval::make_synthetic_case({16, 16, 16}, 2.0, 4.0, 3);
    const auto sc2 = eval::make_synthetic_case({16, 16, 16}, 2.0, 4.0, 4);
    return {{sc.moving, sc.fixed}, {sc2.moving, sc2.fixed}};
}

TrainConfig quick_config(std::int64_t iters) {
    TrainConfig cfg;
    cfg.max_iters = iters;
    cfg.lr = 1e-3;
    cfg.seed = 11;
    cfg.lcc_window = 5;
    return cfg;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config defaults carry the published optimizer settings") {
    const TrainConfig c;
    CHECK(c.lr == 1e-4);
    CHECK(c.beta1 == 0.9);
    CHECK(c.beta2 == 0.999);
    CHECK(c.weight_decay == 0.0);
    CHECK(c.lambda == 0.01);
    CHECK(c.batch_size == 1);
    CHECK(c.plateau_window == 50);
    CHECK(c.plateau_tol == 1e-3);
    CHECK(c.max_iters == 2000);
    CHECK(c.arch.radius == 2);
    CHECK(c.arch.neighborhood == cost::Neighborhood::l1);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("every config field round-trips through key = value text") {
    TrainConfig c;
    c.lr = 3.5e-4;
    c.beta1 = 0.8;
    c.lambda = 0.125;
    c.lcc_window = 9;
    c.arch.radius = 1;
    c.arch.neighborhood = cost::Neighborhood::linf;
    c.arch.mode = net::Mode::feature_concat;
    c.arch.norm_stats = cost::NormStats::per_channel;
    c.arch.padding = diff::Padding::border;
    c.arch.slope = 0.2;
    c.plateau_window = 7;
    c.max_iters = 123456789012;
    c.seed = 42;
    c.precision = Precision::f64;
    const auto kv = c.to_key_values();
    CHECK(kv.keys() == TrainConfig::keys());
    TrainConfig back;
    back.apply(io::KeyValues::parse(kv.render()));
    CHECK(back.to_key_values().render() == kv.render());
}

TEST_CASE("config validation") {
    auto bad = [](const std::string& text) {
        TrainConfig c;
        c.apply(io::KeyValues::parse(text));
        c.validate();
    };
    CHECK_THROWS_AS(bad("lr = 0"), ValidationError);
    CHECK_THROWS_AS(bad("beta1 = 1"), ValidationError);
    CHECK_THROWS_AS(bad("beta2 = -0.1"), ValidationError);
    CHECK_THROWS_AS(bad("batch_size = 2"), ValidationError);
    CHECK_THROWS_AS(bad("lcc_window = 4"), ValidationError);
    CHECK_THROWS_AS(bad("slope = 1"), ValidationError);
    CHECK_THROWS_AS(bad("unknown_key = 1"), ValidationError);
    CHECK_THROWS_AS(bad("mode = nope"), ValidationError);
    CHECK_THROWS_AS(bad("max_iters = 1.5"), ValidationError);
    CHECK_THROWS_AS(bad("lr = 1\nlr = 2"), ValidationError);
    CHECK_NOTHROW(bad("# comment\nlr = 2e-4\n\nmax_iters = 0"));
}

TEST_CASE("Adam closed forms") {
    TrainConfig cfg;
    SUBCASE("first step from zero") {
        ScalarAdam a;
        CHECK(a.step(0.0, 1.0, cfg) == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-15));
    }
    SUBCASE("two steps with a constant gradient") {
        ScalarAdam a;
        const double g = 0.3;
        double theta = a.step(0.5, g, cfg);
        theta = a.step(theta, g, cfg);
        // by hand
        double m = 0.1 * g, v = 0.001 * g * g;
        double t1 = 0.5 - 1e-4 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double t2 = t1 - 1e-4 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
        CHECK(std::abs(theta - t2) <= 1e-12);
    }
    SUBCASE("tensor update matches the scalar recursion") {
        auto p = net::init_params<double>(1, cfg.arch);
        auto g = net::ModelParams<double>::zeros(cfg.arch);
        g.final_estimator[2].weight[7] = 0.25;
        g.final_estimator[2].weight[8] = -2.0;
        auto st = AdamState<double>::zeros(p);
        const double w7 = p.final_estimator[2].weight[7], w8 = p.final_estimator[2].weight[8];
        ScalarAdam s7, s8;
        double e7 = w7, e8 = w8;
        for (int i = 0; i < 3; ++i) {
            adam_step(p, g, st, cfg);
            e7 = s7.step(e7, 0.25, cfg);
            e8 = s8.step(e8, -2.0, cfg);
        }
        CHECK(p.final_estimator[2].weight[7] == e7);
        CHECK(p.final_estimator[2].weight[8] == e8);
        CHECK(st.step == 3);
    }
}

TEST_CASE("zero gradients leave the parameters unchanged") {
    TrainConfig cfg;
    auto p = net::init_params<float>(2, cfg.arch);
    const auto before = flat(p);
    auto st = AdamState<float>::zeros(p);
    adam_step(p, net::ModelParams<float>::zeros(cfg.arch), st, cfg);
    CHECK(rrn::testing::same_bytes(before, flat(p)));
}

TEST_CASE("non-finite gradients abort with the parameter name") {
    TrainConfig cfg;
    auto p = net::init_params<float>(2, cfg.arch);
    const auto before = flat(p);
    auto g = net::ModelParams<float>::zeros(cfg.arch);
    g.estimators[1][3].bias[4] = std::numeric_limits<float>::quiet_NaN();
    auto st = AdamState<float>::zeros(p);
    try {
        adam_step(p, g, st, cfg);
        FAIL("expected a NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("estimator.l3.dense3.bias") != std::string::npos);
    }
    CHECK(rrn::testing::same_bytes(before, flat(p)));
    CHECK(st.step == 0);
}

TEST_CASE("plateau rule") {
    CHECK_FALSE(plateaued({}, 50, 1e-3));
    std::vector<double> flat_hist(100, 0.8);
    CHECK(plateaued(flat_hist, 50, 1e-3));
    CHECK_FALSE(plateaued(std::vector<double>(99, 0.8), 50, 1e-3));
    std::vector<double> rising(100);
    for (int i = 0; i < 100; ++i) rising[i] = 0.5 + 0.004 * i;
    CHECK_FALSE(plateaued(rising, 50, 1e-3));
    std::vector<double> slow(100);
    for (int i = 0; i < 100; ++i) slow[i] = 0.9 + 1e-6 * i;
    CHECK(plateaued(slow, 50, 1e-3));
}

TEST_CASE("max_iters = 0 returns the initial parameters") {
    auto cfg = quick_config(0);
    auto st = TrainState<float>::fresh(cfg);
    const auto before = flat(st.params);
    const auto h = train<float>({}, cfg, st);
    CHECK(h.records.empty());
    CHECK(h.reason == StopReason::max_iters);
    CHECK(rrn::testing::same_bytes(before, flat(st.params)));
}

TEST_CASE("plateau and iteration-budget stopping") {
    auto cfg = quick_config(6);
    cfg.plateau_window = 2;
    cfg.plateau_tol = 1.0;
    auto st = TrainState<float>::fresh(cfg);
    const auto h = train<float>(small_cases(), cfg, st);
    CHECK(h.reason == StopReason::plateau);
    CHECK(h.records.size() == 4);
    cfg.plateau_tol = 0.0;
    auto st2 = TrainState<float>::fresh(cfg);
    const auto h2 = train<float>(small_cases(), cfg, st2);
    CHECK(h2.reason == StopReason::max_iters);
    CHECK(h2.records.size() == 6);
    for (std::size_t i = 0; i < h2.records.size(); ++i) CHECK(h2.records[i].iter == std::int64_t(i));
}

TEST_CASE("the first update touches only the layers whose output reaches the loss") {
    // Intermediate levels emit absolute fields, so with zeroed output layers only
    // the level-2 field (through upsampling) and the final residual reach the loss.
    auto cfg = quick_config(1);
    auto st = TrainState<float>::fresh(cfg);
    const auto init = st.params;
    train<float>(small_cases(), cfg, st);
    std::vector<std::span<const float>> a, b;
    std::vector<std::string> names;
    init.for_each([&](const std::string& n, std::span<const float> s) {
        names.push_back(n);
        a.push_back(s);
    });
    st.params.for_each([&](const std::string&, std::span<const float> s) { b.push_back(s); });
    for (std::size_t i = 0; i < names.size(); ++i) {
        const bool reaches = names[i].rfind("estimator.l2.predict.", 0) == 0 || names[i].rfind("final.conv6.", 0) == 0;
        const bool same = std::equal(a[i].begin(), a[i].end(), b[i].begin());
        CAPTURE(names[i]);
        CHECK(same != reaches);
    }
}

TEST_CASE("lcc rises on a translated pair") {
    const Grid3 g{32, 32, 32};
    const auto sc = eval::make_synthetic_case(g, 0.0, 8.0, 21);
    const Volume& moving = sc.moving;
    Tensor<float> shift(3, g);
    for (std::size_t i = 0; i < shift.plane(); ++i) shift.channel(2)[i] = 2.0f;
    const Volume fixed = Volume::from_tensor(diff::warp_forward(moving.as_tensor<float>(), shift), moving);
    TrainConfig cfg;
    cfg.max_iters = 20;
    cfg.seed = 1;
    cfg.lr = 1e-5;
    auto st = TrainState<float>::fresh(cfg);
    const auto h = train<float>({{moving, fixed}}, cfg, st);
    REQUIRE(h.records.size() == 20);
    for (std::size_t i = 1; i < h.records.size(); ++i) {
        CAPTURE(i);
        CHECK(h.records[i].loss.lcc > h.records[i - 1].loss.lcc);
    }
}

TEST_CASE("training is deterministic and resumable") {
    TempDir dir("resume");
    const auto cases = small_cases();
    auto cfg = quick_config(4);

    auto a = TrainState<float>::fresh(cfg);
    const auto ha = train<float>(cases, cfg, a);
    save_checkpoint(a, cfg, dir / "a.ckpt");
    auto b = TrainState<float>::fresh(cfg);
    train<float>(cases, cfg, b);
    save_checkpoint(b, cfg, dir / "b.ckpt");
    CHECK(io::read_file(dir / "a.ckpt") == io::read_file(dir / "b.ckpt"));

    auto half = cfg;
    half.max_iters = 2;
    auto c = TrainState<float>::fresh(half);
    train<float>(cases, half, c);
    save_checkpoint(c, half, dir / "c.ckpt");
    auto resumed = load_checkpoint<float>(dir / "c.ckpt", cfg);
    CHECK(resumed.iteration == 2);
    const auto hr = train<float>(cases, cfg, resumed);
    REQUIRE(hr.records.size() == 2);
    for (int i = 0; i < 2; ++i) {
        CHECK(hr.records[i].iter == ha.records[2 + i].iter);
        CHECK(hr.records[i].loss.total == ha.records[2 + i].loss.total);
    }
    save_checkpoint(resumed, cfg, dir / "r.ckpt");
    CHECK(io::read_file(dir / "a.ckpt") == io::read_file(dir / "r.ckpt"));
}

TEST_CASE("double precision training runs") {
    auto cfg = quick_config(2);
    cfg.precision = Precision::f64;
    auto st = TrainState<double>::fresh(cfg);
    const auto h = train<double>(small_cases(), cfg, st);
    CHECK(h.records.size() == 2);
    TempDir dir("f64");
    save_checkpoint(st, cfg, dir / "d.ckpt");
    const auto back = load_checkpoint<double>(dir / "d.ckpt", cfg);
    CHECK(rrn::testing::same_bytes(flat(back.params), flat(st.params)));
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "d.ckpt", cfg), ValidationError);
}

TEST_CASE("checkpoints") {
    TempDir dir("ckpt");
    TrainConfig cfg;
    cfg.seed = 5;
    auto st = TrainState<float>::fresh(cfg);
    st.iteration = 17;
    st.adam.step = 17;
    st.lcc_history = {0.1, 0.25, 0.5};
    st.adam.m[3][2] = 1.5f;
    st.adam.v[4][1] = 2.5f;
    save_checkpoint(st, cfg, dir / "x.ckpt");
    SUBCASE("round-trip is bit-exact") {
        const auto back = load_checkpoint<float>(dir / "x.ckpt", cfg);
        CHECK(rrn::testing::same_bytes(flat(back.params), flat(st.params)));
        CHECK(back.iteration == 17);
        CHECK(back.adam.step == 17);
        CHECK(back.lcc_history == st.lcc_history);
        CHECK(back.adam.m[3][2] == 1.5f);
        CHECK(back.adam.v[4][1] == 2.5f);
        save_checkpoint(back, cfg, dir / "y.ckpt");
        CHECK(io::read_file(dir / "x.ckpt") == io::read_file(dir / "y.ckpt"));
    }
    SUBCASE("stored config is recoverable") {
        CHECK(checkpoint_config(dir / "x.ckpt").to_key_values().render() == cfg.to_key_values().render());
    }
    SUBCASE("a different radius is a manifest error") {
        auto other = cfg;
        other.arch.radius = 1;
        CHECK_THROWS_AS(load_checkpoint<float>(dir / "x.ckpt", other), ValidationError);
    }
    SUBCASE("truncated and foreign files are rejected") {
        const auto bytes = io::read_file(dir / "x.ckpt");
        io::atomic_write(dir / "t.ckpt", bytes.substr(0, bytes.size() - 3));
        CHECK_THROWS_AS(load_checkpoint<float>(dir / "t.ckpt", cfg), ValidationError);
        io::atomic_write(dir / "f.ckpt", "NOTACKPT\n");
        CHECK_THROWS_AS(load_checkpoint<float>(dir / "f.ckpt", cfg), ValidationError);
        CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.ckpt", cfg), ValidationError);
        std::string v2 = bytes;
        v2.replace(v2.find("version 1"), 9, "version 9");
        io::atomic_write(dir / "v.ckpt", v2);
        CHECK_THROWS_AS(load_checkpoint<float>(dir / "v.ckpt", cfg), ValidationError);
    }
}

TEST_CASE("a diverging run stops and keeps the last finite parameters") {
    auto cfg = quick_config(30);
    cfg.lr = 1e30;
    auto st = TrainState<float>::fresh(cfg);
    const auto h = train<float>(small_cases(), cfg, st);
    CHECK(h.reason == StopReason::non_finite);
    CHECK_FALSE(h.diagnostic.empty());
    CHECK(st.iteration == std::int64_t(h.records.size()));
    for (float v : flat(st.params)) REQUIRE(std::isfinite(v));
}

TEST_CASE("metrics file layout") {
    TrainHistory h;
    h.records.push_back({0, {-0.5, 0.5, 0.25, 0.01}});
    h.records.push_back({1, {-0.625, 0.75, 0.5, 0.01}});
    const auto text = render_metrics(h);
    CHECK(text.rfind("iter, total, lcc_mean, tv\n", 0) == 0);
    CHECK(text.find("1, -0.625, 0.75, 0.5") != std::string::npos);
}

}  // TEST_SUITE

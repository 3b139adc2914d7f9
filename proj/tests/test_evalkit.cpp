#include "doctest.h"
#include "support.hpp"

#include "rrn/evalkit.hpp"
#include "rrn/losses.hpp"

#include <algorithm>
#include <cmath>

using namespace rrn;
using namespace rrn::eval;
using rrn::testing::random_tensor;

namespace {

LandmarkSet three_pairs(Grid3 dims) {
    LandmarkSet s;
    s.dims = dims;
    s.grid_tag = "g";
    s.spacing = {2.0, 1.0, 0.5};
    s.pairs = {{{1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}},
               {{2.0, 3.0, 4.0}, {2.0, 2.0, 2.0}},
               {{5.5, 1.0, 3.0}, {4.0, 3.0, 2.0}}};
    return s;
}

Dvf constant_dvf(Grid3 dims, Vec3 u, std::string tag) {
    Dvf d;
    d.field = Tensor<float>(3, dims);
    for (int a = 0; a < 3; ++a)
        for (std::size_t i = 0; i < d.field.plane(); ++i) d.field.channel(a)[i] = static_cast<float>(u[a]);
    d.grid_tag = std::move(tag);
    return d;
}

}  // namespace

TEST_SUITE("evalkit") {

TEST_CASE("tre of the zero field is the landmark distance") {
    const Grid3 g{8, 8, 8};
    const auto lms = three_pairs(g);
    const auto r = tre(lms, constant_dvf(g, {0, 0, 0}, "g"));
    REQUIRE(r.errors.size() == 3);
    CHECK(r.errors[0] == 0.0);
    // (0, 1, 2) voxels at (2, 1, 0.5) mm
    CHECK(r.errors[1] == doctest::Approx(std::sqrt(0.0 + 1.0 + 1.0)));
    // (1.5, -2, 1) voxels
    CHECK(r.errors[2] == doctest::Approx(std::sqrt(9.0 + 4.0 + 0.25)));
    const auto id = tre_identity(lms, lms.spacing);
    for (std::size_t i = 0; i < 3; ++i) CHECK(id.errors[i] == r.errors[i]);
}

TEST_CASE("a field carrying every fixed point onto its partner has zero tre") {
    const Grid3 g{8, 8, 8};
    LandmarkSet s;
    s.dims = g;
    s.pairs = {{{3.0, 4.0, 5.0}, {1.0, 2.0, 3.0}}, {{6.5, 4.25, 5.0}, {4.5, 2.25, 3.0}}};
    const auto r = tre(s, constant_dvf(g, {2.0, 2.0, 2.0}, ""));
    CHECK(r.mean == 0.0);
    CHECK(r.std == 0.0);
}

TEST_CASE("a 3-4-0 mm offset gives 5 mm") {
    const Grid3 g{6, 6, 6};
    LandmarkSet s;
    s.dims = g;
    s.spacing = {1.0, 2.0, 1.0};
    s.pairs = {{{2.0 + 3.0, 2.0 + 2.0, 2.0}, {2.0, 2.0, 2.0}}};
    CHECK(tre(s, constant_dvf(g, {0, 0, 0}, "")).mean == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("tre argument checks") {
    const Grid3 g{8, 8, 8};
    const auto lms = three_pairs(g);
    CHECK_THROWS_AS(tre(lms, constant_dvf(g, {0, 0, 0}, "other")), ValidationError);
    CHECK_THROWS_AS(tre(lms, constant_dvf({8, 8, 9}, {0, 0, 0}, "g")), ValidationError);
    auto outside = lms;
    outside.pairs[0].fixed = {7.5, 0.0, 0.0};
    CHECK_THROWS_AS(tre(outside, constant_dvf(g, {0, 0, 0}, "g")), ValidationError);
}

TEST_CASE("tre statistics") {
    const Grid3 g{8, 8, 8};
    auto lms = three_pairs(g);
    const auto a = tre(lms, constant_dvf(g, {0.5, -0.25, 1.0}, "g"));
    std::reverse(lms.pairs.begin(), lms.pairs.end());
    const auto b = tre(lms, constant_dvf(g, {0.5, -0.25, 1.0}, "g"));
    CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-15));
    CHECK(a.std == doctest::Approx(b.std).epsilon(1e-15));
    const auto r = TreReport::from_errors("c", "m", {1.0, 2.0, 3.0, 4.0});
    CHECK(r.mean == 2.5);
    CHECK(r.std == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
}

TEST_CASE("synthetic cases") {
    const Grid3 g{24, 20, 16};
    SUBCASE("zero amplitude leaves the pair identical") {
        const auto sc = make_synthetic_case(g, 0.0, 6.0, 3);
        CHECK(rrn::testing::same_bytes(sc.fixed.data(), sc.moving.data()));
        CHECK(magnitude(sc.gt.field, 0).max == 0.0);
    }
    SUBCASE("largest displacement equals the amplitude") {
        const auto sc = make_synthetic_case(g, 3.0, 6.0, 3);
        CHECK(magnitude(sc.gt.field, 0).max == doctest::Approx(3.0).epsilon(1e-6));
        CHECK(sc.gt.grid_tag == "synthetic");
    }
    SUBCASE("field vanishes on the boundary") {
        const auto sc = make_synthetic_case(g, 3.0, 6.0, 9);
        for (int a = 0; a < 3; ++a) {
            CHECK(sc.gt.field.at(a, 0, 5, 5) == 0.0f);
            CHECK(sc.gt.field.at(a, 7, 19, 5) == 0.0f);
            CHECK(sc.gt.field.at(a, 7, 5, 15) == 0.0f);
        }
    }
    SUBCASE("deterministic in the seed") {
        const auto a = make_synthetic_case(g, 2.0, 6.0, 4);
        const auto b = make_synthetic_case(g, 2.0, 6.0, 4);
        const auto c = make_synthetic_case(g, 2.0, 6.0, 5);
        CHECK(rrn::testing::same_bytes(a.fixed.data(), b.fixed.data()));
        CHECK(rrn::testing::same_bytes(a.gt.field.values(), b.gt.field.values()));
        CHECK_FALSE(rrn::testing::same_bytes(a.gt.field.values(), c.gt.field.values()));
    }
    SUBCASE("fixed is the moving volume pulled back through the field") {
        const auto sc = make_synthetic_case(g, 2.0, 6.0, 8);
        const auto w = diff::warp_forward(sc.moving.as_tensor<float>(), sc.gt.field);
        CHECK(rrn::testing::same_bytes(w.values(), sc.fixed.as_tensor<float>().values()));
        const auto m = sc.moving.as_tensor<float>();
        CHECK(loss::lcc(m, m, 7) / m.size() >= 0.999);
    }
    SUBCASE("argument checks") {
        CHECK_THROWS_AS(make_synthetic_case({6, 16, 16}, 1.0, 4.0, 1), ValidationError);
        CHECK_THROWS_AS(make_synthetic_case(g, 4.0, 4.0, 1), ValidationError);
        CHECK_THROWS_AS(make_synthetic_case(g, -1.0, 4.0, 1), ValidationError);
        CHECK_THROWS_AS(make_synthetic_case(g, 1.0, 0.0, 1), ValidationError);
    }
}

TEST_CASE("endpoint error") {
    const Grid3 g{12, 12, 12};
    const auto d = random_tensor<float>(3, g, 1, -2.0, 2.0);
    CHECK(epe(d, d).mean == 0.0);
    CHECK(epe(d, d).voxels == 4u * 4u * 4u);
    Tensor<float> plus(3, g);
    for (std::size_t i = 0; i < d.plane(); ++i) {
        plus.channel(0)[i] = d.channel(0)[i] + 1.0f;
        plus.channel(1)[i] = d.channel(1)[i];
        plus.channel(2)[i] = d.channel(2)[i];
    }
    const auto e = epe(plus, d, 0);
    CHECK(e.mean == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(e.max == doctest::Approx(1.0).epsilon(1e-6));
    const auto f = random_tensor<float>(3, g, 2, -2.0, 2.0);
    const auto h = random_tensor<float>(3, g, 3, -2.0, 2.0);
    CHECK(epe(f, h, 2).mean <= epe(f, d, 2).mean + epe(d, h, 2).mean + 1e-12);
    // pointwise
    double s = 0.0;
    for (int z = 1; z < 11; ++z)
        for (int y = 1; y < 11; ++y)
            for (int x = 1; x < 11; ++x) {
                double n2 = 0.0;
                for (int c = 0; c < 3; ++c) n2 += std::pow(double(f.at(c, z, y, x)) - h.at(c, z, y, x), 2);
                s += std::sqrt(n2);
            }
    CHECK(epe(f, h, 1).mean == doctest::Approx(s / 1000.0).epsilon(1e-12));
    CHECK_THROWS_AS(epe(f, Tensor<float>(3, {12, 12, 11})), ValidationError);
    CHECK_THROWS_AS(epe(f, h, 6), ValidationError);
}

TEST_CASE("report tables") {
    std::vector<TreReport> reps{TreReport::from_errors("copd1", "identity", {2.0, 4.0}),
                                TreReport::from_errors("copd2", "identity", {5.0}),
                                TreReport::from_errors("copd1", "rrn", {1.0})};
    const auto t = build_table(reps);
    REQUIRE(t.cases == std::vector<std::string>{"copd1", "copd2"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].cells == std::vector<double>{3.0, 5.0});
    CHECK(t.rows[0].mean == 4.0);
    CHECK(t.rows[0].std == 1.0);
    CHECK(std::isnan(t.rows[1].cells[1]));
    CHECK(t.rows[1].mean == 1.0);
    CHECK(render_csv(t) == "mode,copd1,copd2,mean,std\nidentity,3,5,4,1\nrrn,1,,1,0\n");
    CHECK(render_text(t) ==
          "mode      copd1  copd2  mean   std\n"
          "identity   3.00   5.00  4.00  1.00\n"
          "rrn        1.00      -  1.00  0.00\n");
    reps.push_back(TreReport::from_errors("copd2", "identity", {1.0}));
    CHECK_THROWS_AS(build_table(reps), ValidationError);
    CHECK_THROWS_AS(build_table({}), ValidationError);
}

TEST_CASE("DirLab COPDGene grids") {
    const auto c1 = dirlab_copd_grid("copd1");
    REQUIRE(c1.has_value());
    CHECK(c1->dims == Grid3{121, 512, 512});
    CHECK(c1->spacing[0] == 2.5);
    CHECK(c1->spacing[2] == 0.625);
    const auto c10 = dirlab_copd_grid("copd10");
    REQUIRE(c10.has_value());
    CHECK(c10->dims.d == 135);
    CHECK(c10->spacing[1] == 0.742);
    CHECK_FALSE(dirlab_copd_grid("copd11").has_value());
    CHECK_FALSE(dirlab_copd_grid("case1").has_value());
}

}  // TEST_SUITE

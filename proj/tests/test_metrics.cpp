#include "doctest.h"

#include "support/oracles.hpp"
#include "volseg/metrics.hpp"
#include "volseg/rng.hpp"

using namespace volseg;

namespace {

LabelMask random_mask(Rng& rng, int k, Extent e, double density = 0.5)
{
    LabelMask m(e.depth > 1 ? 3 : 2, e, k);
    for (auto& v : m.values())
        if (rng.uniform() < density)
            v = static_cast<std::uint8_t>(1 + rng.below(static_cast<std::uint64_t>(k - 1)));
    return m;
}

EvalUnit unit(const LabelMask& p, const LabelMask& t) { return {p, t, EvalUnitKind::stack, "u", -1}; }

} // namespace

TEST_CASE("IoU and F1 on hand cases")
{
    LabelMask p(2, {1, 4, 4}, 2), g(2, {1, 4, 4}, 2);
    for (std::size_t x = 0; x < 4; ++x)
        p.at(0, x) = 1;
    g.at(0, 2) = g.at(0, 3) = g.at(1, 0) = g.at(1, 1) = 1;
    CHECK(iou(p, g, 1) == doctest::Approx(2.0 / 6.0));
    CHECK(f1(p, g, 1) == doctest::Approx(0.5));
    CHECK(iou(p, p, 1) == 1.0);
    CHECK(f1(p, p, 1) == 1.0);

    const LabelMask empty(2, {1, 4, 4}, 2);
    CHECK(iou(empty, empty, 1) == 1.0);
    CHECK(f1(empty, empty, 1) == 1.0);
    CHECK(iou(p, empty, 1) == 0.0);

    CHECK_THROWS_AS(iou(p, LabelMask(2, {1, 4, 5}, 2), 1), ShapeError);
}

TEST_CASE("F1 is a function of IoU")
{
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        const auto a = random_mask(rng, 3, {1, 7, 9}, rng.uniform());
        const auto b = random_mask(rng, 3, {1, 7, 9}, rng.uniform());
        for (int c = 1; c < 3; ++c) {
            const double j = iou(a, b, c), f = f1(a, b, c);
            CHECK(std::abs(f - 2 * j / (1 + j)) < 1e-12);
            CHECK(std::abs(j - oracle::jaccard(a, b, c)) < 1e-12);
            CHECK(0.0 <= j);
            CHECK(j <= f);
            CHECK(f <= 1.0);
        }
        CHECK(iou(a, a, 1) == 1.0);
    }
}

TEST_CASE("aggregation")
{
    LabelMask g(2, {1, 1, 10}, 2);
    for (std::size_t x = 0; x < 5; ++x)
        g.at(0, x) = 1;
    // IoU 3/5 and 4/5
    LabelMask p1(2, {1, 1, 10}, 2), p2(2, {1, 1, 10}, 2);
    for (std::size_t x = 0; x < 3; ++x)
        p1.at(0, x) = 1;
    for (std::size_t x = 0; x < 4; ++x)
        p2.at(0, x) = 1;
    const std::vector<EvalUnit> units{unit(p1, g), unit(p2, g)};
    const auto a = aggregate(units, 1);
    CHECK(a.count == 2);
    CHECK(a.iou.mean == doctest::Approx(0.7));
    CHECK(a.iou.std == doctest::Approx(0.1));

    const std::vector<EvalUnit> same{unit(p1, g), unit(p1, g), unit(p1, g)};
    CHECK(aggregate(same, 1).iou.std == 0.0);

    const LabelMask empty(2, {1, 1, 10}, 2);
    const std::vector<EvalUnit> with_empty{unit(p1, g), unit(empty, empty)};
    CHECK(aggregate(with_empty, 1).iou.mean == doctest::Approx(0.8));
    const auto ex = aggregate(with_empty, 1, EmptyPolicy::exclude);
    CHECK(ex.count == 1);
    CHECK(ex.iou.mean == doctest::Approx(0.6));
}

TEST_CASE("slice and stack units differ on an empty-vs-predicted slice")
{
    // truth: 4 px on z=0, nothing on z=1; prediction: the same 4 px plus 4 px on z=1
    LabelMask truth(3, {2, 4, 4}, 2), pred(3, {2, 4, 4}, 2);
    for (std::size_t x = 0; x < 4; ++x) {
        truth.at(0, 0, x) = 1;
        pred.at(0, 0, x) = 1;
        pred.at(1, 3, x) = 1;
    }
    const std::vector<LabelMask> ps{pred}, ts{truth};
    const std::vector<std::string> ids{"m1"};

    const auto stack = evaluate_test_set(ps, ts, ids, EvalUnitKind::stack);
    REQUIRE(stack.size() == 1);
    CHECK(stack[0].iou == doctest::Approx(0.5));
    CHECK(stack[0].f1 == doctest::Approx(2.0 / 3.0));

    const auto slice = evaluate_test_set(ps, ts, ids, EvalUnitKind::slice);
    REQUIRE(slice.size() == 2);
    CHECK(slice[0].iou == 1.0);
    CHECK(slice[1].iou == 0.0);
    CHECK(slice[1].z_index == 1);
    CHECK(slice[0].class_name == "tumor");
}

TEST_CASE("test-set layout")
{
    Rng rng(2);
    std::vector<LabelMask> ps, ts;
    std::vector<std::string> ids;
    for (int i = 0; i < 4; ++i) {
        ts.push_back(random_mask(rng, 3, {128, 8, 8}, 0.2));
        ps.push_back(ts.back());
        ids.push_back("m" + std::to_string(i));
    }
    const auto slice = evaluate_test_set(ps, ts, ids, EvalUnitKind::slice);
    CHECK(slice.size() == 512 * 2);
    std::size_t lung = 0;
    for (const auto& r : slice) {
        CHECK(r.iou == 1.0);
        CHECK(r.f1 == 1.0);
        lung += r.class_name == "lung";
    }
    CHECK(lung == 512);
    CHECK(make_units(ps, ts, ids, EvalUnitKind::slice).size() == 512);
    CHECK(evaluate_test_set(ps, ts, ids, EvalUnitKind::stack).size() == 4 * 2);
}

TEST_CASE("class names")
{
    CHECK(class_name(3, 1) == "lung");
    CHECK(class_name(3, 2) == "tumor");
    CHECK(class_name(2, 1) == "tumor");
    CHECK(class_name(5, 4) == "class4");
}

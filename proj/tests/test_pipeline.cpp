#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "support/oracles.hpp"
#include "volseg/pipeline.hpp"

using namespace volseg;

namespace {

LabelMask lung_band(Extent e, std::size_t z0, std::size_t z1)
{
    LabelMask m(3, e, 3);
    for (std::size_t z = z0; z <= z1; ++z)
        m.at(z, e.height / 2, e.width / 2) = 1;
    return m;
}

Volume noise_volume(Rng& rng, Extent e, double scale = 1.0, double offset = 0.0)
{
    std::vector<float> v(e.size());
    for (auto& x : v)
        x = static_cast<float>(offset + scale * rng.normal());
    return Volume(e.depth > 1 ? 3 : 2, e, std::move(v));
}

Sample textured_sample(Rng& rng, Extent e)
{
    std::vector<float> img(e.size());
    std::vector<std::uint8_t> lab(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        img[i] = static_cast<float>(rng.uniform());
        lab[i] = static_cast<std::uint8_t>(rng.below(3));
    }
    const int rank = e.depth > 1 ? 3 : 2;
    return {Image(rank, e, img), LabelMask(rank, e, 3, lab), "s", 0, 0};
}

} // namespace

TEST_CASE("lung slice selection on hand cases")
{
    const Extent e{12, 6, 6};
    const Volume img(3, e, 1.0f);
    CHECK(select_lung_slices(img, LabelMask(3, e, 3)).empty());

    LabelMask one(3, e, 3);
    one.at(5, 2, 2) = 2;
    const auto s = select_lung_slices(img, one, "m");
    REQUIRE(s.size() == 1);
    CHECK(s[0].z_index == 5);
    CHECK(s[0].subject_id == "m");
    CHECK(s[0].image.rank() == 2);

    const Extent big{128, 128, 128};
    const auto band = lung_band(big, 30, 90);
    CHECK(lung_slice_indices(band).size() == 61);
    CHECK(lung_slice_indices(band) == oracle::lung_slices(band));

    CHECK_THROWS_AS(select_lung_slices(Volume(3, {12, 6, 5}), one), ShapeError);
}

TEST_CASE("slice selection matches the per-slice sum oracle")
{
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
        const Extent e{1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16)};
        LabelMask m(3, e, 3);
        const double density = rng.uniform() * 0.05;
        for (auto& v : m.values())
            if (rng.uniform() < density)
                v = static_cast<std::uint8_t>(1 + rng.below(2));
        const Volume img(3, e, 0.0f);
        std::vector<std::size_t> got;
        for (const auto& p : select_lung_slices(img, m))
            got.push_back(static_cast<std::size_t>(p.z_index));
        CHECK(got == oracle::lung_slices(m));
    }
}

TEST_CASE("strip_lung_labels")
{
    const LabelMask m(2, {1, 1, 3}, 3, std::vector<std::uint8_t>{0, 1, 2});
    const auto s = strip_lung_labels(m);
    CHECK(s.num_classes() == 2);
    CHECK(s.data() == std::vector<std::uint8_t>{0, 0, 1});
    CHECK(strip_lung_labels(LabelMask(2, {1, 4, 4}, 3, 1)).count(1) == 0);

    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        LabelMask r(3, {3, 5, 5}, 3);
        for (auto& v : r.values())
            v = static_cast<std::uint8_t>(rng.below(3));
        CHECK(strip_lung_labels(r).count(1) == r.count(2));
    }
}

TEST_CASE("z-score normalisation")
{
    const auto r = zscore_normalize(Image(2, {1, 1, 2}, std::vector<float>{0.0f, 2.0f}));
    CHECK(r.image[0] == doctest::Approx(-1.0));
    CHECK(r.image[1] == doctest::Approx(1.0));
    CHECK_FALSE(r.degenerate);

    const auto c = zscore_normalize(Image(3, {2, 2, 2}, 7.0f));
    CHECK(c.degenerate);
    for (float v : c.image.values())
        CHECK(v == 0.0f);

    Rng rng(4);
    const auto v = noise_volume(rng, {16, 16, 16}, 3.0, 10.0);
    const auto n = zscore_normalize(v);
    std::vector<double> in(v.values().begin(), v.values().end());
    const auto [mu, sd] = oracle::two_pass_mean_std(in, false);
    for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(std::abs(n.image[i] - (in[i] - mu) / sd) < 1e-5);
    std::vector<double> out(n.image.values().begin(), n.image.values().end());
    const auto [m2, s2] = oracle::two_pass_mean_std(out, false);
    CHECK(std::abs(m2) < 1e-6);
    CHECK(std::abs(s2 - 1.0) < 1e-6);

    const auto twice = zscore_normalize(n.image);
    for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(std::abs(twice.image[i] - n.image[i]) < 1e-5);
}

TEST_CASE("percentiles match a sort-based oracle")
{
    Rng rng(6);
    std::vector<float> v(997);
    for (auto& x : v)
        x = static_cast<float>(rng.normal());
    const std::vector<double> d(v.begin(), v.end());
    for (double q : {0.0, 1.0, 25.0, 50.0, 99.0, 100.0})
        CHECK(std::abs(percentile(v, q) - oracle::sorted_percentile(d, q)) < 1e-12);
}

TEST_CASE("contrast enhancement")
{
    Rng rng(9);
    const Extent e{8, 16, 16};
    std::vector<float> vals(e.size());
    for (auto& x : vals)
        x = static_cast<float>(rng.uniform(0.0, 0.5));
    const Volume dark(3, e, vals);

    CHECK(enhance_contrast(dark, BatchTag::bright) == dark);

    const auto out = enhance_contrast(dark, BatchTag::dark);
    const std::vector<double> d(vals.begin(), vals.end());
    const double p1 = oracle::sorted_percentile(d, 1), p99 = oracle::sorted_percentile(d, 99);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double want = std::clamp((d[i] - p1) / (p99 - p1), 0.0, 1.0);
        CHECK(std::abs(out[i] - want) < 1e-5);
    }
    CHECK(percentile(out.values(), 99) == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(*std::max_element(out.values().begin(), out.values().end()) == 1.0f);

    const auto flat = enhance_contrast(Volume(3, {2, 2, 2}, 0.3f), BatchTag::dark);
    for (float v : flat.values())
        CHECK(v == 0.0f);
}

TEST_CASE("augmentation counts")
{
    CHECK(augmented_count(5762, 8) == 46096);
    CHECK(augmented_count(164, 8) == 1312);

    Rng rng(1);
    std::vector<Sample> src;
    for (int i = 0; i < 5; ++i) {
        src.push_back(textured_sample(rng, {1, 16, 16}));
        src.back().subject_id = "s" + std::to_string(i);
    }
    AugmentParams p;
    p.rng_seed = 3;
    const auto out = augment(src, p);
    REQUIRE(out.size() == 40);
    for (int i = 0; i < 5; ++i) {
        CHECK(out[static_cast<std::size_t>(i * 8)].image == src[static_cast<std::size_t>(i)].image);
        CHECK(out[static_cast<std::size_t>(i * 8)].mask == src[static_cast<std::size_t>(i)].mask);
        for (int c = 0; c < 8; ++c)
            CHECK(out[static_cast<std::size_t>(i * 8 + c)].copy_index == c);
    }
    CHECK_FALSE(out[1].image == out[0].image);

    p.factor = 0;
    CHECK_THROWS(validate(p));
    p.factor = 1;
    p.elastic.displacement_sigma = -1;
    CHECK_THROWS(validate(p));
}

TEST_CASE("augmentation is reproducible and order independent")
{
    Rng rng(2);
    std::vector<Sample> src;
    for (int i = 0; i < 3; ++i) {
        src.push_back(textured_sample(rng, {1, 24, 20}));
        src.back().subject_id = "s" + std::to_string(i);
        src.back().z_index = i;
    }
    AugmentParams p;
    p.factor = 4;
    p.rng_seed = 77;
    const auto a = augment(src, p);
    const auto b = augment(src, p);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image == b[i].image);
        CHECK(a[i].mask == b[i].mask);
    }
    std::vector<Sample> rev(src.rbegin(), src.rend());
    const auto c = augment(rev, p);
    for (std::size_t i = 0; i < src.size(); ++i)
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(c[(src.size() - 1 - i) * 4 + k].image == a[i * 4 + k].image);
}

TEST_CASE("warping keeps the label set and shape")
{
    Rng rng(12);
    for (int t = 0; t < 20; ++t) {
        const Extent e = t % 2 ? Extent{1, 20, 24} : Extent{6, 16, 16};
        const auto s = textured_sample(rng, e);
        Rng wr(static_cast<std::uint64_t>(t));
        const auto w = warp_sample(s, rng.uniform(-15, 15), {16.0, 2.0}, wr);
        CHECK(w.image.extent() == e);
        CHECK(w.mask.extent() == e);
        for (auto v : w.mask.values())
            CHECK(v < 3);
    }
}

TEST_CASE("identity warp is exact")
{
    Rng rng(13);
    for (const Extent e : {Extent{1, 17, 23}, Extent{5, 16, 16}}) {
        const auto s = textured_sample(rng, e);
        Rng wr(1);
        const auto w = warp_sample(s, 0.0, {16.0, 0.0}, wr);
        CHECK(w.image == s.image);
        CHECK(w.mask == s.mask);
    }
    AugmentParams p;
    p.rotation_lo = p.rotation_hi = 0.0;
    p.elastic.displacement_sigma = 0.0;
    const std::vector<Sample> one{textured_sample(rng, {1, 16, 16})};
    for (const auto& copy : augment(one, p))
        CHECK(copy.image == one[0].image);
}

TEST_CASE("train/validation split")
{
    std::vector<int> ten(10);
    std::iota(ten.begin(), ten.end(), 0);
    const auto [tr, va] = split_train_val(ten, 0.8, 5);
    CHECK(tr.size() == 8);
    CHECK(va.size() == 2);
    std::set<int> all(tr.begin(), tr.end());
    all.insert(va.begin(), va.end());
    CHECK(all.size() == 10);
    const auto again = split_train_val(ten, 0.8, 5);
    CHECK(again.first == tr);
    CHECK(again.second == va);

    CHECK(train_count(5762, 0.8) == 4610);
    CHECK(train_count(10, 0.8) == 8);
    CHECK(train_count(5, 0.6) == 3);
    CHECK_THROWS(split_train_val(std::vector<int>{}, 0.8, 1));
    CHECK_THROWS(split_train_val(ten, 1.0, 1));
    CHECK_THROWS(split_train_val(ten, 0.0, 1));
}

TEST_CASE("variant construction")
{
    Rng rng(30);
    const Extent e{10, 16, 16};
    std::vector<Subject> subjects;
    for (int i = 0; i < 2; ++i) {
        LabelMask m(3, e, 3);
        for (std::size_t z = 3; z <= 6; ++z)
            for (std::size_t y = 4; y < 10; ++y)
                for (std::size_t x = 4; x < 10; ++x)
                    m.at(z, y, x) = (y > 6 && x > 6) ? 2 : 1;
        subjects.push_back({noise_volume(rng, e, 1.0, 5.0), m, i ? BatchTag::dark : BatchTag::bright, "m" + std::to_string(i)});
    }
    AugmentParams p;
    p.factor = 2;

    VariantStats st;
    const auto t2 = build_variant(subjects, Variant::Tumor2D, p, &st);
    CHECK(st.subjects == 2);
    CHECK(st.selected == 8);
    CHECK(st.augmented == 16);
    CHECK(t2.size() == 16);
    for (const auto& s : t2) {
        CHECK(s.image.rank() == 2);
        CHECK(s.mask.num_classes() == 2);
        CHECK(s.z_index >= 3);
        CHECK(s.z_index <= 6);
    }

    const auto l2 = build_variant(subjects, Variant::LungTumor2D, p);
    CHECK(l2.front().mask.num_classes() == 3);

    const auto t3 = build_variant(subjects, Variant::Tumor3D, p, &st);
    CHECK(st.selected == 2);
    CHECK(t3.size() == 4);
    CHECK(t3.front().image.rank() == 3);
    CHECK(t3.front().image.extent() == e);
    std::vector<double> vals(t3.front().image.values().begin(), t3.front().image.values().end());
    CHECK(std::abs(oracle::two_pass_mean_std(vals, false).first) < 1e-5);
}

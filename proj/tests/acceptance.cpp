// Acceptance suite. Runs every criterion (or those named on the command line)
// and prints one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "support/oracles.hpp"
#include "support/phantom.hpp"
#include "support/tempdir.hpp"
#include "volseg/losses.hpp"
#include "volseg/metrics.hpp"
#include "volseg/pipeline.hpp"
#include "volseg/postprocess.hpp"
#include "volseg/refnet.hpp"

using namespace volseg;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what)
    {
        if (!ok && pass) {
            pass = false;
            detail = what;
        }
    }
};

Logits random_logits(Rng& rng, int k, Extent e, double scale = 2.0)
{
    Logits l(k, e.depth > 1 ? 3 : 2, e);
    for (auto& v : l.values())
        v = rng.uniform(-scale, scale);
    return l;
}

LabelMask random_mask(Rng& rng, int k, Extent e, double density = 1.0)
{
    LabelMask m(e.depth > 1 ? 3 : 2, e, k);
    for (auto& v : m.values())
        if (rng.uniform() < density)
            v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(k)));
    return m;
}

Logits margin_logits(const LabelMask& m, int k, double margin)
{
    Logits l(k, m.rank(), m.extent(), 0.0);
    for (std::size_t s = 0; s < m.size(); ++s)
        l.at(m[s], s) = margin;
    return l;
}

bool sort_gaps_at_least(const Logits& l, const LabelMask& t, double gap)
{
    const auto p = softmax(l);
    for (int c = 1; c < l.channels(); ++c) {
        std::vector<double> e;
        for (std::size_t s = 0; s < t.size(); ++s)
            e.push_back(std::abs((t[s] == c ? 1.0 : 0.0) - p.at(c, s)));
        std::sort(e.begin(), e.end());
        for (std::size_t i = 1; i < e.size(); ++i)
            if (e[i] - e[i - 1] < gap)
                return false;
    }
    return true;
}

// 5x5 inputs admit only a small MS-SSIM window.
const MsSsimParams small_ms_ssim{1, 0.01, 0.03, {}, {}, 3, 1.5};

std::vector<std::pair<std::string, LossFn>> all_losses()
{
    const auto ms = small_ms_ssim;
    return {
        {"ce", loss_ce},
        {"wce", [](const Logits& l, const LabelMask& t) { return loss_wce(l, t, class_balance_weights(t)); }},
        {"focal", [](const Logits& l, const LabelMask& t) { return loss_focal(l, t); }},
        {"iou", loss_iou},
        {"dice", loss_dice},
        {"ms_ssim", [ms](const Logits& l, const LabelMask& t) { return loss_ms_ssim(l, t, ms); }},
        {"lovasz", loss_lovasz},
        {"unet3p", [ms](const Logits& l, const LabelMask& t) { return compound_unet3p(l, t, {}, ms); }},
        {"deepmeta", [](const Logits& l, const LabelMask& t) { return compound_deepmeta(l, t); }},
        {"nnunet", compound_nnunet},
    };
}

bool contains_ce(const std::string& name) { return name == "deepmeta" || name == "nnunet"; }

std::string fmt(double v, int precision = 3)
{
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome gradients()
{
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    Rng rng(101);
    double worst = 0;
    std::string worst_name;
    for (const auto& [name, fn] : all_losses()) {
        for (int i = 0; i < 20;) {
            const auto l = random_logits(rng, 2, {1, 5, 5});
            const auto t = random_mask(rng, 2, {1, 5, 5});
            if (!sort_gaps_at_least(l, t, 1e-3))
                continue;
            const double err = check_gradient(fn, l, t, 1e-4);
            if (err > worst) {
                worst = err;
                worst_name = name;
            }
            ++i;
        }
    }
    const double elapsed = seconds_since(t0);
    o.detail = "10 losses x 20 instances, worst relative error " + fmt(worst) + " (" + worst_name + "), " + fmt(elapsed)
        + " s";
    o.require(worst <= 1e-4, "relative error " + fmt(worst) + " in " + worst_name + " exceeds 1e-4");
    o.require(elapsed < 60.0, "took " + fmt(elapsed) + " s");
    return o;
}

Outcome identities()
{
    Outcome o;
    Rng rng(202);
    const Extent e{1, 8, 8};
    for (int i = 0; i < 20; ++i) {
        const auto l = random_logits(rng, 3, e);
        const auto t = random_mask(rng, 3, e);
        const auto ce = loss_ce(l, t);
        const auto f0 = loss_focal(l, t, {0.0});
        const auto w1 = loss_wce(l, t, WeightMap(2, e, 1.0));
        const auto same = [&](const LossReport& r) {
            return r.value == ce.value && std::equal(r.grad.values().begin(), r.grad.values().end(), ce.grad.values().begin());
        };
        o.require(same(f0), "focal(gamma=0) differs from CE");
        o.require(same(w1), "wce(w=1) differs from CE");
    }
    for (const auto& [name, fn] : all_losses()) {
        const double tol = contains_ce(name) ? 1e-3 : 1e-6;
        for (int i = 0; i < 10; ++i) {
            const auto t = random_mask(rng, 2, e);
            const double v = fn(margin_logits(t, 2, 20.0), t).value;
            o.require(v >= 0.0 && v <= tol, name + " is " + fmt(v) + " at a hard-correct prediction");

            const auto l = random_logits(rng, 2, e);
            Logits shifted = l;
            for (std::size_t s = 0; s < e.size(); ++s) {
                const double c = rng.uniform(-10, 10);
                shifted.at(0, s) += c;
                shifted.at(1, s) += c;
            }
            const double d = std::abs(fn(l, t).value - fn(shifted, t).value);
            o.require(d <= 1e-9, name + " changes by " + fmt(d) + " under a logit shift");
        }
    }
    if (o.pass)
        o.detail = "focal/wce reductions exact, zero at margin 20, shift invariant";
    return o;
}

Outcome lovasz_oracle()
{
    Outcome o;
    Rng rng(303);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const auto pred = random_mask(rng, 2, {1, 6, 6});
        const auto truth = random_mask(rng, 2, {1, 6, 6});
        const double got = prob_lovasz(one_hot(pred, 2), truth).value;
        worst = std::max(worst, std::abs(got - (1.0 - oracle::jaccard(pred, truth, 1))));
    }
    o.detail = "100 masks, max deviation " + fmt(worst);
    o.require(worst <= 1e-10, o.detail);
    return o;
}

Outcome slice_selection()
{
    Outcome o;
    Rng rng(404);
    for (int i = 0; i < 200; ++i) {
        const Extent e{1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16)};
        LabelMask m(3, e, 3);
        const double density = rng.uniform() * rng.uniform() * 0.2;
        for (auto& v : m.values())
            if (rng.uniform() < density)
                v = static_cast<std::uint8_t>(1 + rng.below(2));
        std::vector<std::size_t> got;
        for (const auto& s : select_lung_slices(Volume(3, e, 0.0f), m))
            got.push_back(static_cast<std::size_t>(s.z_index));
        o.require(got == oracle::lung_slices(m), "mismatch on volume " + std::to_string(i));
    }
    if (o.pass)
        o.detail = "200 volumes identical to the per-slice sum oracle";
    return o;
}

Outcome postprocessing()
{
    Outcome o;
    Rng rng(505);
    for (int i = 0; i < 1000; ++i) {
        const Extent e{1, 1 + rng.below(10), 1 + rng.below(10)};
        LabelMask m(2, e, 3);
        const double density = rng.uniform();
        for (auto& v : m.values())
            if (rng.uniform() < density)
                v = static_cast<std::uint8_t>(1 + rng.below(2));
        for (int n : {4, 8})
            o.require(connected_components(m, parse_connectivity(n)).labels == oracle::flood_fill_labels(m, n),
                      "components differ from flood fill on mask " + std::to_string(i));
    }

    const auto policy = default_blob_policy(3);
    auto line = [](std::size_t len, std::uint8_t label) {
        LabelMask m(2, {1, 4, 16}, 3);
        for (std::size_t x = 0; x < len; ++x)
            m.at(1, x) = label;
        return m;
    };
    o.require(remove_small_blobs(line(9, 1), policy).count(1) == 0, "9-pixel lung blob kept");
    o.require(remove_small_blobs(line(10, 1), policy).count(1) == 10, "10-pixel lung blob removed");
    o.require(remove_small_blobs(line(2, 2), policy).count(2) == 0, "2-pixel tumor blob kept");
    o.require(remove_small_blobs(line(3, 2), policy).count(2) == 3, "3-pixel tumor blob removed");

    // speckle case: one true tumor, 2-pixel speckles, and a prediction on a slice without tissue
    const std::size_t n = 32;
    Slice body(2, {1, n, n});
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            if ((y - 15.5) * (y - 15.5) + (x - 15.5) * (x - 15.5) <= 144.0)
                body.at(y, x) = 1.0f;
    const std::vector<Slice> planes{body, Slice(2, {1, n, n})};
    const Volume image = stack_slices(planes);
    LabelMask truth(3, {2, n, n}, 2);
    for (std::size_t y = 12; y < 18; ++y)
        for (std::size_t x = 12; x < 18; ++x)
            truth.at(0, y, x) = 1;
    LabelMask noisy = truth;
    noisy.at(0, 3, 3) = noisy.at(0, 3, 4) = 1;
    noisy.at(0, 26, 8) = noisy.at(0, 27, 8) = 1;
    noisy.at(1, 10, 10) = noisy.at(1, 10, 11) = noisy.at(1, 11, 10) = noisy.at(1, 11, 11) = 1;
    const LoGParams log;
    const auto pol3 = default_blob_policy(2, 3);
    const auto cleaned = postprocess_prediction(noisy, image, log, pol3);
    const double raw_f1 = f1(noisy, truth, 1), post_f1 = f1(cleaned, truth, 1);
    o.require(post_f1 > raw_f1, "post-processing did not raise F1");

    for (int i = 0; i < 300; ++i) {
        const auto m = random_mask(rng, 3, {3, 10, 10}, rng.uniform() * 0.5);
        std::vector<float> px(m.size());
        for (auto& v : px)
            v = static_cast<float>(rng.uniform());
        const Volume img(3, m.extent(), px);
        const auto pol = default_blob_policy(3, i % 2 ? 3 : 2);
        const LoGParams small{1.0, {}, 1e-3};
        const auto once = postprocess_prediction(m, img, small, pol);
        const auto twice = postprocess_prediction(once, img, small, pol);
        o.require(twice == once, "post-processing not idempotent");
        for (std::size_t s = 0; s < m.size(); ++s)
            if (once[s] != 0 && once[s] != m[s]) {
                o.require(false, "post-processing added foreground");
                break;
            }
    }
    if (o.pass)
        o.detail = "1000 masks match flood fill, thresholds 10/3 strict, speckle F1 " + fmt(raw_f1) + " -> "
            + fmt(post_f1) + ", idempotent";
    return o;
}

Outcome metrics_checks()
{
    Outcome o;
    Rng rng(606);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const auto a = random_mask(rng, 2, {1, 9, 9}, rng.uniform());
        const auto b = random_mask(rng, 2, {1, 9, 9}, rng.uniform());
        const double j = iou(a, b, 1);
        worst = std::max(worst, std::abs(f1(a, b, 1) - 2 * j / (1 + j)));
    }
    o.require(worst <= 1e-12, "F1 identity off by " + fmt(worst));

    std::vector<LabelMask> ps, ts;
    std::vector<std::string> ids;
    for (int i = 0; i < 4; ++i) {
        ts.push_back(random_mask(rng, 3, {128, 4, 4}, 0.3));
        ps.push_back(random_mask(rng, 3, {128, 4, 4}, 0.3));
        ids.push_back("m" + std::to_string(i));
    }
    const auto records = evaluate_test_set(ps, ts, ids, EvalUnitKind::slice);
    std::size_t lung = 0, tumor = 0;
    for (const auto& r : records) {
        lung += r.class_name == "lung";
        tumor += r.class_name == "tumor";
    }
    o.require(lung == 512 && tumor == 512, "slice mode gave " + std::to_string(lung) + "/" + std::to_string(tumor) + " units");
    if (o.pass)
        o.detail = "F1 identity within " + fmt(worst) + ", 512 slice units per class";
    return o;
}

Outcome augmentation_counts()
{
    Outcome o;
    // 164 volumes whose lung bands total 5762 slices
    DatasetManifest manifest;
    manifest.variant = Variant::Tumor3D;
    std::size_t slices = 0;
    for (int i = 0; i < 164; ++i) {
        manifest.entries.push_back({"img/" + std::to_string(i) + ".npy", "mask/" + std::to_string(i) + ".npy",
                                    BatchTag::bright, "m" + std::to_string(i), Split::train});
        LabelMask m(3, {128, 2, 2}, 3);
        const std::size_t band = i < 22 ? 36 : 35;
        for (std::size_t z = 40; z < 40 + band; ++z)
            m.at(z, 0, 0) = 1;
        slices += lung_slice_indices(m).size();
    }
    validate(manifest);
    const std::size_t volumes = manifest.count(Split::train);
    o.require(slices == 5762, "slice count " + std::to_string(slices));
    o.require(augmented_count(slices, 8) == 46096, "2D augmented count");
    o.require(augmented_count(volumes, 8) == 1312, "3D augmented count");

    // and the augmenter produces exactly factor copies
    Rng rng(707);
    std::vector<Sample> src;
    for (int i = 0; i < 3; ++i) {
        const auto s = random_mask(rng, 2, {1, 16, 16});
        src.push_back({Image(2, {1, 16, 16}, 0.5f), s, "s" + std::to_string(i), 0, 0});
    }
    AugmentParams p;
    o.require(augment(src, p).size() == augmented_count(src.size(), p.factor), "augment produced the wrong count");
    if (o.pass)
        o.detail = "5762 -> " + std::to_string(augmented_count(slices, 8)) + ", 164 -> "
            + std::to_string(augmented_count(volumes, 8));
    return o;
}

// ---------------------------------------------------------------------------
// Training criteria

double mean_stack_f1(const Network& net, const std::vector<phantom::Phantom>& set)
{
    double total = 0;
    for (const auto& p : set)
        total += f1(predict(net, p.image), p.mask, 1);
    return total / static_cast<double>(set.size());
}

NetDescriptor phantom_net(int dims)
{
    NetDescriptor d;
    d.dims = dims;
    d.depth = 2;
    d.base_filters = 8;
    d.norm = NormKind::instance;
    d.activation = Activation::leaky_relu;
    d.num_classes = 2;
    return d;
}

TrainConfig phantom_training(int epochs, int batch, std::uint64_t seed, Variant variant)
{
    TrainConfig c;
    c.lr0 = 0.01;
    c.schedule = Schedule::poly;
    c.epochs = epochs;
    c.batch_size = batch;
    c.seed = seed;
    c.loss.kind = LossKind::nnunet;
    c.variant = variant;
    c.momentum = 0.9;
    return c;
}

Outcome overfit_3d()
{
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    const auto set = phantom::make_set(phantom::Params{}, 808, 10);
    Network net(phantom_net(3), 808);
    const auto config = phantom_training(200, 2, 808, Variant::Tumor3D);
    int reached = -1;
    double best = 0;
    train(net, phantom::as_volumes(set), config, [&](const EpochRecord& r, const Network& n) {
        if (reached >= 0 || (r.epoch + 1) % 10 != 0)
            return;
        best = mean_stack_f1(n, set);
        if (best >= 0.95)
            reached = r.epoch + 1;
    });
    const double final_f1 = mean_stack_f1(net, set);
    const double elapsed = seconds_since(t0);
    o.detail = "train F1 " + fmt(final_f1) + " after 200 epochs"
        + (reached > 0 ? ", 0.95 first reached at epoch " + std::to_string(reached) : std::string()) + ", "
        + fmt(elapsed) + " s";
    o.require(final_f1 >= 0.95 || reached > 0, o.detail);
    o.require(elapsed < 600.0, o.detail);
    return o;
}

Outcome context_3d_vs_2d()
{
    Outcome o;
    int wins = 0;
    std::string scores;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto train_set = phantom::make_set(phantom::Params{}, hash_combine(seed, 1), 16);
        const auto test_set = phantom::make_set(phantom::Params{}, hash_combine(seed, 2), 8);

        Network net3(phantom_net(3), seed);
        train(net3, phantom::as_volumes(train_set), phantom_training(60, 2, seed, Variant::Tumor3D));
        Network net2(phantom_net(2), seed);
        train(net2, phantom::as_slices(train_set), phantom_training(60, 16, seed, Variant::Tumor2D));

        const double f3 = mean_stack_f1(net3, test_set), f2 = mean_stack_f1(net2, test_set);
        wins += f3 > f2;
        scores += (scores.empty() ? "" : ", ") + fmt(f3) + " vs " + fmt(f2);
    }
    o.detail = "3D wins " + std::to_string(wins) + "/5 (3D vs 2D held-out F1: " + scores + ")";
    o.require(wins >= 4, o.detail);
    return o;
}

std::string file_bytes(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism()
{
    Outcome o;
    testutil::TempDir dir("determinism");
    phantom::Params pp;
    pp.extent = {8, 16, 16};
    const auto set = phantom::make_set(pp, 909, 4);
    for (int dims : {2, 3}) {
        const auto data = dims == 3 ? phantom::as_volumes(set) : phantom::as_slices(set);
        std::vector<std::string> csv, ckpt;
        for (int run = 0; run < 2; ++run) {
            Network net(phantom_net(dims), 909);
            const auto r = train(net, data, phantom_training(4, dims == 3 ? 2 : 8, 909, dims == 3 ? Variant::Tumor3D : Variant::Tumor2D));
            const auto stem = dir / (std::to_string(dims) + "d_run" + std::to_string(run));
            std::ofstream(stem.string() + ".csv", std::ios::binary) << loss_curve_csv(r);
            save_checkpoint(net, stem.string() + ".vsck");
            csv.push_back(file_bytes(stem.string() + ".csv"));
            ckpt.push_back(file_bytes(stem.string() + ".vsck"));
        }
        o.require(!csv[0].empty() && csv[0] == csv[1], std::to_string(dims) + "D loss curves differ");
        o.require(!ckpt[0].empty() && ckpt[0] == ckpt[1], std::to_string(dims) + "D checkpoints differ");
    }
    if (o.pass)
        o.detail = "2D and 3D reruns byte-identical";
    return o;
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv)
{
    const std::vector<Criterion> all{
        {1, "gradient correctness", gradients},
        {2, "loss identities", identities},
        {3, "Lovasz vs Jaccard oracle", lovasz_oracle},
        {4, "lung slice selection oracle", slice_selection},
        {5, "post-processing", postprocessing},
        {6, "metrics", metrics_checks},
        {7, "augmentation counts", augmentation_counts},
        {8, "3D overfit on phantoms", overfit_3d},
        {9, "3D context beats 2D", context_3d_vs_2d},
        {10, "determinism", determinism},
    };
    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i)
        wanted.push_back(std::stoi(argv[i]));

    int failures = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end())
            continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        failures += !r.pass;
        std::printf("criterion %2d %s  %s: %s [%.1f s]\n", c.id, r.pass ? "PASS" : "FAIL", c.name, r.detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}

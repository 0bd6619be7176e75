#include "volseg/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "volseg/dataio.hpp"
#include "volseg/metrics.hpp"
#include "volseg/pipeline.hpp"
#include "volseg/postprocess.hpp"
#include "volseg/presets.hpp"
#include "volseg/refnet.hpp"

namespace volseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    int threads = 1;
    bool verbose = false;
};

struct UsageError : ConfigError {
    using ConfigError::ConfigError;
};

std::string safe_name(const std::string& s)
{
    std::string out = s.empty() ? "subject" : s;
    for (auto& c : out)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
            c = '_';
    return out;
}

std::string extension(FileFormat f) { return f == FileFormat::npy ? ".npy" : ".raw"; }

FileFormat parse_format(const std::string& s)
{
    if (s == "npy")
        return FileFormat::npy;
    if (s == "raw")
        return FileFormat::raw;
    throw UsageError("format must be npy or raw");
}

bool is_array_file(const fs::path& p)
{
    const auto e = p.extension();
    return e == ".npy" || e == ".raw" || e == ".vseg";
}

std::vector<fs::path> list_arrays(const fs::path& dir)
{
    if (fs::is_regular_file(dir))
        return {dir};
    if (!fs::is_directory(dir))
        throw IoError("'" + dir.string() + "' is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_array_file(e.path()))
            out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty())
        throw IoError("no .npy/.raw arrays in '" + dir.string() + "'");
    return out;
}

int infer_classes(const std::vector<fs::path>& files)
{
    double top = 0.0;
    for (const auto& f : files) {
        const auto a = read_array(f);
        for (double v : a.values)
            top = std::max(top, v);
    }
    return std::max(2, static_cast<int>(top) + 1);
}

std::vector<LabelMask> load_masks(const std::vector<fs::path>& files, int classes)
{
    if (classes == 0)
        classes = infer_classes(files);
    std::vector<LabelMask> out;
    for (const auto& f : files)
        out.push_back(read_mask(f, classes));
    return out;
}

// Runs job(i) for i < n on up to `threads` workers; rethrows the first failure.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& job)
{
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_lock;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    const std::lock_guard lock(failure_lock);
                    if (!failure)
                        failure = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
}

fs::path cache_dir()
{
    const char* env = std::getenv("VOLSEG_CACHE_DIR");
    return env && *env ? fs::path(env) : fs::path();
}

// ---------------------------------------------------------------------------
// prepare

struct PrepareArgs {
    std::string manifest;
    std::string out;
    std::string variant;
    int factor = 8;
    bool no_augment = false;
    double rot_lo = -15.0, rot_hi = 15.0;
    double grid_spacing = 16.0, grid_sigma = 2.0;
    std::string format = "npy";
};

LabelMask variant_mask(const LabelMask& m, Variant v) { return v == Variant::LungTumor2D ? m : strip_lung_labels(m); }

int cmd_prepare(const PrepareArgs& a, const Globals& g, std::ostream& out)
{
    DatasetManifest manifest = load_manifest(a.manifest);
    if (!a.variant.empty())
        manifest.variant = parse_variant(a.variant);
    const Variant variant = manifest.variant;
    const FileFormat format = parse_format(a.format);
    AugmentParams aug;
    aug.factor = a.no_augment ? 1 : a.factor;
    aug.rotation_lo = a.rot_lo;
    aug.rotation_hi = a.rot_hi;
    aug.elastic = {a.grid_spacing, a.grid_sigma};
    aug.rng_seed = g.seed;
    validate(aug);

    std::vector<Subject> subjects;
    for (const auto& e : manifest.entries) {
        if (e.split != Split::train)
            continue;
        subjects.push_back({read_volume(e.image_path), read_mask(*e.mask_path, 3), e.batch_tag, e.subject_id});
        if (g.verbose)
            out << "loaded " << e.subject_id << '\n';
    }
    VariantStats stats;
    const auto samples = subjects.empty() ? std::vector<Sample>{} : build_variant(subjects, variant, aug, &stats);

    const fs::path root(a.out);
    json prov;
    prov["variant"] = std::string(to_string(variant));
    prov["num_classes"] = class_count(variant);
    prov["seed"] = g.seed;
    prov["augment"] = {{"factor", aug.factor},
                       {"rotation_degrees", {aug.rotation_lo, aug.rotation_hi}},
                       {"elastic_grid_spacing", aug.elastic.grid_spacing},
                       {"elastic_sigma", aug.elastic.displacement_sigma}};
    prov["counts"] = {{"subjects", stats.subjects},
                      {"selected", stats.selected},
                      {"augmented", stats.augmented},
                      {"degenerate", stats.degenerate}};
    json listing = json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        std::ostringstream name;
        name << std::setw(6) << std::setfill('0') << i << '_' << safe_name(s.subject_id);
        if (s.z_index >= 0)
            name << "_z" << s.z_index;
        name << "_c" << s.copy_index << extension(format);
        write_volume(s.image, root / "images" / name.str(), format);
        write_mask(s.mask, root / "masks" / name.str(), format);
        listing.push_back({{"file", name.str()}, {"subject_id", s.subject_id}, {"z_index", s.z_index}, {"copy_index", s.copy_index}});
    }
    prov["samples"] = listing;

    json tests = json::array();
    for (const auto& e : manifest.entries) {
        if (e.split != Split::test)
            continue;
        const std::string name = safe_name(e.subject_id) + extension(format);
        write_volume(prepare_input(read_volume(e.image_path), e.batch_tag, variant), root / "test" / "images" / name, format);
        if (e.mask_path)
            write_mask(variant_mask(read_mask(*e.mask_path, 3), variant), root / "test" / "masks" / name, format);
        tests.push_back({{"file", name}, {"subject_id", e.subject_id}, {"has_mask", e.mask_path.has_value()}});
    }
    prov["test"] = tests;
    write_text_atomic(root / "provenance.json", prov.dump(2) + "\n");

    out << "variant " << to_string(variant) << '\n';
    out << "subjects " << stats.subjects << '\n';
    out << (is_2d(variant) ? "slices kept " : "volumes kept ") << stats.selected << '\n';
    out << "augmented total " << stats.augmented << " (factor " << aug.factor << ")\n";
    out << "test inputs " << tests.size() << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string data;
    std::string checkpoint;
    std::string curve;
    std::string preset;
    std::string model;
    bool paper_scale = false;
    std::optional<int> epochs, batch_size, depth, filters;
    std::optional<double> lr, momentum, grad_clip;
    std::string schedule, loss, norm, activation;
    bool plain_sgd = false;
};

struct Dataset {
    Variant variant = Variant::Tumor2D;
    std::vector<Sample> samples;
};

Dataset load_dataset(const fs::path& dir)
{
    const auto bytes = read_file(dir / "provenance.json");
    json prov;
    try {
        prov = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError("provenance.json: " + std::string(e.what()));
    }
    Dataset d;
    try {
        d.variant = parse_variant(prov.at("variant").get<std::string>());
        const int k = prov.at("num_classes").get<int>();
        for (const auto& s : prov.at("samples")) {
            const auto file = s.at("file").get<std::string>();
            Sample smp;
            smp.image = read_volume(dir / "images" / file);
            smp.mask = read_mask(dir / "masks" / file, k);
            smp.subject_id = s.at("subject_id").get<std::string>();
            smp.z_index = s.at("z_index").get<int>();
            smp.copy_index = s.at("copy_index").get<int>();
            d.samples.push_back(std::move(smp));
        }
    } catch (const json::exception& e) {
        throw FormatError("provenance.json: " + std::string(e.what()));
    }
    if (d.samples.empty())
        throw ValueError("dataset '" + dir.string() + "' has no training samples");
    return d;
}

int cmd_train(const TrainArgs& a, const Globals& g, std::ostream& out)
{
    if (!a.preset.empty() && !a.model.empty())
        throw UsageError("--preset and --model are mutually exclusive");
    const Dataset data = load_dataset(a.data);
    ModelPreset preset;
    if (!a.model.empty()) {
        preset = model_preset(a.model, data.variant);
    } else {
        const auto ex = experiment_preset(a.preset.empty() ? std::string(to_string(data.variant)) : a.preset);
        if (ex.variant != data.variant)
            throw UsageError("preset " + ex.name + " expects variant " + std::string(to_string(ex.variant))
                             + ", dataset is " + std::string(to_string(data.variant)));
        preset = ex.model;
    }
    if (!a.paper_scale)
        preset = desk_scale(preset);

    NetDescriptor& net = preset.net;
    TrainConfig& cfg = preset.train;
    if (a.depth)
        net.depth = *a.depth;
    if (a.filters)
        net.base_filters = *a.filters;
    if (!a.norm.empty())
        net.norm = parse_norm(a.norm);
    if (!a.activation.empty())
        net.activation = parse_activation(a.activation);
    if (a.epochs)
        cfg.epochs = *a.epochs;
    if (a.batch_size)
        cfg.batch_size = *a.batch_size;
    if (a.lr)
        cfg.lr0 = *a.lr;
    if (a.momentum)
        cfg.momentum = *a.momentum;
    if (a.grad_clip)
        cfg.grad_clip = *a.grad_clip;
    if (!a.schedule.empty())
        cfg.schedule = parse_schedule(a.schedule);
    if (!a.loss.empty())
        cfg.loss.kind = parse_loss_kind(a.loss);
    if (a.plain_sgd)
        cfg.optimizer = OptimizerKind::sgd;
    cfg.seed = g.seed;
    validate(net);
    validate(cfg);

    const auto& first = data.samples.front().image;
    if (net.dims == 3 && first.rank() != 3)
        throw ShapeError("3D network needs volumetric samples; dataset variant is " + std::string(to_string(data.variant)));
    if (net.dims == 2 && first.rank() != 2)
        throw ShapeError("2D network needs slice samples; dataset variant is " + std::string(to_string(data.variant)));
    const std::size_t f = std::size_t{1} << net.depth;
    const auto e = first.extent();
    if (e.height % f || e.width % f || (net.dims == 3 && e.depth % f))
        throw UsageError("sample size " + std::to_string(e.depth) + "x" + std::to_string(e.height) + "x"
                         + std::to_string(e.width) + " is not divisible by 2^" + std::to_string(net.depth)
                         + "; lower --depth");

    Network model = build_net(net, g.seed);
    out << "training " << preset.name << " " << net.dims << "D depth " << net.depth << " filters " << net.base_filters
        << " (" << model.parameter_count() << " parameters) on " << data.samples.size() << " samples, " << cfg.epochs
        << " epochs, lr " << cfg.lr0 << " " << to_string(cfg.schedule) << ", loss " << to_string(cfg.loss.kind) << '\n';

    const fs::path ckpt(a.checkpoint);
    const fs::path cache = cache_dir();
    const fs::path snapshot = cache.empty() ? fs::path() : cache / (ckpt.stem().string() + ".last.vsck");
    const auto result = train(model, data.samples, cfg, [&](const EpochRecord& r, const Network& n) {
        if (g.verbose)
            out << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.loss << '\n';
        if (!snapshot.empty())
            save_checkpoint(n, snapshot);
    });
    save_checkpoint(model, ckpt);
    const fs::path curve = a.curve.empty() ? fs::path(ckpt.string() + ".loss.csv") : fs::path(a.curve);
    write_text_atomic(curve, loss_curve_csv(result));
    out << "final loss " << std::setprecision(6) << result.curve.back().loss << '\n';
    out << "checkpoint " << ckpt.string() << '\n' << "loss curve " << curve.string() << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
    std::string checkpoint;
    std::string images;
    std::string out;
    bool normalize = false;
    std::string batch_tag = "bright";
};

int cmd_predict(const PredictArgs& a, const Globals& g, std::ostream& out)
{
    const Network net = load_checkpoint(a.checkpoint);
    const auto files = list_arrays(a.images);
    const BatchTag tag = parse_batch_tag(a.batch_tag);
    const Variant v = net.descriptor().dims == 3 ? Variant::Tumor3D : Variant::Tumor2D;
    fs::create_directories(a.out);
    parallel_for(files.size(), g.threads, [&](std::size_t i) {
        Image img = read_volume(files[i]);
        if (a.normalize)
            img = prepare_input(img, tag, v);
        write_mask(predict(net, img), fs::path(a.out) / files[i].filename(), format_from_extension(files[i]));
    });
    if (g.verbose)
        for (const auto& f : files)
            out << f.filename().string() << '\n';
    out << "predicted " << files.size() << " mask(s) into " << a.out << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------------------
// postprocess

struct PostArgs {
    std::string masks;
    std::string images;
    std::string out;
    double log_sigma = 2.0;
    std::optional<double> log_threshold;
    double log_relative = 1e-3;
    std::string min_blob;
    std::optional<int> connectivity;
    bool no_log = false;
    int classes = 0;
};

int class_id_of(const std::string& name, int classes)
{
    for (int c = 1; c < classes; ++c)
        if (class_name(classes, c) == name)
            return c;
    try {
        std::size_t used = 0;
        const int v = std::stoi(name, &used);
        if (used == name.size() && v >= 1 && v < classes)
            return v;
    } catch (const std::exception&) {
    }
    throw UsageError("unknown class '" + name + "' in --min-blob");
}

void apply_min_blob(BlobPolicy& p, const std::string& spec, int classes)
{
    if (spec.empty())
        return;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw UsageError("--min-blob expects class=size pairs, got '" + item + "'");
        const int c = class_id_of(item.substr(0, eq), classes);
        long long size = -1;
        try {
            size = std::stoll(item.substr(eq + 1));
        } catch (const std::exception&) {
        }
        if (size < 0)
            throw UsageError("--min-blob size must be a non-negative integer");
        p.min_size[c] = static_cast<std::size_t>(size);
    }
}

int cmd_postprocess(const PostArgs& a, const Globals& g, std::ostream& out)
{
    const auto mask_files = list_arrays(a.masks);
    const auto masks = load_masks(mask_files, a.classes);
    LoGParams log;
    log.sigma = a.log_sigma;
    log.energy_threshold = a.log_threshold;
    log.relative_threshold = a.log_relative;
    if (!a.no_log && a.images.empty())
        throw UsageError("--images is required unless --no-log is given");
    fs::create_directories(a.out);
    parallel_for(masks.size(), g.threads, [&](std::size_t i) {
        const auto& m = masks[i];
        BlobPolicy policy = default_blob_policy(m.num_classes(), m.rank());
        if (a.connectivity)
            policy.connectivity = parse_connectivity(*a.connectivity);
        apply_min_blob(policy, a.min_blob, m.num_classes());
        LabelMask cleaned;
        if (a.no_log) {
            cleaned = remove_small_blobs(m, policy);
        } else {
            const Image img = read_volume(fs::path(a.images) / mask_files[i].filename());
            cleaned = postprocess_prediction(m, img, log, policy, true);
        }
        write_mask(cleaned, fs::path(a.out) / mask_files[i].filename(), format_from_extension(mask_files[i]));
    });
    if (g.verbose)
        for (const auto& f : mask_files)
            out << f.filename().string() << '\n';
    out << "post-processed " << masks.size() << " mask(s) into " << a.out << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalArgs {
    std::string pred;
    std::string post;
    std::string truth;
    std::string out = "metrics.csv";
    std::string unit = "slice";
    std::string std_mode = "population";
    bool postprocessed = false;
    bool exclude_empty = false;
    int classes = 0;
};

std::vector<MetricRecord> evaluate_dir(const fs::path& pred_dir, const std::vector<fs::path>& truth_files,
                                       const std::vector<LabelMask>& truths, const std::vector<std::string>& ids,
                                       EvalUnitKind unit, bool post, EmptyPolicy empty)
{
    std::vector<LabelMask> preds;
    const int k = truths.front().num_classes();
    for (const auto& f : truth_files) {
        const fs::path p = pred_dir / f.filename();
        if (!fs::exists(p))
            throw IoError("no prediction for '" + f.filename().string() + "' in '" + pred_dir.string() + "'");
        preds.push_back(read_mask(p, k));
    }
    return evaluate_test_set(preds, truths, ids, unit, post, empty);
}

int cmd_evaluate(const EvalArgs& a, const Globals&, std::ostream& out)
{
    const EvalUnitKind unit = parse_unit(a.unit);
    const StdMode mode = parse_std_mode(a.std_mode);
    const EmptyPolicy empty = a.exclude_empty ? EmptyPolicy::exclude : EmptyPolicy::score_one;
    const auto truth_files = list_arrays(a.truth);
    const auto truths = load_masks(truth_files, a.classes);
    std::vector<std::string> ids;
    for (const auto& f : truth_files)
        ids.push_back(f.stem().string());

    std::vector<MetricRecord> records;
    if (!a.pred.empty())
        records = evaluate_dir(a.pred, truth_files, truths, ids, unit, a.postprocessed, empty);
    if (!a.post.empty()) {
        auto more = evaluate_dir(a.post, truth_files, truths, ids, unit, true, empty);
        records.insert(records.end(), more.begin(), more.end());
    }
    if (records.empty())
        throw ValueError("nothing to evaluate");
    write_metrics(records, a.out, mode);

    out << "class,unit,set,count,iou,f1\n";
    for (const auto& r : summarize(records, mode))
        out << r.class_name << ',' << to_string(r.unit) << ',' << (r.postprocessed ? "post-processed" : "raw") << ','
            << r.count << ',' << format_mean_std(r.iou) << ',' << format_mean_std(r.f1) << '\n';
    return exit_ok;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Volumetric tumor segmentation pipeline", "volseg"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Seed for shuffling, augmentation and initialisation")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads; training is only bit-reproducible at 1")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_flag("--verbose,-v", g.verbose, "Per-file and per-epoch progress");

    PrepareArgs pa;
    auto* prep = app.add_subcommand("prepare", "Build a data variant from a manifest");
    prep->add_option("--manifest", pa.manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);
    prep->add_option("--out", pa.out, "Output dataset directory")->required();
    prep->add_option("--variant", pa.variant, "lung_tumor_2d | tumor_2d | tumor_3d (default: manifest)");
    prep->add_option("--augment-factor", pa.factor, "Copies per source, original included")->capture_default_str();
    prep->add_flag("--no-augment", pa.no_augment, "Same as --augment-factor 1");
    prep->add_option("--rotation-min", pa.rot_lo, "Degrees")->capture_default_str();
    prep->add_option("--rotation-max", pa.rot_hi, "Degrees")->capture_default_str();
    prep->add_option("--elastic-spacing", pa.grid_spacing, "Control grid spacing (px)")->capture_default_str();
    prep->add_option("--elastic-sigma", pa.grid_sigma, "Control displacement std (px)")->capture_default_str();
    prep->add_option("--format", pa.format, "npy | raw")->capture_default_str();

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train a reference network on a prepared dataset");
    tr->add_option("--data", ta.data, "Prepared dataset directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--out,--checkpoint", ta.checkpoint, "Checkpoint to write")->required();
    tr->add_option("--curve", ta.curve, "Loss-curve CSV (default: <checkpoint>.loss.csv)");
    tr->add_option("--preset", ta.preset, "lung_tumor_2d | tumor_2d | tumor_3d (default: dataset variant)");
    tr->add_option("--model", ta.model, "unet | unet3p | deepmeta | nnunet");
    tr->add_flag("--paper-scale", ta.paper_scale, "Keep the published depth, filters, epochs and batch size");
    tr->add_option("--epochs", ta.epochs);
    tr->add_option("--batch-size", ta.batch_size);
    tr->add_option("--lr", ta.lr, "Initial learning rate");
    tr->add_option("--schedule", ta.schedule, "cosine | poly | constant");
    tr->add_option("--loss", ta.loss, "ce | wce | focal | iou | dice | ms_ssim | lovasz | unet3p | deepmeta | nnunet");
    tr->add_option("--depth", ta.depth, "Pooling levels");
    tr->add_option("--filters", ta.filters, "Filters of the first level");
    tr->add_option("--norm", ta.norm, "batch | instance | none");
    tr->add_option("--activation", ta.activation, "relu | leaky_relu");
    tr->add_option("--momentum", ta.momentum);
    tr->add_option("--grad-clip", ta.grad_clip, "Global gradient norm cap, 0 = off");
    tr->add_flag("--plain-sgd", ta.plain_sgd, "SGD without momentum");

    PredictArgs pr;
    auto* pred = app.add_subcommand("predict", "Segment images with a trained checkpoint");
    pred->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingFile);
    pred->add_option("--images", pr.images, "Image directory or file")->required();
    pred->add_option("--out", pr.out, "Output mask directory")->required();
    pred->add_flag("--normalize", pr.normalize, "Apply contrast harmonisation and z-scoring first");
    pred->add_option("--batch-tag", pr.batch_tag, "bright | dark, with --normalize")->capture_default_str();

    PostArgs po;
    auto* post = app.add_subcommand("postprocess", "Empty-slice removal and small-blob cleanup");
    post->add_option("--masks", po.masks, "Predicted mask directory")->required();
    post->add_option("--images", po.images, "Matching image directory (same file names)");
    post->add_option("--out", po.out, "Output mask directory")->required();
    post->add_option("--log-sigma", po.log_sigma, "LoG scale (px)")->capture_default_str();
    post->add_option("--log-threshold", po.log_threshold, "Absolute threshold on mean |LoG|");
    post->add_option("--log-relative", po.log_relative, "Threshold as a fraction of the dynamic range")->capture_default_str();
    post->add_option("--min-blob", po.min_blob, "e.g. lung=10,tumor=3 (default by class count)");
    post->add_option("--connectivity", po.connectivity, "4 | 8 | 6 | 26 (default 8 in 2D, 26 in 3D)");
    post->add_flag("--no-log", po.no_log, "Skip the empty-slice filter");
    post->add_option("--classes", po.classes, "Class count, 0 = infer from labels")->capture_default_str();

    EvalArgs ea;
    auto* ev = app.add_subcommand("evaluate", "IoU and F1 against ground truth");
    ev->add_option("--pred", ea.pred, "Raw prediction directory");
    ev->add_option("--post", ea.post, "Post-processed prediction directory");
    ev->add_option("--truth", ea.truth, "Ground-truth mask directory")->required();
    ev->add_option("--out", ea.out, "Metrics CSV; a JSON summary goes next to it")->capture_default_str();
    ev->add_option("--unit", ea.unit, "slice | stack")->capture_default_str();
    ev->add_option("--std-mode", ea.std_mode, "population | sample")->capture_default_str();
    ev->add_flag("--postprocessed", ea.postprocessed, "Mark --pred records as post-processed");
    ev->add_flag("--exclude-empty", ea.exclude_empty, "Drop units where a class is absent from both masks");
    ev->add_option("--classes", ea.classes, "Class count, 0 = infer from labels")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return exit_usage;
    }

    try {
        if (ev->parsed() && ea.pred.empty() && ea.post.empty())
            throw UsageError("evaluate needs --pred and/or --post");
        if (prep->parsed())
            return cmd_prepare(pa, g, out);
        if (tr->parsed())
            return cmd_train(ta, g, out);
        if (pred->parsed())
            return cmd_predict(pr, g, out);
        if (post->parsed())
            return cmd_postprocess(po, g, out);
        return cmd_evaluate(ea, g, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const ConfigError& e) {
        // bad enum values in flags surface here as well
        err << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_failure;
    }
}

} // namespace volseg

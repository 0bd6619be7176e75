#include "volseg/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>

namespace volseg {

std::vector<std::size_t> lung_slice_indices(const LabelMask& mask)
{
    if (mask.rank() != 3)
        throw RankError("slice selection needs a rank-3 mask");
    std::vector<std::size_t> out;
    const std::size_t plane = mask.extent().plane();
    for (std::size_t z = 0; z < mask.depth(); ++z) {
        const auto first = mask.data().begin() + static_cast<std::ptrdiff_t>(z * plane);
        if (std::any_of(first, first + static_cast<std::ptrdiff_t>(plane), [](std::uint8_t l) { return l != 0; }))
            out.push_back(z);
    }
    return out;
}

SlicePairSet select_lung_slices(const Volume& image, const LabelMask& mask, const std::string& subject_id)
{
    if (image.rank() != 3 || mask.rank() != 3 || image.extent() != mask.extent())
        throw ShapeError("image and mask must be rank-3 volumes of equal shape");
    SlicePairSet out;
    for (std::size_t z : lung_slice_indices(mask))
        out.push_back({extract_slice(image, z), extract_mask_slice(mask, z), subject_id, static_cast<int>(z), 0});
    return out;
}

LabelMask strip_lung_labels(const LabelMask& mask)
{
    std::vector<std::uint8_t> labels(mask.data());
    for (auto& l : labels)
        l = l == 2 ? 1 : 0;
    return LabelMask(mask.rank(), mask.extent(), 2, std::move(labels));
}

NormalizeResult zscore_normalize(const Image& image)
{
    const auto v = image.values();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    if (*lo == *hi)
        return {Image(image.rank(), image.extent(), 0.0f, image.spacing()), true};

    double sum = 0.0;
    for (float x : v)
        sum += x;
    const double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (float x : v)
        ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size()));

    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<float>((v[i] - mean) / sd);
    return {Image(image.rank(), image.extent(), std::move(out), image.spacing()), false};
}

double percentile(std::span<const float> values, double q)
{
    if (values.empty())
        throw ValueError("percentile of an empty set");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double rank = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Image enhance_contrast(const Image& image, BatchTag tag)
{
    if (tag == BatchTag::bright)
        return image;
    const double p1 = percentile(image.values(), 1.0);
    const double p99 = percentile(image.values(), 99.0);
    if (!(p99 > p1))
        return Image(image.rank(), image.extent(), 0.0f, image.spacing());
    std::vector<float> out(image.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(std::clamp((image[i] - p1) / (p99 - p1), 0.0, 1.0));
    return Image(image.rank(), image.extent(), std::move(out), image.spacing());
}

void validate(const AugmentParams& p)
{
    if (p.factor < 1)
        throw ValueError("augmentation factor must be at least 1");
    if (p.elastic.displacement_sigma < 0.0)
        throw ValueError("elastic displacement sigma must be non-negative");
    if (!(p.elastic.grid_spacing > 0.0))
        throw ValueError("elastic grid spacing must be positive");
    if (p.rotation_lo > p.rotation_hi)
        throw ValueError("rotation range is inverted");
}

std::uint64_t augment_seed(std::uint64_t seed, const std::string& subject_id, int z_index, int copy_index)
{
    std::uint64_t h = hash_combine(seed, hash_string(subject_id));
    h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(z_index)));
    return hash_combine(h, static_cast<std::uint64_t>(copy_index));
}

namespace {

// Exact when t == 0 so identity warps reproduce their input bit for bit.
inline double lerp(double a, double b, double t) { return t == 0.0 ? a : a + t * (b - a); }

/// Coarse control grid of displacements along one axis, interpolated multilinearly.
class DisplacementGrid {
public:
    DisplacementGrid(const Extent& e, bool volumetric, double spacing, double sigma, Rng& rng)
        : spacing_(spacing), volumetric_(volumetric)
    {
        nz_ = volumetric ? nodes(e.depth) : 1;
        ny_ = nodes(e.height);
        nx_ = nodes(e.width);
        values_.resize(nz_ * ny_ * nx_);
        for (auto& v : values_)
            v = sigma * rng.normal();
    }

    double at(std::size_t z, std::size_t y, std::size_t x) const
    {
        const double gz = volumetric_ ? static_cast<double>(z) / spacing_ : 0.0;
        const double gy = static_cast<double>(y) / spacing_;
        const double gx = static_cast<double>(x) / spacing_;
        const auto z0 = static_cast<std::size_t>(gz);
        const auto y0 = static_cast<std::size_t>(gy);
        const auto x0 = static_cast<std::size_t>(gx);
        const std::size_t z1 = std::min(z0 + 1, nz_ - 1);
        const std::size_t y1 = std::min(y0 + 1, ny_ - 1);
        const std::size_t x1 = std::min(x0 + 1, nx_ - 1);
        const double fz = gz - static_cast<double>(z0);
        const double fy = gy - static_cast<double>(y0);
        const double fx = gx - static_cast<double>(x0);
        auto plane = [&](std::size_t zz) {
            return lerp(lerp(node(zz, y0, x0), node(zz, y0, x1), fx), lerp(node(zz, y1, x0), node(zz, y1, x1), fx), fy);
        };
        return lerp(plane(z0), plane(z1), fz);
    }

private:
    std::size_t nodes(std::size_t n) const
    {
        return static_cast<std::size_t>(std::floor(static_cast<double>(n - 1) / spacing_)) + 2;
    }
    double node(std::size_t z, std::size_t y, std::size_t x) const { return values_[(z * ny_ + y) * nx_ + x]; }

    double spacing_;
    bool volumetric_;
    std::size_t nz_ = 1, ny_ = 1, nx_ = 1;
    std::vector<double> values_;
};

double sample_linear(const Image& img, double z, double y, double x)
{
    auto clampc = [](double c, std::size_t n) { return std::clamp(c, 0.0, static_cast<double>(n - 1)); };
    z = clampc(z, img.depth());
    y = clampc(y, img.height());
    x = clampc(x, img.width());
    const auto z0 = static_cast<std::size_t>(z);
    const auto y0 = static_cast<std::size_t>(y);
    const auto x0 = static_cast<std::size_t>(x);
    const std::size_t z1 = std::min(z0 + 1, img.depth() - 1);
    const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
    const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
    const double fz = z - static_cast<double>(z0);
    const double fy = y - static_cast<double>(y0);
    const double fx = x - static_cast<double>(x0);
    auto plane = [&](std::size_t zz) {
        return lerp(lerp(img.at(zz, y0, x0), img.at(zz, y0, x1), fx), lerp(img.at(zz, y1, x0), img.at(zz, y1, x1), fx), fy);
    };
    return lerp(plane(z0), plane(z1), fz);
}

std::uint8_t sample_nearest(const LabelMask& m, double z, double y, double x)
{
    const double rz = std::round(z), ry = std::round(y), rx = std::round(x);
    if (rz < 0 || ry < 0 || rx < 0 || rz > static_cast<double>(m.depth() - 1) || ry > static_cast<double>(m.height() - 1)
        || rx > static_cast<double>(m.width() - 1))
        return 0;
    return m.at(static_cast<std::size_t>(rz), static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
}

} // namespace

Sample warp_sample(const Sample& s, double angle_degrees, const ElasticParams& elastic, Rng& rng)
{
    if (s.image.extent() != s.mask.extent() || s.image.rank() != s.mask.rank())
        throw ShapeError("sample image and mask shapes differ");
    const Extent e = s.image.extent();
    const bool volumetric = s.image.rank() == 3 && e.depth > 1;

    const DisplacementGrid dy(e, volumetric, elastic.grid_spacing, elastic.displacement_sigma, rng);
    const DisplacementGrid dx(e, volumetric, elastic.grid_spacing, elastic.displacement_sigma, rng);
    std::optional<DisplacementGrid> dz;
    if (volumetric)
        dz.emplace(e, volumetric, elastic.grid_spacing, elastic.displacement_sigma, rng);

    const double theta = angle_degrees * std::numbers::pi / 180.0;
    const double c = std::cos(theta);
    const double sn = std::sin(theta);
    const double cy = (static_cast<double>(e.height) - 1.0) / 2.0;
    const double cx = (static_cast<double>(e.width) - 1.0) / 2.0;

    std::vector<float> voxels(e.size());
    std::vector<std::uint8_t> labels(e.size());
    for (std::size_t z = 0; z < e.depth; ++z)
        for (std::size_t y = 0; y < e.height; ++y)
            for (std::size_t x = 0; x < e.width; ++x) {
                const double ry = static_cast<double>(y) - cy;
                const double rx = static_cast<double>(x) - cx;
                const double sy = cy + (c * ry - sn * rx) + dy.at(z, y, x);
                const double sx = cx + (sn * ry + c * rx) + dx.at(z, y, x);
                const double sz = static_cast<double>(z) + (dz ? dz->at(z, y, x) : 0.0);
                const std::size_t i = s.image.index(z, y, x);
                voxels[i] = static_cast<float>(sample_linear(s.image, sz, sy, sx));
                labels[i] = sample_nearest(s.mask, sz, sy, sx);
            }

    Sample out{Image(s.image.rank(), e, std::move(voxels), s.image.spacing()),
               LabelMask(s.mask.rank(), e, s.mask.num_classes(), std::move(labels)), s.subject_id, s.z_index,
               s.copy_index};
    return out;
}

std::vector<Sample> augment(std::span<const Sample> samples, const AugmentParams& params)
{
    validate(params);
    std::vector<Sample> out;
    out.reserve(augmented_count(samples.size(), params.factor));
    for (const auto& s : samples) {
        out.push_back(s);
        out.back().copy_index = 0;
        for (int copy = 1; copy < params.factor; ++copy) {
            Rng rng(augment_seed(params.rng_seed, s.subject_id, s.z_index, copy));
            const double angle = params.rotation_lo == params.rotation_hi
                ? params.rotation_lo
                : rng.uniform(params.rotation_lo, params.rotation_hi);
            Sample w = warp_sample(s, angle, params.elastic, rng);
            w.copy_index = copy;
            out.push_back(std::move(w));
        }
    }
    return out;
}

std::size_t train_count(std::size_t n, double ratio)
{
    const double exact = static_cast<double>(n) * ratio;
    const double nearest = std::round(exact);
    const double r = std::abs(exact - nearest) < 1e-9 ? nearest : std::ceil(exact);
    return std::min(n, static_cast<std::size_t>(r));
}

std::vector<Sample> build_variant(std::span<const Subject> subjects, Variant variant, const AugmentParams& augment_params,
                                  VariantStats* stats)
{
    validate(augment_params);
    VariantStats st;
    st.subjects = subjects.size();
    std::vector<Sample> selected;
    for (const auto& subj : subjects) {
        if (subj.mask.num_classes() != 3)
            throw ValueError("subject '" + subj.subject_id + "' mask must use the {background, lung, tumor} class set");
        const Volume harmonised = enhance_contrast(subj.image, subj.batch_tag);
        if (is_2d(variant)) {
            for (auto& pair : select_lung_slices(harmonised, subj.mask, subj.subject_id)) {
                auto norm = zscore_normalize(pair.image);
                st.degenerate += norm.degenerate ? 1 : 0;
                pair.image = std::move(norm.image);
                if (variant == Variant::Tumor2D)
                    pair.mask = strip_lung_labels(pair.mask);
                selected.push_back(std::move(pair));
            }
        } else {
            auto norm = zscore_normalize(harmonised);
            st.degenerate += norm.degenerate ? 1 : 0;
            selected.push_back({std::move(norm.image), strip_lung_labels(subj.mask), subj.subject_id, -1, 0});
        }
    }
    st.selected = selected.size();
    auto out = augment(selected, augment_params);
    st.augmented = out.size();
    if (stats)
        *stats = st;
    return out;
}

Volume prepare_input(const Volume& image, BatchTag tag, Variant variant)
{
    const Volume harmonised = enhance_contrast(image, tag);
    if (!is_2d(variant) || harmonised.rank() == 2)
        return zscore_normalize(harmonised).image;
    std::vector<Slice> slices;
    for (std::size_t z = 0; z < harmonised.depth(); ++z)
        slices.push_back(zscore_normalize(extract_slice(harmonised, z)).image);
    return stack_slices(slices, harmonised.spacing());
}

} // namespace volseg

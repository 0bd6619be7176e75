#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "volseg/dataio.hpp"
#include "volseg/rng.hpp"
#include "volseg/volume.hpp"

namespace volseg {

/// An image with its mask and where it came from. For 2D variants the image
/// is one z-slice of a subject's stack and `z_index` records which one.
struct Sample {
    Image image;
    LabelMask mask;
    std::string subject_id;
    int z_index = -1;
    int copy_index = 0;
};

using SlicePairSet = std::vector<Sample>;

/// z-indices whose mask plane has any nonzero label, ascending.
std::vector<std::size_t> lung_slice_indices(const LabelMask& mask);

/// Slice pairs for every z whose mask plane carries a nonzero label.
SlicePairSet select_lung_slices(const Volume& image, const LabelMask& mask, const std::string& subject_id = {});

/// Lung (1) becomes background, tumor (2) becomes class 1.
LabelMask strip_lung_labels(const LabelMask& mask);

struct NormalizeResult {
    Image image;
    bool degenerate = false; // input was constant; image is all zeros
};

/// Zero mean, unit (population) variance.
NormalizeResult zscore_normalize(const Image& image);

/// Linear-interpolated percentile, q in [0, 100].
double percentile(std::span<const float> values, double q);

/// Identity for the bright batch; the dark batch gets a [p1, p99] -> [0, 1]
/// linear stretch with clipping. A dark image with p1 == p99 maps to zeros.
Image enhance_contrast(const Image& image, BatchTag tag);

struct ElasticParams {
    double grid_spacing = 16.0;     // px between displacement control points
    double displacement_sigma = 2.0; // px, std of each control-point displacement
};

struct AugmentParams {
    int factor = 8; // copies per source including the untouched original
    double rotation_lo = -15.0;
    double rotation_hi = 15.0;
    ElasticParams elastic;
    std::uint64_t rng_seed = 0;
};

void validate(const AugmentParams& p);

/// Seed for one augmented copy; independent of processing order.
std::uint64_t augment_seed(std::uint64_t seed, const std::string& subject_id, int z_index, int copy_index);

/// In-plane rotation (degrees, about the image centre) plus a smooth elastic
/// displacement drawn from `rng`. Images are resampled linearly with edge
/// clamping, masks with nearest neighbour and background outside.
Sample warp_sample(const Sample& s, double angle_degrees, const ElasticParams& elastic, Rng& rng);

/// Each source followed by factor - 1 warped copies.
std::vector<Sample> augment(std::span<const Sample> samples, const AugmentParams& params);

inline std::size_t augmented_count(std::size_t n, int factor) { return n * static_cast<std::size_t>(factor); }

/// ceil(n * ratio), guarding against representation error in the product.
std::size_t train_count(std::size_t n, double ratio);

template <class T>
std::pair<std::vector<T>, std::vector<T>> split_train_val(std::vector<T> items, double ratio, std::uint64_t seed)
{
    if (items.empty())
        throw ValueError("cannot split an empty set");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ValueError("split ratio must lie strictly between 0 and 1");
    const std::size_t n_train = train_count(items.size(), ratio);
    Rng rng(splitmix64(seed));
    rng.shuffle(items);
    std::vector<T> val(std::make_move_iterator(items.begin() + static_cast<std::ptrdiff_t>(n_train)),
                       std::make_move_iterator(items.end()));
    items.resize(n_train);
    return {std::move(items), std::move(val)};
}

/// One subject as listed in a manifest, loaded.
struct Subject {
    Volume image;
    LabelMask mask; // {0, 1 lung, 2 tumor}
    BatchTag batch_tag = BatchTag::bright;
    std::string subject_id;
};

struct VariantStats {
    std::size_t subjects = 0;
    std::size_t selected = 0;  // slices (2D) or volumes (3D) before augmentation
    std::size_t augmented = 0; // after augmentation
    std::size_t degenerate = 0;
};

/// Builds the training samples of one data variant: contrast harmonisation,
/// slice selection (2D variants), label stripping (tumor-only variants),
/// z-score normalisation and augmentation.
std::vector<Sample> build_variant(std::span<const Subject> subjects, Variant variant, const AugmentParams& augment_params,
                                  VariantStats* stats = nullptr);

/// Test-time preparation: harmonise and normalise without selection or augmentation.
/// 2D variants normalise every slice independently.
Volume prepare_input(const Volume& image, BatchTag tag, Variant variant);

} // namespace volseg

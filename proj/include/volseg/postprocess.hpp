#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "volseg/volume.hpp"

namespace volseg {

/// Neighbourhoods for component labelling. The planar ones (4, 8) label each
/// z-plane of a volume independently; 6 and 26 connect across planes. On a
/// rank-2 mask 6 behaves like 4 and 26 like 8.
enum class Connectivity { n4, n8, n6, n26 };

Connectivity parse_connectivity(int neighbours);
int neighbours(Connectivity c);
bool is_planar(Connectivity c);

struct Components {
    Grid<std::int32_t> labels;         // 0 background, k > 0 component id
    std::vector<std::size_t> sizes;    // sizes[k - 1]
    std::vector<std::uint8_t> classes; // mask label of component k at classes[k - 1]

    [[nodiscard]] std::size_t count() const { return sizes.size(); }
};

/// Components of equal nonzero labels, numbered in raster order of their first voxel.
Components connected_components(const LabelMask& mask, Connectivity connectivity);

struct BlobPolicy {
    std::map<int, std::size_t> min_size; // class -> smallest size kept
    Connectivity connectivity = Connectivity::n8;
};

/// lung 10 / tumor 3 for the three-class set, tumor 3 for the binary one.
BlobPolicy default_blob_policy(int num_classes, int rank = 2);

/// Clears every component strictly smaller than its class threshold.
LabelMask remove_small_blobs(const LabelMask& mask, const BlobPolicy& policy);

struct LoGParams {
    double sigma = 2.0;
    /// Absolute threshold on mean |response|; when unset, relative_threshold
    /// times the volume's dynamic range is used.
    std::optional<double> energy_threshold;
    double relative_threshold = 1e-3;
};

/// Zero-sum (2r+1)^2 Laplacian-of-Gaussian kernel, r = ceil(3 sigma), row-major.
std::vector<double> log_kernel(double sigma);
int log_radius(double sigma);

/// Slice convolved with the LoG kernel under symmetric (edge-repeating) reflection.
Grid<double> log_filter(const Slice& slice, const LoGParams& params);

/// Mean absolute LoG response of a slice.
double log_energy(const Slice& slice, const LoGParams& params);

double resolve_threshold(const Volume& volume, const LoGParams& params);

/// true where the slice is judged to contain tissue.
std::vector<bool> detect_tissue_slices(const Volume& volume, const LoGParams& params);

/// Zeroes predictions on non-tissue slices (unless `use_log` is false), then
/// removes small blobs per class.
LabelMask postprocess_prediction(const LabelMask& pred, const Volume& image, const LoGParams& log,
                                 const BlobPolicy& policy, bool use_log = true);

} // namespace volseg

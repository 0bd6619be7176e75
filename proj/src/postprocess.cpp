#include "volseg/postprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace volseg {

Connectivity parse_connectivity(int n)
{
    switch (n) {
    case 4: return Connectivity::n4;
    case 8: return Connectivity::n8;
    case 6: return Connectivity::n6;
    case 26: return Connectivity::n26;
    default: throw ConfigError("connectivity must be 4, 8, 6 or 26, got " + std::to_string(n));
    }
}

int neighbours(Connectivity c)
{
    switch (c) {
    case Connectivity::n4: return 4;
    case Connectivity::n8: return 8;
    case Connectivity::n6: return 6;
    case Connectivity::n26: return 26;
    }
    return 0;
}

bool is_planar(Connectivity c) { return c == Connectivity::n4 || c == Connectivity::n8; }

namespace {

struct Offset {
    int dz, dy, dx;
};

// Neighbours that precede a voxel in raster order.
std::vector<Offset> backward_offsets(Connectivity c)
{
    std::vector<Offset> out{{0, 0, -1}, {0, -1, 0}};
    const bool corners = c == Connectivity::n8 || c == Connectivity::n26;
    if (corners) {
        out.push_back({0, -1, -1});
        out.push_back({0, -1, 1});
    }
    if (!is_planar(c)) {
        out.push_back({-1, 0, 0});
        if (corners)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (dy != 0 || dx != 0)
                        out.push_back({-1, dy, dx});
    }
    return out;
}

class DisjointSet {
public:
    std::int32_t make()
    {
        parent_.push_back(static_cast<std::int32_t>(parent_.size()));
        return parent_.back();
    }
    std::int32_t find(std::int32_t a)
    {
        while (parent_[a] != a) {
            parent_[a] = parent_[parent_[a]];
            a = parent_[a];
        }
        return a;
    }
    void unite(std::int32_t a, std::int32_t b)
    {
        a = find(a);
        b = find(b);
        if (a != b)
            parent_[std::max(a, b)] = std::min(a, b);
    }

private:
    std::vector<std::int32_t> parent_;
};

} // namespace

Components connected_components(const LabelMask& mask, Connectivity connectivity)
{
    const Extent e = mask.extent();
    const auto offsets = backward_offsets(connectivity);
    std::vector<std::int32_t> provisional(mask.size(), -1);
    DisjointSet sets;

    // first pass: provisional labels, merging equivalent ones
    for (std::size_t z = 0; z < e.depth; ++z)
        for (std::size_t y = 0; y < e.height; ++y)
            for (std::size_t x = 0; x < e.width; ++x) {
                const std::size_t i = mask.index(z, y, x);
                const auto label = mask[i];
                if (label == 0)
                    continue;
                std::int32_t mine = -1;
                for (const auto& o : offsets) {
                    const auto nz = static_cast<std::ptrdiff_t>(z) + o.dz;
                    const auto ny = static_cast<std::ptrdiff_t>(y) + o.dy;
                    const auto nx = static_cast<std::ptrdiff_t>(x) + o.dx;
                    if (nz < 0 || ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(e.height)
                        || nx >= static_cast<std::ptrdiff_t>(e.width))
                        continue;
                    const std::size_t j = mask.index(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny),
                                                     static_cast<std::size_t>(nx));
                    if (mask[j] != label)
                        continue;
                    if (mine < 0)
                        mine = provisional[j];
                    else
                        sets.unite(mine, provisional[j]);
                }
                provisional[i] = mine < 0 ? sets.make() : mine;
            }

    // second pass: compact ids in order of first appearance
    Components out;
    out.labels = Grid<std::int32_t>(mask.rank(), e, 0);
    std::vector<std::int32_t> final_id;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (provisional[i] < 0)
            continue;
        const auto root = static_cast<std::size_t>(sets.find(provisional[i]));
        if (root >= final_id.size())
            final_id.resize(root + 1, 0);
        if (final_id[root] == 0) {
            out.sizes.push_back(0);
            out.classes.push_back(mask[i]);
            final_id[root] = static_cast<std::int32_t>(out.sizes.size());
        }
        const auto id = final_id[root];
        out.labels[i] = id;
        ++out.sizes[static_cast<std::size_t>(id - 1)];
    }
    return out;
}

BlobPolicy default_blob_policy(int num_classes, int rank)
{
    BlobPolicy p;
    p.connectivity = rank == 3 ? Connectivity::n26 : Connectivity::n8;
    if (num_classes >= 3) {
        p.min_size[1] = 10;
        p.min_size[2] = 3;
    } else {
        p.min_size[1] = 3;
    }
    return p;
}

LabelMask remove_small_blobs(const LabelMask& mask, const BlobPolicy& policy)
{
    const Components comps = connected_components(mask, policy.connectivity);
    std::vector<bool> drop(comps.count(), false);
    for (std::size_t k = 0; k < comps.count(); ++k) {
        const auto it = policy.min_size.find(comps.classes[k]);
        if (it != policy.min_size.end() && comps.sizes[k] < it->second)
            drop[k] = true;
    }
    std::vector<std::uint8_t> labels(mask.data());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto id = comps.labels[i];
        if (id > 0 && drop[static_cast<std::size_t>(id - 1)])
            labels[i] = 0;
    }
    return LabelMask(mask.rank(), mask.extent(), mask.num_classes(), std::move(labels));
}

// ---------------------------------------------------------------------------

int log_radius(double sigma)
{
    if (!(sigma > 0.0))
        throw ValueError("LoG sigma must be positive");
    return static_cast<int>(std::ceil(3.0 * sigma));
}

std::vector<double> log_kernel(double sigma)
{
    const int r = log_radius(sigma);
    const int size = 2 * r + 1;
    const double s2 = sigma * sigma;
    std::vector<double> k(static_cast<std::size_t>(size * size));
    double sum = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x) {
            const double rr = (x * x + y * y) / (2.0 * s2);
            const double v = -1.0 / (std::numbers::pi * s2 * s2) * (1.0 - rr) * std::exp(-rr);
            k[static_cast<std::size_t>((y + r) * size + (x + r))] = v;
            sum += v;
        }
    // truncation leaves a small DC term; remove it so flat regions respond with 0
    const double mean = sum / static_cast<double>(k.size());
    for (auto& v : k)
        v -= mean;
    return k;
}

Grid<double> log_filter(const Slice& slice, const LoGParams& params)
{
    if (slice.rank() != 2)
        throw RankError("LoG filtering works on rank-2 slices");
    const int r = log_radius(params.sigma);
    const std::size_t min_side = static_cast<std::size_t>(2 * r + 1);
    if (slice.height() < min_side || slice.width() < min_side)
        throw ShapeError("slice smaller than the " + std::to_string(min_side) + "-pixel LoG support");
    const auto kernel = log_kernel(params.sigma);
    const int size = 2 * r + 1;
    const auto h = static_cast<std::ptrdiff_t>(slice.height());
    const auto w = static_cast<std::ptrdiff_t>(slice.width());
    auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
        if (i < 0)
            return -i - 1;
        if (i >= n)
            return 2 * n - i - 1;
        return i;
    };
    Grid<double> out(2, slice.extent(), 0.0);
    for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ky = -r; ky <= r; ++ky) {
                const auto sy = static_cast<std::size_t>(reflect(y - ky, h));
                for (int kx = -r; kx <= r; ++kx) {
                    const auto sx = static_cast<std::size_t>(reflect(x - kx, w));
                    acc += kernel[static_cast<std::size_t>((ky + r) * size + (kx + r))] * slice.at(sy, sx);
                }
            }
            out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc;
        }
    return out;
}

double log_energy(const Slice& slice, const LoGParams& params)
{
    const auto response = log_filter(slice, params);
    double sum = 0.0;
    for (double v : response.values())
        sum += std::abs(v);
    return sum / static_cast<double>(response.size());
}

double resolve_threshold(const Volume& volume, const LoGParams& params)
{
    if (params.energy_threshold) {
        if (*params.energy_threshold < 0.0)
            throw ValueError("LoG energy threshold must be non-negative");
        return *params.energy_threshold;
    }
    const auto [lo, hi] = std::minmax_element(volume.values().begin(), volume.values().end());
    return params.relative_threshold * (static_cast<double>(*hi) - static_cast<double>(*lo));
}

std::vector<bool> detect_tissue_slices(const Volume& volume, const LoGParams& params)
{
    const double threshold = resolve_threshold(volume, params);
    std::vector<bool> tissue;
    if (volume.rank() == 2) {
        tissue.push_back(log_energy(volume, params) > threshold);
        return tissue;
    }
    for (std::size_t z = 0; z < volume.depth(); ++z)
        tissue.push_back(log_energy(extract_slice(volume, z), params) > threshold);
    return tissue;
}

LabelMask postprocess_prediction(const LabelMask& pred, const Volume& image, const LoGParams& log,
                                 const BlobPolicy& policy, bool use_log)
{
    if (pred.rank() != image.rank() || pred.extent() != image.extent())
        throw ShapeError("prediction and image shapes differ");
    LabelMask cleared = pred;
    if (use_log) {
        const auto tissue = detect_tissue_slices(image, log);
        const std::size_t plane = pred.extent().plane();
        for (std::size_t z = 0; z < tissue.size(); ++z)
            if (!tissue[z])
                std::fill_n(cleared.values().begin() + static_cast<std::ptrdiff_t>(z * plane), plane, std::uint8_t{0});
    }
    return remove_small_blobs(cleared, policy);
}

} // namespace volseg

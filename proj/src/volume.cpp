#include "volseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace volseg {

Image::Image(int rank, Extent extent, float fill, Spacing spacing)
    : Grid<float>(rank, extent, fill), spacing_(spacing)
{
    check_finite();
}

Image::Image(int rank, Extent extent, std::vector<float> voxels, Spacing spacing)
    : Grid<float>(rank, extent, std::move(voxels)), spacing_(spacing)
{
    check_finite();
}

void Image::check_finite() const
{
    for (float v : data_)
        if (!std::isfinite(v))
            throw ValueError("image contains a non-finite voxel");
}

LabelMask::LabelMask(int rank, Extent extent, int num_classes, std::uint8_t fill)
    : LabelMask(rank, extent, num_classes, std::vector<std::uint8_t>(extent.size(), fill))
{
}

LabelMask::LabelMask(int rank, Extent extent, int num_classes, std::vector<std::uint8_t> labels)
    : Grid<std::uint8_t>(rank, extent, std::move(labels)), num_classes_(num_classes)
{
    if (num_classes < 1 || num_classes > 255)
        throw ValueError("label mask class count must be in [1, 255]");
    for (auto l : data_)
        if (l >= num_classes)
            throw ValueError("label " + std::to_string(l) + " outside class set of size " + std::to_string(num_classes));
}

std::size_t LabelMask::count(int label) const
{
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), static_cast<std::uint8_t>(label)));
}

ProbMap softmax(const Logits& logits)
{
    const std::size_t n = logits.spatial_size();
    const int k = logits.channels();
    ProbMap out(k, logits.rank(), logits.extent());
    for (std::size_t s = 0; s < n; ++s) {
        double hi = logits.at(0, s);
        for (int c = 0; c < k; ++c) {
            const double z = logits.at(c, s);
            if (!std::isfinite(z))
                throw ValueError("softmax input is not finite");
            hi = std::max(hi, z);
        }
        double total = 0.0;
        for (int c = 0; c < k; ++c) {
            const double e = std::exp(logits.at(c, s) - hi);
            out.at(c, s) = e;
            total += e;
        }
        for (int c = 0; c < k; ++c)
            out.at(c, s) /= total;
    }
    return out;
}

template <class Tag>
LabelMask argmax(const ChannelMap<Tag>& field)
{
    const std::size_t n = field.spatial_size();
    std::vector<std::uint8_t> labels(n, 0);
    for (std::size_t s = 0; s < n; ++s) {
        int best = 0;
        for (int c = 1; c < field.channels(); ++c)
            if (field.at(c, s) > field.at(best, s))
                best = c;
        labels[s] = static_cast<std::uint8_t>(best);
    }
    return LabelMask(field.rank(), field.extent(), field.channels(), std::move(labels));
}

template LabelMask argmax(const ChannelMap<LogitsTag>&);
template LabelMask argmax(const ChannelMap<ProbTag>&);

namespace {

template <class G>
std::vector<typename G::value_type> plane_of(const G& g, std::size_t z)
{
    if (g.rank() != 3)
        throw RankError("slice extraction needs a rank-3 input");
    if (z >= g.depth())
        throw RangeError("slice index " + std::to_string(z) + " outside depth " + std::to_string(g.depth()));
    const auto plane = g.extent().plane();
    auto first = g.data().begin() + static_cast<std::ptrdiff_t>(z * plane);
    return {first, first + static_cast<std::ptrdiff_t>(plane)};
}

template <class G>
std::vector<typename G::value_type> concat_planes(std::span<const G> slices, Extent& extent)
{
    if (slices.empty())
        throw ShapeError("cannot stack an empty slice list");
    const Extent first = slices.front().extent();
    std::vector<typename G::value_type> out;
    out.reserve(first.plane() * slices.size());
    for (const auto& s : slices) {
        if (s.rank() != 2 || s.extent() != first)
            throw ShapeError("stacked slices must all be rank-2 with equal shape");
        out.insert(out.end(), s.data().begin(), s.data().end());
    }
    extent = {slices.size(), first.height, first.width};
    return out;
}

} // namespace

Slice extract_slice(const Volume& v, std::size_t z)
{
    return Image(2, {1, v.height(), v.width()}, plane_of(v, z), v.spacing());
}

Volume stack_slices(std::span<const Slice> slices, Spacing spacing)
{
    Extent e;
    auto voxels = concat_planes(slices, e);
    return Image(3, e, std::move(voxels), spacing);
}

LabelMask extract_mask_slice(const LabelMask& m, std::size_t z)
{
    return LabelMask(2, {1, m.height(), m.width()}, m.num_classes(), plane_of(m, z));
}

LabelMask stack_mask_slices(std::span<const LabelMask> slices)
{
    Extent e;
    auto labels = concat_planes(slices, e);
    return LabelMask(3, e, slices.front().num_classes(), std::move(labels));
}

ProbMap one_hot(const LabelMask& mask, int num_classes)
{
    ProbMap out(num_classes, mask.rank(), mask.extent(), 0.0);
    for (std::size_t s = 0; s < mask.size(); ++s) {
        const int label = mask[s];
        if (label >= num_classes)
            throw ValueError("label " + std::to_string(label) + " not below class count " + std::to_string(num_classes));
        out.at(label, s) = 1.0;
    }
    return out;
}

} // namespace volseg

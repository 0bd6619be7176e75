#pragma once

// Core data model: scalar images (2D slices and 3D volumes), integer label
// masks and per-class channel maps (logits, probabilities).
//
// Layout is channel-first and z-major everywhere: voxel (z, y, x) lives at
// (z * height + y) * width + x, and channel c of a channel map occupies the
// contiguous block [c * spatial_size, (c + 1) * spatial_size).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "volseg/error.hpp"

namespace volseg {

struct Extent {
    std::size_t depth = 1;
    std::size_t height = 1;
    std::size_t width = 1;

    [[nodiscard]] std::size_t size() const { return depth * height * width; }
    [[nodiscard]] std::size_t plane() const { return height * width; }
    bool operator==(const Extent&) const = default;
};

struct Spacing {
    double dz = 1.0;
    double dy = 1.0;
    double dx = 1.0;
    bool operator==(const Spacing&) const = default;
};

/// Dense rank-2 or rank-3 grid. Rank-2 grids always have depth 1.
template <class T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int rank, Extent extent, T fill = T{}) : Grid(rank, extent, std::vector<T>(extent.size(), fill)) {}
    Grid(int rank, Extent extent, std::vector<T> data)
        : rank_(rank), extent_(extent), data_(std::move(data))
    {
        if (rank != 2 && rank != 3)
            throw RankError("grid rank must be 2 or 3");
        if (extent.depth == 0 || extent.height == 0 || extent.width == 0)
            throw ShapeError("grid dimensions must be positive");
        if (rank == 2 && extent.depth != 1)
            throw ShapeError("rank-2 grid must have depth 1");
        if (data_.size() != extent.size())
            throw ShapeError("grid data size does not match its extent");
    }

    [[nodiscard]] int rank() const { return rank_; }
    [[nodiscard]] const Extent& extent() const { return extent_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] std::size_t depth() const { return extent_.depth; }
    [[nodiscard]] std::size_t height() const { return extent_.height; }
    [[nodiscard]] std::size_t width() const { return extent_.width; }

    [[nodiscard]] std::size_t index(std::size_t z, std::size_t y, std::size_t x) const
    {
        return (z * extent_.height + y) * extent_.width + x;
    }

    T& at(std::size_t z, std::size_t y, std::size_t x) { return data_[index(z, y, x)]; }
    const T& at(std::size_t z, std::size_t y, std::size_t x) const { return data_[index(z, y, x)]; }
    T& at(std::size_t y, std::size_t x) { return data_[index(0, y, x)]; }
    const T& at(std::size_t y, std::size_t x) const { return data_[index(0, y, x)]; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<T> values() { return data_; }
    [[nodiscard]] std::span<const T> values() const { return data_; }
    [[nodiscard]] const std::vector<T>& data() const { return data_; }

    bool operator==(const Grid&) const = default;

protected:
    int rank_ = 3;
    Extent extent_{};
    std::vector<T> data_ = std::vector<T>(1);
};

/// Scalar intensity image. A rank-3 Image is a volume (an MRI stack), a
/// rank-2 Image is a slice. Voxels are stored in 32-bit floats and must be
/// finite.
class Image : public Grid<float> {
public:
    Image() = default;
    Image(int rank, Extent extent, float fill = 0.0f, Spacing spacing = {});
    Image(int rank, Extent extent, std::vector<float> voxels, Spacing spacing = {});

    [[nodiscard]] const Spacing& spacing() const { return spacing_; }
    void set_spacing(Spacing s) { spacing_ = s; }

    /// Throws ValueError if any voxel is NaN or infinite.
    void check_finite() const;

    bool operator==(const Image&) const = default;

private:
    Spacing spacing_{};
};

using Volume = Image;
using Slice = Image;

/// Integer class map aligned with an Image.
class LabelMask : public Grid<std::uint8_t> {
public:
    LabelMask() = default;
    LabelMask(int rank, Extent extent, int num_classes, std::uint8_t fill = 0);
    LabelMask(int rank, Extent extent, int num_classes, std::vector<std::uint8_t> labels);

    [[nodiscard]] int num_classes() const { return num_classes_; }

    /// Number of voxels carrying `label`.
    [[nodiscard]] std::size_t count(int label) const;

    bool operator==(const LabelMask&) const = default;

private:
    int num_classes_ = 2;
};

struct LogitsTag {};
struct ProbTag {};

/// Per-class field over a rank-2 or rank-3 spatial grid, channel-first.
template <class Tag>
class ChannelMap {
public:
    ChannelMap() = default;
    ChannelMap(int channels, int rank, Extent extent, double fill = 0.0)
        : ChannelMap(channels, rank, extent, std::vector<double>(static_cast<std::size_t>(channels) * extent.size(), fill))
    {
    }
    ChannelMap(int channels, int rank, Extent extent, std::vector<double> values)
        : channels_(channels), rank_(rank), extent_(extent), data_(std::move(values))
    {
        if (channels < 1)
            throw ShapeError("channel map needs at least one channel");
        if (rank != 2 && rank != 3)
            throw RankError("channel map rank must be 2 or 3");
        if (rank == 2 && extent.depth != 1)
            throw ShapeError("rank-2 channel map must have depth 1");
        if (extent.size() == 0)
            throw ShapeError("channel map dimensions must be positive");
        if (data_.size() != static_cast<std::size_t>(channels) * extent.size())
            throw ShapeError("channel map data size does not match its shape");
    }

    [[nodiscard]] int channels() const { return channels_; }
    [[nodiscard]] int rank() const { return rank_; }
    [[nodiscard]] const Extent& extent() const { return extent_; }
    [[nodiscard]] std::size_t spatial_size() const { return extent_.size(); }
    [[nodiscard]] std::size_t size() const { return data_.size(); }

    double& at(int c, std::size_t s) { return data_[static_cast<std::size_t>(c) * spatial_size() + s]; }
    double at(int c, std::size_t s) const { return data_[static_cast<std::size_t>(c) * spatial_size() + s]; }

    [[nodiscard]] std::span<double> channel(int c)
    {
        return std::span<double>(data_).subspan(static_cast<std::size_t>(c) * spatial_size(), spatial_size());
    }
    [[nodiscard]] std::span<const double> channel(int c) const
    {
        return std::span<const double>(data_).subspan(static_cast<std::size_t>(c) * spatial_size(), spatial_size());
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    [[nodiscard]] std::span<double> values() { return data_; }
    [[nodiscard]] std::span<const double> values() const { return data_; }

    template <class Other>
    [[nodiscard]] bool same_shape(const ChannelMap<Other>& o) const
    {
        return channels_ == o.channels() && rank_ == o.rank() && extent_ == o.extent();
    }

private:
    int channels_ = 1;
    int rank_ = 2;
    Extent extent_{};
    std::vector<double> data_ = std::vector<double>(1);
};

using Logits = ChannelMap<LogitsTag>;
using ProbMap = ChannelMap<ProbTag>;

/// Channel-wise softmax with max-subtraction. Throws ValueError on non-finite input.
ProbMap softmax(const Logits& logits);

/// Index of the largest channel at every location; lowest class wins ties.
template <class Tag>
LabelMask argmax(const ChannelMap<Tag>& field);

/// The z-plane `z` of a rank-3 volume as a rank-2 slice.
Slice extract_slice(const Volume& v, std::size_t z);

/// Inverse of extract_slice over every z: stacks equally-shaped rank-2 slices.
Volume stack_slices(std::span<const Slice> slices, Spacing spacing = {});

/// Same for masks.
LabelMask extract_mask_slice(const LabelMask& m, std::size_t z);
LabelMask stack_mask_slices(std::span<const LabelMask> slices);

/// One channel per class, 1 where the label equals the channel index.
ProbMap one_hot(const LabelMask& mask, int num_classes);

} // namespace volseg

#pragma once

// A plain U-Net style encoder-decoder in 2D or 3D with hand-written forward
// and backward passes, SGD training and the learning-rate schedules used by
// the reference segmentation recipes.
//
// Topology for depth D and base filters F (f_l = F * 2^l):
//   encoder level l < D : [conv3 -> norm -> act] x 2 (f_l channels), 2x max-pool
//   bottleneck          : [conv3 -> norm -> act] x 2 (f_D channels)
//   decoder level l     : 2x up-convolution f_{l+1} -> f_l, concat with the
//                         level-l skip, [conv3 -> norm -> act] x 2
//   head                : 1x1 convolution f_0 -> num_classes logits
// 2D networks use 3x3 kernels and pool in-plane; 3D networks use 3x3x3 and
// pool along all three axes. Convolutions are zero "same" padded.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "volseg/dataio.hpp"
#include "volseg/losses.hpp"
#include "volseg/pipeline.hpp"
#include "volseg/volume.hpp"

namespace volseg {

enum class NormKind { none, batch, instance };
enum class Activation { relu, leaky_relu };

NormKind parse_norm(std::string_view s);
Activation parse_activation(std::string_view s);
std::string_view to_string(NormKind n);
std::string_view to_string(Activation a);

struct NetDescriptor {
    int dims = 2;
    int depth = 3; // down-sampling encoder blocks; the bottleneck comes on top
    int base_filters = 8;
    NormKind norm = NormKind::batch;
    Activation activation = Activation::relu;
    int in_channels = 1;
    int num_classes = 2;

    bool operator==(const NetDescriptor&) const = default;
};

void validate(const NetDescriptor& d);

/// Batch of multi-channel 2D/3D fields, layout (n, c, depth, height, width).
/// 2D data has depth 1.
struct Tensor {
    std::size_t n = 0, c = 0;
    Extent extent;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::size_t n_, std::size_t c_, Extent e, double fill = 0.0) : n(n_), c(c_), extent(e), v(n_ * c_ * e.size(), fill) {}

    [[nodiscard]] std::size_t spatial() const { return extent.size(); }
    [[nodiscard]] double* plane(std::size_t i, std::size_t ch) { return v.data() + (i * c + ch) * spatial(); }
    [[nodiscard]] const double* plane(std::size_t i, std::size_t ch) const { return v.data() + (i * c + ch) * spatial(); }
};

struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct TapeData;

/// Cached intermediates of one forward pass, consumed by backward().
struct Tape {
    Tape();
    ~Tape();
    Tape(Tape&&) noexcept;
    Tape& operator=(Tape&&) noexcept;
    std::unique_ptr<TapeData> data;
};

class Network {
public:
    /// build_net: validates the descriptor and draws seeded fan-in scaled
    /// uniform weights; biases and norm shifts start at 0, norm scales at 1.
    Network(const NetDescriptor& descriptor, std::uint64_t seed);
    /// Same topology with the given parameter vector.
    Network(const NetDescriptor& descriptor, std::vector<double> parameters);
    ~Network();
    Network(const Network&);
    Network& operator=(const Network&);
    Network(Network&&) noexcept;
    Network& operator=(Network&&) noexcept;

    [[nodiscard]] const NetDescriptor& descriptor() const { return descriptor_; }
    [[nodiscard]] std::span<double> parameters() { return params_; }
    [[nodiscard]] std::span<const double> parameters() const { return params_; }
    [[nodiscard]] std::size_t parameter_count() const { return params_.size(); }
    [[nodiscard]] const std::vector<ParamBlock>& layout() const;

    /// Spatial extents must be divisible by 2^depth along every pooled axis.
    void check_input(const Tensor& x) const;

    [[nodiscard]] Tensor forward(const Tensor& x) const;
    [[nodiscard]] Tensor forward(const Tensor& x, Tape& tape) const;

    /// Parameter gradient for d(loss)/d(logits) = grad_logits. `grad_input`
    /// receives d(loss)/d(x) when non-null.
    [[nodiscard]] std::vector<double> backward(const Tape& tape, const Tensor& grad_logits,
                                               Tensor* grad_input = nullptr) const;

    struct Impl; // topology and parameter offsets

private:
    NetDescriptor descriptor_;
    std::vector<double> params_;
    std::unique_ptr<Impl> impl_;
};

Network build_net(const NetDescriptor& descriptor, std::uint64_t seed);

/// Stacks equally-shaped single-channel images into a batch.
Tensor to_batch(std::span<const Image* const> images);
Tensor to_batch(const Image& image);
Logits sample_logits(const Tensor& logits, std::size_t i, int rank);

struct BatchLoss {
    double value = 0.0;               // mean over the batch
    std::vector<double> grad;         // parameter gradient of the mean
};

/// Mean loss of a batch and its parameter gradient.
BatchLoss loss_and_gradient(const Network& net, std::span<const Image* const> images,
                            std::span<const LabelMask* const> targets, const LossFn& loss);

// ---------------------------------------------------------------------------
// Training

enum class Schedule { cosine, poly, constant };
enum class OptimizerKind { sgd_momentum, sgd };

Schedule parse_schedule(std::string_view s);
std::string_view to_string(Schedule s);

struct TrainConfig {
    double lr0 = 0.01;
    Schedule schedule = Schedule::poly;
    double poly_power = 0.9;
    int epochs = 100;
    int batch_size = 2;
    std::uint64_t seed = 0;
    LossConfig loss;
    Variant variant = Variant::Tumor3D;
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double momentum = 0.99;
    double grad_clip = 0.0; // global L2 norm cap; 0 disables
};

void validate(const TrainConfig& c);

/// cosine: lr0 (1 + cos(pi e / E)) / 2; poly: lr0 (1 - e / E)^power.
double lr_at(const TrainConfig& config, int epoch);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> curve;
};

using EpochCallback = std::function<void(const EpochRecord&, const Network&)>;

/// Minibatch SGD over seeded per-epoch shuffles. Deterministic for a given
/// (seed, config, data).
TrainResult train(Network& net, std::span<const Sample> data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

std::string loss_curve_csv(const TrainResult& result);

// ---------------------------------------------------------------------------
// Inference

Logits infer_logits(const Network& net, const Image& image);

/// Argmax segmentation at full resolution. A 2D network applied to a rank-3
/// volume segments each z-plane independently and restacks them.
LabelMask predict(const Network& net, const Image& image);

// ---------------------------------------------------------------------------
// Checkpoints: "VSCK", u32 version, descriptor as 7 x u32, u64 parameter
// count, little-endian f64 parameters.

std::vector<std::uint8_t> encode_checkpoint(const Network& net);
Network decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

} // namespace volseg

#pragma once

// Segmentation losses with analytic gradients with respect to the logits.
//
// Every loss takes channel-first logits and an integer target mask of the same
// spatial shape, evaluates its formula on softmax(logits) and returns the value
// together with d(value)/d(logits). Region losses (IoU, Dice, MS-SSIM, Lovász)
// are averaged over the non-background classes; the distribution losses (CE,
// weighted CE, focal) are averaged over pixels and include every class.

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "volseg/volume.hpp"

namespace volseg {

struct LossReport {
    double value = 0.0;
    Logits grad;
};

/// Value and gradient with respect to the probabilities.
struct ProbLoss {
    double value = 0.0;
    ProbMap grad;
};

/// Non-negative per-pixel weights over the spatial grid.
class WeightMap : public Grid<double> {
public:
    WeightMap() = default;
    WeightMap(int rank, Extent extent, std::vector<double> weights);
    WeightMap(int rank, Extent extent, double fill);
};

/// Inverse class frequency, normalised so the mean weight is 1.
WeightMap class_balance_weights(const LabelMask& target);

/// Class-balance weights plus w0 * exp(-(d1 + d2)^2 / (2 sigma^2)) on
/// background pixels, where d1 and d2 are the distances to the nearest and
/// second-nearest foreground objects. Rank-3 masks are weighted slice by slice.
WeightMap boundary_weights(const LabelMask& target, double w0 = 10.0, double sigma = 5.0);

struct FocalParams {
    double gamma = 2.0;
};

struct MsSsimParams {
    int num_scales = 3;
    double c1 = 0.01;
    double c2 = 0.03;
    std::vector<double> beta;  // per-scale luminance exponents; empty means 1/M each
    std::vector<double> gamma; // per-scale contrast-structure exponents; empty means 1/M each
    int window = 11;
    double sigma = 1.5;
};

struct CompoundWeights {
    double alpha = 0.7; // cross-entropy
    double beta = 0.4;  // Lovász-Softmax
    double gamma = 0.2; // focal
};

LossReport loss_ce(const Logits& logits, const LabelMask& target);
LossReport loss_wce(const Logits& logits, const LabelMask& target, const WeightMap& weights);
LossReport loss_focal(const Logits& logits, const LabelMask& target, const FocalParams& params = {});
LossReport loss_iou(const Logits& logits, const LabelMask& target);
LossReport loss_dice(const Logits& logits, const LabelMask& target);
LossReport loss_ms_ssim(const Logits& logits, const LabelMask& target, const MsSsimParams& params = {});
LossReport loss_lovasz(const Logits& logits, const LabelMask& target);

/// focal + MS-SSIM + IoU
LossReport compound_unet3p(const Logits& logits, const LabelMask& target, const FocalParams& focal = {},
                           const MsSsimParams& ms_ssim = {});
/// alpha * CE + beta * Lovász + gamma * focal
LossReport compound_deepmeta(const Logits& logits, const LabelMask& target, const CompoundWeights& w = {},
                             const FocalParams& focal = {});
/// CE + Dice
LossReport compound_nnunet(const Logits& logits, const LabelMask& target);

// Probability-space forms of the region losses.
ProbLoss prob_iou(const ProbMap& probs, const LabelMask& target);
ProbLoss prob_dice(const ProbMap& probs, const LabelMask& target);
ProbLoss prob_ms_ssim(const ProbMap& probs, const LabelMask& target, const MsSsimParams& params = {});
ProbLoss prob_lovasz(const ProbMap& probs, const LabelMask& target);

/// Pulls a probability-space gradient back through the softmax.
Logits softmax_backward(const ProbMap& probs, const ProbMap& grad_probs);

/// Largest scale count the spatial shape admits for `params.window`; 0 if none.
int max_ms_ssim_scales(const Extent& extent, int rank, int window);

using LossFn = std::function<LossReport(const Logits&, const LabelMask&)>;

enum class LossKind { ce, wce, focal, iou, dice, ms_ssim, lovasz, unet3p, deepmeta, nnunet };
enum class WeightMode { uniform, class_balance, boundary };

LossKind parse_loss_kind(std::string_view s);
std::string_view to_string(LossKind k);
WeightMode parse_weight_mode(std::string_view s);

struct LossConfig {
    LossKind kind = LossKind::nnunet;
    FocalParams focal;
    MsSsimParams ms_ssim;
    CompoundWeights weights;
    WeightMode weight_mode = WeightMode::class_balance;
    double boundary_w0 = 10.0;
    double boundary_sigma = 5.0;
};

LossFn make_loss(const LossConfig& config);

/// Central finite differences over every logit; returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
double check_gradient(const LossFn& loss, const Logits& logits, const LabelMask& target, double epsilon = 1e-4);

} // namespace volseg

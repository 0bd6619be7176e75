#include "volseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "volseg/postprocess.hpp"

namespace volseg {

namespace {

void check_target(const Logits& logits, const LabelMask& target)
{
    if (logits.rank() != target.rank() || logits.extent() != target.extent())
        throw ShapeError("logits and target spatial shapes differ");
    if (logits.channels() < 2)
        throw ShapeError("losses need at least two classes");
    for (std::size_t s = 0; s < target.size(); ++s)
        if (target[s] >= logits.channels())
            throw ValueError("target label " + std::to_string(target[s]) + " not below class count "
                             + std::to_string(logits.channels()));
}

void check_target(const ProbMap& probs, const LabelMask& target)
{
    if (probs.rank() != target.rank() || probs.extent() != target.extent())
        throw ShapeError("probabilities and target spatial shapes differ");
    if (probs.channels() < 2)
        throw ShapeError("losses need at least two classes");
    for (std::size_t s = 0; s < target.size(); ++s)
        if (target[s] >= probs.channels())
            throw ValueError("target label not below class count");
}

/// log p_t via log-sum-exp, and 1 - p_t summed from the other classes.
struct PixelSoftmax {
    double log_pt = 0.0;
    double rest = 0.0; // sum of probabilities of the other classes, i.e. 1 - p_t
};

PixelSoftmax pixel_softmax(const Logits& logits, const ProbMap& probs, std::size_t s, int t)
{
    double hi = logits.at(0, s);
    for (int c = 1; c < logits.channels(); ++c)
        hi = std::max(hi, logits.at(c, s));
    double total = 0.0;
    for (int c = 0; c < logits.channels(); ++c)
        total += std::exp(logits.at(c, s) - hi);
    PixelSoftmax out;
    out.log_pt = logits.at(t, s) - hi - std::log(total);
    for (int c = 0; c < logits.channels(); ++c)
        if (c != t)
            out.rest += probs.at(c, s);
    return out;
}

LossReport with_zero_grad(const Logits& logits)
{
    return {0.0, Logits(logits.channels(), logits.rank(), logits.extent(), 0.0)};
}

LossReport through_softmax(const ProbMap& probs, const ProbLoss& pl)
{
    return {pl.value, softmax_backward(probs, pl.grad)};
}

void accumulate(LossReport& into, const LossReport& part, double weight)
{
    into.value += weight * part.value;
    auto dst = into.grad.values();
    const auto src = part.grad.values();
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] += weight * src[i];
}

} // namespace

WeightMap::WeightMap(int rank, Extent extent, std::vector<double> weights)
    : Grid<double>(rank, extent, std::move(weights))
{
    for (double w : data_)
        if (!(w >= 0.0) || !std::isfinite(w))
            throw ValueError("weight map entries must be finite and non-negative");
}

WeightMap::WeightMap(int rank, Extent extent, double fill)
    : WeightMap(rank, extent, std::vector<double>(extent.size(), fill))
{
}

WeightMap class_balance_weights(const LabelMask& target)
{
    std::vector<std::size_t> counts(static_cast<std::size_t>(target.num_classes()), 0);
    for (std::size_t s = 0; s < target.size(); ++s)
        ++counts[target[s]];
    const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
    const double n = static_cast<double>(target.size());
    std::vector<double> w(target.size());
    for (std::size_t s = 0; s < target.size(); ++s)
        w[s] = n / (static_cast<double>(present) * static_cast<double>(counts[target[s]]));
    return WeightMap(target.rank(), target.extent(), std::move(w));
}

WeightMap boundary_weights(const LabelMask& target, double w0, double sigma)
{
    if (!(sigma > 0.0) || w0 < 0.0)
        throw ValueError("boundary weighting needs sigma > 0 and w0 >= 0");
    WeightMap base = class_balance_weights(target);
    std::vector<double> w(base.data());
    const std::size_t plane = target.extent().plane();
    for (std::size_t z = 0; z < target.depth(); ++z) {
        const LabelMask slice = target.rank() == 3 ? extract_mask_slice(target, z) : target;
        const Components comps = connected_components(slice, Connectivity::n4);
        if (comps.count() < 2)
            continue;
        // members of every object, for the brute-force distance search
        std::vector<std::vector<std::pair<double, double>>> members(comps.count());
        for (std::size_t y = 0; y < slice.height(); ++y)
            for (std::size_t x = 0; x < slice.width(); ++x)
                if (const auto id = comps.labels.at(y, x); id > 0)
                    members[static_cast<std::size_t>(id - 1)].push_back({static_cast<double>(y), static_cast<double>(x)});
        for (std::size_t y = 0; y < slice.height(); ++y)
            for (std::size_t x = 0; x < slice.width(); ++x) {
                if (slice.at(y, x) != 0)
                    continue;
                double d1 = INFINITY, d2 = INFINITY;
                for (const auto& obj : members) {
                    double best = INFINITY;
                    for (auto [py, px] : obj)
                        best = std::min(best, std::hypot(py - static_cast<double>(y), px - static_cast<double>(x)));
                    if (best < d1) {
                        d2 = d1;
                        d1 = best;
                    } else if (best < d2) {
                        d2 = best;
                    }
                }
                w[z * plane + y * slice.width() + x] += w0 * std::exp(-(d1 + d2) * (d1 + d2) / (2.0 * sigma * sigma));
            }
    }
    return WeightMap(target.rank(), target.extent(), std::move(w));
}

Logits softmax_backward(const ProbMap& probs, const ProbMap& grad_probs)
{
    if (!probs.same_shape(grad_probs))
        throw ShapeError("probability gradient shape differs from probabilities");
    Logits out(probs.channels(), probs.rank(), probs.extent(), 0.0);
    const int k = probs.channels();
    for (std::size_t s = 0; s < probs.spatial_size(); ++s) {
        double dot = 0.0;
        for (int c = 0; c < k; ++c)
            dot += probs.at(c, s) * grad_probs.at(c, s);
        for (int c = 0; c < k; ++c)
            out.at(c, s) = probs.at(c, s) * (grad_probs.at(c, s) - dot);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Distribution losses

LossReport loss_ce(const Logits& logits, const LabelMask& target)
{
    check_target(logits, target);
    const ProbMap p = softmax(logits);
    const std::size_t n = logits.spatial_size();
    const double inv_n = 1.0 / static_cast<double>(n);
    LossReport r = with_zero_grad(logits);
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const int t = target[s];
        sum += -pixel_softmax(logits, p, s, t).log_pt;
        for (int c = 0; c < logits.channels(); ++c)
            r.grad.at(c, s) = (p.at(c, s) - (c == t ? 1.0 : 0.0)) * inv_n;
    }
    r.value = sum * inv_n;
    return r;
}

LossReport loss_wce(const Logits& logits, const LabelMask& target, const WeightMap& weights)
{
    check_target(logits, target);
    if (weights.rank() != target.rank() || weights.extent() != target.extent())
        throw ShapeError("weight map shape differs from the target");
    for (std::size_t s = 0; s < weights.size(); ++s)
        if (!(weights[s] >= 0.0))
            throw ValueError("negative pixel weight");
    const ProbMap p = softmax(logits);
    const std::size_t n = logits.spatial_size();
    const double inv_n = 1.0 / static_cast<double>(n);
    LossReport r = with_zero_grad(logits);
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const int t = target[s];
        const double w = weights[s];
        sum += w * -pixel_softmax(logits, p, s, t).log_pt;
        for (int c = 0; c < logits.channels(); ++c)
            r.grad.at(c, s) = w * (p.at(c, s) - (c == t ? 1.0 : 0.0)) * inv_n;
    }
    r.value = sum * inv_n;
    return r;
}

LossReport loss_focal(const Logits& logits, const LabelMask& target, const FocalParams& params)
{
    check_target(logits, target);
    const double gamma = params.gamma;
    if (!(gamma >= 0.0))
        throw ValueError("focal gamma must be non-negative");
    const ProbMap p = softmax(logits);
    const std::size_t n = logits.spatial_size();
    const double inv_n = 1.0 / static_cast<double>(n);
    LossReport r = with_zero_grad(logits);
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const int t = target[s];
        const auto px = pixel_softmax(logits, p, s, t);
        const double q = px.rest;
        const double modulation = std::pow(q, gamma);
        sum += -modulation * px.log_pt;
        // d(loss)/d(z_j) = k * (delta_tj - p_j)
        //   k = gamma * q^(gamma-1) * p_t * log p_t - q^gamma
        const double focusing = (gamma == 0.0 || q == 0.0) ? 0.0
                                                           : gamma * std::pow(q, gamma - 1.0) * p.at(t, s) * px.log_pt;
        const double k = focusing - modulation;
        for (int c = 0; c < logits.channels(); ++c)
            r.grad.at(c, s) = k * ((c == t ? 1.0 : 0.0) - p.at(c, s)) * inv_n;
    }
    r.value = sum * inv_n;
    return r;
}

// ---------------------------------------------------------------------------
// Region losses

ProbLoss prob_iou(const ProbMap& probs, const LabelMask& target)
{
    check_target(probs, target);
    const int k = probs.channels();
    const std::size_t n = probs.spatial_size();
    ProbLoss out{0.0, ProbMap(k, probs.rank(), probs.extent(), 0.0)};
    const double scale = 1.0 / static_cast<double>(k - 1);
    for (int c = 1; c < k; ++c) {
        double inter = 0.0, sum_p = 0.0, sum_g = 0.0, outside = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const double p = probs.at(c, s);
            const double g = target[s] == c ? 1.0 : 0.0;
            inter += p * g;
            sum_p += p;
            sum_g += g;
            outside += p + g - 2.0 * p * g;
        }
        const double uni = sum_p + sum_g - inter;
        if (uni <= 0.0)
            continue;
        // (uni - inter) / uni, summed termwise so it cannot round below zero
        out.value += scale * (outside / uni);
        for (std::size_t s = 0; s < n; ++s) {
            const double g = target[s] == c ? 1.0 : 0.0;
            // d(inter/uni)/dp = (g * uni - inter * (1 - g)) / uni^2
            out.grad.at(c, s) = -scale * (g * uni - inter * (1.0 - g)) / (uni * uni);
        }
    }
    return out;
}

ProbLoss prob_dice(const ProbMap& probs, const LabelMask& target)
{
    check_target(probs, target);
    const int k = probs.channels();
    const std::size_t n = probs.spatial_size();
    ProbLoss out{0.0, ProbMap(k, probs.rank(), probs.extent(), 0.0)};
    const double scale = 1.0 / static_cast<double>(k - 1);
    for (int c = 1; c < k; ++c) {
        double inter = 0.0, sq_p = 0.0, sq_g = 0.0, residual = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const double p = probs.at(c, s);
            const double g = target[s] == c ? 1.0 : 0.0;
            inter += p * g;
            sq_p += p * p;
            sq_g += g * g;
            residual += (p - g) * (p - g);
        }
        const double den = sq_p + sq_g;
        if (den <= 0.0)
            continue;
        const double num = 2.0 * inter;
        // 1 - num / den written as sum (p - g)^2 / den
        out.value += scale * (residual / den);
        for (std::size_t s = 0; s < n; ++s) {
            const double p = probs.at(c, s);
            const double g = target[s] == c ? 1.0 : 0.0;
            out.grad.at(c, s) = -scale * (2.0 * g * den - num * 2.0 * p) / (den * den);
        }
    }
    return out;
}

ProbLoss prob_lovasz(const ProbMap& probs, const LabelMask& target)
{
    check_target(probs, target);
    const int k = probs.channels();
    const std::size_t n = probs.spatial_size();
    ProbLoss out{0.0, ProbMap(k, probs.rank(), probs.extent(), 0.0)};
    const double scale = 1.0 / static_cast<double>(k - 1);
    std::vector<double> errors(n);
    std::vector<std::size_t> order(n);
    std::vector<double> jaccard(n);
    for (int c = 1; c < k; ++c) {
        double gts = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const bool fg = target[s] == c;
            errors[s] = fg ? 1.0 - probs.at(c, s) : probs.at(c, s);
            gts += fg ? 1.0 : 0.0;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });

        // Jaccard loss of the prefix sets {order[0..i]}; its discrete
        // derivative is the Lovász extension's gradient.
        double cum_fg = 0.0, cum_bg = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool fg = target[order[i]] == c;
            cum_fg += fg ? 1.0 : 0.0;
            cum_bg += fg ? 0.0 : 1.0;
            const double inter = gts - cum_fg;
            const double uni = gts + cum_bg;
            jaccard[i] = 1.0 - inter / uni;
        }
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double weight = i == 0 ? jaccard[0] : jaccard[i] - jaccard[i - 1];
            const std::size_t s = order[i];
            value += errors[s] * weight;
            const double sign = target[s] == c ? -1.0 : 1.0;
            out.grad.at(c, s) = scale * weight * sign;
        }
        out.value += scale * value;
    }
    return out;
}

LossReport loss_iou(const Logits& logits, const LabelMask& target)
{
    check_target(logits, target);
    const ProbMap p = softmax(logits);
    return through_softmax(p, prob_iou(p, target));
}

LossReport loss_dice(const Logits& logits, const LabelMask& target)
{
    check_target(logits, target);
    const ProbMap p = softmax(logits);
    return through_softmax(p, prob_dice(p, target));
}

LossReport loss_ms_ssim(const Logits& logits, const LabelMask& target, const MsSsimParams& params)
{
    check_target(logits, target);
    const ProbMap p = softmax(logits);
    return through_softmax(p, prob_ms_ssim(p, target, params));
}

LossReport loss_lovasz(const Logits& logits, const LabelMask& target)
{
    check_target(logits, target);
    const ProbMap p = softmax(logits);
    return through_softmax(p, prob_lovasz(p, target));
}

// ---------------------------------------------------------------------------
// Compound objectives

LossReport compound_unet3p(const Logits& logits, const LabelMask& target, const FocalParams& focal,
                           const MsSsimParams& ms_ssim)
{
    LossReport r = loss_focal(logits, target, focal);
    accumulate(r, loss_ms_ssim(logits, target, ms_ssim), 1.0);
    accumulate(r, loss_iou(logits, target), 1.0);
    return r;
}

LossReport compound_deepmeta(const Logits& logits, const LabelMask& target, const CompoundWeights& w,
                             const FocalParams& focal)
{
    if (!(w.alpha > 0.0 && w.beta > 0.0 && w.gamma > 0.0))
        throw ValueError("compound weights must be positive");
    LossReport r = with_zero_grad(logits);
    accumulate(r, loss_ce(logits, target), w.alpha);
    accumulate(r, loss_lovasz(logits, target), w.beta);
    accumulate(r, loss_focal(logits, target, focal), w.gamma);
    return r;
}

LossReport compound_nnunet(const Logits& logits, const LabelMask& target)
{
    LossReport r = loss_ce(logits, target);
    accumulate(r, loss_dice(logits, target), 1.0);
    return r;
}

// ---------------------------------------------------------------------------

LossKind parse_loss_kind(std::string_view s)
{
    static const std::pair<std::string_view, LossKind> names[] = {
        {"ce", LossKind::ce},           {"wce", LossKind::wce},       {"focal", LossKind::focal},
        {"iou", LossKind::iou},         {"dice", LossKind::dice},     {"ms_ssim", LossKind::ms_ssim},
        {"lovasz", LossKind::lovasz},   {"unet3p", LossKind::unet3p}, {"deepmeta", LossKind::deepmeta},
        {"nnunet", LossKind::nnunet},   {"ce_dice", LossKind::nnunet},
    };
    for (auto [name, kind] : names)
        if (name == s)
            return kind;
    throw ConfigError("unknown loss '" + std::string(s) + "'");
}

std::string_view to_string(LossKind k)
{
    switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::wce: return "wce";
    case LossKind::focal: return "focal";
    case LossKind::iou: return "iou";
    case LossKind::dice: return "dice";
    case LossKind::ms_ssim: return "ms_ssim";
    case LossKind::lovasz: return "lovasz";
    case LossKind::unet3p: return "unet3p";
    case LossKind::deepmeta: return "deepmeta";
    case LossKind::nnunet: return "nnunet";
    }
    return "?";
}

WeightMode parse_weight_mode(std::string_view s)
{
    if (s == "uniform")
        return WeightMode::uniform;
    if (s == "class_balance")
        return WeightMode::class_balance;
    if (s == "boundary")
        return WeightMode::boundary;
    throw ConfigError("unknown weight mode '" + std::string(s) + "'");
}

LossFn make_loss(const LossConfig& cfg)
{
    switch (cfg.kind) {
    case LossKind::ce:
        return [](const Logits& l, const LabelMask& t) { return loss_ce(l, t); };
    case LossKind::wce:
        return [cfg](const Logits& l, const LabelMask& t) {
            switch (cfg.weight_mode) {
            case WeightMode::uniform:
                return loss_wce(l, t, WeightMap(t.rank(), t.extent(), 1.0));
            case WeightMode::boundary:
                return loss_wce(l, t, boundary_weights(t, cfg.boundary_w0, cfg.boundary_sigma));
            case WeightMode::class_balance:
                break;
            }
            return loss_wce(l, t, class_balance_weights(t));
        };
    case LossKind::focal:
        return [cfg](const Logits& l, const LabelMask& t) { return loss_focal(l, t, cfg.focal); };
    case LossKind::iou:
        return [](const Logits& l, const LabelMask& t) { return loss_iou(l, t); };
    case LossKind::dice:
        return [](const Logits& l, const LabelMask& t) { return loss_dice(l, t); };
    case LossKind::ms_ssim:
        return [cfg](const Logits& l, const LabelMask& t) { return loss_ms_ssim(l, t, cfg.ms_ssim); };
    case LossKind::lovasz:
        return [](const Logits& l, const LabelMask& t) { return loss_lovasz(l, t); };
    case LossKind::unet3p:
        return [cfg](const Logits& l, const LabelMask& t) { return compound_unet3p(l, t, cfg.focal, cfg.ms_ssim); };
    case LossKind::deepmeta:
        return [cfg](const Logits& l, const LabelMask& t) { return compound_deepmeta(l, t, cfg.weights, cfg.focal); };
    case LossKind::nnunet:
        return [](const Logits& l, const LabelMask& t) { return compound_nnunet(l, t); };
    }
    throw ConfigError("unhandled loss kind");
}

double check_gradient(const LossFn& loss, const Logits& logits, const LabelMask& target, double epsilon)
{
    const LossReport analytic = loss(logits, target);
    Logits probe = logits;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + epsilon;
        const double up = loss(probe, target).value;
        probe[i] = orig - epsilon;
        const double down = loss(probe, target).value;
        probe[i] = orig;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double a = analytic.grad[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

} // namespace volseg

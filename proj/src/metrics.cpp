#include "volseg/metrics.hpp"

namespace volseg {

Overlap overlap(const LabelMask& pred, const LabelMask& truth, int class_id)
{
    if (pred.rank() != truth.rank() || pred.extent() != truth.extent())
        throw ShapeError("prediction and truth shapes differ");
    Overlap o;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == class_id;
        const bool g = truth[i] == class_id;
        o.pred += p;
        o.truth += g;
        o.inter += p && g;
    }
    return o;
}

double iou(const Overlap& o)
{
    if (o.both_empty())
        return 1.0;
    return static_cast<double>(o.inter) / static_cast<double>(o.pred + o.truth - o.inter);
}

double f1(const Overlap& o)
{
    if (o.both_empty())
        return 1.0;
    return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.pred + o.truth);
}

double iou(const LabelMask& pred, const LabelMask& truth, int class_id) { return iou(overlap(pred, truth, class_id)); }

double f1(const LabelMask& pred, const LabelMask& truth, int class_id) { return f1(overlap(pred, truth, class_id)); }

Aggregate aggregate(std::span<const EvalUnit> units, int class_id, EmptyPolicy empty, StdMode mode)
{
    std::vector<double> ious, f1s;
    for (const auto& u : units) {
        const Overlap o = overlap(u.prediction, u.truth, class_id);
        if (o.both_empty() && empty == EmptyPolicy::exclude)
            continue;
        ious.push_back(iou(o));
        f1s.push_back(f1(o));
    }
    return {ious.size(), mean_std(ious, mode), mean_std(f1s, mode)};
}

std::string class_name(int num_classes, int class_id)
{
    if (num_classes == 3 && class_id == 1)
        return "lung";
    if ((num_classes == 3 && class_id == 2) || (num_classes == 2 && class_id == 1))
        return "tumor";
    if (class_id == 0)
        return "background";
    return "class" + std::to_string(class_id);
}

std::vector<EvalUnit> make_units(std::span<const LabelMask> predictions, std::span<const LabelMask> truths,
                                 std::span<const std::string> subject_ids, EvalUnitKind mode)
{
    if (predictions.size() != truths.size() || predictions.size() != subject_ids.size())
        throw ShapeError("predictions, truths and subject ids must pair up");
    std::vector<EvalUnit> units;
    for (std::size_t v = 0; v < predictions.size(); ++v) {
        const auto& p = predictions[v];
        const auto& t = truths[v];
        if (p.rank() != t.rank() || p.extent() != t.extent())
            throw ShapeError("prediction and truth for '" + subject_ids[v] + "' differ in shape");
        if (mode == EvalUnitKind::stack || p.rank() == 2) {
            units.push_back({p, t, mode, subject_ids[v], p.rank() == 2 && mode == EvalUnitKind::slice ? 0 : -1});
            continue;
        }
        for (std::size_t z = 0; z < p.depth(); ++z)
            units.push_back({extract_mask_slice(p, z), extract_mask_slice(t, z), EvalUnitKind::slice, subject_ids[v],
                             static_cast<int>(z)});
    }
    return units;
}

std::vector<MetricRecord> evaluate_test_set(std::span<const LabelMask> predictions, std::span<const LabelMask> truths,
                                            std::span<const std::string> subject_ids, EvalUnitKind mode,
                                            bool postprocessed, EmptyPolicy empty)
{
    const auto units = make_units(predictions, truths, subject_ids, mode);
    std::vector<MetricRecord> out;
    for (const auto& u : units) {
        const int k = u.truth.num_classes();
        for (int c = 1; c < k; ++c) {
            const Overlap o = overlap(u.prediction, u.truth, c);
            if (o.both_empty() && empty == EmptyPolicy::exclude)
                continue;
            out.push_back({u.subject_id, class_name(k, c), iou(o), f1(o), u.unit_kind, postprocessed, u.z_index});
        }
    }
    return out;
}

} // namespace volseg

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "volseg/dataio.hpp"
#include "volseg/volume.hpp"

namespace volseg {

/// How a unit where neither prediction nor truth contains the class is scored.
enum class EmptyPolicy {
    score_one, // counts as a perfect 1.0
    exclude,   // left out of the records and aggregates
};

struct Overlap {
    std::size_t pred = 0;
    std::size_t truth = 0;
    std::size_t inter = 0;

    [[nodiscard]] bool both_empty() const { return pred == 0 && truth == 0; }
};

Overlap overlap(const LabelMask& pred, const LabelMask& truth, int class_id);

/// |P ∩ G| / |P ∪ G|; 1.0 when both are empty.
double iou(const LabelMask& pred, const LabelMask& truth, int class_id);
/// 2|P ∩ G| / (|P| + |G|); 1.0 when both are empty.
double f1(const LabelMask& pred, const LabelMask& truth, int class_id);

double iou(const Overlap& o);
double f1(const Overlap& o);

struct EvalUnit {
    LabelMask prediction;
    LabelMask truth;
    EvalUnitKind unit_kind = EvalUnitKind::stack;
    std::string subject_id;
    int z_index = -1;
};

struct Aggregate {
    std::size_t count = 0;
    MeanStd iou;
    MeanStd f1;
};

Aggregate aggregate(std::span<const EvalUnit> units, int class_id, EmptyPolicy empty = EmptyPolicy::score_one,
                    StdMode mode = StdMode::population);

/// "lung"/"tumor" for the three-class set, "tumor" for the binary set, "class<k>" otherwise.
std::string class_name(int num_classes, int class_id);

/// Splits volume pairs into evaluation units: one per z-plane in slice mode,
/// one per volume in stack mode.
std::vector<EvalUnit> make_units(std::span<const LabelMask> predictions, std::span<const LabelMask> truths,
                                 std::span<const std::string> subject_ids, EvalUnitKind mode);

/// One record per unit and non-background class, in unit order.
std::vector<MetricRecord> evaluate_test_set(std::span<const LabelMask> predictions, std::span<const LabelMask> truths,
                                            std::span<const std::string> subject_ids, EvalUnitKind mode,
                                            bool postprocessed = false, EmptyPolicy empty = EmptyPolicy::score_one);

} // namespace volseg

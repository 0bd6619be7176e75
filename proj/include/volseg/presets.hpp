#pragma once

// Named hyperparameter presets for the four reference models and the three
// experiments. Published values are kept verbatim; desk_scale() shrinks a
// preset to something a laptop can train.

#include <string>
#include <string_view>
#include <vector>

#include "volseg/refnet.hpp"

namespace volseg {

struct ModelPreset {
    std::string name;
    NetDescriptor net;
    TrainConfig train;
};

/// "unet", "unet3p", "deepmeta", "nnunet" (2D uses the 2D nnU-Net config,
/// 3D the 3D one).
ModelPreset model_preset(std::string_view name, Variant variant);
std::vector<std::string> model_preset_names();

struct ExperimentPreset {
    std::string name; // lung_tumor_2d, tumor_2d, tumor_3d
    Variant variant = Variant::Tumor2D;
    ModelPreset model;
    bool postprocess = true;
};

ExperimentPreset experiment_preset(std::string_view name);
std::vector<std::string> experiment_preset_names();

struct DeskScale {
    int depth = 3;
    int base_filters = 8;
    int max_epochs = 50;
    int max_batch = 8;
};

/// Caps depth, filters, epochs and batch size; leaves learning rate,
/// schedule, loss, normalization and activation alone.
ModelPreset desk_scale(ModelPreset preset, const DeskScale& limits = {});

} // namespace volseg

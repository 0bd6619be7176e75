#include "volseg/presets.hpp"

#include <algorithm>

namespace volseg {

namespace {

NetDescriptor reference_net(int filters, NormKind norm, Activation act, Variant v)
{
    NetDescriptor d;
    d.dims = is_2d(v) ? 2 : 3;
    d.depth = 4; // five blocks counting the bottleneck
    d.base_filters = filters;
    d.norm = norm;
    d.activation = act;
    d.in_channels = 1;
    d.num_classes = class_count(v);
    return d;
}

TrainConfig classic_2d(LossKind loss, Variant v)
{
    TrainConfig c;
    c.lr0 = 1e-3;
    c.schedule = Schedule::cosine;
    c.epochs = 100;
    c.batch_size = 64;
    c.loss.kind = loss;
    c.variant = v;
    return c;
}

} // namespace

ModelPreset model_preset(std::string_view name, Variant variant)
{
    if (name == "unet") {
        if (!is_2d(variant))
            throw ConfigError("the U-Net preset is 2D only");
        auto c = classic_2d(LossKind::wce, variant);
        c.loss.weight_mode = WeightMode::boundary;
        return {"unet", reference_net(64, NormKind::batch, Activation::relu, variant), c};
    }
    if (name == "unet3p") {
        if (!is_2d(variant))
            throw ConfigError("the U-Net3+ preset is 2D only");
        return {"unet3p", reference_net(32, NormKind::batch, Activation::relu, variant), classic_2d(LossKind::unet3p, variant)};
    }
    if (name == "deepmeta") {
        if (!is_2d(variant))
            throw ConfigError("the DeepMeta preset is 2D only");
        return {"deepmeta", reference_net(16, NormKind::batch, Activation::relu, variant),
                classic_2d(LossKind::deepmeta, variant)};
    }
    if (name == "nnunet") {
        TrainConfig c;
        c.schedule = Schedule::poly;
        c.loss.kind = LossKind::nnunet;
        c.variant = variant;
        if (is_2d(variant)) {
            c.lr0 = 0.01;
            c.epochs = 250;
            c.batch_size = 199;
        } else {
            c.lr0 = 0.001;
            c.epochs = 500;
            c.batch_size = 2;
        }
        return {"nnunet", reference_net(32, NormKind::instance, Activation::leaky_relu, variant), c};
    }
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

std::vector<std::string> model_preset_names() { return {"unet", "unet3p", "deepmeta", "nnunet"}; }

ExperimentPreset experiment_preset(std::string_view name)
{
    Variant v;
    try {
        v = parse_variant(name);
    } catch (const Error&) {
        throw ConfigError("unknown experiment preset '" + std::string(name) + "'");
    }
    switch (v) {
    case Variant::LungTumor2D:
        return {"lung_tumor_2d", v, model_preset("nnunet", v), true};
    case Variant::Tumor2D:
        return {"tumor_2d", v, model_preset("nnunet", v), true};
    case Variant::Tumor3D:
        break;
    }
    return {"tumor_3d", v, model_preset("nnunet", v), false};
}

std::vector<std::string> experiment_preset_names() { return {"lung_tumor_2d", "tumor_2d", "tumor_3d"}; }

ModelPreset desk_scale(ModelPreset preset, const DeskScale& limits)
{
    preset.net.depth = std::min(preset.net.depth, limits.depth);
    preset.net.base_filters = std::min(preset.net.base_filters, limits.base_filters);
    preset.train.epochs = std::min(preset.train.epochs, limits.max_epochs);
    preset.train.batch_size = std::min(preset.train.batch_size, limits.max_batch);
    return preset;
}

} // namespace volseg

#pragma once

// Model configuration: architecture dimensions, the ablation variant matrix,
// and canonical JSON (de)serialization used by config files and checkpoints.

#include <string>
#include <vector>

#include "hcvt/common.hpp"

namespace hcvt::model {

enum class Variant {
    full,
    no_local_gam,
    no_global_gam,
    no_gam,
    single_branch,
    conditional_single_branch,
    mri_only,
};

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::vector<Variant> all_variants();

struct VitConfig {
    int patch_size = 16;
    int frame_patch_size = 1;
    int embed_dim = 1024;
    int depth = 6;
    int heads = 8;
    int mlp_dim = 0;  // 0 -> 4 * embed_dim
    double dropout = 0.2;
    double emb_dropout = 0.1;

    int resolved_mlp_dim() const { return mlp_dim > 0 ? mlp_dim : 4 * embed_dim; }
};

struct CnnConfig {
    std::vector<int> channels{32, 64, 128};
    double leaky_slope = 0.01;
};

struct InputConfig {
    int depth = 13;
    int size = 256;
};

struct ConvConfig {
    int vit_channels = 1;  // output channels of the ViT-path 1x1 conv
    int cnn_channels = 8;  // output channels of the CNN-path 1x1 conv
};

struct ClinicalConfig {
    std::vector<int> hidden{128};
};

struct HeadConfig {
    std::vector<int> hidden{256};
    double dropout = 0.2;
};

struct GatingConfig {
    bool skip_sigmoid = false;
};

struct ModelConfig {
    int fusion_dim = 1024;
    Variant variant = Variant::full;
    InputConfig input;
    ConvConfig conv;
    VitConfig vit;
    CnnConfig cnn;
    ClinicalConfig clinical;
    HeadConfig head;
    GatingConfig gating;

    // Tokens per volume entering the ViT.
    long token_count() const {
        return long(input.depth / vit.frame_patch_size) * (input.size / vit.patch_size) *
               (input.size / vit.patch_size);
    }

    bool uses_clinical() const { return variant != Variant::mri_only; }
    bool uses_local_gam() const { return variant != Variant::no_local_gam && variant != Variant::no_gam; }
    bool uses_global_gam() const { return variant != Variant::no_global_gam && variant != Variant::no_gam; }

    // Number of inputs to the global fusion stage.
    int branch_count() const {
        switch (variant) {
            case Variant::single_branch: return 2;  // stacked image branch + clinical
            case Variant::mri_only: return 3;
            default: return 4;
        }
    }
};

// Desk-scale profile: the whole pipeline at laptop cost.
ModelConfig tiny_config();

// Throws config_error on divisibility/size violations.
void validate(const ModelConfig& cfg);

// Canonical JSON round trip; unknown keys are rejected.
std::string to_canonical_json(const ModelConfig& cfg);
ModelConfig config_from_json_text(const std::string& text);

}  // namespace hcvt::model

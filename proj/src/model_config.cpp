#include "hcvt/model_config.hpp"

#include <json.hpp>

#include <set>

namespace hcvt::model {

using nlohmann::json;

const char* to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_local_gam: return "no_local_gam";
        case Variant::no_global_gam: return "no_global_gam";
        case Variant::no_gam: return "no_gam";
        case Variant::single_branch: return "single_branch";
        case Variant::conditional_single_branch: return "conditional_single_branch";
        case Variant::mri_only: return "mri_only";
    }
    return "?";
}

std::vector<Variant> all_variants() {
    return {Variant::full,          Variant::no_local_gam, Variant::no_global_gam,
            Variant::no_gam,        Variant::single_branch, Variant::conditional_single_branch,
            Variant::mri_only};
}

Variant variant_from_string(const std::string& s) {
    for (Variant v : all_variants())
        if (s == to_string(v)) return v;
    std::string valid;
    for (Variant v : all_variants()) valid += std::string(valid.empty() ? "" : ", ") + to_string(v);
    throw config_error(strfmt("unknown variant '%s' (valid: %s)", s.c_str(), valid.c_str()));
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.fusion_dim = 128;
    cfg.input = {8, 64};
    cfg.conv = {1, 8};
    cfg.vit = {16, 1, 128, 2, 8, 256, 0.2, 0.1};
    cfg.cnn = {{16, 32, 64}, 0.01};
    cfg.clinical = {{128}};
    cfg.head = {{256}, 0.2};
    return cfg;
}

void validate(const ModelConfig& cfg) {
    if (cfg.fusion_dim < 1) throw config_error("fusion_dim must be >= 1");
    if (cfg.input.depth < 1 || cfg.input.size < 1) throw config_error("input dims must be >= 1");
    if (cfg.input.size % cfg.vit.patch_size != 0)
        throw config_error(strfmt("input size %d not divisible by patch size %d", cfg.input.size,
                                  cfg.vit.patch_size));
    if (cfg.input.depth % cfg.vit.frame_patch_size != 0)
        throw config_error(strfmt("input depth %d not divisible by frame patch size %d",
                                  cfg.input.depth, cfg.vit.frame_patch_size));
    if (cfg.vit.embed_dim % cfg.vit.heads != 0)
        throw config_error(strfmt("embed dim %d not divisible by %d heads", cfg.vit.embed_dim,
                                  cfg.vit.heads));
    if (cfg.vit.depth < 1) throw config_error("vit depth must be >= 1");
    if (cfg.cnn.channels.size() != 3) throw config_error("cnn.channels must list exactly 3 stages");
    int spatial = cfg.input.size;
    for (int i = 0; i < 3; ++i) spatial = (spatial + 2 - 3) / 2 + 1;
    if (spatial < 8)
        throw config_error(strfmt("input size %d leaves %dx%d after three stride-2 stages (need >= 8)",
                                  cfg.input.size, spatial, spatial));
    if (cfg.clinical.hidden.size() != 1) throw config_error("clinical.hidden must have one layer");
    if (cfg.head.hidden.size() != 1) throw config_error("head.hidden must have one layer");
    if (cfg.conv.vit_channels < 1 || cfg.conv.cnn_channels < 1)
        throw config_error("1x1 conv output channels must be >= 1");
    if (cfg.head.dropout < 0.0 || cfg.head.dropout >= 1.0 || cfg.vit.dropout < 0.0 ||
        cfg.vit.dropout >= 1.0 || cfg.vit.emb_dropout < 0.0 || cfg.vit.emb_dropout >= 1.0)
        throw config_error("dropout rates must lie in [0, 1)");
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw config_error(strfmt("unknown key '%s' in %s", key.c_str(), where.c_str()));
}

template <class T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string to_canonical_json(const ModelConfig& cfg) {
    json j = {
        {"fusion_dim", cfg.fusion_dim},
        {"variant", to_string(cfg.variant)},
        {"input", {{"depth", cfg.input.depth}, {"size", cfg.input.size}}},
        {"conv", {{"vit_channels", cfg.conv.vit_channels}, {"cnn_channels", cfg.conv.cnn_channels}}},
        {"vit",
         {{"patch_size", cfg.vit.patch_size},
          {"frame_patch_size", cfg.vit.frame_patch_size},
          {"embed_dim", cfg.vit.embed_dim},
          {"depth", cfg.vit.depth},
          {"heads", cfg.vit.heads},
          {"mlp_dim", cfg.vit.mlp_dim},
          {"dropout", cfg.vit.dropout},
          {"emb_dropout", cfg.vit.emb_dropout}}},
        {"cnn", {{"channels", cfg.cnn.channels}, {"leaky_slope", cfg.cnn.leaky_slope}}},
        {"clinical", {{"hidden", cfg.clinical.hidden}}},
        {"head", {{"hidden", cfg.head.hidden}, {"dropout", cfg.head.dropout}}},
        {"gating", {{"skip_sigmoid", cfg.gating.skip_sigmoid}}},
    };
    // nlohmann::json keeps keys sorted, so dump() is canonical
    return j.dump(2);
}

ModelConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw config_error(strfmt("config: malformed JSON (%s)", e.what()));
    }
    reject_unknown(j, {"fusion_dim", "variant", "input", "conv", "vit", "cnn", "clinical", "head",
                       "gating"},
                   "config root");
    ModelConfig cfg;
    maybe(j, "fusion_dim", cfg.fusion_dim);
    if (j.contains("variant")) cfg.variant = variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("input")) {
        reject_unknown(j["input"], {"depth", "size"}, "config input");
        maybe(j["input"], "depth", cfg.input.depth);
        maybe(j["input"], "size", cfg.input.size);
    }
    if (j.contains("conv")) {
        reject_unknown(j["conv"], {"vit_channels", "cnn_channels"}, "config conv");
        maybe(j["conv"], "vit_channels", cfg.conv.vit_channels);
        maybe(j["conv"], "cnn_channels", cfg.conv.cnn_channels);
    }
    if (j.contains("vit")) {
        reject_unknown(j["vit"],
                       {"patch_size", "frame_patch_size", "embed_dim", "depth", "heads", "mlp_dim",
                        "dropout", "emb_dropout"},
                       "config vit");
        maybe(j["vit"], "patch_size", cfg.vit.patch_size);
        maybe(j["vit"], "frame_patch_size", cfg.vit.frame_patch_size);
        maybe(j["vit"], "embed_dim", cfg.vit.embed_dim);
        maybe(j["vit"], "depth", cfg.vit.depth);
        maybe(j["vit"], "heads", cfg.vit.heads);
        maybe(j["vit"], "mlp_dim", cfg.vit.mlp_dim);
        maybe(j["vit"], "dropout", cfg.vit.dropout);
        maybe(j["vit"], "emb_dropout", cfg.vit.emb_dropout);
    }
    if (j.contains("cnn")) {
        reject_unknown(j["cnn"], {"channels", "leaky_slope"}, "config cnn");
        maybe(j["cnn"], "channels", cfg.cnn.channels);
        maybe(j["cnn"], "leaky_slope", cfg.cnn.leaky_slope);
    }
    if (j.contains("clinical")) {
        reject_unknown(j["clinical"], {"hidden"}, "config clinical");
        maybe(j["clinical"], "hidden", cfg.clinical.hidden);
    }
    if (j.contains("head")) {
        reject_unknown(j["head"], {"hidden", "dropout"}, "config head");
        maybe(j["head"], "hidden", cfg.head.hidden);
        maybe(j["head"], "dropout", cfg.head.dropout);
    }
    if (j.contains("gating")) {
        reject_unknown(j["gating"], {"skip_sigmoid"}, "config gating");
        maybe(j["gating"], "skip_sigmoid", cfg.gating.skip_sigmoid);
    }
    validate(cfg);
    return cfg;
}

}  // namespace hcvt::model

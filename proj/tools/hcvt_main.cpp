// hcvt: synthetic data generation, cross-validated training, evaluation,
// ablation matrix, run comparison, and interpretability maps for the
// hierarchical gated-attention multi-branch classifier.
//
// Exit codes: 0 ok, 2 usage/validation error, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

#include "hcvt/dataio.hpp"
#include "hcvt/explain.hpp"
#include "hcvt/metrics.hpp"
#include "hcvt/model.hpp"
#include "hcvt/training.hpp"

using namespace hcvt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw io_error(strfmt("cannot open %s", p.string().c_str()));
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string file_hash_hex(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw io_error(strfmt("cannot open %s", p.string().c_str()));
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(bytes));
}

// Config file layout: {"model": {...}, "train": {...}} with flags winning
// over file values.
struct CliConfig {
    model::ModelConfig model_cfg;
    training::TrainConfig train_cfg;
};

CliConfig load_cli_config(const std::string& config_path, bool tiny) {
    CliConfig cfg;
    if (tiny) cfg.model_cfg = model::tiny_config();
    if (!config_path.empty()) {
        json doc;
        try {
            doc = json::parse(read_text(config_path));
        } catch (const json::parse_error& e) {
            throw config_error(strfmt("%s: malformed JSON (%s)", config_path.c_str(), e.what()));
        }
        for (const auto& [key, _] : doc.items())
            if (key != "model" && key != "train" && key != "k")
                throw config_error(strfmt("unknown key '%s' in %s", key.c_str(), config_path.c_str()));
        if (doc.contains("model"))
            cfg.model_cfg = model::config_from_json_text(doc["model"].dump());
        if (doc.contains("train"))
            cfg.train_cfg = training::train_config_from_json_text(doc["train"].dump());
    }
    return cfg;
}

void print_summary_line(const std::string& variant, const metrics::MetricSummary& s) {
    std::printf("%-26s auc %5.1f +- %4.1f | precision %5.1f +- %4.1f | recall %5.1f +- %4.1f\n",
                variant.c_str(), s.auc_mean, s.auc_std, s.precision_mean, s.precision_std,
                s.recall_mean, s.recall_std);
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------
struct SynthArgs {
    int n = 100;
    double prevalence = 0.62;
    std::uint64_t seed = 0;
    std::string out;
    bool tiny = false;
    bool force = false;
};

int cmd_synth(const SynthArgs& a) {
    dataio::GeneratorConfig cfg;
    cfg.n_patients = a.n;
    cfg.prevalence = a.prevalence;
    cfg.seed = a.seed;
    cfg.tiny = a.tiny;
    cfg.force = a.force;
    const dataio::DatasetManifest m = dataio::generate_synthetic(cfg, a.out);
    std::printf("wrote %zu patients (%d positive / %d negative) to %s\n", m.patients.size(),
                m.positives, m.negatives, a.out.c_str());
    std::printf("native %dx%d, depths in [%d, %d], seed %llu\n", m.native_size, m.native_size,
                m.depth_min, m.depth_max, (unsigned long long)m.seed);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train / ablate
// ---------------------------------------------------------------------------
struct TrainArgs {
    std::string data;
    std::string config;
    std::string variant;
    int folds = 5;
    std::int64_t seed = -1;
    std::string out;
    bool tiny = false;
    // flag overrides (negative/empty = keep config value)
    double lr = -1.0;
    int max_epochs = -1;
    int patience = -1;
    int batch_size = -1;
    double mixup_alpha = -1.0;
    int augment = -1;  // -1 keep, 0 off, 1 on
    std::vector<std::string> variants;  // ablate only
};

CliConfig resolve_train_config(const TrainArgs& a) {
    CliConfig cfg = load_cli_config(a.config, a.tiny);
    if (!a.variant.empty()) cfg.model_cfg.variant = model::variant_from_string(a.variant);
    if (a.seed >= 0) cfg.train_cfg.seed = std::uint64_t(a.seed);
    if (a.lr > 0) cfg.train_cfg.lr = a.lr;
    if (a.max_epochs > 0) cfg.train_cfg.max_epochs = a.max_epochs;
    if (a.patience > 0) cfg.train_cfg.patience = a.patience;
    if (a.batch_size > 0) cfg.train_cfg.batch_size = a.batch_size;
    if (a.mixup_alpha >= 0) cfg.train_cfg.mixup_alpha = a.mixup_alpha;
    if (a.augment == 0) cfg.train_cfg.augment = false;
    if (a.augment == 1) cfg.train_cfg.augment = true;
    model::validate(cfg.model_cfg);
    training::validate(cfg.train_cfg);
    return cfg;
}

int finish_run(const training::RunReport& report) {
    print_summary_line(report.variant, report.summary);
    std::vector<int> failed;
    for (const auto& f : report.folds)
        if (f.failed) failed.push_back(f.fold);
    if (!failed.empty()) {
        for (int f : failed) std::fprintf(stderr, "fold %d failed (see report.json)\n", f);
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_train(const TrainArgs& a) {
    const CliConfig cfg = resolve_train_config(a);
    const dataio::DatasetManifest manifest = dataio::open_dataset(a.data);
    const training::RunReport report =
        training::run_cv<float>(manifest, cfg.model_cfg, cfg.train_cfg, a.folds, a.out);
    return finish_run(report);
}

int cmd_ablate(const TrainArgs& a) {
    std::vector<model::Variant> matrix;
    if (a.variants.empty()) {
        matrix = model::all_variants();
    } else {
        for (const auto& v : a.variants) matrix.push_back(model::variant_from_string(v));
    }
    const dataio::DatasetManifest manifest = dataio::open_dataset(a.data);
    int rc = kExitOk;
    std::vector<std::pair<std::string, training::RunReport>> reports;
    for (model::Variant v : matrix) {
        TrainArgs row = a;
        row.variant = model::to_string(v);
        const CliConfig cfg = resolve_train_config(row);
        const fs::path run_dir = fs::path(a.out) / model::to_string(v);
        const training::RunReport report =
            training::run_cv<float>(manifest, cfg.model_cfg, cfg.train_cfg, a.folds, run_dir);
        rc = std::max(rc, finish_run(report));
        reports.emplace_back(model::to_string(v), report);
    }
    // paired comparison of every row against the full variant when present
    const auto full_it = std::find_if(reports.begin(), reports.end(),
                                      [](const auto& r) { return r.first == "full"; });
    if (full_it != reports.end()) {
        std::vector<double> full_aucs;
        for (const auto& f : full_it->second.folds)
            if (!f.failed) full_aucs.push_back(f.test.auc);
        for (const auto& [name, rep] : reports) {
            if (name == "full") continue;
            std::vector<double> aucs;
            for (const auto& f : rep.folds)
                if (!f.failed) aucs.push_back(f.test.auc);
            if (aucs.size() == full_aucs.size() && aucs.size() >= 2 &&
                rep.foldplan_hash == full_it->second.foldplan_hash)
                std::printf("p-value (%s vs full, paired-t): %.4g\n", name.c_str(),
                            metrics::paired_pvalue(aucs, full_aucs));
        }
    }
    return rc;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------
struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string split_file;
};

int cmd_eval(const EvalArgs& a) {
    const model::CheckpointData ckpt = model::load_checkpoint(a.ckpt);
    model::HCnnVit<float> m = model::model_from_checkpoint<float>(ckpt);
    if (!ckpt.has_norm_stats)
        log_warn("checkpoint carries no clinical normalization stats; using identity scaling");

    const dataio::DatasetManifest manifest = dataio::open_dataset(a.data);
    json split;
    try {
        split = json::parse(read_text(a.split_file));
    } catch (const json::parse_error& e) {
        throw validation_error(strfmt("%s: malformed JSON (%s)", a.split_file.c_str(), e.what()));
    }
    if (!split.contains("patients"))
        throw validation_error(strfmt("%s: missing 'patients' array", a.split_file.c_str()));
    const std::vector<std::string> ids = split["patients"].get<std::vector<std::string>>();
    if (ids.empty()) throw validation_error("split file lists no patients");

    // restrict preprocessing to the listed patients
    dataio::DatasetManifest subset = manifest;
    subset.patients.clear();
    for (const auto& id : ids) subset.patients.push_back(manifest.find(id));
    const training::PreparedDataset data =
        training::prepare_dataset(subset, m.config().input.depth, m.config().input.size);
    const std::vector<Sample> samples = training::make_samples(data, ids, ckpt.norm_stats);

    std::vector<double> scores(samples.size());
    std::vector<int> labels(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        scores[i] = m.predict(samples[i]).probability;
        labels[i] = int(samples[i].label);
    }
    const double auc = metrics::auc(scores, labels);
    const auto pr = metrics::precision_recall(scores, labels, 0.5);
    if (pr.precision_defined)
        std::printf("auc %.6f | precision %.6f | recall %.6f | n %zu\n", auc, pr.precision,
                    pr.recall, samples.size());
    else
        std::printf("auc %.6f | precision undefined (no predicted positives) | recall %.6f | n %zu\n",
                    auc, pr.recall, samples.size());
    return kExitOk;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------
struct CompareArgs {
    std::string run_a;
    std::string run_b;
};

int cmd_compare(const CompareArgs& a) {
    auto load_run = [](const fs::path& dir) {
        json rep;
        try {
            rep = json::parse(read_text(dir / "report.json"));
        } catch (const json::parse_error& e) {
            throw validation_error(strfmt("%s/report.json: malformed (%s)", dir.string().c_str(),
                                          e.what()));
        }
        return rep;
    };
    const json ra = load_run(a.run_a);
    const json rb = load_run(a.run_b);
    if (ra.at("foldplan_hash") != rb.at("foldplan_hash"))
        throw validation_error(
            "runs were trained on different fold plans; a paired comparison needs a shared plan "
            "(same data and seed)");
    auto fold_aucs = [](const json& rep, const char* which) {
        std::vector<double> aucs;
        for (const auto& f : rep.at("per_fold")) {
            if (f.value("failed", false))
                throw validation_error(strfmt("run %s has failed folds; cannot pair", which));
            aucs.push_back(f.at("auc").get<double>());
        }
        return aucs;
    };
    const std::vector<double> aucs_a = fold_aucs(ra, "A");
    const std::vector<double> aucs_b = fold_aucs(rb, "B");
    const double p = metrics::paired_pvalue(aucs_a, aucs_b);

    auto summarize = [](const json& rep) {
        metrics::MetricSummary s;
        s.auc_mean = rep.at("summary").at("auc_mean").get<double>();
        s.auc_std = rep.at("summary").at("auc_std").get<double>();
        s.precision_mean = rep.at("summary").at("precision_mean").get<double>();
        s.precision_std = rep.at("summary").at("precision_std").get<double>();
        s.recall_mean = rep.at("summary").at("recall_mean").get<double>();
        s.recall_std = rep.at("summary").at("recall_std").get<double>();
        return s;
    };
    print_summary_line("A: " + ra.at("variant").get<std::string>(), summarize(ra));
    print_summary_line("B: " + rb.at("variant").get<std::string>(), summarize(rb));
    std::printf("paired t-test over %zu folds: p = %.6g\n", aucs_a.size(), p);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// cam
// ---------------------------------------------------------------------------
struct CamArgs {
    std::string ckpt;
    std::string data;
    std::string patient;
    std::string sequence = "adc";
    int slice = 0;
    std::string method = "both";
    std::string out;
};

int cmd_cam(const CamArgs& a) {
    if (a.method != "cnn_layer3" && a.method != "vit_block2" && a.method != "both")
        throw config_error(strfmt("unknown method '%s' (valid: cnn_layer3, vit_block2, both)",
                                  a.method.c_str()));
    const model::CheckpointData ckpt = model::load_checkpoint(a.ckpt);
    model::HCnnVit<float> m = model::model_from_checkpoint<float>(ckpt);
    const Sequence seq = sequence_from_string(a.sequence);

    const dataio::DatasetManifest manifest = dataio::open_dataset(a.data);
    dataio::DatasetManifest subset = manifest;
    subset.patients.clear();
    subset.patients.push_back(manifest.find(a.patient));
    const training::PreparedDataset data =
        training::prepare_dataset(subset, m.config().input.depth, m.config().input.size);
    const std::vector<Sample> samples = training::make_samples(data, {a.patient}, ckpt.norm_stats);
    const Sample& sample = samples.at(0);

    const std::string ckpt_hash = file_hash_hex(a.ckpt);
    fs::create_directories(a.out);
    const Volume& vol = sample.volumes.at(seq);

    auto emit = [&](const explain::Heatmap& h, const std::string& method) {
        const fs::path png = fs::path(a.out) / strfmt("%s_%s_s%02d_%s.png", a.patient.c_str(),
                                                      a.sequence.c_str(), a.slice,
                                                      explain::to_string(h.source));
        explain::overlay(vol, a.slice, h, png);
        explain::write_sidecar(h, method, ckpt_hash, png);
        std::printf("wrote %s\n", png.string().c_str());
    };
    if (a.method == "cnn_layer3" || a.method == "both")
        emit(explain::cnn_cam(m, sample, seq, a.slice), "grad-weighted-cam");
    if (a.method == "vit_block2" || a.method == "both")
        emit(explain::vit_attention_map(m, sample, seq, a.slice), "head-averaged-attention");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "hcvt: hierarchical gated-attention multi-branch classifier for unregistered "
        "multi-sequence volumes plus clinical data. HCVT_THREADS caps worker parallelism."};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* sc_synth = app.add_subcommand("synth", "generate a synthetic dataset");
    sc_synth->add_option("--n", synth.n, "number of patients (>= 10)")->required();
    sc_synth->add_option("--prevalence", synth.prevalence, "positive label fraction (default 0.62)");
    sc_synth->add_option("--seed", synth.seed, "generator seed");
    sc_synth->add_option("--out", synth.out, "output directory")->required();
    sc_synth->add_flag("--tiny", synth.tiny, "desk-scale volumes (64x64, depths 8-24)");
    sc_synth->add_flag("--force", synth.force, "overwrite a non-empty output directory");

    TrainArgs train;
    auto add_train_options = [&](CLI::App* sc, bool is_ablate) {
        sc->add_option("--data", train.data, "dataset directory (manifest.json)")->required();
        sc->add_option("--config", train.config, "JSON config file {model:{},train:{}}");
        if (!is_ablate)
            sc->add_option("--variant", train.variant,
                           "model variant: full | no_local_gam | no_global_gam | no_gam | "
                           "single_branch | conditional_single_branch | mri_only");
        else
            sc->add_option("--variants", train.variants, "variant subset to ablate (default: all)");
        sc->add_option("--folds", train.folds, "cross-validation folds (default 5)");
        sc->add_option("--seed", train.seed, "training seed");
        sc->add_option("--out", train.out, "run directory")->required();
        sc->add_flag("--tiny", train.tiny, "start from the tiny desk-scale model profile");
        sc->add_option("--lr", train.lr, "learning rate override");
        sc->add_option("--max-epochs", train.max_epochs, "epoch cap override");
        sc->add_option("--patience", train.patience, "early-stopping patience override");
        sc->add_option("--batch-size", train.batch_size, "batch size override");
        sc->add_option("--mixup-alpha", train.mixup_alpha, "mixup Beta parameter override");
        sc->add_flag("--no-augment{0},--augment{1}", train.augment,
                     "toggle rotation+mixup augmentation");
    };
    auto* sc_train = app.add_subcommand("train", "k-fold cross-validated training");
    add_train_options(sc_train, false);
    auto* sc_ablate = app.add_subcommand("ablate", "train the ablation variant matrix");
    add_train_options(sc_ablate, true);

    EvalArgs eval;
    auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on a patient split");
    sc_eval->add_option("--ckpt", eval.ckpt, "checkpoint file")->required();
    sc_eval->add_option("--data", eval.data, "dataset directory")->required();
    sc_eval->add_option("--split-file", eval.split_file, "JSON {patients: [...]} split")->required();

    CompareArgs compare;
    auto* sc_compare = app.add_subcommand("compare", "paired t-test between two runs");
    sc_compare->add_option("--run-a,--run_a,-a", compare.run_a, "first run directory")->required();
    sc_compare->add_option("--run-b,--run_b,-b", compare.run_b, "second run directory")->required();

    CamArgs cam;
    auto* sc_cam = app.add_subcommand("cam", "emit interpretability overlays for one slice");
    sc_cam->add_option("--ckpt", cam.ckpt, "checkpoint file")->required();
    sc_cam->add_option("--data", cam.data, "dataset directory")->required();
    sc_cam->add_option("--patient", cam.patient, "patient id")->required();
    sc_cam->add_option("--sequence", cam.sequence, "adc | t2 | dwi");
    sc_cam->add_option("--slice", cam.slice, "slice index in the preprocessed volume");
    sc_cam->add_option("--method", cam.method, "cnn_layer3 | vit_block2 | both");
    sc_cam->add_option("--out", cam.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (sc_synth->parsed()) return cmd_synth(synth);
        if (sc_train->parsed()) return cmd_train(train);
        if (sc_ablate->parsed()) return cmd_ablate(train);
        if (sc_eval->parsed()) return cmd_eval(eval);
        if (sc_compare->parsed()) return cmd_compare(compare);
        if (sc_cam->parsed()) return cmd_cam(cam);
    } catch (const training::fold_abort& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    } catch (const config_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const validation_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const contract_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const io_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fatal: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitOk;
}

#include "hcvt/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>

namespace hcvt::training {

using nlohmann::json;

void validate(const TrainConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw config_error("train: lr must be > 0");
    if (cfg.batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (cfg.max_epochs < 1) throw config_error("train: max_epochs must be >= 1");
    if (cfg.patience < 1 || cfg.patience >= cfg.max_epochs)
        throw config_error(strfmt("train: patience %d must lie in [1, max_epochs)", cfg.patience));
    if (cfg.mixup_alpha < 0.0) throw config_error("train: mixup_alpha must be >= 0");
    if (cfg.val_fraction <= 0.0 || cfg.val_fraction >= 0.5)
        throw config_error("train: val_fraction must lie in (0, 0.5)");
    if (cfg.monitor != "val_auc")
        throw config_error(strfmt("train: unsupported monitor '%s'", cfg.monitor.c_str()));
}

std::string train_config_to_json(const TrainConfig& cfg) {
    json j = {
        {"lr", cfg.lr},
        {"batch_size", cfg.batch_size},
        {"max_epochs", cfg.max_epochs},
        {"patience", cfg.patience},
        {"adam", {{"beta1", cfg.adam_beta1}, {"beta2", cfg.adam_beta2}, {"eps", cfg.adam_eps}}},
        {"seed", cfg.seed},
        {"mixup_alpha", cfg.mixup_alpha},
        {"monitor", cfg.monitor},
        {"augment", cfg.augment},
        {"val_fraction", cfg.val_fraction},
    };
    return j.dump(2);
}

TrainConfig train_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw config_error(strfmt("train config: malformed JSON (%s)", e.what()));
    }
    static const std::set<std::string> allowed = {"lr",    "batch_size", "max_epochs",  "patience",
                                                  "adam",  "seed",       "mixup_alpha", "monitor",
                                                  "augment", "val_fraction"};
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw config_error(strfmt("unknown key '%s' in train config", key.c_str()));
    TrainConfig cfg;
    if (j.contains("lr")) cfg.lr = j["lr"].get<double>();
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
    if (j.contains("max_epochs")) cfg.max_epochs = j["max_epochs"].get<int>();
    if (j.contains("patience")) cfg.patience = j["patience"].get<int>();
    if (j.contains("adam")) {
        const json& a = j["adam"];
        for (const auto& [key, _] : a.items())
            if (key != "beta1" && key != "beta2" && key != "eps")
                throw config_error(strfmt("unknown key '%s' in train config adam", key.c_str()));
        if (a.contains("beta1")) cfg.adam_beta1 = a["beta1"].get<double>();
        if (a.contains("beta2")) cfg.adam_beta2 = a["beta2"].get<double>();
        if (a.contains("eps")) cfg.adam_eps = a["eps"].get<double>();
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("mixup_alpha")) cfg.mixup_alpha = j["mixup_alpha"].get<double>();
    if (j.contains("monitor")) cfg.monitor = j["monitor"].get<std::string>();
    if (j.contains("augment")) cfg.augment = j["augment"].get<bool>();
    if (j.contains("val_fraction")) cfg.val_fraction = j["val_fraction"].get<double>();
    validate(cfg);
    return cfg;
}

double bce_loss(double p, double y) {
    if (y < 0.0 || y > 1.0) throw contract_error("bce_loss: label outside [0,1]");
    constexpr double eps = 1e-7;
    if (p < eps || p > 1.0 - eps) {
        log_warn(strfmt("bce: probability %.3g clamped to [%.1g, 1-%.1g]", p, eps, eps));
        p = std::clamp(p, eps, 1.0 - eps);
    }
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

FoldSplit make_fold_split(const dataio::FoldPlan& plan, const std::map<std::string, int>& labels,
                          int fold, double val_fraction, std::uint64_t seed) {
    if (fold < 0 || fold >= plan.k) throw contract_error(strfmt("fold index %d out of range", fold));
    FoldSplit split;
    split.test = plan.folds[std::size_t(fold)];
    std::vector<std::string> pool_pos, pool_neg;
    for (int f = 0; f < plan.k; ++f) {
        if (f == fold) continue;
        for (const auto& id : plan.folds[std::size_t(f)]) {
            auto it = labels.find(id);
            if (it == labels.end())
                throw contract_error(strfmt("fold split: no label for patient '%s'", id.c_str()));
            (it->second == 1 ? pool_pos : pool_neg).push_back(id);
        }
    }
    std::sort(pool_pos.begin(), pool_pos.end());
    std::sort(pool_neg.begin(), pool_neg.end());
    Rng rng(mix_seed(mix_seed(seed, "val-carve"), std::uint64_t(fold) + 1));
    auto carve = [&](std::vector<std::string>& pool) {
        for (std::size_t i = pool.size(); i > 1; --i)
            std::swap(pool[i - 1], pool[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
        std::size_t n_val = std::size_t(std::lround(val_fraction * double(pool.size())));
        n_val = std::max<std::size_t>(1, std::min(n_val, pool.size() - 1));
        for (std::size_t i = 0; i < pool.size(); ++i)
            (i < n_val ? split.val : split.train).push_back(pool[i]);
    };
    carve(pool_pos);
    carve(pool_neg);
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

PreparedDataset prepare_dataset(const dataio::DatasetManifest& manifest, int target_depth, int size) {
    PreparedDataset data;
    const auto clinical = dataio::load_clinical(manifest.root / "clinical.csv");
    std::map<std::string, ClinicalRecord> by_id;
    for (const auto& r : clinical) by_id[r.patient_id] = r;

    // preprocessing is pure per patient; parallelize with an ordered-by-id merge
    std::vector<const dataio::PatientEntry*> entries;
    for (const auto& p : manifest.patients) entries.push_back(&p);
    std::vector<PreparedPatient> prepared(entries.size());
    std::vector<std::string> errors(entries.size());
    const int workers = std::min<int>(worker_threads(), std::max<int>(1, int(entries.size())));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = std::size_t(w); i < entries.size(); i += std::size_t(workers)) {
                try {
                    const auto& entry = *entries[i];
                    PreparedPatient pp;
                    auto it = by_id.find(entry.id);
                    if (it == by_id.end())
                        throw io_error(strfmt("patient %s has no clinical row", entry.id.c_str()));
                    pp.record = it->second;
                    pp.label = entry.label;
                    for (Sequence seq : kSequences) {
                        Volume raw = dataio::load_patient_volume(manifest, entry.id, seq);
                        pp.volumes.emplace(seq, preprocess::preprocess_eval(raw, target_depth, size));
                    }
                    prepared[i] = std::move(pp);
                } catch (const std::exception& e) {
                    errors[i] = e.what();
                }
            }
        });
    for (auto& th : pool) th.join();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!errors[i].empty()) throw io_error(errors[i]);
        data.patients.emplace(entries[i]->id, std::move(prepared[i]));
    }
    return data;
}

std::vector<Sample> make_samples(const PreparedDataset& data, const std::vector<std::string>& ids,
                                 const NormStats& stats) {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const PreparedPatient& pp = data.at(id);
        Sample s;
        s.patient_id = id;
        s.volumes = pp.volumes;
        s.clinical = preprocess::normalize_clinical(pp.record, stats);
        s.label = double(pp.label);
        out.push_back(std::move(s));
    }
    return out;
}

std::string report_to_json(const RunReport& report) {
    json per_fold = json::array();
    for (const auto& f : report.folds) {
        json fj = {{"fold", f.fold}, {"failed", f.failed}};
        if (f.failed) {
            fj["error"] = f.error;
        } else {
            fj["auc"] = f.test.auc;
            if (std::isfinite(f.test.precision))
                fj["precision"] = f.test.precision;
            else
                fj["precision"] = nullptr;
            fj["recall"] = f.test.recall;
            fj["epochs"] = f.epochs_run;
            fj["best_epoch"] = f.best_epoch;
            fj["best_val_auc"] = f.best_val_auc;
        }
        per_fold.push_back(fj);
    }
    json j = {
        {"variant", report.variant},
        {"k", report.k},
        {"seed", report.seed},
        {"per_fold", per_fold},
        {"summary",
         {{"auc_mean", report.summary.auc_mean},
          {"auc_std", report.summary.auc_std},
          {"precision_mean", report.summary.precision_mean},
          {"precision_std", report.summary.precision_std},
          {"recall_mean", report.summary.recall_mean},
          {"recall_std", report.summary.recall_std}}},
        {"comparisons", json::array()},
        {"config_hash", report.config_hash},
        {"foldplan_hash", report.foldplan_hash},
        {"monitor", "val_auc"},
        {"val_fraction", report.val_fraction},
        {"stratified", true},
        {"comparison_test", "paired-t"},
    };
    return j.dump(2);
}

void write_report(const RunReport& report, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error(strfmt("cannot write %s", path.string().c_str()));
    out << report_to_json(report) << "\n";
}

}  // namespace hcvt::training

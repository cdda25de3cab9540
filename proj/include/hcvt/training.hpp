#pragma once

// Training: Adam + binary cross entropy with mixup soft labels, a
// single-fold loop with early stopping on validation AUC, and the k-fold
// orchestration that produces a run directory with report.json.
//
// Determinism contract: given (seed, config, data), every loss and metric is
// bit-reproducible. Worker threads only parallelize per-sample forward and
// backward passes; gradients are reduced in sample order, and every RNG
// stream is derived from (seed, fold, epoch, sample).

#include <filesystem>
#include <thread>

#include "hcvt/dataio.hpp"
#include "hcvt/metrics.hpp"
#include "hcvt/model.hpp"
#include "hcvt/preprocess.hpp"

namespace hcvt::training {

namespace fs = std::filesystem;

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 8;
    int max_epochs = 400;
    int patience = 50;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    double mixup_alpha = 0.2;
    std::string monitor = "val_auc";
    bool augment = true;          // rotation + mixup on the training stream
    double val_fraction = 0.15;   // carved from each fold's training patients
};

void validate(const TrainConfig& cfg);
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json_text(const std::string& text);

// Aborted fold: NaN loss or similar unrecoverable state.
struct fold_abort : std::runtime_error {
    int fold;
    int batch_index;
    double lr;
    fold_abort(int fold_, int batch_, double lr_, const std::string& what_)
        : std::runtime_error(what_), fold(fold_), batch_index(batch_), lr(lr_) {}
};

// Plain binary cross entropy; probabilities at exactly 0 or 1 are clamped to
// [eps, 1-eps] (eps = 1e-7) and the clamp is logged.
double bce_loss(double p, double y);

struct FoldResult {
    int fold = -1;
    bool failed = false;
    std::string error;
    fs::path checkpoint;
    std::vector<double> train_loss_history;
    std::vector<double> val_auc_history;
    int epochs_run = 0;
    int best_epoch = 0;
    double best_val_auc = 0.0;
    metrics::FoldMetrics test;
    bool test_precision_defined = true;
};

struct FoldSplit {
    std::vector<std::string> train, val, test;
};

// fold i tests on plan.folds[i]; validation is a stratified, seeded carve
// from the remaining 80%.
FoldSplit make_fold_split(const dataio::FoldPlan& plan,
                          const std::map<std::string, int>& labels, int fold,
                          double val_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Preprocessed in-memory dataset
// ---------------------------------------------------------------------------

struct PreparedPatient {
    std::map<Sequence, Volume> volumes;  // SIZ -> resize -> min-max, eval ready
    ClinicalRecord record;               // raw; normalized per fold
    int label = 0;
};

struct PreparedDataset {
    std::map<std::string, PreparedPatient> patients;

    const PreparedPatient& at(const std::string& id) const {
        auto it = patients.find(id);
        if (it == patients.end())
            throw contract_error(strfmt("dataset: unknown patient '%s'", id.c_str()));
        return it->second;
    }
};

// Loads every patient volume, applies the deterministic evaluation pipeline
// for the given model input dims, and joins the clinical rows.
PreparedDataset prepare_dataset(const dataio::DatasetManifest& manifest, int target_depth, int size);

// Assembles eval-ready model samples for the given ids (clinical normalized
// with the supplied fold statistics).
std::vector<Sample> make_samples(const PreparedDataset& data, const std::vector<std::string>& ids,
                                 const NormStats& stats);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class S>
class Adam {
public:
    Adam(double lr, double b1, double b2, double eps) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(std::vector<nn::Param<S>*>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, double(t_));
        const double bc2 = 1.0 - std::pow(b2_, double(t_));
        for (auto* p : params) {
            if (p->adam_m.size() == 0) {
                p->adam_m.setZero(p->value.rows(), p->value.cols());
                p->adam_v.setZero(p->value.rows(), p->value.cols());
            }
            p->adam_m = S(b1_) * p->adam_m + S(1.0 - b1_) * p->grad;
            p->adam_v = S(b2_) * p->adam_v + S(1.0 - b2_) * p->grad.cwiseProduct(p->grad);
            const auto mhat = p->adam_m / S(bc1);
            const auto vhat = (p->adam_v / S(bc2)).cwiseSqrt();
            p->value -= (S(lr_) * mhat.array() / (vhat.array() + S(eps_))).matrix();
        }
    }

    long steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// Per-fold trainer
// ---------------------------------------------------------------------------

template <class S>
class FoldTrainer {
public:
    FoldTrainer(model::HCnnVit<S>& model, const TrainConfig& cfg, int fold)
        : model_(model),
          cfg_(cfg),
          fold_(fold),
          adam_(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {}

    // One shuffled pass with augmentation + mixup; returns the mean train
    // loss over all samples. Throws fold_abort on NaN.
    double train_epoch(const std::vector<Sample>& train_samples, int epoch) {
        if (train_samples.empty())
            throw config_error("train_epoch: empty training split");
        std::vector<std::size_t> order(train_samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(stream("shuffle", epoch, 0));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1))]);

        double loss_sum = 0.0;
        int batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg_.batch_size)) {
            const std::size_t count = std::min<std::size_t>(cfg_.batch_size, order.size() - start);
            // assemble the (optionally augmented) batch
            std::vector<Sample> batch(count);
            {
                std::vector<std::thread> pool;
                const int workers = std::min<int>(worker_threads(), int(count));
                for (int w = 0; w < workers; ++w)
                    pool.emplace_back([&, w] {
                        for (std::size_t i = std::size_t(w); i < count; i += std::size_t(workers)) {
                            const Sample& src = train_samples[order[start + i]];
                            batch[i] = augment_sample(src, epoch, long(start + i));
                        }
                    });
                for (auto& th : pool) th.join();
            }
            if (cfg_.augment && cfg_.mixup_alpha > 0.0 && count > 1) {
                Rng mix_rng(stream("mixup", epoch, batch_index));
                std::vector<std::size_t> perm(count);
                for (std::size_t i = 0; i < count; ++i) perm[i] = i;
                for (std::size_t i = count; i > 1; --i)
                    std::swap(perm[i - 1], perm[std::size_t(mix_rng.uniform_int(0, std::int64_t(i) - 1))]);
                std::vector<Sample> partner(count);
                for (std::size_t i = 0; i < count; ++i) partner[i] = batch[perm[i]];
                batch = preprocess::mixup(batch, partner, cfg_.mixup_alpha, mix_rng).mixed;
            }
            loss_sum += batch_step(batch, epoch, batch_index, long(start));
            ++batch_index;
        }
        return loss_sum / double(order.size());
    }

    // Deterministic scores (no dropout), parallel over samples.
    std::vector<double> scores(const std::vector<Sample>& samples) const {
        std::vector<double> out(samples.size());
        std::vector<std::thread> pool;
        const int workers = std::min<int>(worker_threads(), std::max<int>(1, int(samples.size())));
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = std::size_t(w); i < samples.size(); i += std::size_t(workers)) {
                    nn::Tape<S> tape;
                    out[i] = double(model_.forward(tape, samples[i]).prob.val()(0, 0));
                }
            });
        for (auto& th : pool) th.join();
        return out;
    }

    long optimizer_steps() const { return adam_.steps(); }

private:
    std::uint64_t stream(const char* what, int epoch, long item) const {
        std::uint64_t h = mix_seed(cfg_.seed, what);
        h = mix_seed(h, std::uint64_t(fold_) + 1);
        h = mix_seed(h, std::uint64_t(epoch) + 1);
        return mix_seed(h, std::uint64_t(item) + 1);
    }

    Sample augment_sample(const Sample& src, int epoch, long item) const {
        if (!cfg_.augment) return src;
        Sample out = src;
        Rng rot_rng(stream("rotate", epoch, item));
        for (auto& [seq, vol] : out.volumes) vol = preprocess::random_rotate(vol, rot_rng);
        return out;
    }

    // Forward/backward over one batch (parallel, order-stable reduction) and
    // one Adam step on the mean-loss gradient.
    double batch_step(const std::vector<Sample>& batch, int epoch, int batch_index, long start) {
        const std::size_t count = batch.size();
        std::vector<double> losses(count);
        std::vector<std::vector<nn::Mat<S>>> grads(count);
        std::vector<std::string> worker_error(count);

        auto run_sample = [&](std::size_t i) {
            try {
                nn::Tape<S> tape;
                Rng drop_rng(stream("dropout", epoch, start + long(i)));
                auto fwd = model_.forward(tape, batch[i], &drop_rng);
                nn::Var<S> loss = nn::bce_from_prob(fwd.prob, batch[i].label);
                losses[i] = double(loss.val()(0, 0));
                tape.backward(loss);
                auto& g = grads[i];
                g.reserve(model_.params().size());
                for (auto* p : model_.params()) {
                    const nn::Mat<S>* pg = tape.leaf_grad(*p);
                    if (pg && pg->size() > 0)
                        g.push_back(*pg);
                    else
                        g.push_back(nn::Mat<S>::Zero(p->value.rows(), p->value.cols()));
                }
            } catch (const std::exception& e) {
                worker_error[i] = e.what();
            }
        };

        const int workers = std::min<int>(worker_threads(), int(count));
        if (workers <= 1) {
            for (std::size_t i = 0; i < count; ++i) run_sample(i);
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < workers; ++w)
                pool.emplace_back([&, w] {
                    for (std::size_t i = std::size_t(w); i < count; i += std::size_t(workers)) run_sample(i);
                });
            for (auto& th : pool) th.join();
        }
        for (std::size_t i = 0; i < count; ++i)
            if (!worker_error[i].empty())
                throw fold_abort(fold_, batch_index, cfg_.lr,
                                 strfmt("fold %d batch %d: %s", fold_, batch_index,
                                        worker_error[i].c_str()));

        double batch_loss = 0.0;
        for (double l : losses) batch_loss += l;
        batch_loss /= double(count);
        if (!std::isfinite(batch_loss))
            throw fold_abort(fold_, batch_index, cfg_.lr,
                             strfmt("fold %d: non-finite loss %g at batch %d (lr %g)", fold_,
                                    batch_loss, batch_index, cfg_.lr));

        // mean-loss gradient, reduced in sample order
        auto& params = model_.params();
        for (auto* p : params) p->zero_grad();
        const S scale = S(1.0 / double(count));
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad += grads[i][k] * scale;
        adam_.step(params);

        return batch_loss * double(count);
    }

    model::HCnnVit<S>& model_;
    TrainConfig cfg_;
    int fold_;
    Adam<S> adam_;
};

// ---------------------------------------------------------------------------
// train_fold / run_cv
// ---------------------------------------------------------------------------

template <class S>
FoldResult train_fold(model::HCnnVit<S>& model, const PreparedDataset& data, const FoldSplit& split,
                      const TrainConfig& cfg, const fs::path& fold_dir, int fold_index) {
    validate(cfg);
    if (split.train.empty() || split.val.empty() || split.test.empty())
        throw config_error(strfmt("fold %d: empty split (train %zu, val %zu, test %zu)", fold_index,
                                  split.train.size(), split.val.size(), split.test.size()));
    // leakage assertion: the test set never intersects train or val
    for (const auto& id : split.test)
        for (const auto* other : {&split.train, &split.val})
            for (const auto& tid : *other)
                if (tid == id)
                    throw contract_error(strfmt("fold %d: patient %s leaks into training", fold_index,
                                                id.c_str()));

    std::vector<ClinicalRecord> train_records;
    for (const auto& id : split.train) train_records.push_back(data.at(id).record);
    const NormStats stats = preprocess::compute_norm_stats(train_records);

    const std::vector<Sample> train_samples = make_samples(data, split.train, stats);
    const std::vector<Sample> val_samples = make_samples(data, split.val, stats);
    const std::vector<Sample> test_samples = make_samples(data, split.test, stats);
    std::vector<int> val_labels, test_labels;
    for (const auto& s : val_samples) val_labels.push_back(int(s.label));
    for (const auto& s : test_samples) test_labels.push_back(int(s.label));

    fs::create_directories(fold_dir);
    FoldTrainer<S> trainer(model, cfg, fold_index);

    FoldResult result;
    result.fold = fold_index;
    std::vector<nn::Mat<S>> best_state = model.state_snapshot();
    result.best_val_auc = -1.0;
    result.best_epoch = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double train_loss = trainer.train_epoch(train_samples, epoch);
        const double val_auc = metrics::auc(trainer.scores(val_samples), val_labels);
        result.train_loss_history.push_back(train_loss);
        result.val_auc_history.push_back(val_auc);
        result.epochs_run = epoch;
        if (val_auc > result.best_val_auc) {
            result.best_val_auc = val_auc;
            result.best_epoch = epoch;
            best_state = model.state_snapshot();
        } else if (epoch - result.best_epoch >= cfg.patience) {
            break;  // no improvement for `patience` epochs
        }
    }

    // reported test metrics come from the best-monitored checkpoint
    model.load_state(best_state);
    const std::vector<double> test_scores = trainer.scores(test_samples);
    result.test.auc = metrics::auc(test_scores, test_labels);
    const auto pr = metrics::precision_recall(test_scores, test_labels, 0.5);
    result.test.precision = pr.precision;
    result.test.recall = pr.recall;
    result.test_precision_defined = pr.precision_defined;

    result.checkpoint = fold_dir / "ckpt";
    model::save_checkpoint(model, result.checkpoint, &stats);
    {
        std::ofstream hist(fold_dir / "history.csv");
        hist << "epoch,train_loss,val_auc\n";
        for (std::size_t e = 0; e < result.train_loss_history.size(); ++e)
            hist << strfmt("%zu,%.17g,%.17g\n", e + 1, result.train_loss_history[e],
                           result.val_auc_history[e]);
    }
    {
        nlohmann::json j = {{"patients", split.test}};
        std::ofstream out(fold_dir / "test_split.json");
        out << j.dump(2) << "\n";
    }
    return result;
}

struct RunReport {
    std::string variant;
    int k = 0;
    double val_fraction = 0.15;
    std::uint64_t seed = 0;
    std::vector<FoldResult> folds;
    metrics::MetricSummary summary;
    std::string config_hash;    // over the persisted config.json bytes
    std::string foldplan_hash;
    std::string run_name;
};

std::string report_to_json(const RunReport& report);
void write_report(const RunReport& report, const fs::path& path);

// Full cross-validation: trains a fresh model per fold, aggregates summary
// metrics, and persists the self-describing run directory.
template <class S>
RunReport run_cv(const dataio::DatasetManifest& manifest, const model::ModelConfig& mcfg,
                 const TrainConfig& tcfg, int k, const fs::path& run_dir) {
    model::validate(mcfg);
    validate(tcfg);
    const dataio::FoldPlan plan = dataio::kfold_split(manifest, k, tcfg.seed);
    std::map<std::string, int> labels;
    for (const auto& p : manifest.patients) labels[p.id] = p.label;

    fs::create_directories(run_dir);
    // exact config snapshot: canonical model + train configs in one document
    nlohmann::json cfg_doc = {
        {"model", nlohmann::json::parse(model::to_canonical_json(mcfg))},
        {"train", nlohmann::json::parse(train_config_to_json(tcfg))},
        {"k", k},
    };
    const std::string cfg_text = cfg_doc.dump(2) + "\n";
    {
        std::ofstream out(run_dir / "config.json");
        out << cfg_text;
    }
    {
        nlohmann::json folds_doc = {{"k", plan.k},
                                    {"seed", plan.seed},
                                    {"foldplan_hash", hex64(plan.hash())},
                                    {"stratified", true},
                                    {"folds", nlohmann::json::array()}};
        for (int f = 0; f < k; ++f) {
            const FoldSplit split = make_fold_split(plan, labels, f, tcfg.val_fraction, tcfg.seed);
            folds_doc["folds"].push_back(
                {{"train", split.train}, {"val", split.val}, {"test", split.test}});
        }
        std::ofstream out(run_dir / "folds.json");
        out << folds_doc.dump(2) << "\n";
    }

    PreparedDataset data = prepare_dataset(manifest, mcfg.input.depth, mcfg.input.size);

    RunReport report;
    report.variant = model::to_string(mcfg.variant);
    report.k = k;
    report.seed = tcfg.seed;
    report.val_fraction = tcfg.val_fraction;
    report.config_hash = hex64(fnv1a64(cfg_text));
    report.foldplan_hash = hex64(plan.hash());
    report.run_name = run_dir.filename().string();

    for (int f = 0; f < k; ++f) {
        const FoldSplit split = make_fold_split(plan, labels, f, tcfg.val_fraction, tcfg.seed);
        try {
            model::HCnnVit<S> fold_model(mcfg, mix_seed(tcfg.seed, std::uint64_t(f) + 1));
            report.folds.push_back(train_fold(fold_model, data, split, tcfg,
                                              run_dir / strfmt("fold%d", f), f));
        } catch (const fold_abort& e) {
            log_error(strfmt("fold %d aborted: %s", f, e.what()));
            FoldResult failed;
            failed.fold = f;
            failed.failed = true;
            failed.error = e.what();
            report.folds.push_back(std::move(failed));
        }
    }

    std::vector<metrics::FoldMetrics> ok;
    for (const auto& f : report.folds)
        if (!f.failed) ok.push_back(f.test);
    if (!ok.empty()) report.summary = metrics::aggregate(ok);
    write_report(report, run_dir / "report.json");
    return report;
}

}  // namespace hcvt::training

#include "hcvt/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace hcvt::metrics {

namespace {

void check_scores_labels(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw contract_error(strfmt("metrics: %zu scores but %zu labels", scores.size(), labels.size()));
    if (scores.empty()) throw contract_error("metrics: empty input");
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw contract_error(strfmt("metrics: label %d is not binary", labels[i]));
        if (!std::isfinite(scores[i])) throw contract_error("metrics: non-finite score");
        (labels[i] == 1 ? pos : neg) = true;
    }
    if (!pos || !neg) throw contract_error("auc undefined: both classes must be present");
}

}  // namespace

double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_scores_labels(scores, labels);
    double wins = 0.0;
    long long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / double(pairs);
}

double auc_ranksum(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_scores_labels(scores, labels);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups (1-based ranks)
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * double(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_pos = 0.0;
    long long n_pos = 0, n_neg = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] == 1) {
            rank_pos += rank[k];
            ++n_pos;
        } else {
            ++n_neg;
        }
    }
    const double u = rank_pos - double(n_pos) * double(n_pos + 1) / 2.0;
    return u / (double(n_pos) * double(n_neg));
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    return scores.size() <= 10000 ? auc_pairwise(scores, labels) : auc_ranksum(scores, labels);
}

PrecisionRecall precision_recall(const std::vector<double>& scores, const std::vector<int>& labels,
                                 double threshold) {
    if (scores.size() != labels.size() || scores.empty())
        throw contract_error("precision_recall: scores/labels size mismatch or empty");
    PrecisionRecall pr;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw contract_error(strfmt("precision_recall: label %d is not binary", labels[i]));
        const bool pred = scores[i] >= threshold;  // tie rule: threshold counts as positive
        if (pred && labels[i] == 1)
            ++pr.tp;
        else if (pred && labels[i] == 0)
            ++pr.fp;
        else if (!pred && labels[i] == 1)
            ++pr.fn;
        else
            ++pr.tn;
    }
    if (pr.tp + pr.fp == 0) {
        pr.precision = std::numeric_limits<double>::quiet_NaN();
        pr.precision_defined = false;
        log_warn("precision undefined: no predicted positives at this threshold");
    } else {
        pr.precision = double(pr.tp) / double(pr.tp + pr.fp);
    }
    pr.recall = pr.tp + pr.fn == 0 ? 0.0 : double(pr.tp) / double(pr.tp + pr.fn);
    return pr;
}

// ---------------------------------------------------------------------------
// Student-t via the regularized incomplete beta (continued fraction).
// ---------------------------------------------------------------------------

namespace {

double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                         b * std::log(1.0 - x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, int dof) {
    if (dof < 1) throw contract_error("student_t_cdf: dof must be >= 1");
    const double v = double(dof);
    const double x = v / (v + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(v / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

double paired_pvalue(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw contract_error(strfmt("paired_pvalue: fold counts %zu and %zu differ", a.size(), b.size()));
    if (a.size() < 2) throw contract_error("paired_pvalue: need at least 2 folds");
    const int k = int(a.size());
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const auto [mean, sd] = mean_sample_std(d);
    if (sd == 0.0) {
        // zero-variance differences: identical runs give p = 1 by convention,
        // a constant nonzero shift is infinitely significant
        return mean == 0.0 ? 1.0 : 0.0;
    }
    const double t = mean / (sd / std::sqrt(double(k)));
    const double tail = 1.0 - student_t_cdf(std::fabs(t), k - 1);
    return std::min(1.0, 2.0 * tail);
}

std::pair<double, double> mean_sample_std(const std::vector<double>& v) {
    if (v.empty()) throw contract_error("mean_sample_std: empty input");
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    if (v.size() == 1) return {mean, 0.0};
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return {mean, std::sqrt(acc / double(v.size() - 1))};
}

MetricSummary aggregate(const std::vector<FoldMetrics>& folds) {
    if (folds.empty()) throw contract_error("aggregate: no folds");
    std::vector<double> aucs, precs, recs;
    for (const auto& f : folds) {
        aucs.push_back(f.auc * 100.0);
        recs.push_back(f.recall * 100.0);
        if (std::isfinite(f.precision)) precs.push_back(f.precision * 100.0);
    }
    MetricSummary s;
    std::tie(s.auc_mean, s.auc_std) = mean_sample_std(aucs);
    std::tie(s.recall_mean, s.recall_std) = mean_sample_std(recs);
    if (!precs.empty()) std::tie(s.precision_mean, s.precision_std) = mean_sample_std(precs);
    return s;
}

}  // namespace hcvt::metrics

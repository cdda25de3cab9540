#pragma once

// Classification metrics: AUC (exact pairwise and rank-sum routes),
// precision/recall at a fixed threshold, cross-fold aggregation, and the
// paired t-test used to compare two runs on a shared fold plan.

#include <cmath>
#include <vector>

#include "hcvt/common.hpp"

namespace hcvt::metrics {

// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie). Dispatches to the
// pairwise count for n <= 10^4 and to the rank-sum formulation beyond.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Both routes exposed for the dual-route agreement check.
double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels);
double auc_ranksum(const std::vector<double>& scores, const std::vector<int>& labels);

struct PrecisionRecall {
    double precision = 0.0;  // NaN when undefined (no predicted positives)
    double recall = 0.0;
    bool precision_defined = true;
    long tp = 0, fp = 0, fn = 0, tn = 0;
};

// Scores equal to the threshold count as predicted positive.
PrecisionRecall precision_recall(const std::vector<double>& scores, const std::vector<int>& labels,
                                 double threshold = 0.5);

// Two-sided paired t-test over per-fold AUCs; identical inputs give p = 1.
double paired_pvalue(const std::vector<double>& auc_folds_a, const std::vector<double>& auc_folds_b);

// Student-t CDF helpers (regularized incomplete beta), exposed for tests.
double student_t_cdf(double t, int dof);
double regularized_incomplete_beta(double a, double b, double x);

struct MetricSummary {
    double auc_mean = 0.0, auc_std = 0.0;           // percent
    double precision_mean = 0.0, precision_std = 0.0;
    double recall_mean = 0.0, recall_std = 0.0;
};

struct FoldMetrics {
    double auc = 0.0;
    double precision = 0.0;  // NaN when undefined
    double recall = 0.0;
};

// Mean and sample (n-1) standard deviation, reported in percent. Folds with
// undefined precision are skipped for the precision column.
MetricSummary aggregate(const std::vector<FoldMetrics>& folds);

// mean/sample-std of raw values (not percent), shared by aggregate and tests.
std::pair<double, double> mean_sample_std(const std::vector<double>& v);

}  // namespace hcvt::metrics

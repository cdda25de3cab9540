#pragma once

// Volume preprocessing: depth uniformization via cubic-spline zoom (SIZ),
// per-slice bilinear resize, rotation augmentation, mixup, and clinical
// feature normalization.

#include <vector>

#include "hcvt/types.hpp"

namespace hcvt::preprocess {

// Depth-axis cubic B-spline zoom to target_depth slices (mirror boundary,
// endpoint-aligned coordinates). Identity (bit-exact) when the depth already
// matches. Spline order is fixed at 3.
Volume siz_resample(const Volume& v, int target_depth = 13);

// Per-slice bilinear resize to size x size (pixel-center alignment).
Volume resize_slices(const Volume& v, int size = 256);

// Rotate every slice by the same angle (degrees, CCW) about the slice
// center; bilinear sampling, zero fill outside.
Volume rotate(const Volume& v, double degrees);

// One angle ~ Uniform(-30, 30) degrees per volume. Training-time only.
Volume random_rotate(const Volume& v, Rng& rng);
inline constexpr double kMaxRotationDeg = 30.0;

// Per-volume min-max rescale to [0,1]; constant volumes map to all zeros.
Volume minmax_normalize(const Volume& v);

// Deterministic evaluation-path preprocessing: SIZ -> resize -> min-max.
Volume preprocess_eval(const Volume& v, int target_depth, int size);

// ---------------------------------------------------------------------------
// mixup
// ---------------------------------------------------------------------------
struct MixupResult {
    std::vector<Sample> mixed;
    double lambda = 1.0;
};

// lambda ~ Beta(alpha, alpha); inputs and labels mixed as l*A + (1-l)*B with
// the same lambda for every image branch and the clinical vector.
MixupResult mixup(const std::vector<Sample>& batch_a, const std::vector<Sample>& batch_b,
                  double alpha, Rng& rng);

// Deterministic core used by mixup once lambda is drawn.
Sample mix_samples(const Sample& a, const Sample& b, double lambda);

// ---------------------------------------------------------------------------
// Clinical features
// ---------------------------------------------------------------------------

// Means/stds of the continuous attributes over the given (training) records.
// A zero standard deviation is replaced by 1 and logged.
NormStats compute_norm_stats(const std::vector<ClinicalRecord>& train_records);

// Fixed slot order:
//   0 age (z-scored)        1 sex (M=0, F=1)   2 hospitalizations (z-scored)
//   3 tumor size (z-scored) 4 multiple lesions 5 t_stage / 5
//   6 grade
Eigen::VectorXd normalize_clinical(const ClinicalRecord& r, const NormStats& stats);

}  // namespace hcvt::preprocess

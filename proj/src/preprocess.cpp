#include "hcvt/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace hcvt::preprocess {

namespace {

constexpr double kPi = 3.14159265358979323846;

// -------------------------------------------------------------------------
// Cubic B-spline prefiltering (Unser's recursive algorithm, mirror boundary,
// exact initialization over the mirror-periodized signal).
// -------------------------------------------------------------------------

constexpr double kPole = -0.26794919243112270647;  // sqrt(3) - 2

double initial_causal(const std::vector<double>& c, double z) {
    const std::size_t n = c.size();
    double zn = z;
    const double iz = 1.0 / z;
    double z2n = std::pow(z, double(n - 1));
    double sum = c[0] + z2n * c[n - 1];
    z2n *= z2n * iz;
    for (std::size_t k = 1; k + 1 < n; ++k) {
        sum += (zn + z2n) * c[k];
        zn *= z;
        z2n *= iz;
    }
    return sum / (1.0 - zn * zn);
}

double initial_anticausal(const std::vector<double>& c, double z) {
    const std::size_t n = c.size();
    return (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
}

void to_spline_coeffs(std::vector<double>& c) {
    const std::size_t n = c.size();
    if (n < 2) return;
    const double lambda = 6.0;
    for (auto& v : c) v *= lambda;
    c[0] = initial_causal(c, kPole);
    for (std::size_t k = 1; k < n; ++k) c[k] += kPole * c[k - 1];
    c[n - 1] = initial_anticausal(c, kPole);
    for (std::size_t k = n - 1; k-- > 0;) c[k] = kPole * (c[k + 1] - c[k]);
}

int mirror_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

double eval_spline(const std::vector<double>& coeffs, double t) {
    const int n = int(coeffs.size());
    if (n == 1) return coeffs[0];
    const int base = int(std::floor(t));
    const double w = t - base;
    const double omw = 1.0 - w;
    const double w0 = omw * omw * omw / 6.0;
    const double w1 = 2.0 / 3.0 - w * w + 0.5 * w * w * w;
    const double w2 = 2.0 / 3.0 - omw * omw + 0.5 * omw * omw * omw;
    const double w3 = w * w * w / 6.0;
    return w0 * coeffs[mirror_index(base - 1, n)] + w1 * coeffs[mirror_index(base, n)] +
           w2 * coeffs[mirror_index(base + 1, n)] + w3 * coeffs[mirror_index(base + 2, n)];
}

float bilinear_sample(const float* slice, int h, int w, double y, double x) {
    const int y0 = int(std::floor(y));
    const int x0 = int(std::floor(x));
    const double fy = y - y0;
    const double fx = x - x0;
    auto px = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, h - 1);
        xx = std::clamp(xx, 0, w - 1);
        return double(slice[std::size_t(yy) * w + xx]);
    };
    const double top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
    const double bot = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
    return float(top * (1.0 - fy) + bot * fy);
}

}  // namespace

Volume siz_resample(const Volume& v, int target_depth) {
    if (target_depth < 1)
        throw contract_error(strfmt("siz_resample: target depth %d must be >= 1", target_depth));
    if (v.depth < 1) throw contract_error("siz_resample: input depth must be >= 1");
    if (v.depth == target_depth) return v;  // zoom factor 1: bit-exact identity

    Volume out(target_depth, v.height, v.width, v.sequence, v.patient_id);
    const std::size_t plane = std::size_t(v.height) * v.width;

    // output coordinate d maps to input coordinate d * (D-1)/(target-1)
    std::vector<double> coords(target_depth);
    if (target_depth == 1) {
        coords[0] = 0.5 * (v.depth - 1);
    } else {
        const double step = double(v.depth - 1) / double(target_depth - 1);
        for (int d = 0; d < target_depth; ++d) coords[d] = d * step;
    }

    std::vector<double> column(v.depth);
    for (std::size_t p = 0; p < plane; ++p) {
        for (int d = 0; d < v.depth; ++d) column[d] = v.voxels[std::size_t(d) * plane + p];
        to_spline_coeffs(column);
        for (int d = 0; d < target_depth; ++d)
            out.voxels[std::size_t(d) * plane + p] = float(eval_spline(column, coords[d]));
    }
    return out;
}

Volume resize_slices(const Volume& v, int size) {
    if (v.height < 16 || v.width < 16)
        throw contract_error(strfmt("resize_slices: input %dx%d too small", v.height, v.width));
    if (size < 1) throw contract_error("resize_slices: size must be >= 1");
    if (v.height == size && v.width == size) return v;

    Volume out(v.depth, size, size, v.sequence, v.patient_id);
    const double sy = double(v.height) / size;
    const double sx = double(v.width) / size;
    for (int d = 0; d < v.depth; ++d) {
        const float* src = v.slice(d);
        float* dst = out.slice(d);
        for (int y = 0; y < size; ++y) {
            const double yy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(v.height - 1));
            for (int x = 0; x < size; ++x) {
                const double xx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(v.width - 1));
                dst[std::size_t(y) * size + x] = bilinear_sample(src, v.height, v.width, yy, xx);
            }
        }
    }
    return out;
}

Volume rotate(const Volume& v, double degrees) {
    if (degrees == 0.0) return v;
    Volume out(v.depth, v.height, v.width, v.sequence, v.patient_id);
    const double rad = degrees * kPi / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cy = 0.5 * (v.height - 1);
    const double cx = 0.5 * (v.width - 1);
    for (int d = 0; d < v.depth; ++d) {
        const float* src = v.slice(d);
        float* dst = out.slice(d);
        for (int y = 0; y < v.height; ++y) {
            for (int x = 0; x < v.width; ++x) {
                // inverse mapping: rotate the output grid back into the source
                const double dy = y - cy, dx = x - cx;
                const double sy = c * dy + s * dx + cy;
                const double sx = -s * dy + c * dx + cx;
                float val = 0.0f;
                if (sy >= 0.0 && sy <= v.height - 1 && sx >= 0.0 && sx <= v.width - 1)
                    val = bilinear_sample(src, v.height, v.width, sy, sx);
                dst[std::size_t(y) * v.width + x] = val;
            }
        }
    }
    return out;
}

Volume random_rotate(const Volume& v, Rng& rng) {
    return rotate(v, rng.uniform(-kMaxRotationDeg, kMaxRotationDeg));
}

Volume minmax_normalize(const Volume& v) {
    float lo = v.voxels.empty() ? 0.0f : v.voxels[0];
    float hi = lo;
    for (float x : v.voxels) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Volume out = v;
    const float range = hi - lo;
    if (range <= 0.0f) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
        return out;
    }
    for (auto& x : out.voxels) x = (x - lo) / range;
    return out;
}

Volume preprocess_eval(const Volume& v, int target_depth, int size) {
    return minmax_normalize(resize_slices(siz_resample(v, target_depth), size));
}

Sample mix_samples(const Sample& a, const Sample& b, double lambda) {
    if (a.volumes.size() != b.volumes.size())
        throw contract_error("mixup: samples carry different sequence sets");
    if (a.clinical.size() != b.clinical.size())
        throw contract_error("mixup: clinical vector lengths differ");
    Sample out;
    out.patient_id = a.patient_id + "*" + b.patient_id;
    for (const auto& [seq, va] : a.volumes) {
        auto it = b.volumes.find(seq);
        if (it == b.volumes.end()) throw contract_error("mixup: sequence sets differ");
        const Volume& vb = it->second;
        if (va.depth != vb.depth || va.height != vb.height || va.width != vb.width)
            throw contract_error(strfmt("mixup: volume shapes differ for %s", to_string(seq)));
        Volume m = va;
        for (std::size_t i = 0; i < m.voxels.size(); ++i)
            m.voxels[i] = float(lambda * va.voxels[i] + (1.0 - lambda) * vb.voxels[i]);
        out.volumes.emplace(seq, std::move(m));
    }
    out.clinical = lambda * a.clinical + (1.0 - lambda) * b.clinical;
    out.label = lambda * a.label + (1.0 - lambda) * b.label;
    return out;
}

MixupResult mixup(const std::vector<Sample>& batch_a, const std::vector<Sample>& batch_b,
                  double alpha, Rng& rng) {
    if (batch_a.size() != batch_b.size())
        throw contract_error(strfmt("mixup: batch sizes %zu and %zu differ", batch_a.size(),
                                    batch_b.size()));
    MixupResult r;
    r.lambda = alpha > 0.0 ? rng.beta_symmetric(alpha) : 1.0;
    r.mixed.reserve(batch_a.size());
    for (std::size_t i = 0; i < batch_a.size(); ++i)
        r.mixed.push_back(mix_samples(batch_a[i], batch_b[i], r.lambda));
    return r;
}

NormStats compute_norm_stats(const std::vector<ClinicalRecord>& train_records) {
    if (train_records.empty()) throw contract_error("compute_norm_stats: empty training split");
    const double n = double(train_records.size());
    double sa = 0, sh = 0, st = 0;
    for (const auto& r : train_records) {
        sa += r.age;
        sh += r.hospitalizations;
        st += r.tumor_size_cm;
    }
    NormStats s;
    s.age_mean = sa / n;
    s.hosp_mean = sh / n;
    s.tumor_mean = st / n;
    double va = 0, vh = 0, vt = 0;
    for (const auto& r : train_records) {
        va += (r.age - s.age_mean) * (r.age - s.age_mean);
        vh += (r.hospitalizations - s.hosp_mean) * (r.hospitalizations - s.hosp_mean);
        vt += (r.tumor_size_cm - s.tumor_mean) * (r.tumor_size_cm - s.tumor_mean);
    }
    auto finish = [&](double acc, const char* fname) {
        const double sd = std::sqrt(acc / n);
        if (sd > 0.0) return sd;
        log_warn(strfmt("clinical feature %s has zero variance on the training split; std set to 1", fname));
        return 1.0;
    };
    s.age_std = finish(va, "age");
    s.hosp_std = finish(vh, "hospitalizations");
    s.tumor_std = finish(vt, "tumor_size");
    return s;
}

Eigen::VectorXd normalize_clinical(const ClinicalRecord& r, const NormStats& stats) {
    if (!std::isfinite(double(r.age)) || !std::isfinite(r.tumor_size_cm))
        throw contract_error("normalize_clinical: non-finite input");
    Eigen::VectorXd v(7);
    v[0] = (r.age - stats.age_mean) / stats.age_std;
    v[1] = r.sex_female ? 1.0 : 0.0;
    v[2] = (r.hospitalizations - stats.hosp_mean) / stats.hosp_std;
    v[3] = (r.tumor_size_cm - stats.tumor_mean) / stats.tumor_std;
    v[4] = r.multiple_lesions ? 1.0 : 0.0;
    v[5] = r.t_stage / 5.0;
    v[6] = r.grade_high ? 1.0 : 0.0;
    if (!v.allFinite()) throw contract_error("normalize_clinical: produced non-finite output");
    return v;
}

}  // namespace hcvt::preprocess

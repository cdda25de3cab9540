#pragma once

// Domain types shared across modules: MRI volumes, clinical records,
// normalization statistics.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hcvt/common.hpp"

namespace hcvt {

enum class Sequence { ADC, T2, DWI };

inline const std::array<Sequence, 3> kSequences = {Sequence::ADC, Sequence::T2, Sequence::DWI};

inline const char* to_string(Sequence s) {
    switch (s) {
        case Sequence::ADC: return "adc";
        case Sequence::T2: return "t2";
        case Sequence::DWI: return "dwi";
    }
    return "?";
}

Sequence sequence_from_string(const std::string& s);

// One MRI sequence for one patient, [depth][height][width] row-major.
struct Volume {
    std::vector<float> voxels;
    int depth = 0;
    int height = 0;
    int width = 0;
    Sequence sequence = Sequence::ADC;
    std::string patient_id;

    Volume() = default;
    Volume(int d, int h, int w, Sequence seq = Sequence::ADC, std::string pid = {})
        : voxels(std::size_t(d) * h * w, 0.0f), depth(d), height(h), width(w), sequence(seq), patient_id(std::move(pid)) {}

    std::size_t size() const { return voxels.size(); }
    float& at(int d, int h, int w) { return voxels[(std::size_t(d) * height + h) * width + w]; }
    float at(int d, int h, int w) const { return voxels[(std::size_t(d) * height + h) * width + w]; }
    const float* slice(int d) const { return voxels.data() + std::size_t(d) * height * width; }
    float* slice(int d) { return voxels.data() + std::size_t(d) * height * width; }
};

// The seven tabular attributes plus recurrence label.
struct ClinicalRecord {
    std::string patient_id;
    int age = 0;                 // years, [18, 100]
    bool sex_female = false;     // M -> false, F -> true
    int hospitalizations = 1;    // >= 1
    double tumor_size_cm = 0.0;  // (0, 15]
    bool multiple_lesions = false;
    int t_stage = 0;  // {0..5}
    bool grade_high = false;
    int label = 0;  // recurrence yes/no
};

void validate_clinical(const ClinicalRecord& r);

// Per-feature mean/std of the continuous clinical attributes, computed on the
// training split of the current fold. Zero std is replaced by 1 and logged.
struct NormStats {
    double age_mean = 0.0, age_std = 1.0;
    double hosp_mean = 0.0, hosp_std = 1.0;
    double tumor_mean = 0.0, tumor_std = 1.0;
};

// One model input: the three preprocessed sequences plus the normalized
// clinical vector and a (possibly soft) label.
struct Sample {
    std::string patient_id;
    std::map<Sequence, Volume> volumes;
    Eigen::VectorXd clinical;  // length 7, normalized
    double label = 0.0;
};

}  // namespace hcvt

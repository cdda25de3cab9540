#pragma once

// On-disk dataset format (MVOL1 raw + JSON sidecar), clinical CSV, dataset
// manifest, stratified k-fold splitting, and the synthetic data generator.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hcvt/types.hpp"

namespace hcvt::dataio {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// MVOL1 volume format: <seq>.json sidecar + <seq>.raw little-endian float32
// in [slice][row][col] order. Round-trip is bit-exact.
// ---------------------------------------------------------------------------

// Writes <dir>/<sequence>.json and <dir>/<sequence>.raw.
void write_volume(const fs::path& dir, const Volume& v);

// Reads a volume given the path of its .json sidecar.
Volume read_volume(const fs::path& sidecar_path);

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct VolumeShape {
    int depth = 0, height = 0, width = 0;
};

// Planted-lesion bounding box in raw (pre-preprocessing) voxel coordinates.
struct LesionBox {
    int d0 = 0, d1 = -1, y0 = 0, y1 = -1, x0 = 0, x1 = -1;
    bool empty() const { return d1 < d0; }
};

struct PatientEntry {
    std::string id;
    int label = 0;
    std::map<Sequence, VolumeShape> shapes;
    std::map<Sequence, LesionBox> lesions;  // positives only
};

struct DatasetManifest {
    fs::path root;
    std::vector<PatientEntry> patients;
    int native_size = 280;
    int depth_min = 13, depth_max = 60;
    std::uint64_t seed = 0;
    int positives = 0, negatives = 0;

    const PatientEntry& find(const std::string& id) const;
    std::vector<std::string> patient_ids() const;
};

void write_manifest(const DatasetManifest& m, const fs::path& path);
DatasetManifest read_manifest(const fs::path& path);

// Loads the manifest from <root>/manifest.json and wires up the root path.
DatasetManifest open_dataset(const fs::path& root);

// Reads the raw MVOL1 volume of one patient sequence.
Volume load_patient_volume(const DatasetManifest& m, const std::string& patient_id, Sequence seq);

// ---------------------------------------------------------------------------
// Clinical CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kClinicalHeader =
    "patient_id,age,sex,hospitalizations,tumor_size_cm,multiple_lesions,t_stage,grade,label";

std::vector<ClinicalRecord> load_clinical(const fs::path& csv_path);
void write_clinical(const std::vector<ClinicalRecord>& records, const fs::path& csv_path);

// ---------------------------------------------------------------------------
// Stratified k-fold split by patient
// ---------------------------------------------------------------------------

struct FoldPlan {
    int k = 5;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::string>> folds;  // partition of the patient ids

    // FNV hash over (k, seed, fold contents); used to assert paired runs.
    std::uint64_t hash() const;
};

FoldPlan kfold_split(const DatasetManifest& m, int k = 5, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    int n_patients = 100;
    double prevalence = 0.62;
    std::uint64_t seed = 0;
    bool tiny = false;   // 64x64 natives with depths in [8,24] instead of 280x280 / [13,60]
    bool force = false;  // allow writing into a non-empty directory

    int native_size() const { return tiny ? 64 : 280; }
    int depth_min() const { return tiny ? 8 : 13; }
    int depth_max() const { return tiny ? 24 : 60; }
};

// Per-patient clinical attributes with label-dependent shifts; exposed so the
// clinical signal can be calibrated without rendering volumes.
ClinicalRecord sample_clinical(const std::string& patient_id, int label, Rng& rng);

// Writes MVOL1 volumes + clinical.csv + manifest.json. Same seed -> byte
// identical tree. Exactly round(n * prevalence) positive labels.
DatasetManifest generate_synthetic(const GeneratorConfig& cfg, const fs::path& out_dir);

}  // namespace hcvt::dataio

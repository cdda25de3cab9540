#include "hcvt/dataio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hcvt::dataio {

using nlohmann::json;

namespace {

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw io_error(strfmt("cannot open %s for writing", p.string().c_str()));
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw io_error(strfmt("short write to %s", p.string().c_str()));
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw io_error(strfmt("cannot open %s", p.string().c_str()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json_file(const fs::path& p) {
    try {
        return json::parse(read_file(p));
    } catch (const json::parse_error& e) {
        throw io_error(strfmt("%s: malformed JSON (%s)", p.string().c_str(), e.what()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// MVOL1
// ---------------------------------------------------------------------------

void write_volume(const fs::path& dir, const Volume& v) {
    if (v.depth < 1 || v.height < 1 || v.width < 1)
        throw contract_error("write_volume: empty volume");
    if (v.voxels.size() != std::size_t(v.depth) * v.height * v.width)
        throw contract_error("write_volume: voxel count does not match dims");
    for (float x : v.voxels)
        if (!std::isfinite(x)) throw contract_error("write_volume: non-finite voxel");
    fs::create_directories(dir);
    json sidecar = {
        {"format", "MVOL1"},       {"sequence", to_string(v.sequence)},
        {"depth", v.depth},        {"height", v.height},
        {"width", v.width},        {"dtype", "float32"},
        {"byte_order", "little"},
    };
    const std::string name = to_string(v.sequence);
    write_file(dir / (name + ".json"), sidecar.dump(2) + "\n");
    static_assert(sizeof(float) == 4);
    std::string raw(reinterpret_cast<const char*>(v.voxels.data()), v.voxels.size() * 4);
    write_file(dir / (name + ".raw"), raw);
}

Volume read_volume(const fs::path& sidecar_path) {
    if (!fs::exists(sidecar_path))
        throw io_error(strfmt("missing sidecar %s", sidecar_path.string().c_str()));
    const json sc = parse_json_file(sidecar_path);
    for (const char* key : {"format", "sequence", "depth", "height", "width", "dtype", "byte_order"})
        if (!sc.contains(key))
            throw io_error(strfmt("%s: sidecar missing key '%s'", sidecar_path.string().c_str(), key));
    if (sc["format"] != "MVOL1")
        throw io_error(strfmt("%s: unsupported format '%s'", sidecar_path.string().c_str(),
                              sc["format"].get<std::string>().c_str()));
    if (sc["dtype"] != "float32")
        throw io_error(strfmt("%s: unsupported dtype '%s'", sidecar_path.string().c_str(),
                              sc["dtype"].get<std::string>().c_str()));
    if (sc["byte_order"] != "little")
        throw io_error(strfmt("%s: unsupported byte order", sidecar_path.string().c_str()));
    Volume v(sc["depth"].get<int>(), sc["height"].get<int>(), sc["width"].get<int>(),
             sequence_from_string(sc["sequence"].get<std::string>()));
    fs::path raw_path = sidecar_path;
    raw_path.replace_extension(".raw");
    const std::string raw = read_file(raw_path);
    if (raw.size() != v.voxels.size() * 4)
        throw io_error(strfmt("%s: raw payload has %zu bytes, header promises %zu",
                              raw_path.string().c_str(), raw.size(), v.voxels.size() * 4));
    std::memcpy(v.voxels.data(), raw.data(), raw.size());
    return v;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const PatientEntry& DatasetManifest::find(const std::string& id) const {
    for (const auto& p : patients)
        if (p.id == id) return p;
    throw io_error(strfmt("patient '%s' not present in manifest", id.c_str()));
}

std::vector<std::string> DatasetManifest::patient_ids() const {
    std::vector<std::string> ids;
    ids.reserve(patients.size());
    for (const auto& p : patients) ids.push_back(p.id);
    return ids;
}

namespace {

json shape_to_json(const VolumeShape& s) {
    return {{"depth", s.depth}, {"height", s.height}, {"width", s.width}};
}

json box_to_json(const LesionBox& b) {
    return {{"d0", b.d0}, {"d1", b.d1}, {"y0", b.y0}, {"y1", b.y1}, {"x0", b.x0}, {"x1", b.x1}};
}

LesionBox box_from_json(const json& j) {
    LesionBox b;
    b.d0 = j.at("d0").get<int>();
    b.d1 = j.at("d1").get<int>();
    b.y0 = j.at("y0").get<int>();
    b.y1 = j.at("y1").get<int>();
    b.x0 = j.at("x0").get<int>();
    b.x1 = j.at("x1").get<int>();
    return b;
}

}  // namespace

void write_manifest(const DatasetManifest& m, const fs::path& path) {
    json patients = json::array();
    for (const auto& p : m.patients) {
        json sequences;
        for (const auto& [seq, shape] : p.shapes) sequences[to_string(seq)] = shape_to_json(shape);
        json entry = {{"id", p.id}, {"label", p.label}, {"sequences", sequences}};
        if (!p.lesions.empty()) {
            json boxes;
            for (const auto& [seq, box] : p.lesions) boxes[to_string(seq)] = box_to_json(box);
            entry["lesion_boxes"] = boxes;
        }
        patients.push_back(entry);
    }
    json doc = {
        {"format_version", "hcvt-manifest-1"},
        {"n_patients", int(m.patients.size())},
        {"class_counts", {{"positive", m.positives}, {"negative", m.negatives}}},
        {"native_size", m.native_size},
        {"depth_range", {m.depth_min, m.depth_max}},
        {"seed", m.seed},
        {"patients", patients},
    };
    write_file(path, doc.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& path) {
    const json doc = parse_json_file(path);
    if (!doc.contains("format_version") || doc["format_version"] != "hcvt-manifest-1")
        throw io_error(strfmt("%s: not an hcvt-manifest-1 document", path.string().c_str()));
    DatasetManifest m;
    m.native_size = doc.at("native_size").get<int>();
    m.depth_min = doc.at("depth_range").at(0).get<int>();
    m.depth_max = doc.at("depth_range").at(1).get<int>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.positives = doc.at("class_counts").at("positive").get<int>();
    m.negatives = doc.at("class_counts").at("negative").get<int>();
    for (const auto& pj : doc.at("patients")) {
        PatientEntry p;
        p.id = pj.at("id").get<std::string>();
        p.label = pj.at("label").get<int>();
        for (const auto& [name, sj] : pj.at("sequences").items()) {
            VolumeShape s;
            s.depth = sj.at("depth").get<int>();
            s.height = sj.at("height").get<int>();
            s.width = sj.at("width").get<int>();
            p.shapes[sequence_from_string(name)] = s;
        }
        if (pj.contains("lesion_boxes"))
            for (const auto& [name, bj] : pj.at("lesion_boxes").items())
                p.lesions[sequence_from_string(name)] = box_from_json(bj);
        m.patients.push_back(std::move(p));
    }
    if (int(m.patients.size()) != doc.at("n_patients").get<int>())
        throw io_error(strfmt("%s: n_patients disagrees with patient list", path.string().c_str()));
    return m;
}

DatasetManifest open_dataset(const fs::path& root) {
    DatasetManifest m = read_manifest(root / "manifest.json");
    m.root = root;
    return m;
}

Volume load_patient_volume(const DatasetManifest& m, const std::string& patient_id, Sequence seq) {
    const PatientEntry& entry = m.find(patient_id);  // validates the id
    Volume v = read_volume(m.root / entry.id / (std::string(to_string(seq)) + ".json"));
    v.patient_id = patient_id;
    return v;
}

// ---------------------------------------------------------------------------
// Clinical CSV
// ---------------------------------------------------------------------------

void write_clinical(const std::vector<ClinicalRecord>& records, const fs::path& csv_path) {
    std::string out = std::string(kClinicalHeader) + "\n";
    for (const auto& r : records) {
        out += strfmt("%s,%d,%c,%d,%.2f,%d,%d,%d,%d\n", r.patient_id.c_str(), r.age,
                      r.sex_female ? 'F' : 'M', r.hospitalizations, r.tumor_size_cm,
                      r.multiple_lesions ? 1 : 0, r.t_stage, r.grade_high ? 1 : 0, r.label);
    }
    write_file(csv_path, out);
}

std::vector<ClinicalRecord> load_clinical(const fs::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw io_error(strfmt("cannot open %s", csv_path.string().c_str()));
    std::string line;
    if (!std::getline(in, line)) throw validation_error("clinical csv: empty file (header required)");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kClinicalHeader)
        throw validation_error(strfmt("clinical csv: bad header '%s'", line.c_str()));

    std::vector<ClinicalRecord> records;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 9)
            throw validation_error(strfmt("clinical csv line %d: expected 9 fields, got %zu", line_no,
                                          fields.size()));
        ClinicalRecord r;
        try {
            r.patient_id = fields[0];
            r.age = std::stoi(fields[1]);
            if (fields[2] == "M")
                r.sex_female = false;
            else if (fields[2] == "F")
                r.sex_female = true;
            else
                throw validation_error(strfmt("sex '%s' not in {M,F}", fields[2].c_str()));
            r.hospitalizations = std::stoi(fields[3]);
            r.tumor_size_cm = std::stod(fields[4]);
            r.multiple_lesions = std::stoi(fields[5]) != 0;
            r.t_stage = std::stoi(fields[6]);
            r.grade_high = std::stoi(fields[7]) != 0;
            r.label = std::stoi(fields[8]);
            validate_clinical(r);
        } catch (const validation_error& e) {
            throw validation_error(strfmt("clinical csv line %d: %s", line_no, e.what()));
        } catch (const std::exception& e) {
            throw validation_error(strfmt("clinical csv line %d: unparsable field (%s)", line_no,
                                          e.what()));
        }
        records.push_back(std::move(r));
    }
    return records;
}

// ---------------------------------------------------------------------------
// Stratified k-fold
// ---------------------------------------------------------------------------

std::uint64_t FoldPlan::hash() const {
    std::uint64_t h = fnv1a64(strfmt("k=%d seed=%llu", k, (unsigned long long)seed));
    for (const auto& fold : folds) {
        h = fnv1a64("|fold|", h);
        for (const auto& id : fold) h = fnv1a64(id + ";", h);
    }
    return h;
}

FoldPlan kfold_split(const DatasetManifest& m, int k, std::uint64_t seed) {
    if (k < 2) throw contract_error("kfold_split: k must be >= 2");
    std::vector<std::string> pos, neg;
    for (const auto& p : m.patients) (p.label == 1 ? pos : neg).push_back(p.id);
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    if (int(pos.size()) < k || int(neg.size()) < k)
        throw contract_error(strfmt("kfold_split: every class needs >= %d members (have %zu/%zu)", k,
                                    pos.size(), neg.size()));
    Rng rng(mix_seed(seed, "kfold"));
    auto shuffle = [&rng](std::vector<std::string>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
    };
    shuffle(pos);
    shuffle(neg);

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.assign(std::size_t(k), {});
    // deal positives then negatives with one continuing cursor so overall
    // fold sizes differ by at most one
    std::size_t cursor = 0;
    for (const auto& id : pos) plan.folds[cursor++ % k].push_back(id);
    for (const auto& id : neg) plan.folds[cursor++ % k].push_back(id);
    for (auto& fold : plan.folds) std::sort(fold.begin(), fold.end());
    return plan;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

ClinicalRecord sample_clinical(const std::string& patient_id, int label, Rng& rng) {
    ClinicalRecord r;
    r.patient_id = patient_id;
    r.label = label;
    const bool pos = label == 1;

    r.age = int(std::lround(rng.uniform(38.0, 83.0) + (pos ? 1.5 : -1.5)));
    r.age = std::clamp(r.age, 38, 83);
    r.sex_female = rng.bernoulli(0.25);

    // skewed count, positives hospitalized somewhat more often
    const double hosp_mean = pos ? 5.0 : 3.5;
    r.hospitalizations = 1 + int(std::floor(-hosp_mean * std::log(1.0 - rng.uniform())));
    r.hospitalizations = std::clamp(r.hospitalizations, 1, 42);

    r.tumor_size_cm = pos ? rng.uniform(0.7, 8.3) : rng.uniform(0.3, 6.5);
    r.tumor_size_cm = std::round(r.tumor_size_cm * 100.0) / 100.0;

    r.multiple_lesions = rng.bernoulli(pos ? 0.42 : 0.28);

    static const double t_neg[6] = {0.16, 0.28, 0.27, 0.17, 0.08, 0.04};
    static const double t_pos[6] = {0.08, 0.19, 0.26, 0.23, 0.15, 0.09};
    const double* dist = pos ? t_pos : t_neg;
    double u = rng.uniform(), acc = 0.0;
    r.t_stage = 5;
    for (int t = 0; t < 6; ++t) {
        acc += dist[t];
        if (u < acc) {
            r.t_stage = t;
            break;
        }
    }
    r.grade_high = rng.bernoulli(pos ? 0.58 : 0.40);
    return r;
}

namespace {

struct BladderGeometry {
    double cy, cx;    // shared spatial center
    double ry, rx;    // spatial radii
    double lesion_y, lesion_x, lesion_r;  // shared lesion position/size
};

BladderGeometry sample_geometry(int size, bool positive, Rng& rng) {
    BladderGeometry g{};
    g.cy = size * (0.5 + rng.uniform(-0.04, 0.04));
    g.cx = size * (0.5 + rng.uniform(-0.04, 0.04));
    g.ry = size * rng.uniform(0.24, 0.32);
    g.rx = size * rng.uniform(0.24, 0.32);
    if (positive) {
        const double phi = rng.uniform(0.0, 6.283185307179586);
        const double rad = rng.uniform(0.7, 0.95);
        g.lesion_y = g.cy + rad * g.ry * std::sin(phi);
        g.lesion_x = g.cx + rad * g.rx * std::cos(phi);
        g.lesion_r = size * rng.uniform(0.055, 0.085);
    }
    return g;
}

// separable box blur over (d, y, x), radius 1, three cheap passes
void box_blur(std::vector<float>& v, int d, int h, int w) {
    std::vector<float> tmp(v.size());
    auto idx = [h, w](int dd, int yy, int xx) { return (std::size_t(dd) * h + yy) * w + xx; };
    for (int axis = 0; axis < 3; ++axis) {
        for (int dd = 0; dd < d; ++dd)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    float acc = 0.0f;
                    int cnt = 0;
                    for (int o = -1; o <= 1; ++o) {
                        int ddo = dd + (axis == 0 ? o : 0);
                        int yyo = yy + (axis == 1 ? o : 0);
                        int xxo = xx + (axis == 2 ? o : 0);
                        if (ddo < 0 || ddo >= d || yyo < 0 || yyo >= h || xxo < 0 || xxo >= w) continue;
                        acc += v[idx(ddo, yyo, xxo)];
                        ++cnt;
                    }
                    tmp[idx(dd, yy, xx)] = acc / float(cnt);
                }
        std::swap(v, tmp);
    }
}

struct SequenceContrast {
    double background, interior, wall, lesion_delta;
};

SequenceContrast contrast_for(Sequence seq) {
    // urine: T2/ADC bright, DWI dark; lesion shows diffusion restriction
    switch (seq) {
        case Sequence::ADC: return {0.40, 0.72, 0.52, -0.34};
        case Sequence::T2: return {0.35, 0.85, 0.55, +0.14};
        case Sequence::DWI: return {0.28, 0.15, 0.40, +0.55};
    }
    return {0.4, 0.7, 0.5, 0.0};
}

Volume render_sequence(const std::string& pid, Sequence seq, int size, int depth, bool positive,
                       const BladderGeometry& g, Rng& rng, LesionBox& box_out) {
    Volume v(depth, size, size, seq, pid);
    const SequenceContrast con = contrast_for(seq);

    const double cz = depth * (0.5 + rng.uniform(-0.08, 0.08));
    const double rz = depth * rng.uniform(0.38, 0.48);
    // small per-sequence spatial jitter; structures are similar but unaligned
    const double jy = rng.uniform(-0.015, 0.015) * size;
    const double jx = rng.uniform(-0.015, 0.015) * size;

    // smoothed structural noise + fine sensor noise
    std::vector<float> smooth(v.size());
    for (auto& x : smooth) x = float(rng.normal(0.0, 1.0));
    box_blur(smooth, depth, size, size);

    for (int d = 0; d < depth; ++d) {
        const double pz = (d - cz) / rz;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double py = (y - (g.cy + jy)) / g.ry;
                const double px = (x - (g.cx + jx)) / g.rx;
                const double rho2 = px * px + py * py + pz * pz;
                double val = con.background;
                if (rho2 < 1.0) {
                    val = con.interior;
                    if (rho2 > 0.72) val = con.wall;  // rim band
                } else if (rho2 < 1.35) {
                    val = 0.5 * (con.background + con.wall);
                }
                val += 0.10 * smooth[(std::size_t(d) * size + y) * size + x];
                val += 0.02 * rng.normal(0.0, 1.0);
                v.at(d, y, x) = float(std::clamp(val, 0.0, 1.0));
            }
        }
    }

    if (positive) {
        // lesion: shared (y, x) location, independent depth position
        const double ld = depth * rng.uniform(0.32, 0.68);
        const double lr_d = std::max(1.6, 0.16 * depth);
        const double ly = g.lesion_y + jy, lx = g.lesion_x + jx;
        LesionBox box;
        bool any = false;
        for (int d = 0; d < depth; ++d) {
            const double pz = (d - ld) / lr_d;
            if (pz * pz >= 1.0) continue;
            for (int y = std::max(0, int(ly - g.lesion_r - 2)); y <= std::min(size - 1, int(ly + g.lesion_r + 2)); ++y) {
                for (int x = std::max(0, int(lx - g.lesion_r - 2)); x <= std::min(size - 1, int(lx + g.lesion_r + 2)); ++x) {
                    const double py = (y - ly) / g.lesion_r;
                    const double px = (x - lx) / g.lesion_r;
                    const double m = 1.0 - (px * px + py * py + pz * pz);
                    if (m <= 0.0) continue;
                    const double delta = con.lesion_delta * std::min(1.0, 1.6 * m);
                    const float before = v.at(d, y, x);
                    v.at(d, y, x) = float(std::clamp(double(before) + delta, 0.0, 1.0));
                    if (std::fabs(delta) > 0.02) {
                        if (!any) {
                            box.d0 = box.d1 = d;
                            box.y0 = box.y1 = y;
                            box.x0 = box.x1 = x;
                            any = true;
                        } else {
                            box.d0 = std::min(box.d0, d);
                            box.d1 = std::max(box.d1, d);
                            box.y0 = std::min(box.y0, y);
                            box.y1 = std::max(box.y1, y);
                            box.x0 = std::min(box.x0, x);
                            box.x1 = std::max(box.x1, x);
                        }
                    }
                }
            }
        }
        box_out = box;
    }
    return v;
}

}  // namespace

DatasetManifest generate_synthetic(const GeneratorConfig& cfg, const fs::path& out_dir) {
    if (cfg.n_patients < 10)
        throw contract_error(strfmt("generate_synthetic: need n >= 10, got %d", cfg.n_patients));
    if (cfg.prevalence < 0.0 || cfg.prevalence > 1.0)
        throw contract_error("generate_synthetic: prevalence outside [0,1]");
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !cfg.force)
        throw io_error(strfmt("output directory %s exists and is not empty (use force to overwrite)",
                              out_dir.string().c_str()));
    fs::create_directories(out_dir);

    const int n = cfg.n_patients;
    const int n_pos = int(std::lround(n * cfg.prevalence));

    // deterministic label assignment: n_pos ones, shuffled
    std::vector<int> labels(std::size_t(n), 0);
    for (int i = 0; i < n_pos; ++i) labels[std::size_t(i)] = 1;
    Rng label_rng(mix_seed(cfg.seed, "labels"));
    for (std::size_t i = labels.size(); i > 1; --i)
        std::swap(labels[i - 1], labels[std::size_t(label_rng.uniform_int(0, std::int64_t(i) - 1))]);

    DatasetManifest m;
    m.root = out_dir;
    m.native_size = cfg.native_size();
    m.depth_min = cfg.depth_min();
    m.depth_max = cfg.depth_max();
    m.seed = cfg.seed;
    m.positives = n_pos;
    m.negatives = n - n_pos;

    std::vector<ClinicalRecord> clinical;
    clinical.reserve(std::size_t(n));

    for (int i = 0; i < n; ++i) {
        const std::string pid = strfmt("p%04d", i);
        const int label = labels[std::size_t(i)];
        Rng patient_rng(mix_seed(mix_seed(cfg.seed, pid), "patient"));
        clinical.push_back(sample_clinical(pid, label, patient_rng));

        const BladderGeometry geom = sample_geometry(cfg.native_size(), label == 1, patient_rng);
        PatientEntry entry;
        entry.id = pid;
        entry.label = label;
        for (Sequence seq : kSequences) {
            Rng seq_rng(mix_seed(mix_seed(cfg.seed, pid), to_string(seq)));
            const int depth = int(seq_rng.uniform_int(cfg.depth_min(), cfg.depth_max()));
            LesionBox box;
            Volume v = render_sequence(pid, seq, cfg.native_size(), depth, label == 1, geom, seq_rng, box);
            write_volume(out_dir / pid, v);
            entry.shapes[seq] = {v.depth, v.height, v.width};
            if (label == 1 && !box.empty()) entry.lesions[seq] = box;
        }
        m.patients.push_back(std::move(entry));
    }

    write_clinical(clinical, out_dir / "clinical.csv");
    // manifest last: readers treat its presence as the commit point
    write_manifest(m, out_dir / "manifest.json");
    return m;
}

}  // namespace hcvt::dataio

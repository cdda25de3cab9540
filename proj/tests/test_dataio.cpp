#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "hcvt/dataio.hpp"
#include "hcvt/metrics.hpp"
#include "oracles.hpp"

using namespace hcvt;
namespace io = hcvt::dataio;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("hcvt_test_" + tag + "_" + std::to_string(std::uint64_t(::getpid())));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Volume random_volume(int d, int h, int w, Sequence seq, std::uint64_t seed) {
    Volume v(d, h, w, seq, "p");
    Rng rng(seed);
    for (auto& x : v.voxels) x = float(rng.uniform());
    return v;
}

// FNV hash of every regular file under root, keyed by relative path.
std::map<std::string, std::uint64_t> tree_hashes(const fs::path& root) {
    std::map<std::string, std::uint64_t> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        out[fs::relative(e.path(), root).string()] = fnv1a64(bytes);
    }
    return out;
}

}  // namespace

TEST_CASE("mvol1: round trip is bit exact") {
    TempDir tmp("mvol1");
    Volume v = random_volume(5, 9, 7, Sequence::DWI, 11);
    io::write_volume(tmp.path, v);
    Volume back = io::read_volume(tmp.path / "dwi.json");
    CHECK(back.voxels == v.voxels);
    CHECK(back.depth == 5);
    CHECK(back.height == 9);
    CHECK(back.width == 7);
    CHECK(back.sequence == Sequence::DWI);
}

TEST_CASE("mvol1: corrupt inputs produce descriptive IO errors") {
    TempDir tmp("mvol1bad");
    Volume v = random_volume(3, 4, 4, Sequence::ADC, 5);
    io::write_volume(tmp.path, v);

    CHECK_THROWS_AS(io::read_volume(tmp.path / "t2.json"), io_error);

    // truncate the raw payload
    fs::resize_file(tmp.path / "adc.raw", 10);
    CHECK_THROWS_WITH_AS(io::read_volume(tmp.path / "adc.json"), doctest::Contains("bytes"), io_error);

    // unsupported dtype
    io::write_volume(tmp.path, v);
    {
        std::ifstream in(tmp.path / "adc.json");
        std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        auto pos = s.find("float32");
        s.replace(pos, 7, "float64");
        std::ofstream out(tmp.path / "adc.json");
        out << s;
    }
    CHECK_THROWS_WITH_AS(io::read_volume(tmp.path / "adc.json"), doctest::Contains("dtype"), io_error);
}

TEST_CASE("clinical csv: round trip, validation, empty file") {
    TempDir tmp("csv");
    std::vector<ClinicalRecord> recs;
    Rng rng(2);
    for (int i = 0; i < 12; ++i) {
        ClinicalRecord r;
        r.patient_id = strfmt("p%04d", i);
        r.age = 40 + i;
        r.sex_female = i % 3 == 0;
        r.hospitalizations = 1 + i;
        r.tumor_size_cm = 0.5 + 0.25 * i;
        r.multiple_lesions = i % 2 == 0;
        r.t_stage = i % 6;
        r.grade_high = i % 4 == 0;
        r.label = i % 2;
        recs.push_back(r);
    }
    io::write_clinical(recs, tmp.path / "clinical.csv");
    auto back = io::load_clinical(tmp.path / "clinical.csv");
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].patient_id == recs[i].patient_id);
        CHECK(back[i].age == recs[i].age);
        CHECK(back[i].sex_female == recs[i].sex_female);
        CHECK(back[i].tumor_size_cm == doctest::Approx(recs[i].tumor_size_cm));
        CHECK(back[i].t_stage == recs[i].t_stage);
        CHECK(back[i].label == recs[i].label);
    }

    // bad t_stage names the row
    {
        std::ofstream out(tmp.path / "bad.csv");
        out << io::kClinicalHeader << "\n";
        out << "p0000,50,M,2,1.50,0,2,0,1\n";
        out << "p0001,50,M,2,1.50,0,7,0,1\n";
    }
    CHECK_THROWS_WITH_AS(io::load_clinical(tmp.path / "bad.csv"), doctest::Contains("line 3"),
                         validation_error);

    {
        std::ofstream out(tmp.path / "empty.csv");
        out << io::kClinicalHeader << "\n";
    }
    CHECK(io::load_clinical(tmp.path / "empty.csv").empty());

    {
        std::ofstream out(tmp.path / "hdr.csv");
        out << "patient,age\n";
    }
    CHECK_THROWS_AS(io::load_clinical(tmp.path / "hdr.csv"), validation_error);
}

namespace {

io::DatasetManifest paper_shaped_manifest() {
    io::DatasetManifest m;
    for (int i = 0; i < 346; ++i) {
        io::PatientEntry p;
        p.id = strfmt("p%04d", i);
        p.label = i < 215 ? 1 : 0;
        m.patients.push_back(p);
    }
    m.positives = 215;
    m.negatives = 131;
    return m;
}

}  // namespace

TEST_CASE("kfold: paper-shaped manifest gives balanced stratified folds") {
    io::DatasetManifest m = paper_shaped_manifest();
    io::FoldPlan plan = io::kfold_split(m, 5, 17);
    REQUIRE(plan.folds.size() == 5);

    std::multiset<std::size_t> sizes;
    std::set<std::string> seen;
    for (const auto& f : plan.folds) {
        sizes.insert(f.size());
        for (const auto& id : f) CHECK(seen.insert(id).second);  // disjoint
    }
    CHECK(seen.size() == 346);  // union covers everyone
    CHECK(sizes == std::multiset<std::size_t>({70, 69, 69, 69, 69}));

    const double global_ratio = 215.0 / 346.0;
    for (const auto& f : plan.folds) {
        int pos = 0;
        for (const auto& id : f)
            if (m.find(id).label == 1) ++pos;
        CHECK(std::fabs(double(pos) / double(f.size()) - global_ratio) <= 0.05);
    }

    // deterministic per seed, different across seeds
    CHECK(io::kfold_split(m, 5, 17).hash() == plan.hash());
    CHECK(io::kfold_split(m, 5, 18).hash() != plan.hash());

    io::DatasetManifest small;
    for (int i = 0; i < 12; ++i) {
        io::PatientEntry p;
        p.id = strfmt("p%04d", i);
        p.label = i < 3 ? 1 : 0;
        small.patients.push_back(p);
    }
    CHECK_THROWS_AS(io::kfold_split(small, 5, 0), contract_error);
}

TEST_CASE("generator: exact prevalence, determinism, manifest integrity") {
    TempDir tmp("gen");
    io::GeneratorConfig cfg;
    cfg.n_patients = 10;
    cfg.prevalence = 0.6;
    cfg.seed = 123;
    cfg.tiny = true;

    io::DatasetManifest m = io::generate_synthetic(cfg, tmp.path / "a");
    CHECK(m.positives == 6);
    CHECK(m.negatives == 4);
    CHECK(m.patients.size() == 10);

    // refuse to clobber without force
    CHECK_THROWS_AS(io::generate_synthetic(cfg, tmp.path / "a"), io_error);
    cfg.force = true;
    io::generate_synthetic(cfg, tmp.path / "a");
    cfg.force = false;

    // byte-identical across same-seed runs
    io::generate_synthetic(cfg, tmp.path / "b");
    CHECK(tree_hashes(tmp.path / "a") == tree_hashes(tmp.path / "b"));

    // a different seed changes the bytes
    cfg.seed = 124;
    io::generate_synthetic(cfg, tmp.path / "c");
    CHECK(tree_hashes(tmp.path / "a") != tree_hashes(tmp.path / "c"));

    // manifest reads back and every volume passes read_volume
    io::DatasetManifest back = io::open_dataset(tmp.path / "a");
    CHECK(back.patients.size() == 10);
    int lesioned = 0;
    for (const auto& p : back.patients) {
        for (Sequence seq : kSequences) {
            Volume v = io::load_patient_volume(back, p.id, seq);
            const auto& shape = p.shapes.at(seq);
            CHECK(v.depth == shape.depth);
            CHECK(v.depth >= 8);
            CHECK(v.depth <= 24);
            CHECK(v.height == 64);
            for (float x : v.voxels) {
                CHECK(x >= 0.0f);
                CHECK(x <= 1.0f);
            }
        }
        if (p.label == 1) {
            CHECK(!p.lesions.empty());
            ++lesioned;
            for (const auto& [seq, box] : p.lesions) {
                CHECK(!box.empty());
                CHECK(box.d1 < p.shapes.at(seq).depth);
            }
        } else {
            CHECK(p.lesions.empty());
        }
    }
    CHECK(lesioned == 6);

    // clinical rows align with manifest labels
    auto clin = io::load_clinical(tmp.path / "a" / "clinical.csv");
    REQUIRE(clin.size() == 10);
    for (const auto& r : clin) CHECK(r.label == back.find(r.patient_id).label);

    CHECK_THROWS_AS(io::generate_synthetic(io::GeneratorConfig{5}, tmp.path / "d"), contract_error);
}

TEST_CASE("generator: depth histogram spans the configured range") {
    TempDir tmp("gendepth");
    io::GeneratorConfig cfg;
    cfg.n_patients = 80;  // 240 depth draws
    cfg.seed = 9;
    cfg.tiny = true;
    io::DatasetManifest m = io::generate_synthetic(cfg, tmp.path / "d");
    int dmin = 1000, dmax = 0;
    for (const auto& p : m.patients)
        for (const auto& [seq, s] : p.shapes) {
            dmin = std::min(dmin, s.depth);
            dmax = std::max(dmax, s.depth);
        }
    CHECK(dmin == cfg.depth_min());
    CHECK(dmax == cfg.depth_max());
}

TEST_CASE("generator calibration: clinical-only logistic AUC in (0.6, 0.9)") {
    // fit a plain logistic regression (the independent oracle) on clinical
    // attributes sampled by the generator, n=400, 300 train / 100 held out
    Rng label_rng(31);
    std::vector<ClinicalRecord> recs;
    for (int i = 0; i < 400; ++i) {
        const int label = label_rng.bernoulli(0.62) ? 1 : 0;
        Rng rng(mix_seed(31, strfmt("p%04d", i)));
        recs.push_back(io::sample_clinical(strfmt("p%04d", i), label, rng));
    }
    // features: age, sex, hosp, size, multi, stage, grade (z-scored on train)
    auto featurize = [](const ClinicalRecord& r) {
        return std::vector<double>{double(r.age), r.sex_female ? 1.0 : 0.0,
                                   double(r.hospitalizations), r.tumor_size_cm,
                                   r.multiple_lesions ? 1.0 : 0.0, double(r.t_stage),
                                   r.grade_high ? 1.0 : 0.0};
    };
    const int n_train = 300;
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    for (const auto& r : recs) {
        xs.push_back(featurize(r));
        ys.push_back(r.label);
    }
    // z-score with train stats
    for (int j = 0; j < 7; ++j) {
        double mean = 0, var = 0;
        for (int i = 0; i < n_train; ++i) mean += xs[i][j];
        mean /= n_train;
        for (int i = 0; i < n_train; ++i) var += (xs[i][j] - mean) * (xs[i][j] - mean);
        const double sd = std::sqrt(var / n_train);
        for (auto& x : xs) x[j] = sd > 0 ? (x[j] - mean) / sd : 0.0;
    }
    std::vector<double> w(8, 0.0);  // last slot is the intercept
    for (int iter = 0; iter < 400; ++iter) {
        std::vector<double> grad(8, 0.0);
        for (int i = 0; i < n_train; ++i) {
            double z = w[7];
            for (int j = 0; j < 7; ++j) z += w[j] * xs[i][j];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double d = p - ys[i];
            for (int j = 0; j < 7; ++j) grad[j] += d * xs[i][j];
            grad[7] += d;
        }
        for (int j = 0; j < 8; ++j) w[j] -= 0.05 * grad[j] / n_train;
    }
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = n_train; i < xs.size(); ++i) {
        double z = w[7];
        for (int j = 0; j < 7; ++j) z += w[j] * xs[i][j];
        scores.push_back(1.0 / (1.0 + std::exp(-z)));
        labels.push_back(ys[i]);
    }
    const double auc = oracle::auc_bruteforce(scores, labels);
    MESSAGE("held-out clinical AUC = ", auc);
    CHECK(auc > 0.6);
    CHECK(auc < 0.9);
}

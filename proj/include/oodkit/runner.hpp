#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "oodkit/bundle.hpp"
#include "oodkit/detectors.hpp"
#include "oodkit/evidence.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/tuner.hpp"

namespace oodkit {

// ---------------------------------------------------------------------------
// Synthetic benchmark
//
// Isotropic unit-variance Gaussian clusters in D dimensions. Class c < K sits
// at separation * e_c; the linear head is the matching discriminant
// (W_c = head_scale * mu_c, b_c = -head_scale * |mu_c|^2 / 2).
//   csID: ID clusters translated by covariate_translate along a fixed random
//         unit vector and widened by (1 + covariate_scale).
//   nOOD: one cluster at nood_alignment * mu_0 + semantic_offset * e_K; the
//         offset is invisible to the head, so alignment > 1 yields logits more
//         confident than ID.
//   fOOD: one cluster at far_offset * e_{K+1}.
// Splits: train, val, test (ID), csid (test), nood_val, nood (test), food (test).

struct SynthSpec {
    std::string benchmark_name = "synthetic";
    std::uint64_t seed = 0;
    std::size_t dim = 16;
    std::size_t classes = 3;
    std::size_t n_train = 2000;
    std::size_t n_val = 500;
    std::size_t n_test = 2000;
    double separation = 4.0;
    double head_scale = 1.0;
    double covariate_translate = 0.0;
    double covariate_scale = 0.0;
    double semantic_offset = 6.0;
    double nood_alignment = 1.5;
    double far_offset = 20.0;
    std::optional<DropoutSpec> dropout = DropoutSpec{0.5, 15, 0};
    std::optional<Perturbation> perturbation = Perturbation{1000.0, 0.0014};
};

void validate_synth_spec(const SynthSpec& s);
// Strict: unknown keys and type mismatches are SchemaError. Absent keys keep
// their defaults.
SynthSpec synth_spec_from_json(const std::string& text);
nlohmann::json synth_spec_to_json(const SynthSpec& s);

BundleContents synth_benchmark(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// Records

// One (method, OOD test split) evaluation. Metrics are in [0, 1].
struct RecordRow {
    std::string benchmark;
    std::string method;  // tag
    std::string split;
    std::string group;  // csid, nood or food
    MetricRecord metrics;
    double classifier_f1 = NAN;  // macro F1 on the ID test split
    std::string params;          // canonical params JSON
};

std::string group_for_kind(SplitKind k);

std::string records_to_csv(const std::vector<RecordRow>& rows);
std::vector<RecordRow> records_from_csv(const std::string& text);

// ---------------------------------------------------------------------------
// Benchmark execution

enum class AdapterKind { recorded, linear_head };

struct BenchmarkConfig {
    std::filesystem::path bundle;
    std::vector<std::string> methods;
    std::optional<std::filesystem::path> grids;  // tune when present
    std::map<std::string, DetectorParams> params;  // fixed params, or the grid base
    std::map<std::string, std::string> groups;     // split id -> csid/nood/food override
    AdapterKind adapter = AdapterKind::recorded;
    std::size_t threads = 0;
};

// Strict JSON; relative paths resolve against `base_dir`.
BenchmarkConfig benchmark_config_from_json(const std::string& text, const std::filesystem::path& base_dir);

// Evidence and model access for one bundle. With AdapterKind::linear_head
// every split keeps its penultimate features as the model input.
class BenchmarkData {
public:
    BenchmarkData(FeatureBundle bundle, AdapterKind adapter);

    const FeatureBundle& bundle() const { return bundle_; }
    const ModelAdapter* adapter() const { return adapter_.get(); }
    const SplitData& split(const std::string& id) const;
    FitContext context() const;  // pooled nOOD validation splits

    std::vector<std::string> test_ood_splits() const;
    std::string group_of(const std::string& split, const std::map<std::string, std::string>& overrides) const;
    double classifier_f1() const;

private:
    FeatureBundle bundle_;
    std::unique_ptr<ModelAdapter> adapter_;
    std::map<std::string, SplitData> splits_;
    SplitData pooled_val_;
    std::string train_, val_, test_;
};

// Scores the ID test split and every OOD test split with each state.
std::vector<RecordRow> evaluate_states(const BenchmarkData& data, const std::vector<DetectorState>& states,
                                       const std::map<std::string, std::string>& groups = {},
                                       std::size_t threads = 0);

struct BenchmarkResult {
    std::vector<RecordRow> records;
    std::map<std::string, TuneResult> tuning;
    std::vector<DetectorState> states;
};

BenchmarkResult run_benchmark(const BenchmarkConfig& cfg);
BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, const BenchmarkData& data);

nlohmann::json tune_log_json(const std::string& method, const TuneResult& r);

// ---------------------------------------------------------------------------
// Aggregation and reports

// Per-dataset metrics for one method, in any consistent unit.
struct DatasetMetrics {
    std::string benchmark, method, family, group, dataset;
    double auroc = NAN, fpr95 = NAN, aupr_in = NAN, aupr_out = NAN;
};

struct BenchmarkGroups {
    double csid = NAN, nood = NAN, food = NAN;  // mean AUROC per group
    double nood_aupr_in = NAN, nood_aupr_out = NAN, nood_fpr95 = NAN;
};

struct Table1Row {
    std::string method, family;
    std::map<std::string, BenchmarkGroups> benchmarks;
    double mean_nood_auroc = NAN;
    double mean_aupr_in = NAN, mean_aupr_out = NAN;
    double aupr_h = NAN;
    double mean_fpr95 = NAN;
};

struct Table1 {
    std::vector<std::string> benchmarks;  // first-appearance order
    std::vector<Table1Row> rows;          // by mean nOOD AUROC, descending
    std::map<std::string, double> classifier_f1;
};

// Group means per benchmark, then the mean over benchmarks; the AUPR column
// is the harmonic mean of the cross-benchmark mean AUPR-IN and AUPR-OUT. A
// method lacking nOOD rows for any benchmark is SchemaError.
Table1 aggregate_table1(const std::vector<DatasetMetrics>& rows);

std::vector<DatasetMetrics> dataset_metrics(const std::vector<RecordRow>& records);
Table1 table_from_records(const std::vector<RecordRow>& records);

// Long-format supplementary fixture:
// benchmark,method,family,metric,group,dataset,value
struct SuppFixture {
    std::vector<DatasetMetrics> rows;
    std::map<std::string, double> classifier_f1;
};
SuppFixture parse_supp_fixture(const std::string& csv);

// Expected Table-1 columns: method, mean_nood_auroc, aupr_harmonic, mean_fpr95.
struct Table1Expected {
    std::string method;
    double mean_nood_auroc, aupr_h, mean_fpr95;
};
std::vector<Table1Expected> parse_table1_expected(const std::string& csv);

enum class ReportFormat { csv, md };
ReportFormat parse_report_format(const std::string& s);

// `scale` multiplies every metric before formatting (100 for [0, 1] inputs).
std::string render_table(const Table1& t, ReportFormat fmt, double scale);
std::string render_report(const std::vector<RecordRow>& records, ReportFormat fmt);

// Fixed two decimals, ties to even on the exact binary value.
std::string format_fixed2(double v);

}  // namespace oodkit

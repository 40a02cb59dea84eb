#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oodkit/csv.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/runner.hpp"
#include "support/scratch.hpp"

using namespace oodkit;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec(std::uint64_t seed = 1) {
    SynthSpec s;
    s.seed = seed;
    s.n_train = 300;
    s.n_val = 120;
    s.n_test = 200;
    return s;
}

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
    return out;
}

void drop_split(BundleContents& c, const std::string& id) {
    c.manifest.splits.erase(id);
    std::erase_if(c.tensors, [&](const auto& kv) { return kv.first.first == id; });
}

const RecordRow& find_record(const std::vector<RecordRow>& rows, const std::string& method, const std::string& split) {
    for (const auto& r : rows)
        if (r.method == method && r.split == split) return r;
    FAIL("no record for " << method << "/" << split);
    return rows.front();
}

double median(Vector v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const Table1Row& row_of(const Table1& t, const std::string& tag) {
    for (const auto& r : t.rows)
        if (r.method == tag) return r;
    FAIL("no row for " << tag);
    return t.rows.front();
}

}  // namespace

TEST_CASE("synth spec parsing and validation") {
    const SynthSpec d = synth_spec_from_json("{}");
    CHECK(d.dim == 16);
    CHECK(d.classes == 3);
    CHECK(d.dropout.has_value());

    const SynthSpec s = synth_spec_from_json(R"({"seed": 4, "dim": 8, "dropout": null, "far_offset": 30})");
    CHECK(s.seed == 4);
    CHECK(s.dim == 8);
    CHECK_FALSE(s.dropout.has_value());
    CHECK(synth_spec_from_json(synth_spec_to_json(s).dump()).far_offset == 30.0);

    const SynthSpec shipped = synth_spec_from_json(read_file("data/synth_default.json"));
    CHECK(synth_spec_to_json(shipped) == synth_spec_to_json(SynthSpec{}));

    CHECK_THROWS_AS(synth_spec_from_json(R"({"dims": 8})"), SchemaError);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"dim": "8"})"), SchemaError);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"dim": -1})"), SchemaError);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"seed": 1, "seed": 2})"), SchemaError);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"dim": 4})"), InvalidParam);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"far_offset": 5})"), InvalidParam);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"covariate_translate": 7})"), InvalidParam);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"covariate_scale": -0.5})"), InvalidParam);
    CHECK_THROWS_AS(synth_spec_from_json(R"({"classes": 1})"), InvalidParam);
}

TEST_CASE("synthetic bundles are reproducible") {
    Scratch dir("synth");
    write_bundle(synth_benchmark(small_spec(3)), dir.path() / "a");
    write_bundle(synth_benchmark(small_spec(3)), dir.path() / "b");
    write_bundle(synth_benchmark(small_spec(4)), dir.path() / "c");
    const auto a = dir_bytes(dir.path() / "a");
    CHECK(a == dir_bytes(dir.path() / "b"));
    CHECK(a != dir_bytes(dir.path() / "c"));

    const FeatureBundle b = FeatureBundle::open(dir.path() / "a");
    const Manifest& m = b.manifest();
    CHECK(m.num_classes == 3);
    CHECK(m.splits.size() == 7);
    CHECK(m.split("nood_val").phase == SplitPhase::val);
    CHECK(m.split("food").kind == SplitKind::far_ood);
    CHECK(m.split("csid").kind == SplitKind::csid);
    REQUIRE(b.head().has_value());
    validate_head(b);
    const SplitData csid = load_split(b, "csid");
    CHECK(csid.has_labels());
    CHECK(csid.dropout_logits.size() == 15);
    CHECK(load_split(b, "nood").labels.empty());
}

TEST_CASE("synthetic shifts at n = 2000") {
    SynthSpec spec;
    spec.seed = 2;
    const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(spec)), AdapterKind::linear_head);
    const FitContext ctx = data.context();
    std::vector<DetectorState> states;
    for (const char* tag : {"mds", "knn"}) states.push_back(make_detector(tag)->fit(ctx, {}));
    const auto rows = evaluate_states(data, states);
    for (const char* tag : {"mds", "knn"}) {
        CAPTURE(tag);
        CHECK(find_record(rows, tag, "food").metrics.auroc >= 0.99);
    }
    const double csid = find_record(rows, "mds", "csid").metrics.auroc;
    CHECK(csid >= 0.45);
    CHECK(csid <= 0.55);
}

TEST_CASE("larger covariate shift never raises median confidence") {
    for (const char* tag : {"mds", "residual", "knn"}) {
        CAPTURE(tag);
        double last = INFINITY;
        for (double shift : {1.0, 2.5, 4.0}) {
            SynthSpec spec;
            spec.seed = 6;
            spec.covariate_translate = shift;
            spec.dropout.reset();
            const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(spec)), AdapterKind::linear_head);
            DetectorParams p;
            p.dim = 8;
            const auto d = make_detector(tag);
            const DetectorState s = d->fit(data.context(), p);
            const double med = median(score_split(*d, s, data.split("csid"), data.adapter()));
            CHECK(med <= last);
            last = med;
        }
    }
}

TEST_CASE("benchmark runs are deterministic and complete") {
    Scratch dir("run");
    write_bundle(synth_benchmark(small_spec()), dir.path() / "bundle");
    write_file_atomic(dir.path() / "grids.json", R"({"knn": {"k": [1, 5, 25]}, "react": {"percentile": [85, 90, 95, 99]}})");
    const std::string cfg_text = R"({
        "bundle": "bundle",
        "methods": ["msp", "ebo", "mds", "knn", "react", "vim"],
        "grids": "grids.json",
        "params": {"vim": {"dim": 4}},
        "adapter": "linear_head"
    })";
    const BenchmarkConfig cfg = benchmark_config_from_json(cfg_text, dir.path());
    CHECK(cfg.bundle == dir.path() / "bundle");

    const BenchmarkResult a = run_benchmark(cfg);
    const BenchmarkResult b = run_benchmark(cfg);
    CHECK(a.records.size() == 6 * 3);
    CHECK(records_to_csv(a.records) == records_to_csv(b.records));
    CHECK(render_report(a.records, ReportFormat::md) == render_report(b.records, ReportFormat::md));
    CHECK(a.tuning.size() == 2);
    CHECK(a.tuning.at("react").log.size() == 4);
    CHECK(params_from_json(nlohmann::json::parse(find_record(a.records, "vim", "nood").params)).dim == 4);

    const Table1 t = table_from_records(a.records);
    CHECK(t.rows.size() == 6);
    for (std::size_t i = 1; i < t.rows.size(); ++i) CHECK(t.rows[i - 1].mean_nood_auroc >= t.rows[i].mean_nood_auroc);
}

TEST_CASE("single method, single OOD split") {
    BundleContents c = synth_benchmark(small_spec());
    for (const char* id : {"csid", "food"}) drop_split(c, id);
    const BenchmarkData data(FeatureBundle::from_contents(std::move(c)), AdapterKind::recorded);
    CHECK(data.test_ood_splits() == std::vector<std::string>{"nood"});
    const auto rows = evaluate_states(data, {make_detector("mls")->fit(data.context(), {})});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].group == "nood");
    CHECK(rows[0].metrics.n_id == 200);
    const Table1 t = table_from_records(rows);
    CHECK(t.rows.size() == 1);
    const std::string md = render_report(rows, ReportFormat::md);
    CHECK(std::count(md.begin(), md.end(), '\n') == 4);  // header, rule, F1, one method

    CHECK(evaluate_states(data, {make_detector("mls")->fit(data.context(), {})}, {{"nood", "food"}})[0].group == "food");
    CHECK_THROWS_AS(evaluate_states(data, {}, {{"nope", "food"}}), SchemaError);
    CHECK_THROWS_AS(evaluate_states(data, {}, {{"nood", "far"}}), SchemaError);
}

TEST_CASE("feature methods beat classification methods on the default instance") {
    const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(SynthSpec{})), AdapterKind::linear_head);
    std::vector<DetectorState> states;
    for (const auto& tag : detector_tags()) {
        DetectorParams p;
        p.dim = 8;
        states.push_back(make_detector(tag)->fit(data.context(), p));
    }
    const Table1 t = table_from_records(evaluate_states(data, states));
    double sum[2] = {0, 0};
    int n[2] = {0, 0};
    for (const auto& r : t.rows) {
        if (r.family == "hybrid") continue;
        const int f = r.family == "feature";
        sum[f] += r.mean_nood_auroc;
        ++n[f];
    }
    CHECK(n[0] == 9);
    CHECK(n[1] == 6);
    CHECK(sum[1] / n[1] > sum[0] / n[0]);
}

TEST_CASE("errors carry method and split") {
    const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(small_spec())), AdapterKind::recorded);
    BenchmarkConfig cfg;
    cfg.methods = {"odin"};
    DetectorParams p;
    p.temperature = 5.0;
    cfg.params["odin"] = p;
    try {
        run_benchmark(cfg, data);
        FAIL("expected a capability error");
    } catch (const CapabilityError& e) {
        CHECK(std::string(e.what()).rfind("[odin/fit] CapabilityError", 0) == 0);
    }

    // Fit with matching recorded perturbations, then score a split without them.
    BundleContents c = synth_benchmark(small_spec());
    const auto& roles = c.manifest.splits.at("food").tensors;
    CHECK(roles.count("perturbed_logits") == 1);
    c.manifest.splits.at("food").tensors.erase("perturbed_logits");
    c.manifest.splits.at("food").perturbation.reset();
    std::erase_if(c.tensors, [](const auto& kv) { return kv.first == TensorKey{"food", "perturbed_logits"}; });
    const BenchmarkData partial(FeatureBundle::from_contents(std::move(c)), AdapterKind::recorded);
    DetectorParams q;
    q.temperature = 1000.0;
    q.epsilon = 0.0014;
    const DetectorState s = make_detector("odin")->fit(partial.context(), q);
    try {
        evaluate_states(partial, {s});
        FAIL("expected a capability error");
    } catch (const CapabilityError& e) {
        CHECK(std::string(e.what()).find("[odin/food]") == 0);
    }
}

TEST_CASE("linear head adapter needs a head and one layer") {
    BundleContents c = synth_benchmark(small_spec());
    std::erase_if(c.tensors, [](const auto& kv) { return kv.first.first == kHeadSplit; });
    c.manifest.head.reset();
    CHECK_THROWS_AS(BenchmarkData(FeatureBundle::from_contents(c), AdapterKind::linear_head), CapabilityError);
    CHECK_NOTHROW(BenchmarkData(FeatureBundle::from_contents(c), AdapterKind::recorded));
}

TEST_CASE("benchmark config is strict") {
    const fs::path base = "/tmp/base";
    CHECK(benchmark_config_from_json(R"({"bundle": "/abs", "methods": ["mds"]})", base).bundle == "/abs");
    CHECK(benchmark_config_from_json(R"({"bundle": "b", "methods": ["all"]})", base).methods.size() == 24);
    CHECK_THROWS_AS(benchmark_config_from_json(R"({"bundle": "b", "methods": []})", base), SchemaError);
    CHECK_THROWS_AS(benchmark_config_from_json(R"({"bundle": "b", "methods": ["mds", "mds"]})", base), SchemaError);
    CHECK_THROWS_AS(benchmark_config_from_json(R"({"bundle": "b", "methods": ["nope"]})", base), InvalidParam);
    CHECK_THROWS_AS(benchmark_config_from_json(R"({"bundle": "b", "methods": ["mds"], "seed": 1})", base), SchemaError);
    CHECK_THROWS_AS(benchmark_config_from_json(R"({"bundle": "b", "methods": ["mds"], "adapter": "x"})", base),
                    SchemaError);
    CHECK_THROWS_AS(
        benchmark_config_from_json(R"({"bundle": "b", "methods": ["knn"], "params": {"knn": {"k": 0}}})", base),
        InvalidParam);
    CHECK_THROWS_AS(
        benchmark_config_from_json(R"({"bundle": "b", "methods": ["knn"], "groups": {"x": "ood"}})", base),
        SchemaError);
}

TEST_CASE("records CSV round trip") {
    const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(small_spec())), AdapterKind::linear_head);
    std::vector<DetectorState> states;
    for (const char* tag : {"gen", "she", "ash"}) states.push_back(make_detector(tag)->fit(data.context(), {}));
    const auto rows = evaluate_states(data, states);
    const std::string text = records_to_csv(rows);
    const auto back = records_from_csv(text);
    REQUIRE(back.size() == rows.size());
    CHECK(records_to_csv(back) == text);
    CHECK(back[0].metrics.auroc == rows[0].metrics.auroc);
    CHECK(back[0].params == rows[0].params);

    const std::string header = text.substr(0, text.find('\n') + 1);
    CHECK_THROWS_AS(records_from_csv("x\n"), SchemaError);
    CHECK_THROWS_AS(records_from_csv(header + "b,mds,feature,s,nood,0.5,0.5,0.5,0.5,0.5,10,10,nan\n"), SchemaError);
    CHECK_THROWS_AS(records_from_csv(header + "b,mds,hybrid,s,nood,0.5,0.5,0.5,0.5,0.5,10,10,nan,{}\n"), SchemaError);
    CHECK_THROWS_AS(records_from_csv(header + "b,mds,feature,s,ood,0.5,0.5,0.5,0.5,0.5,10,10,nan,{}\n"), SchemaError);
    CHECK_THROWS_AS(records_from_csv(header + "b,mds,feature,s,nood,1.5,0.5,0.5,0.5,0.5,10,10,nan,{}\n"), SchemaError);
    CHECK_THROWS_AS(records_from_csv(header + "b,mds,feature,s,nood,0.5,0.5,0.5,0.5,0.5,0,10,nan,{}\n"), SchemaError);
    CHECK_THROWS_AS(records_from_csv(header + "b,zzz,feature,s,nood,0.5,0.5,0.5,0.5,0.5,10,10,nan,{}\n"), InvalidParam);
    CHECK(records_from_csv(header + "b,mds,feature,s,nood,0.5,0.5,0.5,0.5,0.5,10,10,nan,{}\n").size() == 1);
}

TEST_CASE("Table-1 aggregation reproduces the published rows") {
    const SuppFixture fx = parse_supp_fixture(read_file("data/supp_tables.csv"));
    const Table1 t = aggregate_table1(fx.rows);
    const auto expected = parse_table1_expected(read_file("data/table1.csv"));
    CHECK(t.rows.size() == 24);
    CHECK(expected.size() == 24);
    CHECK(t.benchmarks == std::vector<std::string>{"MIDOG", "PHAKIR", "OASIS3"});
    for (const auto& e : expected) {
        CAPTURE(e.method);
        const Table1Row& r = row_of(t, e.method);
        CHECK(std::abs(r.mean_nood_auroc - e.mean_nood_auroc) <= 0.05);
        CHECK(std::abs(r.aupr_h - e.aupr_h) <= 0.05);
        CHECK(std::abs(r.mean_fpr95 - e.mean_fpr95) <= 0.05);
    }
    const Table1Row& ens = row_of(t, "mdsens");
    CHECK(format_fixed2(ens.mean_nood_auroc) == "96.14");
    CHECK(std::abs(ens.mean_fpr95 - 11.97) <= 0.05);
    CHECK(format_fixed2(ens.aupr_h) == "91.86");
    CHECK(format_fixed2(ens.benchmarks.at("MIDOG").nood) == "91.84");
    const Table1Row& dice = row_of(t, "dice");
    CHECK(format_fixed2(dice.mean_nood_auroc) == "44.54");
    CHECK(format_fixed2(dice.aupr_h) == "34.22");
    CHECK(format_fixed2(dice.mean_fpr95) == "92.83");
    CHECK(t.rows.front().method == "mdsens");
    CHECK(fx.classifier_f1.at("MIDOG") == 81.88);
}

TEST_CASE("aggregation of benchmark-level values") {
    // One dataset per benchmark: the benchmark means are the inputs themselves.
    std::vector<DatasetMetrics> rows{
        {"MIDOG", "mdsens", "feature", "nood", "m", 91.84, 25.38, 74.35, 99.14},
        {"PHAKIR", "mdsens", "feature", "nood", "p", 97.11, 10.54, 90.55, 94.31},
        {"OASIS3", "mdsens", "feature", "nood", "o", 99.46, 0.00, 94.96, 99.87},
    };
    const Table1Row r = aggregate_table1(rows).rows.at(0);
    CHECK(format_fixed2(r.mean_nood_auroc) == "96.14");
    CHECK(format_fixed2(r.mean_fpr95) == "11.97");
    CHECK(format_fixed2(r.mean_aupr_in) == "86.62");
    CHECK(format_fixed2(r.mean_aupr_out) == "97.77");
    CHECK(format_fixed2(r.aupr_h) == "91.86");
}

TEST_CASE("aggregation rejects incomplete input") {
    std::vector<DatasetMetrics> rows{
        {"A", "mds", "feature", "nood", "x", 0.9, 0.1, 0.8, 0.7},
        {"B", "mds", "feature", "csid", "y", 0.6, 0.1, 0.8, 0.7},
    };
    CHECK_THROWS_AS(aggregate_table1(rows), SchemaError);
    rows[1].group = "nood";
    const Table1 t = aggregate_table1(rows);
    CHECK(t.rows[0].mean_nood_auroc == doctest::Approx(0.75));
    CHECK(std::isnan(t.rows[0].benchmarks.at("A").csid));
    CHECK_THROWS_AS(aggregate_table1({}), InvalidInput);
    rows[1].family = "hybrid";
    CHECK_THROWS_AS(aggregate_table1(rows), SchemaError);

    const std::string h = "benchmark,method,family,metric,group,dataset,value\n";
    CHECK_THROWS_AS(parse_supp_fixture("a,b\n"), SchemaError);
    CHECK_THROWS_AS(parse_supp_fixture(h + "A,MDS,feature,auroc,nood,x,90\n"), SchemaError);
    CHECK_THROWS_AS(parse_supp_fixture(h + "A,MDS,hybrid,auroc,nood,x,90\n"), SchemaError);
    CHECK_THROWS_AS(parse_supp_fixture(h + "A,MDS,feature,aupr,nood,x,90\n"), SchemaError);
    CHECK_THROWS_AS(parse_supp_fixture(h + "A,MDS,feature,auroc,nood,x,abc\n"), SchemaError);
}

TEST_CASE("report rendering") {
    CHECK(format_fixed2(0.125) == "0.12");
    CHECK(format_fixed2(0.375) == "0.38");
    CHECK(format_fixed2(2.675) == "2.67");
    CHECK(format_fixed2(96.135) == "96.14");
    CHECK(format_fixed2(-0.001) == "0.00");
    CHECK(format_fixed2(NAN) == "-");
    CHECK(parse_report_format("md") == ReportFormat::md);
    CHECK_THROWS_AS(parse_report_format("html"), InvalidParam);
    CHECK_THROWS_AS(render_report({}, ReportFormat::md), InvalidInput);

    const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(small_spec())), AdapterKind::linear_head);
    std::vector<DetectorState> states;
    for (const char* tag : {"msp", "mds", "fdbd"}) states.push_back(make_detector(tag)->fit(data.context(), {}));
    const auto rows = evaluate_states(data, states);
    const std::string md = render_report(rows, ReportFormat::md);
    const std::string csv = render_report(rows, ReportFormat::csv);
    CHECK(md == render_report(records_from_csv(records_to_csv(rows)), ReportFormat::md));

    // Same cells in the same order.
    const auto csv_rows = parse_csv(csv);
    std::vector<std::vector<std::string>> md_rows;
    std::size_t start = 0;
    while (start < md.size()) {
        const std::size_t end = md.find('\n', start);
        std::string line = md.substr(start, end - start);
        start = end + 1;
        if (line.find("---") != std::string::npos) continue;
        std::vector<std::string> cells;
        std::size_t p = 1;
        while (p < line.size()) {
            const std::size_t q = line.find('|', p);
            cells.push_back(line.substr(p + 1, q - p - 2));
            p = q + 1;
        }
        md_rows.push_back(cells);
    }
    CHECK(md_rows == csv_rows);
    REQUIRE(csv_rows.size() == 5);
    CHECK(csv_rows[0].size() == 2 + 3 + 3);
    CHECK(csv_rows[1][0] == "Classifier F1");
    CHECK(csv_rows[2][0] == "MDS");
}

TEST_CASE("csv parser") {
    const auto rows = parse_csv("a,\"b,c\",\"d\"\"e\"\r\n\n,x\n\"multi\nline\",\n");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0] == std::vector<std::string>{"a", "b,c", "d\"e"});
    CHECK(rows[1] == std::vector<std::string>{"", "x"});
    CHECK(rows[2] == std::vector<std::string>{"multi\nline", ""});
    CHECK(csv_field("plain") == "plain");
    CHECK(csv_field("a\"b") == "\"a\"\"b\"");
    CHECK(parse_csv(csv_field("x,\"y\"\n")) == std::vector<std::vector<std::string>>{{"x,\"y\"\n"}});
    CHECK_THROWS_AS(parse_csv("\"open"), FormatError);
    CHECK_THROWS_AS(parse_csv("\"a\"b"), FormatError);
    CHECK_THROWS_AS(parse_csv("a\"b\""), FormatError);
    CHECK_THROWS_AS(parse_csv("a\rb"), FormatError);
    CHECK(std::isnan(parse_csv_double("nan", "v")));
    CHECK(parse_csv_double("1.5e-3", "v") == 0.0015);
    CHECK_THROWS_AS(parse_csv_double("1.5x", "v"), SchemaError);
    CHECK_THROWS_AS(parse_csv_double("inf", "v"), SchemaError);
    CHECK_THROWS_AS(parse_csv_double("", "v"), SchemaError);
}

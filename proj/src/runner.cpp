#include "oodkit/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "oodkit/csv.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/jsonio.hpp"
#include "oodkit/refmodel.hpp"
#include "oodkit/rng.hpp"

namespace oodkit {

using nlohmann::json;

namespace {

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string fmt17(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Strict object reader for the small config formats below.
class Fields {
public:
    Fields(const json& j, std::string what) : j_(j), what_(std::move(what)) {
        if (!j_.is_object()) throw SchemaError(what_ + " must be a JSON object");
    }
    void allow(std::initializer_list<const char*> keys) const {
        std::set<std::string> ok(keys.begin(), keys.end());
        for (const auto& [k, v] : j_.items())
            if (!ok.count(k)) throw SchemaError(what_ + ": unknown key '" + k + "'");
    }
    bool has(const char* k) const { return j_.contains(k); }
    const json& at(const char* k) const {
        if (!j_.contains(k)) throw SchemaError(what_ + ": missing key '" + std::string(k) + "'");
        return j_.at(k);
    }
    double real(const char* k) const {
        const json& v = at(k);
        if (!v.is_number()) throw SchemaError(what_ + "." + k + " must be a number");
        return v.get<double>();
    }
    std::uint64_t count(const char* k) const {
        const json& v = at(k);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            throw SchemaError(what_ + "." + k + " must be a nonnegative integer");
        return v.get<std::uint64_t>();
    }
    std::string text(const char* k) const {
        const json& v = at(k);
        if (!v.is_string()) throw SchemaError(what_ + "." + k + " must be a string");
        return v.get<std::string>();
    }

private:
    const json& j_;
    std::string what_;
};

// ---------------------------------------------------------------------------

Matrix draw_cluster(SplitMix64 rng, std::size_t n, std::size_t d, const std::function<Vector(std::size_t)>& mean,
                    double spread) {
    Matrix x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const Vector mu = mean(i);
        for (std::size_t j = 0; j < d; ++j) x(i, j) = f32(mu[j] + spread * rng.normal());
    }
    return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic benchmark

void validate_synth_spec(const SynthSpec& s) {
    auto bad = [](const std::string& m) { throw InvalidParam("synth spec: " + m); };
    if (s.benchmark_name.empty()) bad("benchmark_name must not be empty");
    if (s.classes < 2) bad("classes must be >= 2");
    if (s.dim < s.classes + 2) bad("dim must be >= classes + 2");
    if (s.n_train < 2 * s.classes) bad("n_train must give every class two samples");
    if (s.n_val < 1 || s.n_test < 1) bad("n_val and n_test must be >= 1");
    for (double v : {s.separation, s.head_scale})
        if (!(v > 0.0) || !std::isfinite(v)) bad("separation and head_scale must be > 0");
    for (double v : {s.covariate_translate, s.covariate_scale, s.semantic_offset, s.nood_alignment, s.far_offset})
        if (!(v >= 0.0) || !std::isfinite(v)) bad("shift magnitudes must be finite and >= 0");
    if (!(s.far_offset > s.semantic_offset && s.semantic_offset > s.covariate_translate))
        bad("offsets must satisfy far > semantic > covariate");
    if (s.dropout && (!(s.dropout->p >= 0.0 && s.dropout->p < 1.0) || s.dropout->times < 1))
        bad("dropout needs p in [0, 1) and times >= 1");
    if (s.perturbation && (!(s.perturbation->temperature > 0.0) || !(s.perturbation->epsilon >= 0.0)))
        bad("perturbation needs temperature > 0 and epsilon >= 0");
}

SynthSpec synth_spec_from_json(const std::string& text) {
    const json j = parse_strict_json(text, "synth spec");
    Fields f(j, "synth spec");
    f.allow({"benchmark_name", "seed", "dim", "classes", "n_train", "n_val", "n_test", "separation", "head_scale",
             "covariate_translate", "covariate_scale", "semantic_offset", "nood_alignment", "far_offset", "dropout",
             "perturbation"});
    SynthSpec s;
    if (f.has("benchmark_name")) s.benchmark_name = f.text("benchmark_name");
    if (f.has("seed")) s.seed = f.count("seed");
    if (f.has("dim")) s.dim = f.count("dim");
    if (f.has("classes")) s.classes = f.count("classes");
    if (f.has("n_train")) s.n_train = f.count("n_train");
    if (f.has("n_val")) s.n_val = f.count("n_val");
    if (f.has("n_test")) s.n_test = f.count("n_test");
    if (f.has("separation")) s.separation = f.real("separation");
    if (f.has("head_scale")) s.head_scale = f.real("head_scale");
    if (f.has("covariate_translate")) s.covariate_translate = f.real("covariate_translate");
    if (f.has("covariate_scale")) s.covariate_scale = f.real("covariate_scale");
    if (f.has("semantic_offset")) s.semantic_offset = f.real("semantic_offset");
    if (f.has("nood_alignment")) s.nood_alignment = f.real("nood_alignment");
    if (f.has("far_offset")) s.far_offset = f.real("far_offset");
    if (f.has("dropout")) {
        if (f.at("dropout").is_null()) {
            s.dropout.reset();
        } else {
            Fields d(f.at("dropout"), "synth spec.dropout");
            d.allow({"p", "times", "seed"});
            s.dropout = DropoutSpec{d.real("p"), d.count("times"), d.has("seed") ? d.count("seed") : 0};
        }
    }
    if (f.has("perturbation")) {
        if (f.at("perturbation").is_null()) {
            s.perturbation.reset();
        } else {
            Fields p(f.at("perturbation"), "synth spec.perturbation");
            p.allow({"temperature", "epsilon"});
            s.perturbation = Perturbation{p.real("temperature"), p.real("epsilon")};
        }
    }
    validate_synth_spec(s);
    return s;
}

json synth_spec_to_json(const SynthSpec& s) {
    json j;
    j["benchmark_name"] = s.benchmark_name;
    j["seed"] = s.seed;
    j["dim"] = s.dim;
    j["classes"] = s.classes;
    j["n_train"] = s.n_train;
    j["n_val"] = s.n_val;
    j["n_test"] = s.n_test;
    j["separation"] = s.separation;
    j["head_scale"] = s.head_scale;
    j["covariate_translate"] = s.covariate_translate;
    j["covariate_scale"] = s.covariate_scale;
    j["semantic_offset"] = s.semantic_offset;
    j["nood_alignment"] = s.nood_alignment;
    j["far_offset"] = s.far_offset;
    j["dropout"] = s.dropout ? json{{"p", s.dropout->p}, {"times", s.dropout->times}, {"seed", s.dropout->seed}}
                             : json(nullptr);
    j["perturbation"] = s.perturbation ? json{{"temperature", s.perturbation->temperature},
                                              {"epsilon", s.perturbation->epsilon}}
                                       : json(nullptr);
    return j;
}

BundleContents synth_benchmark(const SynthSpec& spec) {
    validate_synth_spec(spec);
    const std::size_t d = spec.dim, k = spec.classes;

    std::vector<Vector> mu(k, Vector(d, 0.0));
    for (std::size_t c = 0; c < k; ++c) mu[c][c] = spec.separation;
    ClassifierHead head{Matrix(k, d), Vector(k)};
    for (std::size_t c = 0; c < k; ++c) {
        head.weight(c, c) = f32(spec.head_scale * spec.separation);
        head.bias[c] = f32(-spec.head_scale * spec.separation * spec.separation / 2.0);
    }
    const LinearHeadModel model(head);

    const SplitMix64 root(spec.seed);
    Vector shift_dir(d);
    {
        SplitMix64 r = root.split(100);
        double norm = 0.0;
        for (double& v : shift_dir) {
            v = r.normal();
            norm += v * v;
        }
        for (double& v : shift_dir) v /= std::sqrt(norm);
    }
    auto class_mean = [&](std::size_t i) { return mu[i % k]; };
    auto csid_mean = [&](std::size_t i) {
        Vector m = mu[i % k];
        for (std::size_t j = 0; j < d; ++j) m[j] += spec.covariate_translate * shift_dir[j];
        return m;
    };
    auto nood_mean = [&](std::size_t) {
        Vector m(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) m[j] = spec.nood_alignment * mu[0][j];
        m[k] += spec.semantic_offset;
        return m;
    };
    auto food_mean = [&](std::size_t) {
        Vector m(d, 0.0);
        m[k + 1] = spec.far_offset;
        return m;
    };
    auto balanced_labels = [&](std::size_t n) {
        std::vector<std::int64_t> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int64_t>(i % k);
        return y;
    };

    struct Plan {
        const char* id;
        SplitKind kind;
        SplitPhase phase;
        std::size_t n;
        std::function<Vector(std::size_t)> mean;
        double spread;
        bool labelled;
    };
    const std::vector<Plan> plans{
        {"train", SplitKind::id_train, SplitPhase::train, spec.n_train, class_mean, 1.0, true},
        {"val", SplitKind::id_val, SplitPhase::val, spec.n_val, class_mean, 1.0, true},
        {"test", SplitKind::id_test, SplitPhase::test, spec.n_test, class_mean, 1.0, true},
        {"csid", SplitKind::csid, SplitPhase::test, spec.n_test, csid_mean, 1.0 + spec.covariate_scale, true},
        {"nood_val", SplitKind::near_ood, SplitPhase::val, spec.n_val, nood_mean, 1.0, false},
        {"nood", SplitKind::near_ood, SplitPhase::test, spec.n_test, nood_mean, 1.0, false},
        {"food", SplitKind::far_ood, SplitPhase::test, spec.n_test, food_mean, 1.0, false},
    };

    BundleContents c;
    c.manifest.benchmark_name = spec.benchmark_name;
    c.manifest.num_classes = k;
    c.manifest.layer_names = {"penultimate"};
    CaptureOptions opts;
    opts.dropout = spec.dropout;
    opts.perturbation = spec.perturbation;
    opts.keep_inputs = false;
    for (std::size_t p = 0; p < plans.size(); ++p) {
        const Plan& plan = plans[p];
        const Matrix x = draw_cluster(root.split(p + 1), plan.n, d, plan.mean, plan.spread);
        const SplitData s = capture_split(model, x, plan.labelled ? balanced_labels(plan.n) : std::vector<std::int64_t>{},
                                          plan.kind, plan.id, opts);
        add_split_to_bundle(c, s, plan.phase);
    }
    add_head_to_bundle(c, head);
    validate_manifest(c.manifest);
    return c;
}

// ---------------------------------------------------------------------------
// Records

std::string group_for_kind(SplitKind k) {
    switch (k) {
        case SplitKind::csid: return "csid";
        case SplitKind::near_ood: return "nood";
        case SplitKind::far_ood: return "food";
        default: throw InvalidParam("split kind " + to_string(k) + " has no OOD group");
    }
}

namespace {

const std::vector<std::string> kRecordHeader{"benchmark", "method",   "family",  "split", "group",
                                             "auroc",     "fpr95",    "aupr_in", "aupr_out", "aupr_h",
                                             "n_id",      "n_ood",    "classifier_f1", "params"};

void check_group(const std::string& g) {
    if (g != "csid" && g != "nood" && g != "food") throw SchemaError("group must be csid, nood or food, not '" + g + "'");
}

}  // namespace

std::string records_to_csv(const std::vector<RecordRow>& rows) {
    std::string out;
    for (std::size_t i = 0; i < kRecordHeader.size(); ++i) out += (i ? "," : "") + kRecordHeader[i];
    out += "\n";
    for (const RecordRow& r : rows) {
        const MetricRecord& m = r.metrics;
        const std::vector<std::string> cells{csv_field(r.benchmark),
                                             r.method,
                                             method_family(r.method),
                                             csv_field(r.split),
                                             r.group,
                                             fmt17(m.auroc),
                                             fmt17(m.fpr95),
                                             fmt17(m.aupr_in),
                                             fmt17(m.aupr_out),
                                             fmt17(m.aupr_h),
                                             std::to_string(m.n_id),
                                             std::to_string(m.n_ood),
                                             fmt17(r.classifier_f1),
                                             csv_field(r.params)};
        for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
        out += "\n";
    }
    return out;
}

std::vector<RecordRow> records_from_csv(const std::string& text) {
    const auto table = parse_csv(text);
    if (table.empty() || table.front() != kRecordHeader) throw SchemaError("records CSV header does not match");
    std::vector<RecordRow> out;
    for (std::size_t i = 1; i < table.size(); ++i) {
        const auto& c = table[i];
        const std::string where = "records row " + std::to_string(i);
        if (c.size() != kRecordHeader.size()) throw SchemaError(where + " has " + std::to_string(c.size()) + " cells");
        RecordRow r;
        r.benchmark = c[0];
        r.method = c[1];
        if (method_family(r.method) != c[2]) throw SchemaError(where + ": family does not match the method");
        r.split = c[3];
        r.group = c[4];
        check_group(r.group);
        r.metrics.auroc = parse_csv_double(c[5], where + " auroc");
        r.metrics.fpr95 = parse_csv_double(c[6], where + " fpr95");
        r.metrics.aupr_in = parse_csv_double(c[7], where + " aupr_in");
        r.metrics.aupr_out = parse_csv_double(c[8], where + " aupr_out");
        r.metrics.aupr_h = parse_csv_double(c[9], where + " aupr_h");
        const double nid = parse_csv_double(c[10], where + " n_id"), nood = parse_csv_double(c[11], where + " n_ood");
        if (!(nid >= 1 && nood >= 1) || nid != std::floor(nid) || nood != std::floor(nood))
            throw SchemaError(where + ": sample counts must be positive integers");
        r.metrics.n_id = static_cast<std::uint64_t>(nid);
        r.metrics.n_ood = static_cast<std::uint64_t>(nood);
        r.classifier_f1 = parse_csv_double(c[12], where + " classifier_f1");
        r.params = c[13];
        for (double v : {r.metrics.auroc, r.metrics.fpr95, r.metrics.aupr_in, r.metrics.aupr_out, r.metrics.aupr_h})
            if (!(v >= 0.0 && v <= 1.0)) throw SchemaError(where + ": metrics must lie in [0, 1]");
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark execution

BenchmarkConfig benchmark_config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
    const json j = parse_strict_json(text, "benchmark config");
    Fields f(j, "benchmark config");
    f.allow({"bundle", "methods", "grids", "params", "groups", "adapter", "threads"});
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    BenchmarkConfig cfg;
    cfg.bundle = resolve(f.text("bundle"));
    const json& methods = f.at("methods");
    if (!methods.is_array() || methods.empty()) throw SchemaError("benchmark config.methods must be a non-empty list");
    for (const auto& m : methods) {
        if (!m.is_string()) throw SchemaError("benchmark config.methods entries must be strings");
        const std::string tag = m.get<std::string>();
        if (tag == "all") {
            for (const auto& t : detector_tags()) cfg.methods.push_back(t);
            continue;
        }
        make_detector(tag);
        cfg.methods.push_back(tag);
    }
    std::set<std::string> seen;
    for (const auto& m : cfg.methods)
        if (!seen.insert(m).second) throw SchemaError("benchmark config lists '" + m + "' twice");
    if (f.has("grids")) cfg.grids = resolve(f.text("grids"));
    if (f.has("params")) {
        const json& p = f.at("params");
        if (!p.is_object()) throw SchemaError("benchmark config.params must map methods to params");
        for (const auto& [tag, v] : p.items()) {
            make_detector(tag);
            DetectorParams dp = params_from_json(v);
            validate_params(dp);
            cfg.params[tag] = dp;
        }
    }
    if (f.has("groups")) {
        const json& g = f.at("groups");
        if (!g.is_object()) throw SchemaError("benchmark config.groups must map split ids to groups");
        for (const auto& [id, v] : g.items()) {
            if (!v.is_string()) throw SchemaError("benchmark config.groups values must be strings");
            check_group(v.get<std::string>());
            cfg.groups[id] = v.get<std::string>();
        }
    }
    if (f.has("adapter")) {
        const std::string a = f.text("adapter");
        if (a == "recorded") cfg.adapter = AdapterKind::recorded;
        else if (a == "linear_head") cfg.adapter = AdapterKind::linear_head;
        else throw SchemaError("benchmark config.adapter must be recorded or linear_head");
    }
    if (f.has("threads")) cfg.threads = f.count("threads");
    return cfg;
}

BenchmarkData::BenchmarkData(FeatureBundle bundle, AdapterKind adapter) : bundle_(std::move(bundle)) {
    const Manifest& m = bundle_.manifest();
    train_ = single_split(m, SplitKind::id_train);
    val_ = single_split(m, SplitKind::id_val);
    test_ = single_split(m, SplitKind::id_test);
    for (const auto& [id, e] : m.splits) splits_.emplace(id, load_split(bundle_, id));

    if (adapter == AdapterKind::linear_head) {
        const auto head = bundle_.head();
        if (!head) throw CapabilityError("the linear_head adapter needs a bundle with a classifier head");
        if (m.layer_names.size() != 1)
            throw CapabilityError("the linear_head adapter treats the only layer as input; bundle has " +
                                  std::to_string(m.layer_names.size()) + " layers");
        adapter_ = std::make_unique<LinearHeadModel>(*head, m.penultimate());
        for (auto& [id, s] : splits_) s.inputs = s.penultimate();
    } else {
        adapter_ = std::make_unique<RecordedAdapter>(bundle_);
    }

    std::vector<const SplitData*> parts;
    for (const auto& id : splits_of(m, SplitKind::near_ood, SplitPhase::val)) parts.push_back(&splits_.at(id));
    if (!parts.empty()) pooled_val_ = concat_splits(parts, "ood_val");
}

const SplitData& BenchmarkData::split(const std::string& id) const {
    auto it = splits_.find(id);
    if (it == splits_.end()) throw SchemaError("bundle has no split '" + id + "'");
    return it->second;
}

FitContext BenchmarkData::context() const {
    FitContext ctx;
    ctx.id_train = &splits_.at(train_);
    ctx.id_val = &splits_.at(val_);
    ctx.ood_val = &pooled_val_;
    ctx.head = bundle_.head();
    ctx.adapter = adapter_.get();
    ctx.num_classes = bundle_.manifest().num_classes;
    return ctx;
}

std::vector<std::string> BenchmarkData::test_ood_splits() const {
    std::vector<std::string> out;
    for (const auto& [id, e] : bundle_.manifest().splits)
        if (e.phase == SplitPhase::test && !is_id_kind(e.kind)) out.push_back(id);
    return out;
}

std::string BenchmarkData::group_of(const std::string& split,
                                    const std::map<std::string, std::string>& overrides) const {
    auto it = overrides.find(split);
    if (it != overrides.end()) return it->second;
    return group_for_kind(bundle_.manifest().split(split).kind);
}

double BenchmarkData::classifier_f1() const {
    const SplitData& t = splits_.at(test_);
    if (!t.has_labels() || t.size() == 0) return NAN;
    std::vector<std::int64_t> pred(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto f = t.logits.row(i);
        pred[i] = std::max_element(f.begin(), f.end()) - f.begin();
    }
    return f1_macro(pred, t.labels, static_cast<std::int64_t>(bundle_.manifest().num_classes));
}

std::vector<RecordRow> evaluate_states(const BenchmarkData& data, const std::vector<DetectorState>& states,
                                       const std::map<std::string, std::string>& groups, std::size_t threads) {
    for (const auto& [id, g] : groups) {
        data.split(id);
        check_group(g);
    }
    const std::vector<std::string> ood = data.test_ood_splits();
    if (ood.empty()) throw SchemaError("bundle has no OOD test splits");
    const SplitData& id_test = data.split(single_split(data.bundle().manifest(), SplitKind::id_test));
    const double f1 = data.classifier_f1();

    std::vector<RecordRow> rows;
    for (const DetectorState& s : states) {
        const auto d = make_detector(s.method);
        std::string where = s.method + "/" + id_test.id;
        try {
            const Vector id_scores = score_split(*d, s, id_test, data.adapter(), threads);
            for (const auto& split : ood) {
                where = s.method + "/" + split;
                const Vector ood_scores = score_split(*d, s, data.split(split), data.adapter(), threads);
                RecordRow r;
                r.benchmark = data.bundle().manifest().benchmark_name;
                r.method = s.method;
                r.split = split;
                r.group = data.group_of(split, groups);
                r.metrics = evaluate(id_scores, ood_scores);
                r.classifier_f1 = f1;
                r.params = params_to_json(s.params).dump();
                rows.push_back(std::move(r));
            }
        } catch (Error& e) {
            e.prefix("[" + where + "] ");
            throw;
        }
    }
    return rows;
}

BenchmarkResult run_benchmark(const BenchmarkConfig& cfg) {
    const BenchmarkData data(FeatureBundle::open(cfg.bundle), cfg.adapter);
    return run_benchmark(cfg, data);
}

BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, const BenchmarkData& data) {
    if (cfg.methods.empty()) throw InvalidParam("no methods to run");
    std::optional<nlohmann::ordered_json> grids;
    if (cfg.grids) {
        grids = parse_strict_json<nlohmann::ordered_json>(read_file(*cfg.grids), "grid file");
        if (!grids->is_object()) throw SchemaError("grid file must map methods to grids");
    }
    const FitContext ctx = data.context();
    BenchmarkResult out;
    for (const auto& tag : cfg.methods) {
        const auto d = make_detector(tag);
        const auto pit = cfg.params.find(tag);
        const DetectorParams base = pit == cfg.params.end() ? DetectorParams{} : pit->second;
        try {
            if (grids && grids->contains(tag)) {
                const HyperGrid g = expand_grid(tag, grids->at(tag), base);
                TuneOptions opts;
                opts.threads = cfg.threads;
                TuneResult r = tune(*d, g, ctx, opts);
                out.states.push_back(r.refit_state);
                out.tuning.emplace(tag, std::move(r));
            } else {
                out.states.push_back(d->fit(ctx, base));
            }
        } catch (Error& e) {
            e.prefix("[" + tag + "/fit] ");
            throw;
        }
    }
    out.records = evaluate_states(data, out.states, cfg.groups, cfg.threads);
    return out;
}

json tune_log_json(const std::string& method, const TuneResult& r) {
    json points = json::array();
    for (const TunePoint& p : r.log) {
        json e;
        e["params"] = params_to_json(p.params);
        e["val_auroc"] = std::isnan(p.val_auroc) ? json(nullptr) : json(p.val_auroc);
        if (!p.skipped.empty()) e["skipped"] = p.skipped;
        points.push_back(std::move(e));
    }
    json j;
    j["method"] = method;
    j["best_index"] = r.best_index;
    j["best_params"] = params_to_json(r.best_params);
    j["best_val_auroc"] = r.best_val_auroc;
    j["points"] = std::move(points);
    return j;
}

// ---------------------------------------------------------------------------
// Aggregation

namespace {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return NAN;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

Table1 aggregate_table1(const std::vector<DatasetMetrics>& rows) {
    Table1 t;
    std::vector<std::string> methods;
    std::map<std::string, std::string> family;
    // method -> benchmark -> group -> per-dataset values
    struct Acc {
        std::vector<double> auroc, fpr95, aupr_in, aupr_out;
    };
    std::map<std::string, std::map<std::string, std::map<std::string, Acc>>> acc;
    for (const DatasetMetrics& r : rows) {
        check_group(r.group);
        if (std::find(t.benchmarks.begin(), t.benchmarks.end(), r.benchmark) == t.benchmarks.end())
            t.benchmarks.push_back(r.benchmark);
        if (!family.count(r.method)) {
            methods.push_back(r.method);
            family[r.method] = r.family;
        } else if (family[r.method] != r.family) {
            throw SchemaError("method " + r.method + " appears with two families");
        }
        Acc& a = acc[r.method][r.benchmark][r.group];
        a.auroc.push_back(r.auroc);
        a.fpr95.push_back(r.fpr95);
        a.aupr_in.push_back(r.aupr_in);
        a.aupr_out.push_back(r.aupr_out);
    }
    if (methods.empty()) throw InvalidInput("no metric rows to aggregate");

    for (const auto& m : methods) {
        Table1Row row;
        row.method = m;
        row.family = family[m];
        std::vector<double> nood, ain, aout, fpr;
        for (const auto& b : t.benchmarks) {
            const auto& groups = acc[m][b];
            auto g = groups.find("nood");
            if (g == groups.end()) throw SchemaError("method " + m + " has no nOOD rows for benchmark " + b);
            BenchmarkGroups bg;
            if (auto c = groups.find("csid"); c != groups.end()) bg.csid = mean_of(c->second.auroc);
            if (auto f = groups.find("food"); f != groups.end()) bg.food = mean_of(f->second.auroc);
            bg.nood = mean_of(g->second.auroc);
            bg.nood_aupr_in = mean_of(g->second.aupr_in);
            bg.nood_aupr_out = mean_of(g->second.aupr_out);
            bg.nood_fpr95 = mean_of(g->second.fpr95);
            nood.push_back(bg.nood);
            ain.push_back(bg.nood_aupr_in);
            aout.push_back(bg.nood_aupr_out);
            fpr.push_back(bg.nood_fpr95);
            row.benchmarks[b] = bg;
        }
        row.mean_nood_auroc = mean_of(nood);
        row.mean_aupr_in = mean_of(ain);
        row.mean_aupr_out = mean_of(aout);
        row.aupr_h = harmonic_aupr(row.mean_aupr_in, row.mean_aupr_out);
        row.mean_fpr95 = mean_of(fpr);
        t.rows.push_back(std::move(row));
    }
    std::stable_sort(t.rows.begin(), t.rows.end(), [](const Table1Row& a, const Table1Row& b) {
        if (a.mean_nood_auroc != b.mean_nood_auroc) return a.mean_nood_auroc > b.mean_nood_auroc;
        return a.method < b.method;
    });
    return t;
}

std::vector<DatasetMetrics> dataset_metrics(const std::vector<RecordRow>& records) {
    std::vector<DatasetMetrics> out;
    for (const RecordRow& r : records) {
        DatasetMetrics d;
        d.benchmark = r.benchmark;
        d.method = r.method;
        d.family = method_family(r.method);
        d.group = r.group;
        d.dataset = r.split;
        d.auroc = r.metrics.auroc;
        d.fpr95 = r.metrics.fpr95;
        d.aupr_in = r.metrics.aupr_in;
        d.aupr_out = r.metrics.aupr_out;
        out.push_back(std::move(d));
    }
    return out;
}

Table1 table_from_records(const std::vector<RecordRow>& records) {
    Table1 t = aggregate_table1(dataset_metrics(records));
    for (const RecordRow& r : records)
        if (!std::isnan(r.classifier_f1) && !t.classifier_f1.count(r.benchmark))
            t.classifier_f1[r.benchmark] = r.classifier_f1;
    return t;
}

SuppFixture parse_supp_fixture(const std::string& csv) {
    const auto table = parse_csv(csv);
    const std::vector<std::string> header{"benchmark", "method", "family", "metric", "group", "dataset", "value"};
    if (table.empty() || table.front() != header) throw SchemaError("fixture header does not match");
    SuppFixture fx;
    std::vector<std::tuple<std::string, std::string, std::string, std::string>> order;
    std::map<std::tuple<std::string, std::string, std::string, std::string>, DatasetMetrics> pivot;
    for (std::size_t i = 1; i < table.size(); ++i) {
        const auto& c = table[i];
        const std::string where = "fixture row " + std::to_string(i);
        if (c.size() != header.size()) throw SchemaError(where + " has " + std::to_string(c.size()) + " cells");
        const double value = parse_csv_double(c[6], where + " value");
        if (c[3] == "f1") {
            if (fx.classifier_f1.count(c[0])) throw SchemaError(where + ": duplicate F1 for " + c[0]);
            fx.classifier_f1[c[0]] = value;
            continue;
        }
        const std::string tag = tag_from_name(c[1]);
        if (method_family(tag) != c[2]) throw SchemaError(where + ": " + c[1] + " is not a " + c[2] + " method");
        check_group(c[4]);
        const auto key = std::make_tuple(c[0], tag, c[4], c[5]);
        auto [it, fresh] = pivot.try_emplace(key);
        if (fresh) {
            order.push_back(key);
            it->second = DatasetMetrics{c[0], tag, c[2], c[4], c[5]};
        }
        double* slot = nullptr;
        if (c[3] == "auroc") slot = &it->second.auroc;
        else if (c[3] == "fpr95") slot = &it->second.fpr95;
        else if (c[3] == "aupr_in") slot = &it->second.aupr_in;
        else if (c[3] == "aupr_out") slot = &it->second.aupr_out;
        else throw SchemaError(where + ": unknown metric '" + c[3] + "'");
        if (!std::isnan(*slot)) throw SchemaError(where + ": duplicate " + c[3] + " value");
        *slot = value;
    }
    for (const auto& key : order) {
        const DatasetMetrics& d = pivot.at(key);
        if (std::isnan(d.auroc) || std::isnan(d.fpr95) || std::isnan(d.aupr_in) || std::isnan(d.aupr_out))
            throw SchemaError("fixture lacks a metric for " + d.benchmark + "/" + d.method + "/" + d.dataset);
        fx.rows.push_back(d);
    }
    return fx;
}

std::vector<Table1Expected> parse_table1_expected(const std::string& csv) {
    const auto table = parse_csv(csv);
    if (table.empty()) throw SchemaError("expected-table CSV is empty");
    const auto& h = table.front();
    auto col = [&](const std::string& name) {
        auto it = std::find(h.begin(), h.end(), name);
        if (it == h.end()) throw SchemaError("expected-table CSV lacks column '" + name + "'");
        return static_cast<std::size_t>(it - h.begin());
    };
    const std::size_t cm = col("method"), ca = col("mean_nood_auroc"), ch = col("aupr_harmonic"), cf = col("mean_fpr95");
    std::vector<Table1Expected> out;
    for (std::size_t i = 1; i < table.size(); ++i) {
        const auto& c = table[i];
        if (c.size() != h.size()) throw SchemaError("expected-table row " + std::to_string(i) + " is ragged");
        out.push_back({tag_from_name(c[cm]), parse_csv_double(c[ca], "mean_nood_auroc"),
                       parse_csv_double(c[ch], "aupr_harmonic"), parse_csv_double(c[cf], "mean_fpr95")});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rendering

ReportFormat parse_report_format(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "md") return ReportFormat::md;
    throw InvalidParam("report format must be csv or md");
}

std::string format_fixed2(double v) {
    if (std::isnan(v)) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s = buf;
    if (s == "-0.00") s = "0.00";
    return s;
}

std::string render_table(const Table1& t, ReportFormat fmt, double scale) {
    std::vector<std::string> header{"Method", "Family"};
    for (const auto& b : t.benchmarks) {
        header.push_back(b + " csID");
        header.push_back(b + " nOOD");
        header.push_back(b + " fOOD");
    }
    header.insert(header.end(), {"nOOD AUROC", "AUPR", "FPR@95"});

    std::vector<std::vector<std::string>> body;
    if (!t.classifier_f1.empty()) {
        std::vector<std::string> r{"Classifier F1", "-"};
        for (const auto& b : t.benchmarks) {
            auto it = t.classifier_f1.find(b);
            r.push_back("-");
            r.push_back(it == t.classifier_f1.end() ? "-" : format_fixed2(it->second * scale));
            r.push_back("-");
        }
        r.insert(r.end(), {"-", "-", "-"});
        body.push_back(std::move(r));
    }
    for (const Table1Row& row : t.rows) {
        std::vector<std::string> r{display_name(row.method), row.family};
        for (const auto& b : t.benchmarks) {
            const BenchmarkGroups& g = row.benchmarks.at(b);
            for (double v : {g.csid, g.nood, g.food}) r.push_back(format_fixed2(v * scale));
        }
        for (double v : {row.mean_nood_auroc, row.aupr_h, row.mean_fpr95}) r.push_back(format_fixed2(v * scale));
        body.push_back(std::move(r));
    }

    std::string out;
    if (fmt == ReportFormat::csv) {
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_field(cells[i]);
            out += "\n";
        };
        line(header);
        for (const auto& r : body) line(r);
    } else {
        auto line = [&](const std::vector<std::string>& cells) {
            out += "|";
            for (const auto& c : cells) out += " " + c + " |";
            out += "\n";
        };
        line(header);
        out += "|";
        for (std::size_t i = 0; i < header.size(); ++i) out += i < 2 ? " --- |" : " ---: |";
        out += "\n";
        for (const auto& r : body) line(r);
    }
    return out;
}

std::string render_report(const std::vector<RecordRow>& records, ReportFormat fmt) {
    if (records.empty()) throw InvalidInput("no records to report");
    return render_table(table_from_records(records), fmt, 100.0);
}

}  // namespace oodkit

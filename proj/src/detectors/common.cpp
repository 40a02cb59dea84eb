#include <algorithm>
#include <cmath>
#include <exception>
#include <regex>
#include <thread>

#include "internal.hpp"
#include "oodkit/numerics.hpp"

namespace oodkit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SheMetric m) {
    switch (m) {
        case SheMetric::inner: return "inner";
        case SheMetric::euclid: return "euclid";
        case SheMetric::cosine: return "cosine";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Params

void validate_params(const DetectorParams& p) {
    auto bad = [](const std::string& what) { throw InvalidParam(what); };
    auto finite = [](double v) { return std::isfinite(v); };
    if (!(finite(p.temperature) && p.temperature > 0)) bad("temperature must be > 0");
    if (!(finite(p.gamma) && p.gamma > 0)) bad("gamma must be > 0");
    if (p.top_m < 1) bad("top_m must be >= 1");
    if (!(p.percentile >= 0 && p.percentile <= 100)) bad("percentile must lie in [0, 100]");
    if (p.k < 1) bad("k must be >= 1");
    if (!(finite(p.epsilon) && p.epsilon >= 0)) bad("epsilon must be >= 0");
    if (!(finite(p.pow) && p.pow >= 1)) bad("pow must be >= 1");
    if (!(finite(p.noise) && p.noise >= 0)) bad("noise must be >= 0");
    if (p.times < 1) bad("times must be >= 1");
    if (!(p.dropout_p >= 0 && p.dropout_p < 1)) bad("dropout_p must lie in [0, 1)");
    if (p.dim < 0) bad("dim must be >= 0");
    if (!(p.alpha_frac > 0 && p.alpha_frac <= 1)) bad("alpha_frac must lie in (0, 1]");
    if (p.tail < 2) bad("tail must be >= 2");
    if (!(p.sampling_ratio > 0 && p.sampling_ratio <= 1)) bad("sampling_ratio must lie in (0, 1]");
}

json params_to_json(const DetectorParams& p) {
    json j = json::object();
    j["temperature"] = p.temperature;
    j["gamma"] = p.gamma;
    j["top_m"] = p.top_m;
    j["percentile"] = p.percentile;
    j["k"] = p.k;
    j["epsilon"] = p.epsilon;
    j["pow"] = p.pow;
    j["metric"] = to_string(p.metric);
    j["noise"] = p.noise;
    j["times"] = p.times;
    j["dropout_p"] = p.dropout_p;
    j["dim"] = p.dim;
    j["alpha_frac"] = p.alpha_frac;
    j["tail"] = p.tail;
    j["acc"] = p.acc;
    j["normalized"] = p.normalized;
    j["seed"] = p.seed;
    j["sampling_ratio"] = p.sampling_ratio;
    return j;
}

void set_param(DetectorParams& p, const std::string& field, const json& v) {
    auto real = [&](double& dst) {
        if (!v.is_number()) throw InvalidParam(field + " must be a number");
        dst = v.get<double>();
    };
    auto integer = [&](std::int64_t& dst) {
        if (!v.is_number_integer()) throw InvalidParam(field + " must be an integer");
        if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX))
            throw InvalidParam(field + " is out of range");
        dst = v.get<std::int64_t>();
    };
    auto boolean = [&](bool& dst) {
        if (!v.is_boolean()) throw InvalidParam(field + " must be a boolean");
        dst = v.get<bool>();
    };
    if (field == "temperature") real(p.temperature);
    else if (field == "gamma") real(p.gamma);
    else if (field == "top_m") integer(p.top_m);
    else if (field == "percentile") real(p.percentile);
    else if (field == "k") integer(p.k);
    else if (field == "epsilon") real(p.epsilon);
    else if (field == "pow") real(p.pow);
    else if (field == "noise") real(p.noise);
    else if (field == "times") integer(p.times);
    else if (field == "dropout_p") real(p.dropout_p);
    else if (field == "dim") integer(p.dim);
    else if (field == "alpha_frac") real(p.alpha_frac);
    else if (field == "tail") integer(p.tail);
    else if (field == "acc") boolean(p.acc);
    else if (field == "normalized") boolean(p.normalized);
    else if (field == "sampling_ratio") real(p.sampling_ratio);
    else if (field == "metric") {
        if (!v.is_string()) throw InvalidParam("metric must be a string");
        const auto s = v.get<std::string>();
        if (s == "inner") p.metric = SheMetric::inner;
        else if (s == "euclid") p.metric = SheMetric::euclid;
        else if (s == "cosine") p.metric = SheMetric::cosine;
        else throw InvalidParam("metric must be inner, euclid or cosine");
    } else if (field == "seed") {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            throw InvalidParam("seed must be a nonnegative integer");
        p.seed = v.get<std::uint64_t>();
    } else {
        throw InvalidParam("unknown parameter '" + field + "'");
    }
}

DetectorParams params_from_json(const json& j) {
    if (!j.is_object()) throw InvalidParam("params must be a JSON object");
    DetectorParams p;
    for (const auto& [k, v] : j.items()) set_param(p, k, v);
    return p;
}

// ---------------------------------------------------------------------------
// State

const Matrix& DetectorState::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw SchemaError(method + " state has no tensor '" + name + "'");
    return it->second;
}

double DetectorState::scalar(const std::string& name) const {
    auto it = scalars.find(name);
    if (it == scalars.end()) throw SchemaError(method + " state has no scalar '" + name + "'");
    return it->second;
}

namespace {

const std::regex& name_pattern() {
    static const std::regex re("[A-Za-z0-9_.-]+");
    return re;
}

json state_json(const DetectorState& s) {
    json j = json::object();
    j["format_version"] = 1;
    j["method"] = s.method;
    j["params"] = params_to_json(s.params);
    json scalars = json::object();
    for (const auto& [k, v] : s.scalars) {
        if (!std::isfinite(v)) throw InvalidInput("state scalar '" + k + "' is not finite");
        scalars[k] = v;
    }
    j["scalars"] = scalars;
    json tensors = json::object();
    for (const auto& [k, m] : s.tensors) {
        if (!std::regex_match(k, name_pattern())) throw InvalidInput("bad state tensor name '" + k + "'");
        tensors[k] = k + ".oodt";
    }
    j["tensors"] = tensors;
    return j;
}

}  // namespace

std::string state_manifest_json(const DetectorState& s) { return state_json(s).dump(); }

std::string serialize_state(const DetectorState& s) {
    std::string out = state_manifest_json(s);
    for (const auto& [k, m] : s.tensors) {
        out += '\n';
        out += k;
        out += '\n';
        out += encode_tensor(Tensor::from_matrix_f64(m));
    }
    return out;
}

void save_state(const DetectorState& s, const fs::path& dir) {
    const std::string manifest = state_manifest_json(s);
    fs::create_directories(dir);
    for (const auto& [k, m] : s.tensors) write_tensor(dir / (k + ".oodt"), Tensor::from_matrix_f64(m));
    write_file_atomic(dir / "state.json", manifest);
}

DetectorState load_state(const fs::path& dir) {
    json j;
    try {
        j = json::parse(read_file(dir / "state.json"));
    } catch (const json::exception& e) {
        throw FormatError(std::string("state.json: ") + e.what());
    }
    if (!j.is_object()) throw SchemaError("state.json must be an object");
    for (const auto& [k, v] : j.items())
        if (k != "format_version" && k != "method" && k != "params" && k != "scalars" && k != "tensors")
            throw SchemaError("state.json: unknown key '" + k + "'");
    DetectorState s;
    try {
        if (j.at("format_version").get<int>() != 1) throw SchemaError("state.json: format_version must be 1");
        s.method = j.at("method").get<std::string>();
        const auto& tags = detector_tags();
        if (std::find(tags.begin(), tags.end(), s.method) == tags.end())
            throw SchemaError("state.json: unknown method '" + s.method + "'");
        s.params = params_from_json(j.at("params"));
        validate_params(s.params);
        for (const auto& [k, v] : j.at("scalars").items()) s.scalars[k] = v.get<double>();
        for (const auto& [k, v] : j.at("tensors").items()) {
            if (!std::regex_match(k, name_pattern()) || v.get<std::string>() != k + ".oodt")
                throw SchemaError("state.json: bad tensor entry '" + k + "'");
            const Tensor t = read_tensor(dir / (k + ".oodt"), true);
            if (t.dtype != DType::f64 || t.rank() != 2) throw SchemaError("state tensor '" + k + "' must be rank-2 f64");
            s.tensors[k] = t.to_matrix();
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("state.json: ") + e.what());
    } catch (const InvalidParam& e) {
        throw SchemaError(std::string("state.json params: ") + e.what());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Registry and batch scoring

namespace {

const detail::Registry& registry() {
    static const detail::Registry r = [] {
        detail::Registry reg;
        detail::add_classification_detectors(reg);
        detail::add_feature_detectors(reg);
        detail::add_activation_detectors(reg);
        return reg;
    }();
    return r;
}

}  // namespace

const std::vector<std::string>& detector_tags() {
    static const std::vector<std::string> tags{"msp",  "mls",      "ebo", "gen",      "tempscale", "klm",
                                               "odin", "openmax",  "dropout", "mds",  "mdsens",    "rmds",
                                               "knn",  "she",      "residual", "vim", "react",     "ash",
                                               "scale", "dice",    "nnguide", "rankfeat", "fdbd",  "relation"};
    return tags;
}

namespace {

struct MethodInfo {
    std::string name, family;
};

const std::map<std::string, MethodInfo>& method_info() {
    static const std::map<std::string, MethodInfo> info{
        {"msp", {"MSP", "classification"}},        {"mls", {"MLS", "classification"}},
        {"ebo", {"EBO", "classification"}},        {"gen", {"GEN", "classification"}},
        {"tempscale", {"TempScale", "classification"}}, {"klm", {"KLM", "classification"}},
        {"odin", {"ODIN", "classification"}},      {"openmax", {"OpenMax", "classification"}},
        {"dropout", {"Dropout", "classification"}}, {"mds", {"MDS", "feature"}},
        {"mdsens", {"MDSEns", "feature"}},         {"rmds", {"RMDS", "feature"}},
        {"knn", {"KNN", "feature"}},               {"she", {"SHE", "feature"}},
        {"residual", {"Residual", "feature"}},     {"vim", {"ViM", "hybrid"}},
        {"react", {"ReAct", "hybrid"}},            {"ash", {"ASH", "hybrid"}},
        {"scale", {"SCALE", "hybrid"}},            {"dice", {"DICE", "hybrid"}},
        {"nnguide", {"NNGuide", "hybrid"}},        {"rankfeat", {"RankFeat", "hybrid"}},
        {"fdbd", {"fDBD", "hybrid"}},              {"relation", {"Relation", "hybrid"}},
    };
    return info;
}

const MethodInfo& info_for(const std::string& tag) {
    auto it = method_info().find(tag);
    if (it == method_info().end()) throw InvalidParam("unknown method '" + tag + "'");
    return it->second;
}

}  // namespace

const std::string& method_family(const std::string& tag) { return info_for(tag).family; }
const std::string& display_name(const std::string& tag) { return info_for(tag).name; }

std::string tag_from_name(const std::string& name) {
    for (const auto& [tag, info] : method_info())
        if (tag == name || info.name == name) return tag;
    throw InvalidParam("unknown method '" + name + "'");
}

std::unique_ptr<Detector> make_detector(const std::string& tag) {
    const auto& r = registry();
    auto it = r.find(tag);
    if (it == r.end()) throw InvalidParam("unknown method '" + tag + "'");
    return it->second();
}

Vector score_split(const Detector& d, const DetectorState& s, const SplitData& split, const ModelAdapter* adapter,
                   std::size_t threads) {
    if (s.method != d.tag()) throw InvalidInput("state for '" + s.method + "' passed to " + d.tag());
    const std::size_t n = split.size();
    Vector out(n);
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::max<std::size_t>(1, std::min(threads, n / 64));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = d.score(s, split.sample(i), adapter);
        return out;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t * chunk; i < std::min(n, (t + 1) * chunk); ++i)
                    out[i] = d.score(s, split.sample(i), adapter);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

// ---------------------------------------------------------------------------
// Logit rules

namespace {

void check_logits(std::span<const double> f) {
    if (f.size() < 2) throw InvalidInput("need at least 2 logits");
    detail::check_finite(f, "logits");
}

}  // namespace

double msp_score(std::span<const double> f, double temperature) {
    check_logits(f);
    const Vector p = softmax(f, temperature);
    return *std::max_element(p.begin(), p.end());
}

double mls_score(std::span<const double> f) {
    check_logits(f);
    return *std::max_element(f.begin(), f.end());
}

double ebo_score(std::span<const double> f, double temperature) {
    check_logits(f);
    if (!(temperature > 0.0)) throw InvalidParam("temperature must be > 0");
    if (temperature == 1.0) return log_sum_exp(f);
    Vector s(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) s[i] = f[i] / temperature;
    return temperature * log_sum_exp(s);
}

double gen_score(std::span<const double> f, double gamma, std::int64_t top_m) {
    check_logits(f);
    if (top_m < 1 || static_cast<std::size_t>(top_m) > f.size()) throw InvalidParam("GEN needs 1 <= M <= K");
    Vector p = softmax(f);
    std::sort(p.begin(), p.end(), std::greater<>());
    double sum = 0.0;
    for (std::int64_t i = 0; i < top_m; ++i) sum += std::pow(p[i], gamma) * std::pow(1.0 - p[i], gamma);
    return -sum;
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

const SplitData& need_train(const FitContext& ctx) {
    if (!ctx.id_train || ctx.id_train->size() == 0) throw InsufficientData("id_train split is required");
    return *ctx.id_train;
}

const SplitData& need_val(const FitContext& ctx) {
    if (!ctx.id_val || ctx.id_val->size() == 0) throw InsufficientData("id_val split is required");
    return *ctx.id_val;
}

const ClassifierHead& need_head(const FitContext& ctx) {
    if (!ctx.head) throw CapabilityError("method needs the classifier head");
    return *ctx.head;
}

std::size_t num_classes(const FitContext& ctx) {
    if (ctx.num_classes >= 2) return ctx.num_classes;
    if (ctx.id_train) return ctx.id_train->logits.cols();
    throw InvalidInput("number of classes unknown");
}

void need_labels(const SplitData& s) {
    if (!s.has_labels()) throw InsufficientData("split '" + s.id + "' has no labels");
}

std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

void check_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw InvalidInput(std::string("non-finite ") + what);
}

Vector l2_normalized(std::span<const double> v) {
    const double n = std::max(norm2(v), 1e-12);
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

void check_width(std::span<const double> v, std::size_t width, const char* what) {
    if (v.empty()) throw CapabilityError(std::string("evidence lacks ") + what);
    if (v.size() != width)
        throw ShapeError(std::string(what) + " width " + std::to_string(v.size()) + " != " + std::to_string(width));
}

Matrix class_means(const Matrix& x, std::span<const std::int64_t> labels, std::size_t k,
                   const std::vector<bool>* mask, std::vector<std::size_t>& counts) {
    Matrix mu(k, x.cols());
    counts.assign(k, 0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (mask && !(*mask)[i]) continue;
        const auto c = static_cast<std::size_t>(labels[i]);
        if (c >= k) throw InvalidInput("label out of range");
        ++counts[c];
        for (std::size_t j = 0; j < x.cols(); ++j) mu(c, j) += x(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] > 0)
            for (std::size_t j = 0; j < x.cols(); ++j) mu(c, j) /= static_cast<double>(counts[c]);
    return mu;
}

}  // namespace detail

}  // namespace oodkit

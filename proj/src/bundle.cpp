#include "oodkit/bundle.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <unistd.h>

#include "json.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/jsonio.hpp"

namespace oodkit {

static_assert(std::endian::native == std::endian::little,
              "the .oodt payload is memcpy'd and assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t element_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename T>
void put_le(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t offset) {
    T v;
    std::memcpy(&v, bytes.data() + offset, sizeof(T));
    return v;
}

std::size_t checked_numel(const std::vector<std::uint64_t>& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / 8 / d)
            throw FormatError("tensor shape overflows");
        n *= d;
    }
    return static_cast<std::size_t>(n);
}

std::string shape_str(const std::vector<std::uint64_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

bool valid_name(const std::string& s) {
    if (s.empty() || s == "." || s == "..") return false;
    for (char c : s) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                        c == '_' || c == '-' || c == '.';
        if (!ok) return false;
    }
    return true;
}

bool valid_file_name(const std::string& s) {
    return valid_name(s) && s.size() > 5 && s.ends_with(".oodt");
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

std::size_t Tensor::numel() const { return checked_numel(shape); }

Tensor Tensor::from_f32(std::vector<std::uint64_t> shape, std::vector<float> data) {
    Tensor t;
    t.dtype = DType::f32;
    t.shape = std::move(shape);
    t.f32 = std::move(data);
    if (t.f32.size() != t.numel()) throw ShapeError("f32 data does not match shape " + shape_str(t.shape));
    return t;
}

Tensor Tensor::from_i64(std::vector<std::uint64_t> shape, std::vector<std::int64_t> data) {
    Tensor t;
    t.dtype = DType::i64;
    t.shape = std::move(shape);
    t.i64 = std::move(data);
    if (t.i64.size() != t.numel()) throw ShapeError("i64 data does not match shape " + shape_str(t.shape));
    return t;
}

Tensor Tensor::from_f64(std::vector<std::uint64_t> shape, std::vector<double> data) {
    Tensor t;
    t.dtype = DType::f64;
    t.shape = std::move(shape);
    t.f64 = std::move(data);
    if (t.f64.size() != t.numel()) throw ShapeError("f64 data does not match shape " + shape_str(t.shape));
    return t;
}

Tensor Tensor::from_matrix_f32(const Matrix& m) {
    std::vector<float> data(m.data().size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(m.data()[i]);
    return from_f32({m.rows(), m.cols()}, std::move(data));
}

Tensor Tensor::from_vector_f32(const Vector& v) {
    std::vector<float> data(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<float>(v[i]);
    return from_f32({v.size()}, std::move(data));
}

Tensor Tensor::from_matrix_f64(const Matrix& m) { return from_f64({m.rows(), m.cols()}, m.data()); }

Matrix Tensor::to_matrix() const {
    if (shape.size() != 2) throw ShapeError("expected a rank-2 tensor, got " + shape_str(shape));
    return Matrix(shape[0], shape[1], to_doubles());
}

Vector Tensor::to_doubles() const {
    switch (dtype) {
        case DType::f32: return Vector(f32.begin(), f32.end());
        case DType::f64: return f64;
        case DType::i64: break;
    }
    throw ShapeError("integer tensor requested as real values");
}

std::string encode_tensor(const Tensor& t) {
    if (t.shape.size() > kMaxRank) throw ShapeError("tensor rank above " + std::to_string(kMaxRank));
    const std::size_t n = t.numel();
    const void* payload = nullptr;
    switch (t.dtype) {
        case DType::f32:
            if (t.f32.size() != n) throw ShapeError("f32 payload does not match shape");
            payload = t.f32.data();
            break;
        case DType::i64:
            if (t.i64.size() != n) throw ShapeError("i64 payload does not match shape");
            payload = t.i64.data();
            break;
        case DType::f64:
            if (t.f64.size() != n) throw ShapeError("f64 payload does not match shape");
            payload = t.f64.data();
            break;
    }
    std::string out;
    out.reserve(12 + 8 * t.shape.size() + n * element_size(t.dtype));
    out.append("OODB", 4);
    put_le<std::uint32_t>(out, kTensorVersion);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    put_le<std::uint16_t>(out, 0);
    for (auto d : t.shape) put_le<std::uint64_t>(out, d);
    if (n) out.append(static_cast<const char*>(payload), n * element_size(t.dtype));
    return out;
}

TensorHeader decode_tensor_header(std::string_view bytes, bool allow_f64) {
    if (bytes.size() < 12) throw FormatError("tensor file shorter than its fixed header");
    if (bytes.substr(0, 4) != "OODB") throw FormatError("bad tensor magic");
    const auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
    const auto dtype = get_le<std::uint8_t>(bytes, 8);
    if (dtype > 2 || (dtype == 2 && !allow_f64)) throw FormatError("unsupported dtype " + std::to_string(dtype));
    const auto ndim = get_le<std::uint8_t>(bytes, 9);
    if (ndim > kMaxRank) throw FormatError("tensor rank " + std::to_string(ndim) + " above limit");
    if (get_le<std::uint16_t>(bytes, 10) != 0) throw FormatError("reserved header bytes are not zero");
    if (bytes.size() < 12 + 8 * std::size_t{ndim}) throw FormatError("truncated tensor shape");

    TensorHeader h;
    h.dtype = static_cast<DType>(dtype);
    h.shape.resize(ndim);
    for (std::size_t i = 0; i < ndim; ++i) h.shape[i] = get_le<std::uint64_t>(bytes, 12 + 8 * i);
    h.payload_offset = 12 + 8 * std::size_t{ndim};
    const std::size_t expected = checked_numel(h.shape) * element_size(h.dtype);
    if (bytes.size() - h.payload_offset != expected)
        throw FormatError("tensor payload is " + std::to_string(bytes.size() - h.payload_offset) +
                          " bytes, header implies " + std::to_string(expected));
    return h;
}

Tensor decode_tensor(std::string_view bytes, bool allow_f64) {
    const TensorHeader h = decode_tensor_header(bytes, allow_f64);
    Tensor t;
    t.dtype = h.dtype;
    t.shape = h.shape;
    const std::size_t n = checked_numel(h.shape);
    const char* src = bytes.data() + h.payload_offset;
    switch (h.dtype) {
        case DType::f32:
            t.f32.resize(n);
            if (n) std::memcpy(t.f32.data(), src, n * 4);
            break;
        case DType::i64:
            t.i64.resize(n);
            if (n) std::memcpy(t.i64.data(), src, n * 8);
            break;
        case DType::f64:
            t.f64.resize(n);
            if (n) std::memcpy(t.f64.data(), src, n * 8);
            break;
    }
    return t;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for " + path.string());
    return std::move(ss).str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    static std::atomic<std::uint64_t> counter{0};
    fs::path tmp = path;
    tmp += ".tmp-" + std::to_string(::getpid()) + "-" + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename into " + path.string());
    }
}

Tensor read_tensor(const fs::path& path, bool allow_f64) { return decode_tensor(read_file(path), allow_f64); }

void write_tensor(const fs::path& path, const Tensor& t) { write_file_atomic(path, encode_tensor(t)); }

// ---------------------------------------------------------------------------
// Manifest

std::string to_string(SplitKind k) {
    switch (k) {
        case SplitKind::id_train: return "id_train";
        case SplitKind::id_val: return "id_val";
        case SplitKind::id_test: return "id_test";
        case SplitKind::csid: return "csid";
        case SplitKind::near_ood: return "near_ood";
        case SplitKind::far_ood: return "far_ood";
    }
    return "?";
}

std::string to_string(SplitPhase p) {
    switch (p) {
        case SplitPhase::train: return "train";
        case SplitPhase::val: return "val";
        case SplitPhase::test: return "test";
    }
    return "?";
}

SplitKind parse_split_kind(const std::string& s) {
    for (auto k : {SplitKind::id_train, SplitKind::id_val, SplitKind::id_test, SplitKind::csid,
                   SplitKind::near_ood, SplitKind::far_ood})
        if (to_string(k) == s) return k;
    throw SchemaError("unknown split kind '" + s + "'");
}

SplitPhase parse_split_phase(const std::string& s) {
    for (auto p : {SplitPhase::train, SplitPhase::val, SplitPhase::test})
        if (to_string(p) == s) return p;
    throw SchemaError("unknown split phase '" + s + "'");
}

std::string feature_role(const std::string& layer) { return "features:" + layer; }

std::string default_tensor_file(const std::string& split_id, const std::string& role) {
    std::string r = role;
    for (char& c : r)
        if (c == ':') c = '-';
    return split_id + "." + r + ".oodt";
}

const SplitEntry& Manifest::split(const std::string& id) const {
    auto it = splits.find(id);
    if (it == splits.end()) throw SchemaError("unknown split '" + id + "'");
    return it->second;
}

SplitEntry& Manifest::add_split(const std::string& id, SplitKind kind, SplitPhase phase, std::uint64_t n,
                                const std::vector<std::string>& roles) {
    SplitEntry e;
    e.kind = kind;
    e.phase = phase;
    e.sample_count = n;
    for (const auto& r : roles) e.tensors[r] = default_tensor_file(id, r);
    return splits[id] = std::move(e);
}

void Manifest::declare_head() { head = HeadRef{"head.weight.oodt", "head.bias.oodt"}; }

void validate_manifest(const Manifest& m) {
    if (m.benchmark_name.empty()) throw SchemaError("benchmark_name is empty");
    if (m.format_version != 1) throw SchemaError("format_version must be 1");
    if (m.num_classes < 2) throw SchemaError("num_classes must be >= 2");
    if (m.layer_names.empty()) throw SchemaError("layer_names is empty");
    std::set<std::string> layers;
    for (const auto& l : m.layer_names) {
        if (!valid_name(l)) throw SchemaError("invalid layer name '" + l + "'");
        if (!layers.insert(l).second) throw SchemaError("duplicate layer name '" + l + "'");
    }
    if (m.splits.empty()) throw SchemaError("manifest declares no splits");

    std::set<std::string> files;
    auto claim_file = [&](const std::string& f) {
        if (!valid_file_name(f)) throw SchemaError("invalid tensor file name '" + f + "'");
        if (!files.insert(f).second) throw SchemaError("tensor file '" + f + "' declared twice");
    };

    for (const auto& [id, e] : m.splits) {
        if (!valid_name(id)) throw SchemaError("invalid split id '" + id + "'");
        const bool phase_ok = [&] {
            switch (e.kind) {
                case SplitKind::id_train: return e.phase == SplitPhase::train;
                case SplitKind::id_val: return e.phase == SplitPhase::val;
                case SplitKind::id_test: return e.phase == SplitPhase::test;
                default: return e.phase != SplitPhase::train;
            }
        }();
        if (!phase_ok)
            throw SchemaError("split '" + id + "': phase " + to_string(e.phase) + " invalid for kind " +
                              to_string(e.kind));
        for (const auto& [role, file] : e.tensors) {
            const bool known = role == "logits" || role == "labels" || role == "dropout_logits" ||
                               role == "perturbed_logits" ||
                               (role.starts_with("features:") && layers.count(role.substr(9)));
            if (!known) throw SchemaError("split '" + id + "': unknown tensor role '" + role + "'");
            claim_file(file);
        }
        if (!e.has("logits")) throw SchemaError("split '" + id + "' has no logits");
        if (!e.has(feature_role(m.penultimate())))
            throw SchemaError("split '" + id + "' has no penultimate features");
        if (is_id_kind(e.kind) && !e.has("labels")) throw SchemaError("split '" + id + "' needs labels");
        if (e.has("perturbed_logits") != e.perturbation.has_value())
            throw SchemaError("split '" + id + "': perturbed_logits and perturbation must appear together");
        if (e.perturbation) {
            const auto& p = *e.perturbation;
            if (!(std::isfinite(p.temperature) && p.temperature > 0.0))
                throw SchemaError("split '" + id + "': perturbation temperature must be > 0");
            if (!(std::isfinite(p.epsilon) && p.epsilon >= 0.0))
                throw SchemaError("split '" + id + "': perturbation epsilon must be >= 0");
        }
    }
    if (m.head) {
        claim_file(m.head->weight);
        claim_file(m.head->bias);
    }
}

namespace {

json split_to_json(const SplitEntry& e) {
    json j = json::object();
    j["kind"] = to_string(e.kind);
    j["phase"] = to_string(e.phase);
    j["sample_count"] = e.sample_count;
    json t = json::object();
    for (const auto& [role, file] : e.tensors) t[role] = file;
    j["tensors"] = t;
    if (e.perturbation)
        j["perturbation"] = {{"temperature", e.perturbation->temperature}, {"epsilon", e.perturbation->epsilon}};
    return j;
}

void require_keys(const json& j, const std::string& where, const std::set<std::string>& required,
                  const std::set<std::string>& optional) {
    if (!j.is_object()) throw SchemaError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!required.count(k) && !optional.count(k)) throw SchemaError(where + ": unknown key '" + k + "'");
    }
    for (const auto& k : required)
        if (!j.contains(k)) throw SchemaError(where + ": missing key '" + k + "'");
}

std::string get_string(const json& j, const std::string& key, const std::string& where) {
    const auto& v = j.at(key);
    if (!v.is_string()) throw SchemaError(where + "." + key + " must be a string");
    return v.get<std::string>();
}

std::uint64_t get_count(const json& j, const std::string& key, const std::string& where) {
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) throw SchemaError(where + "." + key + " must be a nonnegative integer");
    return v.get<std::uint64_t>();
}

double get_real(const json& j, const std::string& key, const std::string& where) {
    const auto& v = j.at(key);
    if (!v.is_number()) throw SchemaError(where + "." + key + " must be a number");
    return v.get<double>();
}

}  // namespace

std::string manifest_to_json(const Manifest& m) {
    json j = json::object();
    j["benchmark_name"] = m.benchmark_name;
    j["format_version"] = m.format_version;
    j["num_classes"] = m.num_classes;
    j["layer_names"] = m.layer_names;
    json splits = json::object();
    for (const auto& [id, e] : m.splits) splits[id] = split_to_json(e);
    j["splits"] = splits;
    if (m.head) j["head"] = {{"weight", m.head->weight}, {"bias", m.head->bias}};
    return j.dump();
}

Manifest manifest_from_json(const std::string& text) {
    const json j = parse_strict_json(text, "manifest");

    Manifest m;
    require_keys(j, "manifest", {"benchmark_name", "format_version", "num_classes", "layer_names", "splits"},
                 {"head"});
    m.benchmark_name = get_string(j, "benchmark_name", "manifest");
    const auto version = get_count(j, "format_version", "manifest");
    if (version != 1) throw SchemaError("format_version must be 1");
    m.format_version = 1;
    m.num_classes = get_count(j, "num_classes", "manifest");
    const auto& layers = j.at("layer_names");
    if (!layers.is_array()) throw SchemaError("layer_names must be an array");
    for (const auto& l : layers) {
        if (!l.is_string()) throw SchemaError("layer_names entries must be strings");
        m.layer_names.push_back(l.get<std::string>());
    }
    const auto& splits = j.at("splits");
    if (!splits.is_object()) throw SchemaError("splits must be an object");
    for (const auto& [id, sj] : splits.items()) {
        const std::string where = "splits." + id;
        require_keys(sj, where, {"kind", "phase", "sample_count", "tensors"}, {"perturbation"});
        SplitEntry e;
        e.kind = parse_split_kind(get_string(sj, "kind", where));
        e.phase = parse_split_phase(get_string(sj, "phase", where));
        e.sample_count = get_count(sj, "sample_count", where);
        const auto& tj = sj.at("tensors");
        if (!tj.is_object()) throw SchemaError(where + ".tensors must be an object");
        for (const auto& [role, file] : tj.items()) {
            if (!file.is_string()) throw SchemaError(where + ".tensors." + role + " must be a string");
            e.tensors[role] = file.get<std::string>();
        }
        if (sj.contains("perturbation")) {
            const auto& pj = sj.at("perturbation");
            require_keys(pj, where + ".perturbation", {"temperature", "epsilon"}, {});
            e.perturbation = Perturbation{get_real(pj, "temperature", where), get_real(pj, "epsilon", where)};
        }
        m.splits[id] = std::move(e);
    }
    if (j.contains("head")) {
        const auto& hj = j.at("head");
        require_keys(hj, "head", {"weight", "bias"}, {});
        m.head = HeadRef{get_string(hj, "weight", "head"), get_string(hj, "bias", "head")};
    }
    validate_manifest(m);
    return m;
}

// ---------------------------------------------------------------------------
// Tensor validation

void validate_tensor_header(const Manifest& m, const std::string& split, const std::string& role,
                            const TensorHeader& h) {
    const std::string where = split.empty() ? role : split + "/" + role;
    auto fail = [&](const std::string& why) {
        throw SchemaError(where + ": " + why + " (shape " + shape_str(h.shape) + ")");
    };
    const std::uint64_t k = m.num_classes;

    if (split == kHeadSplit) {
        if (!m.head) fail("no head declared");
        if (h.dtype != DType::f32) fail("head tensors must be f32");
        if (role == kHeadWeightRole) {
            if (h.shape.size() != 2 || h.shape[0] != k || h.shape[1] == 0) fail("head weight must be K x D");
        } else if (role == kHeadBiasRole) {
            if (h.shape.size() != 1 || h.shape[0] != k) fail("head bias must have K entries");
        } else {
            fail("unknown head role");
        }
        return;
    }

    const SplitEntry& e = m.split(split);
    if (!e.has(role)) fail("role not declared in manifest");
    const std::uint64_t n = e.sample_count;
    if (role == "labels") {
        if (h.dtype != DType::i64) fail("labels must be i64");
        if (h.shape.size() != 1 || h.shape[0] != n) fail("labels must have sample_count entries");
        return;
    }
    if (h.dtype != DType::f32) fail("tensor must be f32");
    if (role == "logits" || role == "perturbed_logits") {
        if (h.shape.size() != 2 || h.shape[0] != n || h.shape[1] != k) fail("expected samples x K");
    } else if (role == "dropout_logits") {
        if (h.shape.size() != 3 || h.shape[0] == 0 || h.shape[1] != n || h.shape[2] != k)
            fail("expected passes x samples x K");
    } else if (role.starts_with("features:")) {
        const bool penultimate = role.substr(9) == m.penultimate();
        if (h.shape.size() < 2 || h.shape[0] != n) fail("features must be samples x ...");
        if (penultimate && h.shape.size() != 2) fail("penultimate features must be rank 2");
        for (std::size_t i = 1; i < h.shape.size(); ++i)
            if (h.shape[i] == 0) fail("feature dimensions must be positive");
    } else {
        fail("unknown role");
    }
}

void validate_tensor(const Manifest& m, const std::string& split, const std::string& role, const Tensor& t) {
    TensorHeader h;
    h.dtype = t.dtype;
    h.shape = t.shape;
    validate_tensor_header(m, split, role, h);
    const std::size_t n = t.numel();
    const std::string where = split.empty() ? role : split + "/" + role;
    if (t.dtype == DType::i64) {
        if (t.i64.size() != n) throw SchemaError(where + ": payload does not match shape");
        for (auto v : t.i64)
            if (v < 0 || static_cast<std::uint64_t>(v) >= m.num_classes)
                throw SchemaError(where + ": label " + std::to_string(v) + " outside [0, K)");
    } else {
        if (t.f32.size() != n) throw SchemaError(where + ": payload does not match shape");
        for (float v : t.f32)
            if (!std::isfinite(v)) throw SchemaError(where + ": non-finite value");
    }
}

namespace {

// Layer widths must agree across splits, and the head must match the
// penultimate width.
class WidthRegistry {
public:
    void add(const Manifest& m, const std::string& split, const std::string& role,
             const std::vector<std::uint64_t>& shape) {
        std::string key;
        std::vector<std::uint64_t> dims;
        if (split == kHeadSplit) {
            if (role != kHeadWeightRole) return;
            key = feature_role(m.penultimate());
            dims = {shape[1]};
        } else if (role.starts_with("features:")) {
            key = role;
            dims.assign(shape.begin() + 1, shape.end());
        } else {
            return;
        }
        std::lock_guard lock(mu_);
        auto [it, inserted] = widths_.emplace(key, dims);
        if (!inserted && it->second != dims)
            throw SchemaError((split.empty() ? role : split + "/" + role) + ": width " + shape_str(dims) +
                              " disagrees with " + shape_str(it->second) + " seen elsewhere");
    }

private:
    std::mutex mu_;
    std::map<std::string, std::vector<std::uint64_t>> widths_;
};

std::vector<TensorKey> declared_keys(const Manifest& m) {
    std::vector<TensorKey> keys;
    for (const auto& [id, e] : m.splits)
        for (const auto& [role, file] : e.tensors) keys.emplace_back(id, role);
    if (m.head) {
        keys.emplace_back(kHeadSplit, kHeadWeightRole);
        keys.emplace_back(kHeadSplit, kHeadBiasRole);
    }
    return keys;
}

std::string file_for(const Manifest& m, const TensorKey& key) {
    if (key.first == kHeadSplit) {
        if (!m.head) throw SchemaError("no head declared");
        return key.second == kHeadWeightRole ? m.head->weight : m.head->bias;
    }
    const auto& e = m.split(key.first);
    auto it = e.tensors.find(key.second);
    if (it == e.tensors.end()) throw SchemaError(key.first + "/" + key.second + " not declared");
    return it->second;
}

void validate_contents(const BundleContents& c) {
    validate_manifest(c.manifest);
    const auto keys = declared_keys(c.manifest);
    for (const auto& key : keys)
        if (!c.tensors.count(key)) throw SchemaError("missing tensor for " + key.first + "/" + key.second);
    if (c.tensors.size() != keys.size()) {
        const std::set<TensorKey> declared(keys.begin(), keys.end());
        for (const auto& [key, t] : c.tensors)
            if (!declared.count(key)) throw SchemaError("tensor " + key.first + "/" + key.second + " not declared");
    }
    WidthRegistry widths;
    for (const auto& [key, t] : c.tensors) {
        validate_tensor(c.manifest, key.first, key.second, t);
        widths.add(c.manifest, key.first, key.second, t.shape);
    }
}

}  // namespace

void write_bundle(const BundleContents& contents, const fs::path& dir) {
    validate_contents(contents);
    static std::atomic<std::uint64_t> counter{0};
    const std::string tag = std::to_string(::getpid()) + "-" + std::to_string(counter++);
    const fs::path parent = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
    const fs::path staging = parent / ("." + dir.filename().string() + ".staging-" + tag);
    const fs::path retired = parent / ("." + dir.filename().string() + ".old-" + tag);

    std::error_code ec;
    fs::create_directories(parent, ec);
    if (!fs::create_directory(staging, ec) || ec) throw IoError("cannot create staging directory " + staging.string());
    try {
        for (const auto& [key, t] : contents.tensors) {
            const std::string bytes = encode_tensor(t);
            std::ofstream out(staging / file_for(contents.manifest, key), std::ios::binary);
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            if (!out) throw IoError("cannot write tensor " + key.first + "/" + key.second);
        }
        const std::string manifest = manifest_to_json(contents.manifest);
        std::ofstream out(staging / "manifest.json", std::ios::binary);
        out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
        if (!out) throw IoError("cannot write manifest");
    } catch (...) {
        fs::remove_all(staging, ec);
        throw;
    }

    const bool existed = fs::exists(dir);
    if (existed && !fs::is_directory(dir)) {
        fs::remove_all(staging, ec);
        throw IoError(dir.string() + " exists and is not a directory");
    }
    if (existed) {
        fs::rename(dir, retired, ec);
        if (ec) {
            fs::remove_all(staging, ec);
            throw IoError("cannot replace " + dir.string());
        }
    }
    fs::rename(staging, dir, ec);
    if (ec) {
        if (existed) fs::rename(retired, dir, ec);
        fs::remove_all(staging, ec);
        throw IoError("cannot move bundle into " + dir.string());
    }
    if (existed) fs::remove_all(retired, ec);
}

// ---------------------------------------------------------------------------
// FeatureBundle

struct FeatureBundle::Impl {
    fs::path dir;
    Manifest manifest;
    std::mutex mu;
    std::map<TensorKey, std::unique_ptr<Tensor>> cache;
    WidthRegistry widths;
};

FeatureBundle FeatureBundle::open(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("bundle directory " + dir.string() + " does not exist");
    FeatureBundle b;
    b.impl_ = std::make_shared<Impl>();
    b.impl_->dir = dir;
    b.impl_->manifest = manifest_from_json(read_file(dir / "manifest.json"));
    return b;
}

FeatureBundle FeatureBundle::from_contents(BundleContents contents) {
    validate_contents(contents);
    FeatureBundle b;
    b.impl_ = std::make_shared<Impl>();
    b.impl_->manifest = std::move(contents.manifest);
    for (auto& [key, t] : contents.tensors) {
        b.impl_->widths.add(b.impl_->manifest, key.first, key.second, t.shape);
        b.impl_->cache[key] = std::make_unique<Tensor>(std::move(t));
    }
    return b;
}

const Manifest& FeatureBundle::manifest() const { return impl_->manifest; }
const fs::path& FeatureBundle::directory() const { return impl_->dir; }

bool FeatureBundle::has(const std::string& split, const std::string& role) const {
    if (split == kHeadSplit) return impl_->manifest.head.has_value();
    auto it = impl_->manifest.splits.find(split);
    return it != impl_->manifest.splits.end() && it->second.has(role);
}

const Tensor& FeatureBundle::tensor(const std::string& split, const std::string& role) const {
    const TensorKey key{split, role};
    std::lock_guard lock(impl_->mu);
    if (auto it = impl_->cache.find(key); it != impl_->cache.end()) return *it->second;
    const std::string file = file_for(impl_->manifest, key);
    const std::string bytes = read_file(impl_->dir / file);
    const TensorHeader h = decode_tensor_header(bytes);
    validate_tensor_header(impl_->manifest, split, role, h);
    auto t = std::make_unique<Tensor>(decode_tensor(bytes));
    validate_tensor(impl_->manifest, split, role, *t);
    impl_->widths.add(impl_->manifest, split, role, t->shape);
    return *(impl_->cache[key] = std::move(t));
}

Matrix FeatureBundle::features(const std::string& split, const std::string& layer) const {
    const std::string l = layer.empty() ? impl_->manifest.penultimate() : layer;
    const Tensor& t = tensor(split, feature_role(l));
    std::size_t cols = 1;
    for (std::size_t i = 1; i < t.shape.size(); ++i) cols *= t.shape[i];
    return Matrix(t.shape[0], cols, t.to_doubles());
}

Matrix FeatureBundle::logits(const std::string& split) const { return tensor(split, "logits").to_matrix(); }

std::vector<std::int64_t> FeatureBundle::labels(const std::string& split) const {
    return tensor(split, "labels").i64;
}

std::vector<Matrix> FeatureBundle::dropout_logits(const std::string& split) const {
    if (!has(split, "dropout_logits")) throw CapabilityError("split '" + split + "' has no dropout_logits");
    const Tensor& t = tensor(split, "dropout_logits");
    const std::size_t passes = t.shape[0], n = t.shape[1], k = t.shape[2];
    std::vector<Matrix> out;
    out.reserve(passes);
    for (std::size_t p = 0; p < passes; ++p) {
        std::vector<double> d(t.f32.begin() + static_cast<std::ptrdiff_t>(p * n * k),
                              t.f32.begin() + static_cast<std::ptrdiff_t>((p + 1) * n * k));
        out.emplace_back(n, k, std::move(d));
    }
    return out;
}

Matrix FeatureBundle::perturbed_logits(const std::string& split) const {
    if (!has(split, "perturbed_logits")) throw CapabilityError("split '" + split + "' has no perturbed_logits");
    return tensor(split, "perturbed_logits").to_matrix();
}

std::optional<ClassifierHead> FeatureBundle::head() const {
    if (!impl_->manifest.head) return std::nullopt;
    ClassifierHead h;
    h.weight = tensor(kHeadSplit, kHeadWeightRole).to_matrix();
    h.bias = tensor(kHeadSplit, kHeadBiasRole).to_doubles();
    return h;
}

void FeatureBundle::validate_all() const {
    for (const auto& key : declared_keys(impl_->manifest)) tensor(key.first, key.second);
}

BundleContents FeatureBundle::load_all() const {
    BundleContents c;
    c.manifest = impl_->manifest;
    for (const auto& key : declared_keys(impl_->manifest)) c.tensors[key] = tensor(key.first, key.second);
    return c;
}

HeadReport validate_head(const FeatureBundle& bundle) {
    const auto head = bundle.head();
    if (!head) throw CapabilityError("bundle declares no classifier head");
    const Manifest& m = bundle.manifest();
    const std::string* train = nullptr;
    for (const auto& [id, e] : m.splits) {
        if (e.kind == SplitKind::id_train) {
            train = &id;
            break;
        }
    }
    if (!train) throw InsufficientData("head validation needs an id_train split");
    const Matrix z = bundle.features(*train);
    const Matrix f = bundle.logits(*train);
    HeadReport report;
    const std::size_t n = z.rows();
    const std::size_t rows = std::min<std::size_t>(n, 256);
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t r = i * n / rows;
        const Vector pred = affine(head->weight, head->bias, z.row(r));
        for (std::size_t c = 0; c < pred.size(); ++c) {
            const double dev = std::abs(pred[c] - f(r, c)) / std::max(1.0, std::abs(f(r, c)));
            report.max_deviation = std::max(report.max_deviation, dev);
        }
    }
    report.rows_checked = rows;
    if (report.max_deviation > kHeadTolerance)
        throw HeadMismatchError("head reproduces logits only to " + std::to_string(report.max_deviation));
    return report;
}

}  // namespace oodkit

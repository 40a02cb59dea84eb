#include "oodkit/refmodel.hpp"

#include <cmath>

#include "json.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/numerics.hpp"
#include "oodkit/rng.hpp"

namespace oodkit {

namespace fs = std::filesystem;

std::string to_string(Capability c) {
    switch (c) {
        case Capability::forward: return "forward";
        case Capability::features: return "features";
        case Capability::input_grad: return "input_grad";
        case Capability::dropout: return "dropout";
        case Capability::forward_from: return "forward_from";
    }
    return "?";
}

std::pair<std::size_t, std::size_t> square_view(std::size_t n) {
    std::size_t rows = 1;
    for (std::size_t r = 1; r * r <= n; ++r)
        if (n % r == 0) rows = r;
    return {rows, n / std::max<std::size_t>(rows, 1)};
}

// ---------------------------------------------------------------------------
// ModelAdapter defaults

std::size_t ModelAdapter::input_width() const { throw CapabilityError("adapter has no live input"); }

Capture ModelAdapter::forward_capture(std::span<const double>) const {
    throw CapabilityError("adapter cannot run forward passes");
}

Vector ModelAdapter::input_gradient(std::span<const double>, std::size_t, double) const {
    throw CapabilityError("adapter cannot compute input gradients");
}

std::vector<Vector> ModelAdapter::dropout_passes(std::span<const double>, double, std::size_t,
                                                 std::uint64_t) const {
    throw CapabilityError("adapter cannot run dropout passes");
}

Vector ModelAdapter::forward_from(const std::string&, std::span<const double>) const {
    throw CapabilityError("adapter cannot re-forward from a layer");
}

std::size_t ModelAdapter::layer_index(const std::string& name) const {
    const auto& ls = layers();
    for (std::size_t i = 0; i < ls.size(); ++i)
        if (ls[i].name == name) return i;
    throw ShapeError("unknown layer '" + name + "'");
}

void ModelAdapter::require(Capability c) const {
    if (!supports(c)) throw CapabilityError("adapter lacks capability " + to_string(c));
}

// ---------------------------------------------------------------------------
// MlpModel

namespace {

void relu_inplace(Vector& v) {
    for (double& x : v)
        if (!(x > 0.0)) x = 0.0;
}

}  // namespace

MlpModel::MlpModel(std::vector<DenseLayer> layers, double dropout_p, std::uint64_t seed)
    : layers_(std::move(layers)), dropout_p_(dropout_p), seed_(seed) {
    if (layers_.size() < 2) throw InvalidParam("MLP needs at least one hidden layer and a head");
    if (!(dropout_p_ >= 0.0 && dropout_p_ < 1.0)) throw InvalidParam("dropout p must lie in [0, 1)");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.weight.rows() == 0 || l.weight.cols() == 0) throw ShapeError("empty dense layer");
        if (l.bias.size() != l.weight.rows()) throw ShapeError("bias length does not match layer width");
        if (i > 0 && l.weight.cols() != layers_[i - 1].weight.rows())
            throw ShapeError("layer " + std::to_string(i) + " input width mismatch");
        for (double v : l.weight.data())
            if (!std::isfinite(v)) throw InvalidParam("non-finite weight");
        for (double v : l.bias)
            if (!std::isfinite(v)) throw InvalidParam("non-finite bias");
    }
    if (num_classes() < 2) throw InvalidParam("head needs at least 2 classes");
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
        LayerInfo info;
        info.name = "hidden" + std::to_string(i + 1);
        info.width = layers_[i].weight.rows();
        std::tie(info.view_rows, info.view_cols) = square_view(info.width);
        info_.push_back(info);
    }
}

MlpModel MlpModel::random(const std::vector<std::size_t>& sizes, std::uint64_t seed, double dropout_p) {
    if (sizes.size() < 3) throw InvalidParam("sizes need input, at least one hidden width and K");
    SplitMix64 rng(seed);
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        DenseLayer l{Matrix(sizes[i + 1], sizes[i]), Vector(sizes[i + 1])};
        const double scale = std::sqrt(2.0 / static_cast<double>(sizes[i]));
        for (double& w : l.weight.data()) w = scale * rng.normal();
        for (double& b : l.bias) b = 0.1 * rng.normal();
        layers.push_back(std::move(l));
    }
    return MlpModel(std::move(layers), dropout_p, seed);
}

Vector MlpModel::run_from(std::size_t first_dense, Vector h) const {
    for (std::size_t i = first_dense; i < layers_.size(); ++i) {
        h = affine(layers_[i].weight, layers_[i].bias, h);
        if (i + 1 < layers_.size()) relu_inplace(h);
    }
    return h;
}

Capture MlpModel::forward_capture(std::span<const double> x) const {
    if (x.size() != input_width())
        throw ShapeError("input width " + std::to_string(x.size()) + " != " + std::to_string(input_width()));
    Capture out;
    Vector h(x.begin(), x.end());
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
        h = affine(layers_[i].weight, layers_[i].bias, h);
        relu_inplace(h);
        out.features.push_back(h);
    }
    out.logits = affine(layers_.back().weight, layers_.back().bias, h);
    return out;
}

Vector MlpModel::forward_from(const std::string& layer, std::span<const double> feature) const {
    const std::size_t idx = layer_index(layer);
    if (feature.size() != info_[idx].width) throw ShapeError("feature width does not match layer " + layer);
    return run_from(idx + 1, Vector(feature.begin(), feature.end()));
}

Vector MlpModel::input_gradient(std::span<const double> x, std::size_t c, double temperature) const {
    if (!(temperature > 0.0)) throw InvalidParam("temperature must be > 0");
    if (c >= num_classes()) throw InvalidParam("class index out of range");
    if (x.size() != input_width()) throw ShapeError("input width mismatch");

    std::vector<Vector> pre;  // pre-activations of hidden layers
    Vector h(x.begin(), x.end());
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
        h = affine(layers_[i].weight, layers_[i].bias, h);
        pre.push_back(h);
        relu_inplace(h);
    }
    const Vector logits = affine(layers_.back().weight, layers_.back().bias, h);
    const Vector p = softmax(logits, temperature);

    // d/dlogits of log softmax_c(f / T) = (e_c - p) / T
    Vector g(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) g[k] = ((k == c ? 1.0 : 0.0) - p[k]) / temperature;

    for (std::size_t i = layers_.size(); i-- > 0;) {
        const Matrix& w = layers_[i].weight;
        Vector back(w.cols(), 0.0);
        for (std::size_t r = 0; r < w.rows(); ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            for (std::size_t col = 0; col < w.cols(); ++col) back[col] += w(r, col) * gr;
        }
        if (i > 0) {
            const Vector& z = pre[i - 1];
            for (std::size_t j = 0; j < back.size(); ++j)
                if (!(z[j] > 0.0)) back[j] = 0.0;
        }
        g = std::move(back);
    }
    return g;
}

std::vector<bool> MlpModel::dropout_mask(std::size_t width, double p, std::uint64_t seed, std::size_t pass) {
    SplitMix64 rng = SplitMix64(seed).split(pass);
    std::vector<bool> keep(width);
    for (std::size_t j = 0; j < width; ++j) keep[j] = rng.uniform() >= p;
    return keep;
}

std::vector<Vector> MlpModel::dropout_passes(std::span<const double> x, double p, std::size_t times,
                                             std::uint64_t seed) const {
    if (!(p >= 0.0 && p < 1.0)) throw InvalidParam("dropout p must lie in [0, 1)");
    if (times < 1) throw InvalidParam("dropout needs at least one pass");
    const Capture cap = forward_capture(x);
    const Vector& z = cap.features.back();
    const double scale = 1.0 / (1.0 - p);
    std::vector<Vector> out;
    out.reserve(times);
    for (std::size_t t = 0; t < times; ++t) {
        const auto keep = dropout_mask(z.size(), p, seed, t);
        Vector masked(z.size());
        for (std::size_t j = 0; j < z.size(); ++j) masked[j] = keep[j] ? z[j] * scale : 0.0;
        out.push_back(affine(layers_.back().weight, layers_.back().bias, masked));
    }
    return out;
}

void MlpModel::set_view(const std::string& layer, std::size_t rows, std::size_t cols) {
    auto& info = info_[layer_index(layer)];
    if (rows * cols != info.width) throw InvalidParam("view does not cover the layer width");
    info.view_rows = rows;
    info.view_cols = cols;
}

void MlpModel::save(const fs::path& dir) const {
    fs::create_directories(dir);
    nlohmann::json j;
    std::vector<std::size_t> sizes{input_width()};
    for (const auto& l : layers_) sizes.push_back(l.weight.rows());
    j["layer_sizes"] = sizes;
    j["dropout_p"] = dropout_p_;
    j["seed"] = seed_;
    nlohmann::json views = nlohmann::json::object();
    for (const auto& info : info_) views[info.name] = {info.view_rows, info.view_cols};
    j["views"] = views;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        write_tensor(dir / ("w" + std::to_string(i) + ".oodt"), Tensor::from_matrix_f64(layers_[i].weight));
        write_tensor(dir / ("b" + std::to_string(i) + ".oodt"),
                     Tensor::from_f64({layers_[i].bias.size()}, layers_[i].bias));
    }
    write_file_atomic(dir / "model.json", j.dump());
}

MlpModel MlpModel::load(const fs::path& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(dir / "model.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model.json: ") + e.what());
    }
    for (const auto& [k, v] : j.items())
        if (k != "layer_sizes" && k != "dropout_p" && k != "seed" && k != "views")
            throw SchemaError("model.json: unknown key '" + k + "'");
    try {
        const auto sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
        std::vector<DenseLayer> layers;
        for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
            DenseLayer l;
            l.weight = read_tensor(dir / ("w" + std::to_string(i) + ".oodt"), true).to_matrix();
            l.bias = read_tensor(dir / ("b" + std::to_string(i) + ".oodt"), true).to_doubles();
            if (l.weight.rows() != sizes[i + 1] || l.weight.cols() != sizes[i])
                throw SchemaError("checkpoint weight " + std::to_string(i) + " has the wrong shape");
            layers.push_back(std::move(l));
        }
        MlpModel m(std::move(layers), j.at("dropout_p").get<double>(), j.at("seed").get<std::uint64_t>());
        if (j.contains("views"))
            for (const auto& [name, v] : j.at("views").items())
                m.set_view(name, v.at(0).get<std::size_t>(), v.at(1).get<std::size_t>());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("model.json: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// LinearHeadModel

LinearHeadModel::LinearHeadModel(ClassifierHead head, std::string layer) : head_(std::move(head)) {
    if (head_.weight.rows() < 2 || head_.weight.cols() < 1) throw InvalidParam("linear head needs K >= 2 and D >= 1");
    if (head_.bias.size() != head_.weight.rows()) throw ShapeError("head bias length differs from K");
    LayerInfo info;
    info.name = std::move(layer);
    info.width = head_.weight.cols();
    std::tie(info.view_rows, info.view_cols) = square_view(info.width);
    info_.push_back(info);
}

Capture LinearHeadModel::forward_capture(std::span<const double> x) const {
    if (x.size() != input_width()) throw ShapeError("input width mismatch");
    Capture c;
    c.features.emplace_back(x.begin(), x.end());
    c.logits = affine(head_.weight, head_.bias, x);
    return c;
}

Vector LinearHeadModel::input_gradient(std::span<const double> x, std::size_t c, double temperature) const {
    if (!(temperature > 0.0)) throw InvalidParam("temperature must be > 0");
    if (c >= num_classes()) throw InvalidParam("class index out of range");
    const Vector p = softmax(forward(x), temperature);
    Vector g(input_width(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double w = ((k == c ? 1.0 : 0.0) - p[k]) / temperature;
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += w * head_.weight(k, j);
    }
    return g;
}

std::vector<Vector> LinearHeadModel::dropout_passes(std::span<const double> x, double p, std::size_t times,
                                                    std::uint64_t seed) const {
    if (!(p >= 0.0 && p < 1.0)) throw InvalidParam("dropout p must lie in [0, 1)");
    if (times < 1) throw InvalidParam("dropout needs at least one pass");
    if (x.size() != input_width()) throw ShapeError("input width mismatch");
    const double scale = 1.0 / (1.0 - p);
    std::vector<Vector> out;
    out.reserve(times);
    for (std::size_t t = 0; t < times; ++t) {
        const auto keep = MlpModel::dropout_mask(x.size(), p, seed, t);
        Vector masked(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) masked[j] = keep[j] ? x[j] * scale : 0.0;
        out.push_back(affine(head_.weight, head_.bias, masked));
    }
    return out;
}

Vector LinearHeadModel::forward_from(const std::string& layer, std::span<const double> feature) const {
    layer_index(layer);
    if (feature.size() != input_width()) throw ShapeError("feature width mismatch");
    return affine(head_.weight, head_.bias, feature);
}

// ---------------------------------------------------------------------------
// RecordedAdapter

RecordedAdapter::RecordedAdapter(FeatureBundle bundle) : bundle_(std::move(bundle)) {
    head_ = bundle_.head();
    const Manifest& m = bundle_.manifest();
    for (const auto& name : m.layer_names) {
        LayerInfo info;
        info.name = name;
        for (const auto& [id, e] : m.splits) {
            if (!e.has(feature_role(name))) continue;
            const Tensor& t = bundle_.tensor(id, feature_role(name));
            std::size_t width = 1;
            for (std::size_t i = 1; i < t.shape.size(); ++i) width *= t.shape[i];
            info.width = width;
            if (t.shape.size() >= 3) {
                info.view_rows = t.shape[1];
                info.view_cols = width / t.shape[1];
            } else {
                std::tie(info.view_rows, info.view_cols) = square_view(width);
            }
            break;
        }
        info_.push_back(info);
    }
}

bool RecordedAdapter::supports(Capability c) const {
    return c == Capability::features || (c == Capability::forward_from && head_.has_value());
}

std::size_t RecordedAdapter::num_classes() const { return bundle_.manifest().num_classes; }

Vector RecordedAdapter::forward_from(const std::string& layer, std::span<const double> feature) const {
    if (!head_) throw CapabilityError("bundle declares no head; cannot re-forward");
    if (layer != bundle_.manifest().penultimate())
        throw CapabilityError("recorded evidence can only re-forward from the penultimate layer");
    if (feature.size() != head_->weight.cols()) throw ShapeError("feature width does not match the head");
    return affine(head_->weight, head_->bias, feature);
}

}  // namespace oodkit

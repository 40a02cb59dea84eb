#include "oodkit/evidence.hpp"

#include "oodkit/errors.hpp"

namespace oodkit {

namespace {

std::span<const double> row_or_empty(const Matrix& m, std::size_t i) {
    if (i >= m.rows()) return {};
    return m.row(i);
}

Matrix stack_rows(const std::vector<const Matrix*>& parts) {
    std::size_t rows = 0;
    const std::size_t cols = parts.front()->cols();
    for (const Matrix* p : parts) rows += p->rows();
    Matrix out(rows, cols);
    std::size_t r = 0;
    for (const Matrix* p : parts) {
        std::copy(p->data().begin(), p->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
        r += p->rows();
    }
    return out;
}

}  // namespace

Evidence SplitData::sample(std::size_t i) const {
    if (i >= size()) throw InvalidInput("sample index out of range in split '" + id + "'");
    Evidence e;
    e.logits = logits.row(i);
    e.layers.reserve(layers.size());
    for (const Matrix& l : layers) e.layers.push_back(row_or_empty(l, i));
    e.features = e.layers.back();
    e.input = row_or_empty(inputs, i);
    for (const Matrix& d : dropout_logits) e.dropout.push_back(d.row(i));
    e.perturbed = row_or_empty(perturbed_logits, i);
    e.perturbation = perturbation ? &*perturbation : nullptr;
    return e;
}

SplitData load_split(const FeatureBundle& bundle, const std::string& split_id) {
    const Manifest& m = bundle.manifest();
    const SplitEntry& e = m.split(split_id);
    SplitData s;
    s.id = split_id;
    s.kind = e.kind;
    s.layer_names = m.layer_names;
    for (const auto& layer : m.layer_names)
        s.layers.push_back(e.has(feature_role(layer)) ? bundle.features(split_id, layer) : Matrix());
    s.logits = bundle.logits(split_id);
    if (e.has("labels")) s.labels = bundle.labels(split_id);
    if (e.has("dropout_logits")) s.dropout_logits = bundle.dropout_logits(split_id);
    if (e.has("perturbed_logits")) {
        s.perturbed_logits = bundle.perturbed_logits(split_id);
        s.perturbation = e.perturbation;
    }
    return s;
}

SplitData concat_splits(const std::vector<const SplitData*>& parts, const std::string& id) {
    if (parts.empty()) throw InvalidInput("nothing to concatenate");
    const SplitData& first = *parts.front();
    SplitData out;
    out.id = id;
    out.kind = first.kind;
    out.layer_names = first.layer_names;
    for (const SplitData* p : parts)
        if (p->layer_names != first.layer_names) throw ShapeError("splits disagree on layer names");

    // A role survives when every non-empty part records it.
    auto gather = [&](auto&& pick) -> Matrix {
        std::vector<const Matrix*> ms;
        std::size_t cols = pick(first).cols();
        for (const SplitData* p : parts) {
            const Matrix& m = pick(*p);
            if (p->size() == 0) continue;
            if (m.rows() != p->size() || m.cols() == 0) return Matrix();
            if (!ms.empty() && m.cols() != cols) throw ShapeError("splits disagree on widths");
            cols = m.cols();
            ms.push_back(&m);
        }
        if (ms.empty()) return Matrix(0, cols);
        return stack_rows(ms);
    };

    for (std::size_t l = 0; l < first.layers.size(); ++l)
        out.layers.push_back(gather([l](const SplitData& s) -> const Matrix& { return s.layers[l]; }));
    out.logits = gather([](const SplitData& s) -> const Matrix& { return s.logits; });
    out.inputs = gather([](const SplitData& s) -> const Matrix& { return s.inputs; });

    bool labels = true, perturbed = true;
    std::size_t passes = first.dropout_logits.size();
    for (const SplitData* p : parts) {
        labels = labels && p->has_labels();
        perturbed = perturbed && p->perturbed_logits.rows() == p->size() && p->perturbation == first.perturbation;
        passes = std::min(passes, p->dropout_logits.size());
    }
    if (labels)
        for (const SplitData* p : parts) out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    if (perturbed && first.perturbation) {
        out.perturbed_logits = gather([](const SplitData& s) -> const Matrix& { return s.perturbed_logits; });
        out.perturbation = first.perturbation;
    }
    for (std::size_t t = 0; t < passes; ++t)
        out.dropout_logits.push_back(gather([t](const SplitData& s) -> const Matrix& { return s.dropout_logits[t]; }));
    return out;
}

Vector perturb_input(const ModelAdapter& model, std::span<const double> x, double temperature, double epsilon) {
    model.require(Capability::input_grad);
    if (!(epsilon >= 0.0)) throw InvalidParam("perturbation magnitude must be >= 0");
    const Vector f = model.forward(x);
    std::size_t yhat = 0;
    for (std::size_t k = 1; k < f.size(); ++k)
        if (f[k] > f[yhat]) yhat = k;
    const Vector g = model.input_gradient(x, yhat, temperature);
    Vector out(x.begin(), x.end());
    for (std::size_t j = 0; j < out.size(); ++j) {
        if (g[j] > 0.0) out[j] += epsilon;
        else if (g[j] < 0.0) out[j] -= epsilon;
    }
    return out;
}

SplitData capture_split(const ModelAdapter& model, const Matrix& inputs, std::vector<std::int64_t> labels,
                        SplitKind kind, const std::string& id, const CaptureOptions& opts) {
    model.require(Capability::forward);
    model.require(Capability::features);
    const std::size_t n = inputs.rows(), k = model.num_classes();
    if (!labels.empty() && labels.size() != n) throw ShapeError("labels do not match the input count");
    SplitData s;
    s.id = id;
    s.kind = kind;
    s.labels = std::move(labels);
    for (const auto& info : model.layers()) {
        s.layer_names.push_back(info.name);
        s.layers.emplace_back(n, info.width);
    }
    s.logits = Matrix(n, k);
    if (opts.dropout) {
        model.require(Capability::dropout);
        s.dropout_logits.assign(opts.dropout->times, Matrix(n, k));
    }
    if (opts.perturbation) {
        s.perturbation = opts.perturbation;
        s.perturbed_logits = Matrix(n, k);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const Capture c = model.forward_capture(inputs.row(i));
        for (std::size_t l = 0; l < c.features.size(); ++l)
            std::copy(c.features[l].begin(), c.features[l].end(), s.layers[l].row(i).begin());
        std::copy(c.logits.begin(), c.logits.end(), s.logits.row(i).begin());
        if (opts.dropout) {
            const auto passes = model.dropout_passes(inputs.row(i), opts.dropout->p, opts.dropout->times,
                                                     opts.dropout->seed);
            for (std::size_t t = 0; t < passes.size(); ++t)
                std::copy(passes[t].begin(), passes[t].end(), s.dropout_logits[t].row(i).begin());
        }
        if (opts.perturbation) {
            const Vector xt = perturb_input(model, inputs.row(i), opts.perturbation->temperature,
                                            opts.perturbation->epsilon);
            const Vector f = model.forward(xt);
            std::copy(f.begin(), f.end(), s.perturbed_logits.row(i).begin());
        }
    }
    if (opts.keep_inputs) s.inputs = inputs;
    return s;
}

void add_split_to_bundle(BundleContents& bundle, const SplitData& split, SplitPhase phase) {
    std::vector<std::string> roles{"logits"};
    for (std::size_t l = 0; l < split.layers.size(); ++l)
        if (split.has_layer(l) || (split.size() == 0 && split.layers[l].cols() > 0))
            roles.push_back(feature_role(split.layer_names[l]));
    if (split.has_labels() && (is_id_kind(split.kind) || !split.labels.empty())) roles.push_back("labels");
    if (!split.dropout_logits.empty()) roles.push_back("dropout_logits");
    if (split.perturbation) roles.push_back("perturbed_logits");

    const std::uint64_t n = split.size();
    SplitEntry& e = bundle.manifest.add_split(split.id, split.kind, phase, n, roles);
    e.perturbation = split.perturbation;

    bundle.put(split.id, "logits", Tensor::from_matrix_f32(split.logits));
    for (std::size_t l = 0; l < split.layers.size(); ++l) {
        const std::string role = feature_role(split.layer_names[l]);
        if (e.has(role)) bundle.put(split.id, role, Tensor::from_matrix_f32(split.layers[l]));
    }
    if (e.has("labels")) bundle.put(split.id, "labels", Tensor::from_i64({n}, split.labels));
    if (e.has("dropout_logits")) {
        const std::uint64_t passes = split.dropout_logits.size(), k = split.logits.cols();
        std::vector<float> data;
        data.reserve(passes * n * k);
        for (const Matrix& m : split.dropout_logits)
            for (double v : m.data()) data.push_back(static_cast<float>(v));
        bundle.put(split.id, "dropout_logits", Tensor::from_f32({passes, n, k}, std::move(data)));
    }
    if (e.has("perturbed_logits")) bundle.put(split.id, "perturbed_logits", Tensor::from_matrix_f32(split.perturbed_logits));
}

void add_head_to_bundle(BundleContents& bundle, const ClassifierHead& head) {
    bundle.manifest.declare_head();
    bundle.put(kHeadSplit, kHeadWeightRole, Tensor::from_matrix_f32(head.weight));
    bundle.put(kHeadSplit, kHeadBiasRole, Tensor::from_vector_f32(head.bias));
}

}  // namespace oodkit

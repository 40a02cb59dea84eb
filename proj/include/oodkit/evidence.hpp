#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodkit/bundle.hpp"
#include "oodkit/matrix.hpp"
#include "oodkit/refmodel.hpp"

namespace oodkit {

// Per-sample view handed to score(). Spans point into a SplitData and are
// empty when the split did not record that role.
struct Evidence {
    std::span<const double> features;  // penultimate
    std::span<const double> logits;
    std::vector<std::span<const double>> layers;  // every layer, manifest order
    std::span<const double> input;
    std::vector<std::span<const double>> dropout;  // one per recorded pass
    std::span<const double> perturbed;
    const Perturbation* perturbation = nullptr;
};

// Dense, double-precision copy of one split.
struct SplitData {
    std::string id;
    SplitKind kind = SplitKind::id_test;
    std::vector<std::string> layer_names;
    std::vector<Matrix> layers;  // n x width (flattened); 0 x 0 when not recorded
    Matrix logits;
    std::vector<std::int64_t> labels;
    std::vector<Matrix> dropout_logits;  // pass-major
    Matrix perturbed_logits;
    std::optional<Perturbation> perturbation;
    Matrix inputs;  // live inputs for adapter-backed scoring

    std::size_t size() const { return logits.rows(); }
    const Matrix& penultimate() const { return layers.back(); }
    bool has_layer(std::size_t l) const { return layers[l].rows() == size() && layers[l].cols() > 0; }
    bool has_labels() const { return labels.size() == size(); }
    Evidence sample(std::size_t i) const;
};

SplitData load_split(const FeatureBundle& bundle, const std::string& split_id);

// Concatenates splits sample-wise (roles absent from any part are dropped).
SplitData concat_splits(const std::vector<const SplitData*>& parts, const std::string& id);

struct DropoutSpec {
    double p = 0.5;
    std::size_t times = 15;
    std::uint64_t seed = 0;
};

struct CaptureOptions {
    std::optional<DropoutSpec> dropout;
    std::optional<Perturbation> perturbation;
    bool keep_inputs = true;
};

// Runs `model` on every row of `inputs`.
SplitData capture_split(const ModelAdapter& model, const Matrix& inputs, std::vector<std::int64_t> labels,
                        SplitKind kind, const std::string& id, const CaptureOptions& opts = {});

// x - eps * sign(-grad_x log softmax_yhat(f(x) / T)), yhat = argmax f(x).
// A zero gradient component leaves that coordinate unchanged.
Vector perturb_input(const ModelAdapter& model, std::span<const double> x, double temperature, double epsilon);

// Bundle tensors for a set of splits (f32 rounding happens here).
void add_split_to_bundle(BundleContents& bundle, const SplitData& split, SplitPhase phase);
void add_head_to_bundle(BundleContents& bundle, const ClassifierHead& head);

}  // namespace oodkit

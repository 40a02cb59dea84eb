#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodkit/bundle.hpp"
#include "oodkit/matrix.hpp"

namespace oodkit {

enum class Capability { forward, features, input_grad, dropout, forward_from };

std::string to_string(Capability c);

struct LayerInfo {
    std::string name;
    std::size_t width = 0;
    // Matrix view used by RankFeat; rows * cols == width.
    std::size_t view_rows = 0;
    std::size_t view_cols = 0;
};

struct Capture {
    Vector logits;
    std::vector<Vector> features;  // one per layer, adapter layer order
};

// Model access for detectors that need more than recorded evidence. Every
// method not backed by a declared capability throws CapabilityError.
class ModelAdapter {
public:
    virtual ~ModelAdapter() = default;

    virtual bool supports(Capability c) const = 0;
    virtual std::size_t num_classes() const = 0;
    virtual std::size_t input_width() const;
    // Last entry is the penultimate layer.
    virtual const std::vector<LayerInfo>& layers() const = 0;

    virtual Capture forward_capture(std::span<const double> x) const;
    // Gradient of log softmax_c(f(x) / T) with respect to x.
    virtual Vector input_gradient(std::span<const double> x, std::size_t c, double temperature) const;
    virtual std::vector<Vector> dropout_passes(std::span<const double> x, double p, std::size_t times,
                                               std::uint64_t seed) const;
    virtual Vector forward_from(const std::string& layer, std::span<const double> feature) const;

    Vector forward(std::span<const double> x) const { return forward_capture(x).logits; }
    std::size_t layer_index(const std::string& name) const;
    void require(Capability c) const;
};

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
};

// Rectifier MLP: hidden layers "hidden1".."hiddenL" followed by a linear
// head. The last hidden layer is the penultimate layer. At a rectifier kink
// (pre-activation exactly 0) the subgradient is 0.
class MlpModel final : public ModelAdapter {
public:
    MlpModel(std::vector<DenseLayer> layers, double dropout_p = 0.5, std::uint64_t seed = 0);

    // He-style normal initialisation from `seed`. sizes = {input, hidden..., K}.
    static MlpModel random(const std::vector<std::size_t>& sizes, std::uint64_t seed, double dropout_p = 0.5);

    bool supports(Capability) const override { return true; }
    std::size_t num_classes() const override { return layers_.back().weight.rows(); }
    std::size_t input_width() const override { return layers_.front().weight.cols(); }
    const std::vector<LayerInfo>& layers() const override { return info_; }

    Capture forward_capture(std::span<const double> x) const override;
    Vector input_gradient(std::span<const double> x, std::size_t c, double temperature) const override;
    std::vector<Vector> dropout_passes(std::span<const double> x, double p, std::size_t times,
                                       std::uint64_t seed) const override;
    Vector forward_from(const std::string& layer, std::span<const double> feature) const override;

    // Keep-mask of one dropout pass: unit j survives when its uniform draw
    // from SplitMix64(seed).split(pass) is >= p.
    static std::vector<bool> dropout_mask(std::size_t width, double p, std::uint64_t seed, std::size_t pass);

    void set_view(const std::string& layer, std::size_t rows, std::size_t cols);

    const std::vector<DenseLayer>& dense() const { return layers_; }
    ClassifierHead head() const { return {layers_.back().weight, layers_.back().bias}; }
    double dropout_p() const { return dropout_p_; }
    std::uint64_t seed() const { return seed_; }

    // Checkpoint: model.json (layer sizes, p, seed) plus f64 .oodt weights.
    void save(const std::filesystem::path& dir) const;
    static MlpModel load(const std::filesystem::path& dir);

private:
    Vector run_from(std::size_t first_dense, Vector h) const;

    std::vector<DenseLayer> layers_;
    std::vector<LayerInfo> info_;
    double dropout_p_;
    std::uint64_t seed_;
};

// A linear classifier whose input is the penultimate feature itself: one
// layer "penultimate" (the input) and logits W z + b. Dropout masks the
// input units with the same scheme as MlpModel.
class LinearHeadModel final : public ModelAdapter {
public:
    explicit LinearHeadModel(ClassifierHead head, std::string layer = "penultimate");

    bool supports(Capability) const override { return true; }
    std::size_t num_classes() const override { return head_.weight.rows(); }
    std::size_t input_width() const override { return head_.weight.cols(); }
    const std::vector<LayerInfo>& layers() const override { return info_; }

    Capture forward_capture(std::span<const double> x) const override;
    Vector input_gradient(std::span<const double> x, std::size_t c, double temperature) const override;
    std::vector<Vector> dropout_passes(std::span<const double> x, double p, std::size_t times,
                                       std::uint64_t seed) const override;
    Vector forward_from(const std::string& layer, std::span<const double> feature) const override;

    const ClassifierHead& head() const { return head_; }

private:
    ClassifierHead head_;
    std::vector<LayerInfo> info_;
};

// Adapter over recorded evidence. forward_from is available at the
// penultimate layer when the bundle declares a head; everything needing live
// inputs fails with CapabilityError. Recorded dropout and perturbed logits
// reach detectors through SplitData instead.
class RecordedAdapter final : public ModelAdapter {
public:
    explicit RecordedAdapter(FeatureBundle bundle);

    bool supports(Capability c) const override;
    std::size_t num_classes() const override;
    const std::vector<LayerInfo>& layers() const override { return info_; }
    Vector forward_from(const std::string& layer, std::span<const double> feature) const override;

    const FeatureBundle& bundle() const { return bundle_; }

private:
    FeatureBundle bundle_;
    std::optional<ClassifierHead> head_;
    std::vector<LayerInfo> info_;
};

// rows x cols with rows the largest divisor of n not above sqrt(n).
std::pair<std::size_t, std::size_t> square_view(std::size_t n);

}  // namespace oodkit

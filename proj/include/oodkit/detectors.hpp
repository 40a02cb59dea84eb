#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "oodkit/evidence.hpp"
#include "oodkit/matrix.hpp"
#include "oodkit/refmodel.hpp"

namespace oodkit {

enum class SheMetric { inner, euclid, cosine };

std::string to_string(SheMetric m);

// Union of every method's hyperparameters; each method reads its own subset.
// JSON field names equal the member names.
struct DetectorParams {
    double temperature = 1.0;  // ODIN, EBO, RankFeat
    double gamma = 0.1;        // GEN
    std::int64_t top_m = 2;    // GEN
    double percentile = 90.0;  // ReAct, ASH, SCALE, DICE
    std::int64_t k = 50;       // KNN, NNGuide
    double epsilon = 0.0014;   // ODIN
    double pow = 8.0;          // Relation
    SheMetric metric = SheMetric::inner;
    double noise = 0.0;  // MDSEns
    std::int64_t times = 15;
    double dropout_p = 0.5;
    std::int64_t dim = 1;     // Residual, ViM
    double alpha_frac = 1.0;  // NNGuide, Relation bank ratio
    std::int64_t tail = 9;    // OpenMax
    bool acc = false;         // RankFeat
    bool normalized = true;   // fDBD
    std::uint64_t seed = 0;
    double sampling_ratio = 0.01;  // OpenMax; parsed, not used

    friend bool operator==(const DetectorParams&, const DetectorParams&) = default;
};

// Throws InvalidParam naming the first field out of bounds.
void validate_params(const DetectorParams& p);

nlohmann::json params_to_json(const DetectorParams& p);
// Fields absent from `j` keep their defaults; unknown fields and type
// mismatches are InvalidParam.
DetectorParams params_from_json(const nlohmann::json& j);
void set_param(DetectorParams& p, const std::string& field, const nlohmann::json& value);

struct DetectorState {
    std::string method;
    DetectorParams params;
    std::map<std::string, Matrix> tensors;
    std::map<std::string, double> scalars;

    const Matrix& tensor(const std::string& name) const;
    double scalar(const std::string& name) const;

    friend bool operator==(const DetectorState&, const DetectorState&) = default;
};

// state.json (canonical) plus one f64 .oodt per tensor.
std::string state_manifest_json(const DetectorState& s);
// Manifest followed by every encoded tensor in name order; equal states
// serialize to equal bytes.
std::string serialize_state(const DetectorState& s);
void save_state(const DetectorState& s, const std::filesystem::path& dir);
DetectorState load_state(const std::filesystem::path& dir);

struct FitContext {
    const SplitData* id_train = nullptr;
    const SplitData* id_val = nullptr;
    const SplitData* ood_val = nullptr;  // pooled OOD validation samples
    std::optional<ClassifierHead> head;
    const ModelAdapter* adapter = nullptr;
    std::size_t num_classes = 0;
};

class Detector {
public:
    virtual ~Detector() = default;
    virtual std::string tag() const = 0;
    virtual DetectorState fit(const FitContext& ctx, const DetectorParams& p) const = 0;
    // Pure: reads only its arguments. Higher means more in-distribution.
    virtual double score(const DetectorState& s, const Evidence& e, const ModelAdapter* adapter) const = 0;
};

const std::vector<std::string>& detector_tags();
std::unique_ptr<Detector> make_detector(const std::string& tag);

// "classification", "feature" or "hybrid".
const std::string& method_family(const std::string& tag);
// Name as printed in reports, e.g. "MDSEns" for mdsens.
const std::string& display_name(const std::string& tag);
// Inverse of display_name; also accepts the tag itself.
std::string tag_from_name(const std::string& name);

// Scores every sample of `split`; samples are spread over `threads` workers
// (0 = hardware concurrency). Output order follows the split.
Vector score_split(const Detector& d, const DetectorState& s, const SplitData& split,
                   const ModelAdapter* adapter = nullptr, std::size_t threads = 0);

// Logit rules shared by several detectors.
double msp_score(std::span<const double> f, double temperature = 1.0);
double mls_score(std::span<const double> f);
double ebo_score(std::span<const double> f, double temperature = 1.0);
double gen_score(std::span<const double> f, double gamma, std::int64_t top_m);

}  // namespace oodkit

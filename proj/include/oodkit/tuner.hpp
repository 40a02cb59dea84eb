#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "oodkit/bundle.hpp"
#include "oodkit/detectors.hpp"

namespace oodkit {

struct HyperGrid {
    std::string method;
    std::vector<DetectorParams> points;
};

// `spec` maps field -> non-empty value list. Cartesian product with the first
// field varying slowest; fields not named keep their value from `base`.
HyperGrid expand_grid(const std::string& method, const nlohmann::ordered_json& spec, const DetectorParams& base = {});

// Grid file: {"method": {"field": [values...]}, ...}. Strict JSON.
std::vector<HyperGrid> parse_grid_file(const std::string& text, const DetectorParams& base = {});
const HyperGrid& find_grid(const std::vector<HyperGrid>& grids, const std::string& method);

struct TunePoint {
    DetectorParams params;
    double val_auroc = 0.0;  // NaN when skipped
    std::string skipped;     // reason, empty when evaluated
};

struct TuneResult {
    DetectorParams best_params;
    double best_val_auroc = 0.0;
    std::size_t best_index = 0;
    std::vector<TunePoint> log;
    DetectorState refit_state;
};

struct TuneOptions {
    std::size_t threads = 0;
    // Sees each sweep state before it is discarded.
    std::function<void(std::size_t, const DetectorState&)> observe;
};

// Fits every grid point on ctx.id_train and selects by AUROC of ctx.id_val
// against the pooled ctx.ood_val; ties go to the earlier point. Points whose
// fit rejects the parameters (InvalidParam, CapabilityError) are logged as
// skipped. The returned state is a fresh fit at the winning parameters.
TuneResult tune(const Detector& d, const HyperGrid& grid, const FitContext& ctx, const TuneOptions& opts = {});

// Splits and head drawn from a bundle. The OOD validation splits are pooled.
struct TuneData {
    SplitData train, val, ood_val;
    std::optional<ClassifierHead> head;
    std::size_t num_classes = 0;

    FitContext context(const ModelAdapter* adapter) const;
};

TuneData load_tune_data(const FeatureBundle& bundle, const std::vector<std::string>& ood_val_ids);

// Split ids of one kind in one phase, sorted.
std::vector<std::string> splits_of(const Manifest& m, SplitKind kind, SplitPhase phase);
// The single split of `kind`; none or several is SchemaError.
std::string single_split(const Manifest& m, SplitKind kind);

}  // namespace oodkit

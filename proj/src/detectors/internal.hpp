#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>

#include "oodkit/detectors.hpp"
#include "oodkit/errors.hpp"

namespace oodkit::detail {

using Factory = std::function<std::unique_ptr<Detector>()>;
using Registry = std::map<std::string, Factory>;

void add_classification_detectors(Registry& r);
void add_feature_detectors(Registry& r);
void add_activation_detectors(Registry& r);

template <class D>
void add(Registry& r) {
    r[D{}.tag()] = [] { return std::make_unique<D>(); };
}

inline DetectorState new_state(const std::string& tag, const DetectorParams& p) {
    validate_params(p);
    DetectorState s;
    s.method = tag;
    s.params = p;
    return s;
}

const SplitData& need_train(const FitContext& ctx);
const SplitData& need_val(const FitContext& ctx);
const ClassifierHead& need_head(const FitContext& ctx);
std::size_t num_classes(const FitContext& ctx);
void need_labels(const SplitData& s);

std::size_t argmax(std::span<const double> v);
void check_finite(std::span<const double> v, const char* what);
// v / max(||v||, 1e-12)
Vector l2_normalized(std::span<const double> v);
void check_width(std::span<const double> v, std::size_t width, const char* what);

// Row-wise class means over samples whose mask entry is set; counts returned
// through `counts`.
Matrix class_means(const Matrix& x, std::span<const std::int64_t> labels, std::size_t k,
                   const std::vector<bool>* mask, std::vector<std::size_t>& counts);

inline std::span<const double> row_span(const Matrix& m, std::size_t r) { return m.row(r); }
inline Matrix as_row(std::span<const double> v) { return Matrix(1, v.size(), Vector(v.begin(), v.end())); }
inline std::span<const double> flat(const Matrix& m) { return m.data(); }

}  // namespace oodkit::detail

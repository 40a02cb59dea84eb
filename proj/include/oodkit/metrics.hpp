#pragma once

#include <cstdint>
#include <span>

namespace oodkit {

// All metrics treat higher confidence as more in-distribution and return
// values in [0, 1]. Both sides must be non-empty and finite (InvalidInput).

// P(id > ood) + 0.5 P(id = ood) over all cross pairs.
double auroc(std::span<const double> id, std::span<const double> ood);

// tau = largest id value with at least 95% of id >= tau; returns the share of
// ood >= tau.
double fpr_at_95_tpr(std::span<const double> id, std::span<const double> ood);

enum class Positive { id, ood };

// Average precision, sum of (R_n - R_{n-1}) P_n over thresholds; tied scores
// form one block.
double aupr(std::span<const double> id, std::span<const double> ood, Positive positive);

double harmonic_aupr(double a_in, double a_out);

// Unweighted mean of per-class F1. A class absent from both truth and
// prediction scores 1.
double f1_macro(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth, std::int64_t k);

struct MetricRecord {
    double auroc = 0.0;
    double fpr95 = 0.0;
    double aupr_in = 0.0;
    double aupr_out = 0.0;
    double aupr_h = 0.0;
    std::uint64_t n_id = 0;
    std::uint64_t n_ood = 0;
};

MetricRecord evaluate(std::span<const double> id, std::span<const double> ood);

}  // namespace oodkit

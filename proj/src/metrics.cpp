#include "oodkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "oodkit/errors.hpp"

namespace oodkit {

namespace {

void check_side(std::span<const double> v, const char* name) {
    if (v.empty()) throw InvalidInput(std::string(name) + " confidences are empty");
    for (double x : v)
        if (!std::isfinite(x)) throw InvalidInput(std::string(name) + " confidences contain a non-finite value");
}

std::vector<double> sorted(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    std::sort(out.begin(), out.end());
    return out;
}

// AP with `pos` ranked before `neg` by descending score.
double average_precision(std::span<const double> pos, std::span<const double> neg, bool negate) {
    struct Item {
        double score;
        bool positive;
    };
    std::vector<Item> items;
    items.reserve(pos.size() + neg.size());
    for (double v : pos) items.push_back({negate ? -v : v, true});
    for (double v : neg) items.push_back({negate ? -v : v, false});
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

    const auto total = static_cast<double>(pos.size());
    std::size_t tp = 0, fp = 0, prev_tp = 0;
    double ap = 0.0;
    for (std::size_t i = 0; i < items.size();) {
        std::size_t j = i;
        while (j < items.size() && items[j].score == items[i].score) {
            (items[j].positive ? tp : fp) += 1;
            ++j;
        }
        if (tp != prev_tp) {
            const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
            ap += static_cast<double>(tp - prev_tp) * precision;
            prev_tp = tp;
        }
        i = j;
    }
    return ap / total;
}

}  // namespace

double auroc(std::span<const double> id, std::span<const double> ood) {
    check_side(id, "id");
    check_side(ood, "ood");
    const std::vector<double> o = sorted(ood);
    // twice the Mann-Whitney U, kept integral so the result is exact
    std::uint64_t twice_u = 0;
    for (double v : id) {
        const auto lo = std::lower_bound(o.begin(), o.end(), v);
        const auto hi = std::upper_bound(lo, o.end(), v);
        twice_u += 2 * static_cast<std::uint64_t>(lo - o.begin()) + static_cast<std::uint64_t>(hi - lo);
    }
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

double fpr_at_95_tpr(std::span<const double> id, std::span<const double> ood) {
    check_side(id, "id");
    check_side(ood, "ood");
    std::vector<double> s = sorted(id);
    std::reverse(s.begin(), s.end());
    const std::size_t n = s.size();
    // walk down the distinct id values; the first one that retains 95% is tau
    double tau = s.back();
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && s[j] == s[i]) ++j;
        if (100 * j >= 95 * n) {
            tau = s[i];
            break;
        }
        i = j;
    }
    std::size_t above = 0;
    for (double v : ood) above += v >= tau ? 1 : 0;
    return static_cast<double>(above) / static_cast<double>(ood.size());
}

double aupr(std::span<const double> id, std::span<const double> ood, Positive positive) {
    check_side(id, "id");
    check_side(ood, "ood");
    return positive == Positive::id ? average_precision(id, ood, false) : average_precision(ood, id, true);
}

double harmonic_aupr(double a_in, double a_out) {
    if (!(a_in > 0.0) || !(a_out > 0.0) || !std::isfinite(a_in) || !std::isfinite(a_out))
        throw InvalidInput("harmonic AUPR needs positive inputs");
    return 2.0 * a_in * a_out / (a_in + a_out);
}

double f1_macro(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth, std::int64_t k) {
    if (k < 1) throw InvalidInput("class count must be positive");
    if (pred.empty()) throw InvalidInput("prediction set is empty");
    if (pred.size() != truth.size()) throw InvalidInput("prediction and truth lengths differ");
    const auto kk = static_cast<std::size_t>(k);
    std::vector<std::size_t> tp(kk), fp(kk), fn(kk);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] >= k || truth[i] < 0 || truth[i] >= k)
            throw InvalidInput("label " + std::to_string(pred[i] < 0 || pred[i] >= k ? pred[i] : truth[i]) +
                               " outside [0, " + std::to_string(k) + ")");
        const auto p = static_cast<std::size_t>(pred[i]), t = static_cast<std::size_t>(truth[i]);
        if (p == t) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[t];
        }
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < kk; ++c) {
        if (tp[c] + fp[c] + fn[c] == 0) {
            sum += 1.0;
        } else if (tp[c] > 0) {
            sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        }
    }
    return sum / static_cast<double>(kk);
}

MetricRecord evaluate(std::span<const double> id, std::span<const double> ood) {
    MetricRecord r;
    r.auroc = auroc(id, ood);
    r.fpr95 = fpr_at_95_tpr(id, ood);
    r.aupr_in = aupr(id, ood, Positive::id);
    r.aupr_out = aupr(id, ood, Positive::ood);
    r.aupr_h = harmonic_aupr(r.aupr_in, r.aupr_out);
    r.n_id = id.size();
    r.n_ood = ood.size();
    return r;
}

}  // namespace oodkit

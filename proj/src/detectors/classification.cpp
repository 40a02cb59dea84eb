#include <algorithm>
#include <cmath>

#include "internal.hpp"
#include "oodkit/numerics.hpp"

namespace oodkit::detail {

namespace {

class Msp final : public Detector {
public:
    std::string tag() const override { return "msp"; }
    DetectorState fit(const FitContext&, const DetectorParams& p) const override { return new_state(tag(), p); }
    double score(const DetectorState&, const Evidence& e, const ModelAdapter*) const override {
        return msp_score(e.logits);
    }
};

class Mls final : public Detector {
public:
    std::string tag() const override { return "mls"; }
    DetectorState fit(const FitContext&, const DetectorParams& p) const override { return new_state(tag(), p); }
    double score(const DetectorState&, const Evidence& e, const ModelAdapter*) const override {
        return mls_score(e.logits);
    }
};

class Ebo final : public Detector {
public:
    std::string tag() const override { return "ebo"; }
    DetectorState fit(const FitContext&, const DetectorParams& p) const override { return new_state(tag(), p); }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        return ebo_score(e.logits, s.params.temperature);
    }
};

class Gen final : public Detector {
public:
    std::string tag() const override { return "gen"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        if (ctx.id_train && static_cast<std::size_t>(p.top_m) > num_classes(ctx))
            throw InvalidParam("GEN needs M <= K");
        return new_state(tag(), p);
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        return gen_score(e.logits, s.params.gamma, s.params.top_m);
    }
};

// ---------------------------------------------------------------------------

double mean_nll(const Matrix& logits, std::span<const std::int64_t> labels, double t) {
    double sum = 0.0;
    Vector s(logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        for (std::size_t k = 0; k < s.size(); ++k) s[k] = logits(i, k) / t;
        sum += log_sum_exp(s) - s[static_cast<std::size_t>(labels[i])];
    }
    return sum / static_cast<double>(logits.rows());
}

class TempScale final : public Detector {
public:
    static constexpr double kLow = 0.01, kHigh = 100.0;

    std::string tag() const override { return "tempscale"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& val = need_val(ctx);
        need_labels(val);
        check_finite(flat(val.logits), "logits");
        auto nll = [&](double t) { return mean_nll(val.logits, val.labels, t); };

        const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
        double a = kLow, b = kHigh;
        double c = b - phi * (b - a), d = a + phi * (b - a);
        double fc = nll(c), fd = nll(d);
        for (int it = 0; it < 400 && b - a > 1e-12 * std::max(1.0, a); ++it) {
            if (fc <= fd) {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = nll(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = nll(d);
            }
        }
        // the interior estimate competes with both bounds; earlier wins ties
        const double mid = fc <= fd ? c : d;
        double best = kLow, best_nll = nll(kLow);
        for (double t : {mid, kHigh}) {
            const double v = nll(t);
            if (v < best_nll) {
                best = t;
                best_nll = v;
            }
        }
        s.scalars["temperature"] = best;
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        return msp_score(e.logits, s.scalar("temperature"));
    }
};

// ---------------------------------------------------------------------------

constexpr double kKlFloor = 1e-12;

class Klm final : public Detector {
public:
    std::string tag() const override { return "klm"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        need_labels(train);
        const std::size_t k = num_classes(ctx);
        Matrix probs(train.size(), k);
        for (std::size_t i = 0; i < train.size(); ++i) {
            const Vector q = softmax(train.logits.row(i));
            std::copy(q.begin(), q.end(), probs.row(i).begin());
        }
        std::vector<std::size_t> counts;
        Matrix templates = class_means(probs, train.labels, k, nullptr, counts);
        for (std::size_t c = 0; c < k; ++c)
            if (counts[c] == 0) throw InsufficientData("class " + std::to_string(c) + " has no training sample");
        s.tensors["templates"] = std::move(templates);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& t = s.tensor("templates");
        check_width(e.logits, t.cols(), "logits");
        const Vector p = softmax(e.logits);
        double best = INFINITY;
        for (std::size_t c = 0; c < t.rows(); ++c) {
            double kl = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i)
                kl += p[i] * (std::log(std::max(p[i], kKlFloor)) - std::log(std::max(t(c, i), kKlFloor)));
            best = std::min(best, kl);
        }
        return -best;
    }
};

// ---------------------------------------------------------------------------

bool recorded_perturbation(const SplitData* s, double t, double eps) {
    return s && s->perturbation && s->perturbation->temperature == t && s->perturbation->epsilon == eps;
}

class Odin final : public Detector {
public:
    std::string tag() const override { return "odin"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const bool live = ctx.adapter && ctx.adapter->supports(Capability::input_grad);
        const bool recorded = recorded_perturbation(ctx.id_val, p.temperature, p.epsilon) ||
                              recorded_perturbation(ctx.ood_val, p.temperature, p.epsilon);
        if (!live && !recorded && p.epsilon != 0.0)
            throw CapabilityError("odin needs input gradients or perturbed_logits recorded at T=" +
                                  std::to_string(p.temperature) + ", eps=" + std::to_string(p.epsilon));
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter* adapter) const override {
        const double t = s.params.temperature, eps = s.params.epsilon;
        if (adapter && adapter->supports(Capability::input_grad) && !e.input.empty())
            return msp_score(adapter->forward(perturb_input(*adapter, e.input, t, eps)), t);
        if (eps == 0.0) return msp_score(e.logits, t);
        if (!e.perturbed.empty() && e.perturbation && e.perturbation->temperature == t &&
            e.perturbation->epsilon == eps)
            return msp_score(e.perturbed, t);
        throw CapabilityError("odin: no input gradient and no matching perturbed_logits for this sample");
    }
};

// ---------------------------------------------------------------------------

class OpenMax final : public Detector {
public:
    std::string tag() const override { return "openmax"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        need_labels(train);
        const std::size_t k = num_classes(ctx);
        std::vector<bool> correct(train.size());
        for (std::size_t i = 0; i < train.size(); ++i)
            correct[i] = argmax(train.logits.row(i)) == static_cast<std::size_t>(train.labels[i]);
        std::vector<std::size_t> counts;
        Matrix means = class_means(train.logits, train.labels, k, &correct, counts);
        Matrix weibull(k, 2);
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] < static_cast<std::size_t>(p.tail))
                throw InsufficientData("class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                                       " correctly classified samples, tail needs " + std::to_string(p.tail));
            Vector dist;
            for (std::size_t i = 0; i < train.size(); ++i) {
                if (!correct[i] || static_cast<std::size_t>(train.labels[i]) != c) continue;
                double d2 = 0.0;
                for (std::size_t j = 0; j < k; ++j) d2 += (train.logits(i, j) - means(c, j)) * (train.logits(i, j) - means(c, j));
                dist.push_back(std::sqrt(d2));
            }
            const WeibullModel w = weibull_tail_fit(dist, static_cast<std::size_t>(p.tail));
            weibull(c, 0) = w.shape;
            weibull(c, 1) = w.scale;
        }
        s.tensors["means"] = std::move(means);
        s.tensors["weibull"] = std::move(weibull);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& means = s.tensor("means");
        const Matrix& wb = s.tensor("weibull");
        const std::size_t k = means.rows();
        check_width(e.logits, k, "logits");
        check_finite(e.logits, "logits");
        Vector aug(k + 1);
        double v0 = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < k; ++j) d2 += (e.logits[j] - means(i, j)) * (e.logits[j] - means(i, j));
            const WeibullModel w{wb(i, 0), wb(i, 1), 0};
            const double wi = w.cdf(std::sqrt(d2));
            aug[i + 1] = e.logits[i] * (1.0 - wi);
            v0 += e.logits[i] * wi;
        }
        aug[0] = v0;
        return -softmax(aug)[0];
    }
};

// ---------------------------------------------------------------------------

bool recorded_dropout(const SplitData* s, std::int64_t times) {
    return s && s->dropout_logits.size() >= static_cast<std::size_t>(times);
}

class Dropout final : public Detector {
public:
    std::string tag() const override { return "dropout"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const bool live = ctx.adapter && ctx.adapter->supports(Capability::dropout);
        if (!live && !recorded_dropout(ctx.id_val, p.times) && !recorded_dropout(ctx.ood_val, p.times))
            throw CapabilityError("dropout needs a dropout-capable adapter or " + std::to_string(p.times) +
                                  " recorded dropout passes");
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter* adapter) const override {
        const auto times = static_cast<std::size_t>(s.params.times);
        Vector mean;
        auto accumulate = [&](std::span<const double> f) {
            if (mean.empty()) mean.assign(f.size(), 0.0);
            if (f.size() != mean.size()) throw ShapeError("dropout passes disagree on K");
            for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
        };
        if (adapter && adapter->supports(Capability::dropout) && !e.input.empty()) {
            for (const auto& f : adapter->dropout_passes(e.input, s.params.dropout_p, times, s.params.seed))
                accumulate(f);
        } else if (e.dropout.size() >= times) {
            for (std::size_t t = 0; t < times; ++t) accumulate(e.dropout[t]);
        } else {
            throw CapabilityError("dropout: sample has " + std::to_string(e.dropout.size()) +
                                  " recorded passes and no live adapter");
        }
        for (double& v : mean) v /= static_cast<double>(times);
        return msp_score(mean);
    }
};

}  // namespace

void add_classification_detectors(Registry& r) {
    add<Msp>(r);
    add<Mls>(r);
    add<Ebo>(r);
    add<Gen>(r);
    add<TempScale>(r);
    add<Klm>(r);
    add<Odin>(r);
    add<OpenMax>(r);
    add<Dropout>(r);
}

}  // namespace oodkit::detail

#include <algorithm>
#include <cmath>
#include <numeric>

#include "internal.hpp"
#include "oodkit/numerics.hpp"
#include "oodkit/rng.hpp"

namespace oodkit::detail {

namespace {

void store_head(DetectorState& s, const ClassifierHead& h) {
    s.tensors["weight"] = h.weight;
    s.tensors["bias"] = as_row(h.bias);
}

Vector head_logits(const DetectorState& s, std::span<const double> z) {
    return affine(s.tensor("weight"), s.tensor("bias").row(0), z);
}

void check_features(const DetectorState& s, std::span<const double> z) {
    check_width(z, s.tensor("weight").cols(), "features");
    check_finite(z, "features");
}

class React final : public Detector {
public:
    std::string tag() const override { return "react"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        store_head(s, need_head(ctx));
        s.scalars["threshold"] = percentile(flat(need_train(ctx).penultimate()), p.percentile);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        check_features(s, e.features);
        const double c = s.scalar("threshold");
        Vector z(e.features.begin(), e.features.end());
        for (double& v : z) v = std::min(v, c);
        return ebo_score(head_logits(s, z));
    }
};

class Ash final : public Detector {
public:
    std::string tag() const override { return "ash"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        store_head(s, need_head(ctx));
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        check_features(s, e.features);
        return ebo_score(head_logits(s, transform(e.features, s.params.percentile)));
    }
    // ASH-B: entries below the per-sample percentile are pruned; survivors
    // (ties kept) share the pre-pruning sum equally.
    static Vector transform(std::span<const double> z, double p) {
        const double t = percentile(z, p);
        const double sum = std::accumulate(z.begin(), z.end(), 0.0);
        std::size_t kept = 0;
        for (double v : z) kept += v >= t ? 1 : 0;
        if (kept == 0) throw AllPruned("every activation fell below the percentile");
        const double fill = sum / static_cast<double>(kept);
        Vector out(z.size());
        for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] >= t ? fill : 0.0;
        return out;
    }
};

class Scale final : public Detector {
public:
    std::string tag() const override { return "scale"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        store_head(s, need_head(ctx));
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        check_features(s, e.features);
        return ebo_score(head_logits(s, transform(e.features, s.params.percentile)));
    }
    static Vector transform(std::span<const double> z, double p) {
        const double t = percentile(z, p);
        const double s1 = std::accumulate(z.begin(), z.end(), 0.0);
        double s2 = 0.0;
        for (double v : z)
            if (v >= t) s2 += v;
        if (!(s2 > 0.0)) throw DegenerateActivation("SCALE needs a positive sum above the percentile");
        const double factor = std::exp(s1 / s2);
        Vector out(z.begin(), z.end());
        for (double& v : out) v *= factor;
        return out;
    }
};

class Dice final : public Detector {
public:
    std::string tag() const override { return "dice"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const ClassifierHead& h = need_head(ctx);
        const Vector mu = column_mean(need_train(ctx).penultimate());
        const std::size_t k = h.weight.rows(), d = h.weight.cols();
        if (mu.size() != d) throw ShapeError("feature width does not match the head");
        const auto keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(static_cast<double>(d) * (100.0 - p.percentile) / 100.0 - 1e-9)));
        Matrix mask(k, d), masked(k, d);
        std::vector<std::size_t> order(d);
        for (std::size_t i = 0; i < k; ++i) {
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return h.weight(i, a) * mu[a] > h.weight(i, b) * mu[b];
            });
            for (std::size_t r = 0; r < std::min(keep, d); ++r) {
                mask(i, order[r]) = 1.0;
                masked(i, order[r]) = h.weight(i, order[r]);
            }
        }
        s.tensors["mask"] = std::move(mask);
        s.tensors["weight"] = std::move(masked);
        s.tensors["bias"] = as_row(h.bias);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        check_features(s, e.features);
        return ebo_score(head_logits(s, e.features));
    }
};

// ---------------------------------------------------------------------------

std::vector<std::size_t> bank_rows(std::size_t n, double alpha, std::uint64_t seed) {
    const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(alpha * static_cast<double>(n))));
    return seeded_subsample(n, std::min(take, n), seed);
}

Matrix normalized_subset(const Matrix& x, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), x.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const Vector v = l2_normalized(x.row(rows[r]));
        std::copy(v.begin(), v.end(), out.row(r).begin());
    }
    return out;
}

class NnGuide final : public Detector {
public:
    std::string tag() const override { return "nnguide"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        const auto rows = bank_rows(train.size(), p.alpha_frac, p.seed);
        if (static_cast<std::size_t>(p.k) > rows.size())
            throw InvalidParam("k = " + std::to_string(p.k) + " exceeds the bank size " + std::to_string(rows.size()));
        s.tensors["bank"] = normalized_subset(train.penultimate(), rows);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& bank = s.tensor("bank");
        check_width(e.features, bank.cols(), "features");
        check_finite(e.features, "features");
        const Vector q = l2_normalized(e.features);
        Vector sims(bank.rows());
        for (std::size_t i = 0; i < bank.rows(); ++i) sims[i] = dot(q, bank.row(i));
        const auto k = static_cast<std::size_t>(s.params.k);
        std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(), std::greater<>());
        double g = 0.0;
        for (std::size_t i = 0; i < k; ++i) g += sims[i];
        g /= static_cast<double>(k);
        return g * ebo_score(e.logits);
    }
};

class Relation final : public Detector {
public:
    std::string tag() const override { return "relation"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        const auto rows = bank_rows(train.size(), p.alpha_frac, p.seed);
        if (rows.empty()) throw InsufficientData("relation bank is empty");
        Matrix post(rows.size(), train.logits.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const Vector q = softmax(train.logits.row(rows[r]));
            std::copy(q.begin(), q.end(), post.row(r).begin());
        }
        s.tensors["bank"] = normalized_subset(train.penultimate(), rows);
        s.tensors["posteriors"] = std::move(post);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& bank = s.tensor("bank");
        const Matrix& post = s.tensor("posteriors");
        check_width(e.features, bank.cols(), "features");
        check_width(e.logits, post.cols(), "logits");
        check_finite(e.features, "features");
        const Vector q = l2_normalized(e.features);
        const Vector p = softmax(e.logits);
        double total = 0.0;
        for (std::size_t i = 0; i < bank.rows(); ++i) {
            const double c = dot(q, bank.row(i));
            if (!(c > 0.0)) continue;
            total += std::pow(c, s.params.pow) * dot(p, post.row(i));
        }
        return total;
    }
};

// ---------------------------------------------------------------------------

class RankFeat final : public Detector {
public:
    static constexpr std::size_t kPowerIterations = 1000;

    std::string tag() const override { return "rankfeat"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        if (!ctx.adapter) throw CapabilityError("rankfeat needs a model adapter");
        ctx.adapter->require(Capability::features);
        ctx.adapter->require(Capability::forward_from);
        if (p.acc && ctx.adapter->layers().size() < 2) throw CapabilityError("rankfeat acc needs two feature layers");
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter* adapter) const override {
        if (!adapter) throw CapabilityError("rankfeat needs a model adapter");
        const auto& layers = adapter->layers();
        if (e.layers.size() != layers.size()) throw ShapeError("evidence layers do not match the adapter");
        const std::size_t last = layers.size() - 1;
        Vector f = reforward(*adapter, layers[last], e.layers[last], s.params.seed);
        if (s.params.acc) {
            if (last == 0) throw CapabilityError("rankfeat acc needs two feature layers");
            const Vector g = reforward(*adapter, layers[last - 1], e.layers[last - 1], s.params.seed);
            for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.5 * (f[i] + g[i]);
        }
        return ebo_score(f, s.params.temperature);
    }

    static Vector remove_rank1(std::span<const double> z, std::size_t rows, std::size_t cols, std::uint64_t seed) {
        const Matrix m(rows, cols, Vector(z.begin(), z.end()));
        const TopSingular t = top_singular(m, kPowerIterations, seed);
        Vector out(z.begin(), z.end());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] -= t.sigma * t.u[r] * t.v[c];
        return out;
    }

private:
    static Vector reforward(const ModelAdapter& a, const LayerInfo& info, std::span<const double> z,
                            std::uint64_t seed) {
        check_width(z, info.width, "layer features");
        check_finite(z, "features");
        if (info.view_rows * info.view_cols != info.width) throw ShapeError("layer " + info.name + " has no matrix view");
        return a.forward_from(info.name, remove_rank1(z, info.view_rows, info.view_cols, seed));
    }
};

// ---------------------------------------------------------------------------

class Fdbd final : public Detector {
public:
    std::string tag() const override { return "fdbd"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const ClassifierHead& h = need_head(ctx);
        const std::size_t k = h.weight.rows();
        Matrix norms(k, k);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                if (i == j) continue;
                double acc = 0.0;
                for (std::size_t c = 0; c < h.weight.cols(); ++c)
                    acc += (h.weight(i, c) - h.weight(j, c)) * (h.weight(i, c) - h.weight(j, c));
                norms(i, j) = std::sqrt(acc);
                if (norms(i, j) == 0.0)
                    throw DegenerateHead("classes " + std::to_string(i) + " and " + std::to_string(j) +
                                         " share a weight vector");
            }
        const Vector mu = column_mean(need_train(ctx).penultimate());
        if (mu.size() != h.weight.cols()) throw ShapeError("feature width does not match the head");
        s.tensors["boundary_norms"] = std::move(norms);
        s.tensors["train_mean"] = as_row(mu);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& norms = s.tensor("boundary_norms");
        const std::size_t k = norms.rows();
        check_width(e.logits, k, "logits");
        check_finite(e.logits, "logits");
        const std::size_t y = argmax(e.logits);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j)
            if (j != y) sum += std::abs(e.logits[y] - e.logits[j]) / norms(y, j);
        double conf = sum / static_cast<double>(k - 1);
        if (s.params.normalized) {
            const auto mu = s.tensor("train_mean").row(0);
            check_width(e.features, mu.size(), "features");
            double acc = 0.0;
            for (std::size_t j = 0; j < mu.size(); ++j) acc += (e.features[j] - mu[j]) * (e.features[j] - mu[j]);
            if (acc == 0.0) throw InvalidInput("feature equals the training mean; normalized fDBD undefined");
            conf /= std::sqrt(acc);
        }
        return conf;
    }
};

}  // namespace

void add_activation_detectors(Registry& r) {
    add<React>(r);
    add<Ash>(r);
    add<Scale>(r);
    add<Dice>(r);
    add<NnGuide>(r);
    add<RankFeat>(r);
    add<Fdbd>(r);
    add<Relation>(r);
}

}  // namespace oodkit::detail

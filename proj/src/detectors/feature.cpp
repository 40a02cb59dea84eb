#include <algorithm>
#include <cmath>

#include "internal.hpp"
#include "oodkit/numerics.hpp"

namespace oodkit::detail {

namespace {

struct Gaussians {
    Matrix means;      // K x D
    Matrix precision;  // D x D
};

Gaussians fit_gaussians(const Matrix& x, std::span<const std::int64_t> labels, std::size_t k) {
    std::vector<std::size_t> counts;
    Gaussians g;
    g.means = class_means(x, labels, k, nullptr, counts);
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] < 2)
            throw InsufficientData("class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                                   " training samples; need 2");
    g.precision = ridge_solve(tied_covariance(x, labels, g.means), Matrix::identity(x.cols()));
    return g;
}

double mahalanobis(std::span<const double> z, std::span<const double> mu, const Matrix& precision) {
    const std::size_t d = z.size();
    Vector diff(d);
    for (std::size_t j = 0; j < d; ++j) diff[j] = z[j] - mu[j];
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < d; ++j) row += precision(i, j) * diff[j];
        q += diff[i] * row;
    }
    return q;
}

double min_class_distance(std::span<const double> z, const Matrix& means, const Matrix& precision) {
    check_width(z, means.cols(), "features");
    check_finite(z, "features");
    double best = INFINITY;
    for (std::size_t c = 0; c < means.rows(); ++c) best = std::min(best, mahalanobis(z, means.row(c), precision));
    return best;
}

class Mds final : public Detector {
public:
    std::string tag() const override { return "mds"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        need_labels(train);
        Gaussians g = fit_gaussians(train.penultimate(), train.labels, num_classes(ctx));
        s.tensors["means"] = std::move(g.means);
        s.tensors["precision"] = std::move(g.precision);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        return -min_class_distance(e.features, s.tensor("means"), s.tensor("precision"));
    }
};

class Rmds final : public Detector {
public:
    std::string tag() const override { return "rmds"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        need_labels(train);
        const Matrix& x = train.penultimate();
        Gaussians g = fit_gaussians(x, train.labels, num_classes(ctx));
        const Vector mu0 = column_mean(x);
        s.tensors["means"] = std::move(g.means);
        s.tensors["precision"] = std::move(g.precision);
        s.tensors["background_mean"] = as_row(mu0);
        s.tensors["background_precision"] = ridge_solve(covariance(x), Matrix::identity(x.cols()));
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const double dc = min_class_distance(e.features, s.tensor("means"), s.tensor("precision"));
        const double d0 = mahalanobis(e.features, s.tensor("background_mean").row(0), s.tensor("background_precision"));
        return d0 - dc;
    }
};

// ---------------------------------------------------------------------------

class MdsEnsemble final : public Detector {
public:
    static constexpr double kL2 = 1e-3;

    std::string tag() const override { return "mdsens"; }

    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        need_labels(train);
        const std::size_t k = num_classes(ctx), layers = train.layers.size();
        if (p.noise > 0.0 && !(ctx.adapter && ctx.adapter->supports(Capability::input_grad)))
            throw CapabilityError("mdsens with noise > 0 needs an adapter with input gradients");
        for (std::size_t l = 0; l < layers; ++l) {
            if (!train.has_layer(l)) throw CapabilityError("id_train lacks layer " + train.layer_names[l]);
            Gaussians g = fit_gaussians(train.layers[l], train.labels, k);
            s.tensors["means." + std::to_string(l)] = std::move(g.means);
            s.tensors["precision." + std::to_string(l)] = std::move(g.precision);
        }
        s.scalars["layers"] = static_cast<double>(layers);

        const std::size_t n_id = ctx.id_val ? ctx.id_val->size() : 0;
        const std::size_t n_ood = ctx.ood_val ? ctx.ood_val->size() : 0;
        if (n_id == 0 || n_ood == 0) throw DegenerateLabels("mdsens needs both ID and OOD validation samples");
        Matrix x(n_id + n_ood, layers);
        Vector y(n_id + n_ood);
        std::size_t r = 0;
        for (const SplitData* split : {ctx.id_val, ctx.ood_val}) {
            for (std::size_t i = 0; i < split->size(); ++i, ++r) {
                const Vector sc = layer_scores(s, split->sample(i), ctx.adapter);
                std::copy(sc.begin(), sc.end(), x.row(r).begin());
                y[r] = split == ctx.id_val ? 1.0 : 0.0;
            }
        }

        // standardize for conditioning, then fold the transform back
        Vector mu = column_mean(x), sd(layers);
        for (std::size_t l = 0; l < layers; ++l) {
            double v = 0.0;
            for (std::size_t i = 0; i < x.rows(); ++i) v += (x(i, l) - mu[l]) * (x(i, l) - mu[l]);
            sd[l] = std::sqrt(v / static_cast<double>(x.rows()));
        }
        Matrix xs(x.rows(), layers);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t l = 0; l < layers; ++l) xs(i, l) = sd[l] > 0.0 ? (x(i, l) - mu[l]) / sd[l] : 0.0;
        const Vector ws = logistic_fit(xs, y, kL2);
        Matrix raw(1, layers + 1), std_w(1, layers + 1);
        double bias = ws[layers];
        for (std::size_t l = 0; l < layers; ++l) {
            std_w(0, l) = ws[l];
            if (sd[l] > 0.0) {
                raw(0, l) = ws[l] / sd[l];
                bias -= ws[l] * mu[l] / sd[l];
            }
        }
        std_w(0, layers) = ws[layers];
        raw(0, layers) = bias;
        s.tensors["weights"] = std::move(raw);
        s.tensors["std_weights"] = std::move(std_w);
        return s;
    }

    double score(const DetectorState& s, const Evidence& e, const ModelAdapter* adapter) const override {
        const Vector sc = layer_scores(s, e, adapter);
        const Matrix& w = s.tensor("weights");
        double out = w(0, sc.size());
        for (std::size_t l = 0; l < sc.size(); ++l) out += w(0, l) * sc[l];
        return out;
    }

    // Per-layer MDS confidences, after the optional input perturbation.
    static Vector layer_scores(const DetectorState& s, const Evidence& e, const ModelAdapter* adapter) {
        const auto layers = static_cast<std::size_t>(s.scalar("layers"));
        Vector out(layers);
        if (s.params.noise > 0.0) {
            if (!adapter || e.input.empty())
                throw CapabilityError("mdsens with noise > 0 needs live inputs and an adapter");
            const Capture cap = adapter->forward_capture(perturb_input(*adapter, e.input, 1.0, s.params.noise));
            if (cap.features.size() != layers) throw ShapeError("adapter layer count differs from the state");
            for (std::size_t l = 0; l < layers; ++l)
                out[l] = -min_class_distance(cap.features[l], s.tensor("means." + std::to_string(l)),
                                             s.tensor("precision." + std::to_string(l)));
            return out;
        }
        if (e.layers.size() != layers) throw ShapeError("evidence layer count differs from the state");
        for (std::size_t l = 0; l < layers; ++l)
            out[l] = -min_class_distance(e.layers[l], s.tensor("means." + std::to_string(l)),
                                         s.tensor("precision." + std::to_string(l)));
        return out;
    }
};

// ---------------------------------------------------------------------------

Matrix normalized_rows(const Matrix& x, const std::vector<std::size_t>* pick = nullptr) {
    const std::size_t n = pick ? pick->size() : x.rows();
    Matrix out(n, x.cols());
    for (std::size_t r = 0; r < n; ++r) {
        const Vector v = l2_normalized(x.row(pick ? (*pick)[r] : r));
        std::copy(v.begin(), v.end(), out.row(r).begin());
    }
    return out;
}

class Knn final : public Detector {
public:
    std::string tag() const override { return "knn"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        if (static_cast<std::size_t>(p.k) > train.size())
            throw InvalidParam("k = " + std::to_string(p.k) + " exceeds the bank size " + std::to_string(train.size()));
        s.tensors["bank"] = normalized_rows(train.penultimate());
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& bank = s.tensor("bank");
        check_width(e.features, bank.cols(), "features");
        check_finite(e.features, "features");
        const Vector q = l2_normalized(e.features);
        Vector d2(bank.rows());
        for (std::size_t i = 0; i < bank.rows(); ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) acc += (q[j] - bank(i, j)) * (q[j] - bank(i, j));
            d2[i] = acc;
        }
        const auto k = static_cast<std::size_t>(s.params.k);
        std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(k - 1), d2.end());
        return -std::sqrt(d2[k - 1]);
    }
};

class She final : public Detector {
public:
    std::string tag() const override { return "she"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        need_labels(train);
        const std::size_t k = num_classes(ctx);
        std::vector<bool> correct(train.size());
        for (std::size_t i = 0; i < train.size(); ++i)
            correct[i] = argmax(train.logits.row(i)) == static_cast<std::size_t>(train.labels[i]);
        std::vector<std::size_t> counts;
        Matrix templates = class_means(train.penultimate(), train.labels, k, &correct, counts);
        for (std::size_t c = 0; c < k; ++c)
            if (counts[c] == 0) throw InsufficientData("class " + std::to_string(c) + " has no correctly classified sample");
        s.tensors["templates"] = std::move(templates);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const Matrix& t = s.tensor("templates");
        check_width(e.features, t.cols(), "features");
        check_width(e.logits, t.rows(), "logits");
        check_finite(e.logits, "logits");
        const auto tmpl = t.row(argmax(e.logits));
        switch (s.params.metric) {
            case SheMetric::inner: return dot(e.features, tmpl);
            case SheMetric::euclid: {
                double acc = 0.0;
                for (std::size_t j = 0; j < tmpl.size(); ++j)
                    acc += (e.features[j] - tmpl[j]) * (e.features[j] - tmpl[j]);
                return -std::sqrt(acc);
            }
            case SheMetric::cosine:
                return dot(e.features, tmpl) / (std::max(norm2(e.features), 1e-12) * std::max(norm2(tmpl), 1e-12));
        }
        return 0.0;
    }
};

// ---------------------------------------------------------------------------

struct Subspace {
    Vector mean;
    Matrix basis;  // D x dim, eigenvectors of the smallest eigenvalues
};

Subspace fit_subspace(const Matrix& x, std::int64_t dim) {
    const auto d = static_cast<std::int64_t>(x.cols());
    if (dim < 1 || dim > d - 1)
        throw InvalidParam("dim = " + std::to_string(dim) + " outside [1, " + std::to_string(d - 1) + "]");
    Subspace s;
    s.mean = column_mean(x);
    const SymEigResult eig = sym_eig(covariance(x));
    s.basis = Matrix(x.cols(), static_cast<std::size_t>(dim));
    for (std::size_t r = 0; r < x.cols(); ++r)
        for (std::size_t c = 0; c < s.basis.cols(); ++c) s.basis(r, c) = eig.eigenvectors(r, c);
    return s;
}

double residual_norm(std::span<const double> z, std::span<const double> mean, const Matrix& basis) {
    check_width(z, basis.rows(), "features");
    check_finite(z, "features");
    double acc = 0.0;
    for (std::size_t c = 0; c < basis.cols(); ++c) {
        double proj = 0.0;
        for (std::size_t r = 0; r < basis.rows(); ++r) proj += basis(r, c) * (z[r] - mean[r]);
        acc += proj * proj;
    }
    return std::sqrt(acc);
}

class Residual final : public Detector {
public:
    std::string tag() const override { return "residual"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        Subspace sub = fit_subspace(need_train(ctx).penultimate(), p.dim);
        s.tensors["mean"] = as_row(sub.mean);
        s.tensors["basis"] = std::move(sub.basis);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        return -residual_norm(e.features, s.tensor("mean").row(0), s.tensor("basis"));
    }
};

class Vim final : public Detector {
public:
    std::string tag() const override { return "vim"; }
    DetectorState fit(const FitContext& ctx, const DetectorParams& p) const override {
        DetectorState s = new_state(tag(), p);
        const SplitData& train = need_train(ctx);
        const Matrix& x = train.penultimate();
        Subspace sub = fit_subspace(x, p.dim);
        double logit_sum = 0.0, residual_sum = 0.0, spread = 0.0;
        for (std::size_t i = 0; i < train.size(); ++i) {
            const auto f = train.logits.row(i);
            check_finite(f, "logits");
            logit_sum += *std::max_element(f.begin(), f.end());
            residual_sum += residual_norm(x.row(i), sub.mean, sub.basis);
            double c = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) c += (x(i, j) - sub.mean[j]) * (x(i, j) - sub.mean[j]);
            spread += std::sqrt(c);
        }
        if (!(residual_sum > 1e-12 * spread) || residual_sum == 0.0)
            throw DegenerateSubspace("training features have no mass in the residual subspace");
        s.scalars["alpha"] = logit_sum / residual_sum;
        s.tensors["mean"] = as_row(sub.mean);
        s.tensors["basis"] = std::move(sub.basis);
        return s;
    }
    double score(const DetectorState& s, const Evidence& e, const ModelAdapter*) const override {
        const double l0 = s.scalar("alpha") * residual_norm(e.features, s.tensor("mean").row(0), s.tensor("basis"));
        return vim_confidence(e.logits, l0);
    }

    static double vim_confidence(std::span<const double> f, double l0) {
        check_finite(f, "logits");
        Vector aug(f.begin(), f.end());
        aug.push_back(l0);
        return log_sum_exp(f) - log_sum_exp(aug);
    }
};

}  // namespace

void add_feature_detectors(Registry& r) {
    add<Mds>(r);
    add<Rmds>(r);
    add<MdsEnsemble>(r);
    add<Knn>(r);
    add<She>(r);
    add<Residual>(r);
    add<Vim>(r);
}

}  // namespace oodkit::detail

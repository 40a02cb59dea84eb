// Acceptance checks: one PASS/FAIL line per primary criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>

#include "oodkit/detectors.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/numerics.hpp"
#include "oodkit/runner.hpp"
#include "oodkit/tuner.hpp"
#include "oracles/eigen_bridge.hpp"
#include "support/bundle_fuzz.hpp"
#include "support/mlp_world.hpp"
#include "support/scratch.hpp"

using namespace oodkit;
using oracle::random_matrix;
using oracle::to_eigen;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (!pass) detail << "; ";
            pass = false;
            detail << what;
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------------------

void table1(Outcome& o) {
    const auto t0 = Clock::now();
    const SuppFixture fx = parse_supp_fixture(read_file("data/supp_tables.csv"));
    const Table1 t = aggregate_table1(fx.rows);
    const auto expected = parse_table1_expected(read_file("data/table1.csv"));
    const double elapsed = seconds_since(t0);

    o.require(expected.size() == 24 && t.rows.size() == 24, "expected 24 methods");
    double worst = 0.0;
    for (const auto& e : expected) {
        const auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const Table1Row& r) { return r.method == e.method; });
        if (it == t.rows.end()) {
            o.require(false, "missing " + e.method);
            continue;
        }
        for (double d : {it->mean_nood_auroc - e.mean_nood_auroc, it->aupr_h - e.aupr_h, it->mean_fpr95 - e.mean_fpr95}) {
            worst = std::max(worst, std::abs(d));
            o.require(std::abs(d) <= 0.05, display_name(e.method) + " off by " + fmt("%.3f", d));
        }
    }
    o.require(elapsed < 1.0, "took " + fmt("%.3f", elapsed) + " s");
    o.detail << (o.pass ? "" : "; ") << "24 rows, max |diff| " << fmt("%.4f", worst) << ", " << fmt("%.3f", elapsed)
             << " s";
}

// ---------------------------------------------------------------------------

double pairwise_auroc(const Vector& id, const Vector& ood) {
    std::uint64_t twice = 0;
    for (double a : id)
        for (double b : ood) twice += a > b ? 2 : (a == b ? 1 : 0);
    return static_cast<double>(twice) / (2.0 * static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Precision/recall at every distinct threshold, step-wise area.
double sweep_ap(const Vector& pos, const Vector& neg) {
    std::set<double, std::greater<>> thresholds(pos.begin(), pos.end());
    thresholds.insert(neg.begin(), neg.end());
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        const double tp = static_cast<double>(std::count_if(pos.begin(), pos.end(), [&](double v) { return v >= t; }));
        const double fp = static_cast<double>(std::count_if(neg.begin(), neg.end(), [&](double v) { return v >= t; }));
        if (tp == 0) continue;
        const double recall = tp / static_cast<double>(pos.size());
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    return ap;
}

double enumerated_fpr95(const Vector& id, const Vector& ood) {
    double best = -INFINITY;
    for (double t : id) {
        const auto hit = std::count_if(id.begin(), id.end(), [&](double v) { return v >= t; });
        if (100 * hit >= 95 * static_cast<std::int64_t>(id.size())) best = std::max(best, t);
    }
    const auto fp = std::count_if(ood.begin(), ood.end(), [&](double v) { return v >= best; });
    return static_cast<double>(fp) / static_cast<double>(ood.size());
}

void metric_oracles(Outcome& o) {
    const auto t0 = Clock::now();
    SplitMix64 rng(2024);
    auto draw = [&](std::size_t n, int levels, double shift) {
        Vector v(n);
        for (double& x : v) x = levels ? std::floor(rng.uniform() * levels) + shift : rng.normal() + shift;
        return v;
    };
    std::size_t auroc_bad = 0, fpr_bad = 0;
    double ap_err = 0.0;
    for (int i = 0; i < 200; ++i) {
        const int levels = i % 3 == 0 ? 0 : 2 + static_cast<int>(rng.below(10));
        const Vector id = draw(1 + rng.below(100), levels, 0.5), ood = draw(1 + rng.below(100), levels, 0.0);
        auroc_bad += auroc(id, ood) != pairwise_auroc(id, ood);
        ap_err = std::max(ap_err, std::abs(aupr(id, ood, Positive::id) - sweep_ap(id, ood)));
        Vector nid(id.size()), nood(ood.size());
        std::transform(id.begin(), id.end(), nid.begin(), std::negate<>());
        std::transform(ood.begin(), ood.end(), nood.begin(), std::negate<>());
        ap_err = std::max(ap_err, std::abs(aupr(id, ood, Positive::ood) - sweep_ap(nood, nid)));
        if (i < 100) fpr_bad += fpr_at_95_tpr(id, ood) != enumerated_fpr95(id, ood);
    }
    const double elapsed = seconds_since(t0);
    o.require(auroc_bad == 0, std::to_string(auroc_bad) + " AUROC mismatches");
    o.require(ap_err <= 1e-12, "AUPR error " + fmt("%.2e", ap_err));
    o.require(fpr_bad == 0, std::to_string(fpr_bad) + " FPR@95 mismatches");
    o.require(elapsed < 10.0, "took " + fmt("%.2f", elapsed) + " s");
    o.detail << (o.pass ? "" : "; ") << "200 AUROC sets exact, AUPR max err " << fmt("%.1e", ap_err)
             << ", 100 FPR sets exact, " << fmt("%.2f", elapsed) << " s";
}

// ---------------------------------------------------------------------------

double max_diff(const Vector& a, const Vector& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return a.size() == b.size() ? m : INFINITY;
}

void equivalences(Outcome& o) {
    const MlpWorld w = make_mlp_world(21, 240, 100);
    const FitContext ctx = w.context();
    const ModelAdapter* a = &w.model;
    auto msp = make_detector("msp"), ebo = make_detector("ebo");
    const Vector msp_ref = score_split(*msp, msp->fit(ctx, {}), w.test, a, 1);
    const Vector ebo_ref = score_split(*ebo, ebo->fit(ctx, {}), w.test, a, 1);

    auto temp = make_detector("tempscale");
    DetectorState ts = temp->fit(ctx, {});
    ts.scalars["temperature"] = 1.0;
    const double d_temp = max_diff(score_split(*temp, ts, w.test, a, 1), msp_ref);

    auto dice = make_detector("dice");
    DetectorParams p0;
    p0.percentile = 0.0;
    const double d_dice = max_diff(score_split(*dice, dice->fit(ctx, p0), w.test, a, 1), ebo_ref);

    auto react = make_detector("react");
    DetectorState rs = react->fit(ctx, {});
    double max_act = 0.0;
    for (double v : w.test.penultimate().data()) max_act = std::max(max_act, v);
    rs.scalars["threshold"] = max_act;
    const double d_react = max_diff(score_split(*react, rs, w.test, a, 1), ebo_ref);

    auto odin = make_detector("odin");
    DetectorParams po;
    po.temperature = 1.0;
    po.epsilon = 0.0;
    const DetectorState os = odin->fit(ctx, po);
    const double d_odin = std::max(max_diff(score_split(*odin, os, w.test, a, 1), msp_ref),
                                   max_diff(score_split(*odin, os, w.test, nullptr, 1), msp_ref));

    o.require(w.test.size() == 100, "expected 100 samples");
    o.require(d_temp <= 1e-10, "tempscale " + fmt("%.2e", d_temp));
    o.require(d_dice <= 1e-10, "dice " + fmt("%.2e", d_dice));
    o.require(d_react <= 1e-10, "react " + fmt("%.2e", d_react));
    o.require(d_odin <= 1e-10, "odin " + fmt("%.2e", d_odin));
    o.detail << (o.pass ? "" : "; ") << "max diffs tempscale " << fmt("%.1e", d_temp) << ", dice " << fmt("%.1e", d_dice)
             << ", react " << fmt("%.1e", d_react) << ", odin " << fmt("%.1e", d_odin);
}

// ---------------------------------------------------------------------------

SplitData feature_split(const Matrix& x, std::vector<std::int64_t> labels) {
    SplitData s;
    s.id = "train";
    s.kind = SplitKind::id_train;
    s.layer_names = {"penultimate"};
    s.layers.push_back(x);
    s.logits = Matrix(x.rows(), 3);
    s.labels = std::move(labels);
    return s;
}

double score_features(const Detector& d, const DetectorState& s, std::span<const double> z) {
    const SplitData one = one_sample(z, Vector{0.0, 0.0, 0.0});
    return d.score(s, one.sample(0), nullptr);
}

double log_prob(const MlpModel& m, std::span<const double> x, std::size_t c, double t) {
    const Vector f = m.forward(x);
    Vector s(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) s[i] = f[i] / t;
    return s[c] - log_sum_exp(s);
}

void numerics_oracles(Outcome& o) {
    SplitMix64 rng(88);
    const std::size_t n = 300, dim = 8;

    // MDS against an explicit inverse of the tied covariance.
    Matrix x = random_matrix(n, dim, rng);
    std::vector<std::int64_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<std::int64_t>(i % 3);
        for (std::size_t j = 0; j < dim; ++j) x(i, j) = x(i, j) * (1.0 + 0.3 * j) + (j == i % 3 ? 3.0 : 0.0);
    }
    const SplitData train = feature_split(x, y);
    FitContext ctx;
    ctx.id_train = &train;
    ctx.num_classes = 3;
    const auto mds = make_detector("mds");
    const DetectorState ms = mds->fit(ctx, {});
    const Eigen::MatrixXd e = to_eigen(x);
    std::vector<Eigen::VectorXd> mu(3, Eigen::VectorXd::Zero(dim));
    std::vector<double> count(3, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        mu[y[i]] += e.row(i).transpose();
        count[y[i]] += 1.0;
    }
    for (int c = 0; c < 3; ++c) mu[c] /= count[c];
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd d = e.row(i).transpose() - mu[y[i]];
        cov += d * d.transpose() / static_cast<double>(n);
    }
    cov += 1e-6 * cov.trace() / static_cast<double>(dim) * Eigen::MatrixXd::Identity(dim, dim);
    const Eigen::MatrixXd inv = cov.inverse();
    double mds_err = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Matrix z = random_matrix(1, dim, rng, 3.0);
        const Eigen::VectorXd ze = to_eigen(z).row(0).transpose();
        double best = INFINITY;
        for (int c = 0; c < 3; ++c) best = std::min(best, (ze - mu[c]).dot(inv * (ze - mu[c])));
        mds_err = std::max(mds_err, std::abs(score_features(*mds, ms, z.row(0)) + best) / std::max(1.0, best));
    }

    // Residual against a dense eigendecomposition of the covariance.
    const auto res = make_detector("residual");
    DetectorParams rp;
    rp.dim = 3;
    const DetectorState rs = res->fit(ctx, rp);
    const Eigen::VectorXd gm = e.colwise().mean().transpose();
    const Eigen::MatrixXd centred = e.rowwise() - gm.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(centred.transpose() * centred / static_cast<double>(n));
    const Eigen::MatrixXd r = es.eigenvectors().leftCols(3);
    double res_err = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Matrix z = random_matrix(1, dim, rng, 3.0);
        const double expect = -(r.transpose() * (to_eigen(z).row(0).transpose() - gm)).norm();
        res_err = std::max(res_err, std::abs(score_features(*res, rs, z.row(0)) - expect) / std::max(1.0, -expect));
    }

    // Power iteration against a full SVD.
    double svd_err = 0.0;
    for (int t = 0; t < 20; ++t) {
        const Matrix m = random_matrix(6, 5, rng);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
        const auto s = svd.singularValues();
        if (s(0) / s(1) < 1.01) continue;
        svd_err = std::max(svd_err, std::abs(top_singular(m, 2000, 3).sigma - s(0)) / s(0));
    }

    // Input gradients against central differences, away from rectifier kinks.
    double grad_err = 0.0;
    int grads = 0;
    for (int trial = 0; grads < 30 && trial < 300; ++trial) {
        const MlpModel m = MlpModel::random({6, 9, 7, 4}, 500 + trial);
        const Matrix xi = random_matrix(1, 6, rng);
        Vector h(xi.row(0).begin(), xi.row(0).end());
        double margin = INFINITY;
        for (std::size_t l = 0; l + 1 < m.dense().size(); ++l) {
            h = affine(m.dense()[l].weight, m.dense()[l].bias, h);
            for (double& v : h) {
                margin = std::min(margin, std::abs(v));
                v = std::max(v, 0.0);
            }
        }
        if (margin < 1e-2) continue;
        const std::size_t c = rng.below(4);
        const Vector g = m.input_gradient(xi.row(0), c, 1.0);
        double err = 0.0, scale = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            Vector xp(xi.row(0).begin(), xi.row(0).end()), xm = xp;
            xp[j] += 1e-4;
            xm[j] -= 1e-4;
            const double fd = (log_prob(m, xp, c, 1.0) - log_prob(m, xm, c, 1.0)) / 2e-4;
            err = std::max(err, std::abs(fd - g[j]));
            scale = std::max(scale, std::abs(fd));
        }
        grad_err = std::max(grad_err, err / std::max(scale, 1e-6));
        ++grads;
    }

    // Weibull tail fit on an inverse-CDF draw.
    SplitMix64 wr(101);
    Vector draws(5000);
    for (double& v : draws) v = std::pow(-std::log1p(-wr.uniform()), 0.5);
    const WeibullModel wm = weibull_tail_fit(draws, 5000);

    o.require(mds_err <= 1e-8, "MDS " + fmt("%.2e", mds_err));
    o.require(res_err <= 1e-8, "Residual " + fmt("%.2e", res_err));
    o.require(svd_err <= 1e-6, "top_singular " + fmt("%.2e", svd_err));
    o.require(grads == 30 && grad_err <= 1e-4, "gradient " + fmt("%.2e", grad_err));
    o.require(std::abs(wm.shape - 2.0) <= 0.1 && std::abs(wm.scale - 1.0) <= 0.1,
              "Weibull shape " + fmt("%.3f", wm.shape) + " scale " + fmt("%.3f", wm.scale));
    o.detail << (o.pass ? "" : "; ") << "MDS " << fmt("%.1e", mds_err) << ", Residual " << fmt("%.1e", res_err)
             << ", SVD " << fmt("%.1e", svd_err) << ", grad " << fmt("%.1e", grad_err) << ", Weibull ("
             << fmt("%.3f", wm.shape) << ", " << fmt("%.3f", wm.scale) << ")";
}

// ---------------------------------------------------------------------------

void synthetic(Outcome& o) {
    const auto t0 = Clock::now();
    const SynthSpec spec = synth_spec_from_json(read_file("data/synth_default.json"));
    const BenchmarkData data(FeatureBundle::from_contents(synth_benchmark(spec)), AdapterKind::linear_head);
    BenchmarkConfig cfg;
    cfg.methods = detector_tags();
    cfg.grids = "data/grids_synth.json";
    const BenchmarkResult r = run_benchmark(cfg, data);
    const double elapsed = seconds_since(t0);

    auto auroc_of = [&](const std::string& m, const std::string& split) {
        for (const auto& row : r.records)
            if (row.method == m && row.split == split) return row.metrics.auroc;
        return static_cast<double>(NAN);
    };
    const double mds_far = auroc_of("mds", "food"), knn_far = auroc_of("knn", "food"), csid = auroc_of("mds", "csid");
    const Table1 t = table_from_records(r.records);
    double sum[2] = {0, 0};
    int cnt[2] = {0, 0};
    for (const auto& row : t.rows) {
        if (row.family == "hybrid") continue;
        const int f = row.family == "feature";
        sum[f] += row.mean_nood_auroc;
        ++cnt[f];
    }
    const double feat = sum[1] / cnt[1], cls = sum[0] / cnt[0];

    o.require(spec.n_test == 2000 && spec.dim == 16 && spec.classes == 3, "spec is not n=2000, D=16, K=3");
    o.require(mds_far >= 0.99, "MDS far " + fmt("%.4f", mds_far));
    o.require(knn_far >= 0.99, "KNN far " + fmt("%.4f", knn_far));
    o.require(csid >= 0.45 && csid <= 0.55, "csID " + fmt("%.4f", csid));
    o.require(feat > cls, "feature mean " + fmt("%.4f", feat) + " <= classification " + fmt("%.4f", cls));
    o.require(elapsed < 120.0, "took " + fmt("%.1f", elapsed) + " s");
    o.detail << (o.pass ? "" : "; ") << "far MDS " << fmt("%.4f", mds_far) << " KNN " << fmt("%.4f", knn_far)
             << ", csID MDS " << fmt("%.4f", csid) << ", nOOD feature " << fmt("%.4f", feat) << " > classification "
             << fmt("%.4f", cls) << ", " << fmt("%.1f", elapsed) << " s";
}

// ---------------------------------------------------------------------------

const std::map<std::string, const char*> kSweep{
    {"msp", R"({"seed": [0, 1]})"},
    {"mls", R"({"seed": [0, 1]})"},
    {"ebo", R"({"temperature": [0.5, 1, 2]})"},
    {"gen", R"({"gamma": [0.1, 1], "top_m": [1, 2]})"},
    {"tempscale", R"({"seed": [0, 1]})"},
    {"klm", R"({"seed": [0, 1]})"},
    {"odin", R"({"temperature": [1, 1000], "epsilon": [0, 0.0014]})"},
    {"openmax", R"({"tail": [5, 6]})"},
    {"dropout", R"({"times": [5, 15]})"},
    {"mds", R"({"seed": [0, 1]})"},
    {"mdsens", R"({"noise": [0, 0.0014, 0.01]})"},
    {"rmds", R"({"seed": [0, 1]})"},
    {"knn", R"({"k": [1, 5, 25]})"},
    {"she", R"({"metric": ["inner", "euclid", "cosine"]})"},
    {"residual", R"({"dim": [2, 4, 8]})"},
    {"vim", R"({"dim": [2, 4, 8]})"},
    {"react", R"({"percentile": [85, 90, 95, 99]})"},
    {"ash", R"({"percentile": [65, 80, 95]})"},
    {"scale", R"({"percentile": [65, 80, 95]})"},
    {"dice", R"({"percentile": [60, 75, 90]})"},
    {"nnguide", R"({"k": [1, 5], "alpha_frac": [0.5, 1.0]})"},
    {"rankfeat", R"({"acc": [false, true], "temperature": [1, 10]})"},
    {"fdbd", R"({"normalized": [false, true]})"},
    {"relation", R"({"pow": [1, 8]})"},
};

void refit_equivalence(Outcome& o) {
    const MlpWorld w = make_mlp_world(21, 240, 100);
    const FitContext ctx = w.context();
    std::size_t checked = 0;
    for (const auto& tag : detector_tags()) {
        const auto d = make_detector(tag);
        const HyperGrid g = expand_grid(tag, nlohmann::ordered_json::parse(kSweep.at(tag)), world_params(tag));
        std::vector<DetectorState> sweep(g.points.size());
        TuneOptions opts;
        opts.threads = 1;
        opts.observe = [&](std::size_t i, const DetectorState& s) { sweep[i] = s; };
        const TuneResult r = tune(*d, g, ctx, opts);
        const DetectorState& winner = sweep[r.best_index];
        const std::string before = serialize_state(r.refit_state);
        bool same = true;
        for (const SplitData* split : {&w.test, &w.ood_test}) {
            const Vector a = score_split(*d, r.refit_state, *split, &w.model, 1);
            const Vector b = score_split(*d, winner, *split, &w.model, 1);
            same = same && a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
        }
        o.require(same, display_name(tag) + " refit scores differ from the sweep state");
        o.require(serialize_state(r.refit_state) == before, display_name(tag) + " scoring changed its state");
        o.require(before == serialize_state(winner), display_name(tag) + " refit state differs");
        ++checked;
    }
    o.detail << (o.pass ? "" : "; ") << checked << " detectors bitwise equal on ID and OOD test splits";
}

// ---------------------------------------------------------------------------

void bundle_fuzz(Outcome& o) {
    Scratch dir("acceptance_fuzz");
    const fuzz::Outcome f = fuzz::run(1000, 20240601, dir.path());
    for (std::size_t i = 0; i < f.failures.size() && i < 3; ++i) o.require(false, f.failures[i]);
    o.require(f.failures.empty(), std::to_string(f.failures.size()) + " failing cases");
    o.require(f.cases == 1000, "ran " + std::to_string(f.cases) + " cases");
    o.require(f.valid > 0 && f.invalid > 0, "mutation mix is one-sided");
    o.detail << (o.pass ? "" : "; ") << f.cases << " cases: " << f.valid << " valid roundtrips, " << f.invalid
             << " rejections";
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
        {"Table-1 arithmetic regression", table1},
        {"Metric oracle suite", metric_oracles},
        {"Detector equivalences", equivalences},
        {"Numerics oracles", numerics_oracles},
        {"Synthetic-benchmark behavior", synthetic},
        {"Refit equivalence", refit_equivalence},
        {"Bundle format fuzz", bundle_fuzz},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            check(o);
        } catch (const std::exception& e) {
            o.require(false, std::string("threw ") + e.what());
        }
        std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.str().c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}

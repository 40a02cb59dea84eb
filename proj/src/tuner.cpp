#include "oodkit/tuner.hpp"

#include <algorithm>
#include <cmath>

#include "oodkit/errors.hpp"
#include "oodkit/jsonio.hpp"
#include "oodkit/metrics.hpp"

namespace oodkit {

HyperGrid expand_grid(const std::string& method, const nlohmann::ordered_json& spec, const DetectorParams& base) {
    if (!spec.is_object()) throw InvalidParam("grid for " + method + " must be an object of value lists");
    std::vector<std::pair<std::string, std::vector<nlohmann::json>>> fields;
    for (const auto& [field, values] : spec.items()) {
        if (!values.is_array() || values.empty())
            throw InvalidParam("grid field " + method + "." + field + " must be a non-empty list");
        std::vector<nlohmann::json> vs;
        for (const auto& v : values) vs.push_back(nlohmann::json::parse(v.dump()));
        fields.emplace_back(field, std::move(vs));
    }

    HyperGrid g;
    g.method = method;
    std::size_t total = 1;
    for (const auto& f : fields) total *= f.second.size();
    // odometer over the fields, last field fastest
    std::vector<std::size_t> at(fields.size(), 0);
    for (std::size_t n = 0; n < total; ++n) {
        DetectorParams p = base;
        for (std::size_t f = 0; f < fields.size(); ++f) set_param(p, fields[f].first, fields[f].second[at[f]]);
        try {
            validate_params(p);
        } catch (const InvalidParam& e) {
            throw InvalidParam("grid for " + method + ": " + e.what());
        }
        g.points.push_back(p);
        for (std::size_t f = fields.size(); f-- > 0;) {
            if (++at[f] < fields[f].second.size()) break;
            at[f] = 0;
        }
    }
    return g;
}

std::vector<HyperGrid> parse_grid_file(const std::string& text, const DetectorParams& base) {
    const auto j = parse_strict_json<nlohmann::ordered_json>(text, "grid file");
    if (!j.is_object()) throw SchemaError("grid file must map methods to grids");
    const auto& tags = detector_tags();
    std::vector<HyperGrid> out;
    for (const auto& [method, spec] : j.items()) {
        if (std::find(tags.begin(), tags.end(), method) == tags.end())
            throw InvalidParam("grid file names unknown method '" + method + "'");
        out.push_back(expand_grid(method, spec, base));
    }
    return out;
}

const HyperGrid& find_grid(const std::vector<HyperGrid>& grids, const std::string& method) {
    for (const auto& g : grids)
        if (g.method == method) return g;
    throw InvalidParam("no grid for method '" + method + "'");
}

TuneResult tune(const Detector& d, const HyperGrid& grid, const FitContext& ctx, const TuneOptions& opts) {
    if (grid.points.empty()) throw InvalidParam("grid for " + grid.method + " is empty");
    if (!ctx.id_val || ctx.id_val->size() == 0) throw InsufficientData("tuning needs id_val samples");
    if (!ctx.ood_val || ctx.ood_val->size() == 0) throw InsufficientData("tuning needs OOD validation samples");

    TuneResult r;
    bool found = false, capability_only = true;
    std::string last_reason;
    for (std::size_t i = 0; i < grid.points.size(); ++i) {
        TunePoint point{grid.points[i], NAN, {}};
        DetectorState s;
        try {
            s = d.fit(ctx, point.params);
        } catch (const InvalidParam& e) {
            point.skipped = e.what();
            capability_only = false;
        } catch (const CapabilityError& e) {
            point.skipped = e.what();
        }
        if (point.skipped.empty()) {
            if (opts.observe) opts.observe(i, s);
            const Vector id = score_split(d, s, *ctx.id_val, ctx.adapter, opts.threads);
            const Vector ood = score_split(d, s, *ctx.ood_val, ctx.adapter, opts.threads);
            point.val_auroc = auroc(id, ood);
            if (!found || point.val_auroc > r.best_val_auroc) {
                found = true;
                r.best_val_auroc = point.val_auroc;
                r.best_index = i;
            }
        } else {
            last_reason = point.skipped;
        }
        r.log.push_back(std::move(point));
    }
    if (!found) {
        const std::string msg = "every grid point for " + grid.method + " was rejected; last: " + last_reason;
        if (capability_only) throw CapabilityError(msg);
        throw InvalidParam(msg);
    }
    r.best_params = grid.points[r.best_index];
    r.refit_state = d.fit(ctx, r.best_params);
    return r;
}

FitContext TuneData::context(const ModelAdapter* adapter) const {
    FitContext ctx;
    ctx.id_train = &train;
    ctx.id_val = &val;
    ctx.ood_val = &ood_val;
    ctx.head = head;
    ctx.adapter = adapter;
    ctx.num_classes = num_classes;
    return ctx;
}

std::vector<std::string> splits_of(const Manifest& m, SplitKind kind, SplitPhase phase) {
    std::vector<std::string> out;
    for (const auto& [id, e] : m.splits)
        if (e.kind == kind && e.phase == phase) out.push_back(id);
    return out;
}

std::string single_split(const Manifest& m, SplitKind kind) {
    std::vector<std::string> found;
    for (const auto& [id, e] : m.splits)
        if (e.kind == kind) found.push_back(id);
    if (found.size() != 1)
        throw SchemaError("bundle needs exactly one " + to_string(kind) + " split, found " +
                          std::to_string(found.size()));
    return found.front();
}

TuneData load_tune_data(const FeatureBundle& bundle, const std::vector<std::string>& ood_val_ids) {
    const Manifest& m = bundle.manifest();
    if (ood_val_ids.empty()) throw InsufficientData("no OOD validation splits to tune on");
    TuneData t;
    t.train = load_split(bundle, single_split(m, SplitKind::id_train));
    t.val = load_split(bundle, single_split(m, SplitKind::id_val));
    std::vector<SplitData> parts;
    for (const auto& id : ood_val_ids) {
        if (is_id_kind(m.split(id).kind)) throw InvalidParam("split '" + id + "' is not an OOD split");
        parts.push_back(load_split(bundle, id));
    }
    std::vector<const SplitData*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    t.ood_val = concat_splits(ptrs, "ood_val");
    t.head = bundle.head();
    t.num_classes = m.num_classes;
    return t;
}

}  // namespace oodkit

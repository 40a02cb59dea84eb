#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/jsonio.hpp"
#include "oodkit/runner.hpp"

using namespace oodkit;
namespace fs = std::filesystem;

namespace {

AdapterKind adapter_kind(const std::string& s) {
    if (s == "recorded") return AdapterKind::recorded;
    if (s == "linear_head") return AdapterKind::linear_head;
    throw InvalidParam("adapter must be recorded or linear_head");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<std::string> method_list(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& m : split_list(s)) {
        if (m == "all") {
            const auto& tags = detector_tags();
            out.insert(out.end(), tags.begin(), tags.end());
        } else {
            out.push_back(tag_from_name(m));
        }
    }
    if (out.empty()) throw InvalidParam("no methods given");
    return out;
}

void write_output(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, text);
}

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::cout << text;
    } else {
        write_output(out, text);
    }
}

DetectorParams base_params(const std::string& path) {
    if (path.empty()) return {};
    const auto j = parse_strict_json(read_file(path), path);
    DetectorParams p = params_from_json(j);
    validate_params(p);
    return p;
}

int fixture_check(const std::string& fixture, const std::string& expected, double tolerance) {
    const SuppFixture fx = parse_supp_fixture(read_file(fixture));
    Table1 t = aggregate_table1(fx.rows);
    t.classifier_f1 = fx.classifier_f1;
    if (expected.empty()) {
        std::cout << render_table(t, ReportFormat::md, 1.0);
        return 0;
    }
    const auto want = parse_table1_expected(read_file(expected));
    std::size_t bad = 0;
    for (const Table1Expected& e : want) {
        const auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const Table1Row& r) { return r.method == e.method; });
        if (it == t.rows.end()) {
            std::printf("MISSING %s\n", display_name(e.method).c_str());
            ++bad;
            continue;
        }
        const double d[3] = {it->mean_nood_auroc - e.mean_nood_auroc, it->aupr_h - e.aupr_h,
                             it->mean_fpr95 - e.mean_fpr95};
        const bool ok = std::abs(d[0]) <= tolerance && std::abs(d[1]) <= tolerance && std::abs(d[2]) <= tolerance;
        bad += !ok;
        std::printf("%s %-10s nOOD %6.2f (%+.3f)  AUPR %6.2f (%+.3f)  FPR95 %6.2f (%+.3f)\n", ok ? "ok  " : "FAIL",
                    display_name(e.method).c_str(), it->mean_nood_auroc, d[0], it->aupr_h, d[1], it->mean_fpr95, d[2]);
    }
    if (want.size() != t.rows.size()) {
        std::printf("FAIL expected %zu rows, aggregated %zu\n", want.size(), t.rows.size());
        ++bad;
    }
    std::printf("%zu of %zu rows outside +-%.2f\n", bad, want.size(), tolerance);
    return bad == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"oodkit: post-hoc OOD detection over recorded activations"};
    app.require_subcommand(1);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = hardware)");

    std::string spec_path, out;
    auto* synth = app.add_subcommand("synth", "write a synthetic benchmark bundle");
    synth->add_option("--spec", spec_path, "synth spec JSON (defaults when omitted)");
    synth->add_option("--out", out, "bundle directory")->required();

    std::string method, grid_path, bundle_path, adapter = "recorded", params_path, log_path;
    auto* tune_cmd = app.add_subcommand("tune", "tune one method and save the refit state");
    tune_cmd->add_option("--method", method)->required();
    tune_cmd->add_option("--grid", grid_path, "grid JSON; fit at --params alone when omitted");
    tune_cmd->add_option("--bundle", bundle_path)->required();
    tune_cmd->add_option("--out", out, "state directory")->required();
    tune_cmd->add_option("--params", params_path, "base params JSON");
    tune_cmd->add_option("--adapter", adapter, "recorded or linear_head");
    tune_cmd->add_option("--log", log_path, "write the sweep log as JSON");

    std::string methods, states;
    auto* eval = app.add_subcommand("eval", "score test splits with saved states");
    eval->add_option("--bundle", bundle_path)->required();
    eval->add_option("--methods", methods, "comma separated tags, or all")->required();
    eval->add_option("--states", states, "directory holding one state directory per tag")->required();
    eval->add_option("--out", out, "records CSV (stdout when omitted)");
    eval->add_option("--adapter", adapter, "recorded or linear_head");

    std::string records, format = "md";
    auto* report = app.add_subcommand("report", "render a Table-1 style report from records");
    report->add_option("--records", records)->required();
    report->add_option("--format", format, "md or csv");
    report->add_option("--out", out, "output file (stdout when omitted)");

    std::string fixture, expected;
    double tolerance = 0.05;
    auto* fcheck = app.add_subcommand("fixture-check", "aggregate per-dataset metrics into Table 1");
    fcheck->add_option("--fixture", fixture)->required();
    fcheck->add_option("--expected", expected, "expected table CSV to compare against");
    fcheck->add_option("--tolerance", tolerance);

    std::string config;
    auto* run = app.add_subcommand("run", "tune, evaluate and report from a benchmark config");
    run->add_option("--config", config)->required();
    run->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            const SynthSpec spec = spec_path.empty() ? SynthSpec{} : synth_spec_from_json(read_file(spec_path));
            write_bundle(synth_benchmark(spec), out);
        } else if (tune_cmd->parsed()) {
            const std::string tag = tag_from_name(method);
            const BenchmarkData data(FeatureBundle::open(bundle_path), adapter_kind(adapter));
            const auto d = make_detector(tag);
            const DetectorParams base = base_params(params_path);
            DetectorState state;
            std::string log;
            if (grid_path.empty()) {
                state = d->fit(data.context(), base);
            } else {
                const auto grids = parse_grid_file(read_file(grid_path), base);
                TuneOptions opts;
                opts.threads = threads;
                const TuneResult r = tune(*d, find_grid(grids, tag), data.context(), opts);
                state = r.refit_state;
                log = tune_log_json(tag, r).dump(2) + "\n";
                std::cerr << display_name(tag) << ": best " << params_to_json(r.best_params).dump()
                          << " val AUROC " << r.best_val_auroc << "\n";
            }
            save_state(state, out);
            if (!log_path.empty() && !log.empty()) write_output(log_path, log);
        } else if (eval->parsed()) {
            const BenchmarkData data(FeatureBundle::open(bundle_path), adapter_kind(adapter));
            std::vector<DetectorState> loaded;
            for (const auto& tag : method_list(methods)) {
                DetectorState s = load_state(fs::path(states) / tag);
                if (s.method != tag) throw SchemaError("state in " + (fs::path(states) / tag).string() + " is for " + s.method);
                loaded.push_back(std::move(s));
            }
            emit(records_to_csv(evaluate_states(data, loaded, {}, threads)), out);
        } else if (report->parsed()) {
            emit(render_report(records_from_csv(read_file(records)), parse_report_format(format)), out);
        } else if (fcheck->parsed()) {
            return fixture_check(fixture, expected, tolerance);
        } else if (run->parsed()) {
            BenchmarkConfig cfg = benchmark_config_from_json(read_file(config), fs::path(config).parent_path());
            if (threads) cfg.threads = threads;
            const BenchmarkResult r = run_benchmark(cfg);
            write_output(fs::path(out) / "records.csv", records_to_csv(r.records));
            write_output(fs::path(out) / "table.md", render_report(r.records, ReportFormat::md));
            write_output(fs::path(out) / "table.csv", render_report(r.records, ReportFormat::csv));
            nlohmann::json logs = nlohmann::json::array();
            for (const auto& [tag, t] : r.tuning) logs.push_back(tune_log_json(tag, t));
            write_output(fs::path(out) / "tuning.json", logs.dump(2) + "\n");
            for (const auto& s : r.states) save_state(s, fs::path(out) / "states" / s.method);
        }
    } catch (const Error& e) {
        std::cerr << "oodkit: " << e.what() << "\n";
        switch (e.error_class()) {
            case ErrorClass::validation: return 2;
            case ErrorClass::capability: return 3;
            default: return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "oodkit: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

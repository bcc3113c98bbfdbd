#include "moediff/runner.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "moediff/errors.hpp"
#include "moediff/scripted.hpp"

namespace moediff {

namespace fs = std::filesystem;

std::string sanitize_name(const std::string& name) {
    std::string out;
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
        out += ok ? c : '_';
    }
    return out.empty() ? "_" : out;
}

std::string resolve_out_dir(const ExperimentConfig& cfg, const RunOptions& opts) {
    if (!opts.out_override.empty()) return opts.out_override;
    if (!cfg.out_dir.empty()) return cfg.out_dir;
    const std::string stem = sanitize_name(fs::path(opts.config_path).stem().string());
    if (const char* root = std::getenv("MOEDIFF_OUT"); root != nullptr && *root != '\0') {
        return (fs::path(root) / stem).string();
    }
    return (fs::path("out") / stem).string();
}

std::shared_ptr<Model> build_model_for_seed(const ExperimentConfig& cfg, uint64_t seed) {
    switch (cfg.model_kind) {
        case ModelKind::toy: {
            ModelConfig mc = cfg.model;
            mc.seed = seed;
            return std::shared_ptr<Model>(build_toy_model(mc).release());
        }
        case ModelKind::planted: {
            ModelConfig mc = cfg.model;
            mc.seed = seed;
            std::shared_ptr<const Model> inner(build_toy_model(mc).release());
            return std::shared_ptr<Model>(wrap_planted(std::move(inner), cfg.planted).release());
        }
        case ModelKind::scripted: {
            return std::shared_ptr<Model>(build_scripted_model(load_script(cfg.script_path)).release());
        }
    }
    throw ConfigError("unknown model kind");
}

DecodeOutcome execute_variant(const Model& model, const ExperimentConfig& cfg,
                              const VariantConfig& variant) {
    DecodeConfig dcfg = cfg.decode;
    if (variant.engine == Engine::vanilla) {
        return decode_response(model, dcfg, cfg.instrumentation);
    }
    return decode_response_accel(model, dcfg, variant.strategy, cfg.instrumentation);
}

namespace {

struct JobResult {
    std::string variant;
    uint64_t seed = 0;
    RunSummary summary;
    Termination terminated_by = Termination::max_blocks;
    size_t response_length = 0;
    bool has_summary = false;
};

struct JobSpec {
    VariantConfig variant;
    uint64_t seed = 0;
    bool write_trace = true;
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << content;
    if (!os) throw IoError("write failed for " + path);
}

// Runs all jobs (optionally across threads), writing each job's trace file
// from its own worker; CSV assembly stays with the caller in job order.
std::vector<JobResult> execute_jobs(const ExperimentConfig& cfg,
                                    const std::vector<JobSpec>& jobs,
                                    const std::string& out_dir, int parallel,
                                    const std::string& trace_prefix) {
    const CostModel cost = cfg.cost_model();
    std::vector<JobResult> results(jobs.size());
    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::string failure;
    std::mutex failure_mutex;

    auto work = [&]() {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size() || failed.load()) break;
            const JobSpec& job = jobs[i];
            try {
                std::shared_ptr<Model> model = build_model_for_seed(cfg, job.seed);
                DecodeOutcome outcome = execute_variant(*model, cfg, job.variant);
                JobResult& r = results[i];
                r.variant = job.variant.name;
                r.seed = job.seed;
                r.terminated_by = outcome.terminated_by;
                r.response_length = outcome.response.size();
                if (job.write_trace) {
                    const std::string stem =
                        sanitize_name(job.variant.name) + "_" + std::to_string(job.seed);
                    save_traces(outcome.traces,
                                (fs::path(out_dir) / (trace_prefix + stem + ".jsonl")).string());
                    if (cfg.instrumentation.analysis_csv && !outcome.traces.empty()) {
                        std::vector<int> layers;
                        for (int l = 0; l < model->config().num_layers; ++l) layers.push_back(l);
                        write_file((fs::path(out_dir) / ("timeline_" + stem + ".csv")).string(),
                                   timeline_csv(outcome.traces, layers));
                        write_file((fs::path(out_dir) / ("histogram_" + stem + ".csv")).string(),
                                   histogram_csv(outcome.traces));
                        if (!cfg.instrumentation.hidden_snapshot_layers.empty()) {
                            write_file(
                                (fs::path(out_dir) / ("similarity_" + stem + ".csv")).string(),
                                similarity_csv(outcome.traces,
                                               cfg.instrumentation.hidden_snapshot_layers));
                        }
                    }
                }
                if (!outcome.traces.empty()) {
                    r.summary = summarize(outcome.traces, model->config().digest());
                    r.summary.cost_units = estimate_cost_units(r.summary, cost);
                    r.has_summary = true;
                    if (!r.summary.warning.empty()) {
                        std::cerr << "warning: " << job.variant.name << " seed " << job.seed
                                  << ": " << r.summary.warning << "\n";
                    }
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (failure.empty()) failure = e.what();
                failed.store(true);
            }
        }
    };

    const int threads = std::max(1, parallel);
    if (threads == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw ConfigError("run failed: " + failure);
    return results;
}

double mean_of(const std::vector<double>& values) {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
}

const JobResult* find_result(const std::vector<JobResult>& results,
                             const std::string& variant, uint64_t seed) {
    for (const JobResult& r : results) {
        if (r.variant == variant && r.seed == seed) return &r;
    }
    return nullptr;
}

}  // namespace

int cmd_run(const RunOptions& opts) {
    ExperimentConfig cfg;
    try {
        cfg = load_experiment_config(opts.config_path);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    }
    try {
        const std::vector<uint64_t>& seeds =
            opts.seeds_override.empty() ? cfg.seeds : opts.seeds_override;
        const std::string out_dir = resolve_out_dir(cfg, opts);
        fs::create_directories(out_dir);
        const CostModel cost = cfg.cost_model();

        std::vector<JobSpec> jobs;
        for (const VariantConfig& v : cfg.variants) {
            for (uint64_t seed : seeds) jobs.push_back(JobSpec{v, seed, true});
        }
        std::vector<JobResult> results = execute_jobs(cfg, jobs, out_dir, opts.parallel, "trace_");

        const std::string baseline_variant = cfg.variants.front().name;
        std::ostringstream csv;
        csv << "variant,seed,apf,tpf,apt,total_forwards,total_tokens,cost_units,speedup,"
               "terminated_by,response_length\n";
        bool stalled = false;
        for (const VariantConfig& v : cfg.variants) {
            std::vector<double> apf, tpf, apt, costs, speedups;
            for (uint64_t seed : seeds) {
                const JobResult* r = find_result(results, v.name, seed);
                if (r == nullptr || !r->has_summary) continue;
                if (r->terminated_by == Termination::stall) stalled = true;
                const double cost_units = r->summary.cost_units;
                double speedup = 1.0;
                const JobResult* base = find_result(results, baseline_variant, seed);
                if (base != nullptr && base->has_summary) {
                    speedup = estimate_cost(r->summary, base->summary, cost).speedup;
                }
                csv << v.name << "," << seed << "," << csv_real(r->summary.apf) << ","
                    << csv_real(r->summary.tpf) << "," << csv_real(r->summary.apt) << ","
                    << r->summary.total_forwards << "," << r->summary.total_tokens << ","
                    << csv_real(cost_units) << "," << csv_real(speedup) << ","
                    << termination_name(r->terminated_by) << "," << r->response_length << "\n";
                apf.push_back(r->summary.apf);
                tpf.push_back(r->summary.tpf);
                if (r->summary.apt_defined) apt.push_back(r->summary.apt);
                costs.push_back(cost_units);
                speedups.push_back(speedup);
            }
            if (!apf.empty()) {
                csv << v.name << ",mean," << csv_real(mean_of(apf)) << ","
                    << csv_real(mean_of(tpf)) << ","
                    << (apt.empty() ? "nan" : csv_real(mean_of(apt))) << ",,,"
                    << csv_real(mean_of(costs)) << "," << csv_real(mean_of(speedups)) << ",,\n";
            }
        }
        write_file((fs::path(out_dir) / "summary.csv").string(), csv.str());
        if (stalled) {
            std::cerr << "decode stalled with force_accept_on_stall disabled\n";
            return kExitStall;
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigError;
    }
}

namespace {

std::vector<VariantConfig> cumulative_variants(const ExperimentConfig& cfg) {
    StrategyConfig base = cfg.ablate_strategy;
    base.dcd_enabled = false;
    base.seh_enabled = false;
    base.lac_enabled = false;

    std::vector<VariantConfig> variants;
    VariantConfig vanilla;
    vanilla.name = "vanilla";
    vanilla.engine = Engine::vanilla;
    variants.push_back(vanilla);

    VariantConfig seh;
    seh.name = "+seh";
    seh.engine = Engine::accel;
    seh.strategy = base;
    seh.strategy.seh_enabled = true;
    variants.push_back(seh);

    VariantConfig seh_dcd = seh;
    seh_dcd.name = "+seh+dcd";
    seh_dcd.strategy.dcd_enabled = true;
    variants.push_back(seh_dcd);

    VariantConfig full = seh_dcd;
    full.name = "+seh+dcd+lac";
    full.strategy.lac_enabled = true;
    variants.push_back(full);

    if (cfg.ablate_variants.empty()) return variants;
    std::vector<VariantConfig> subset;
    for (const std::string& name : cfg.ablate_variants) {
        bool found = false;
        for (const VariantConfig& v : variants) {
            if (v.name == name) {
                subset.push_back(v);
                found = true;
                break;
            }
        }
        if (!found) {
            throw ConfigError("unknown ablation variant '" + name +
                              "' (expected vanilla, +seh, +seh+dcd, +seh+dcd+lac)");
        }
    }
    return subset;
}

}  // namespace

int cmd_ablate(const RunOptions& opts) {
    ExperimentConfig cfg;
    std::vector<VariantConfig> variants;
    try {
        cfg = load_experiment_config(opts.config_path);
        variants = cumulative_variants(cfg);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    }
    try {
        const std::vector<uint64_t>& seeds =
            opts.seeds_override.empty() ? cfg.seeds : opts.seeds_override;
        const std::string out_dir = resolve_out_dir(cfg, opts);
        fs::create_directories(out_dir);
        const CostModel cost = cfg.cost_model();

        std::vector<JobSpec> jobs;
        for (const VariantConfig& v : variants) {
            for (uint64_t seed : seeds) jobs.push_back(JobSpec{v, seed, false});
        }
        std::vector<JobResult> results = execute_jobs(cfg, jobs, out_dir, opts.parallel, "");

        const std::string baseline = variants.front().name;
        bool stalled = false;
        std::ostringstream csv;
        csv << "variant,seed,apt,speedup\n";
        for (const VariantConfig& v : variants) {
            std::vector<double> apts, speedups;
            for (uint64_t seed : seeds) {
                const JobResult* r = find_result(results, v.name, seed);
                if (r == nullptr || !r->has_summary) continue;
                if (r->terminated_by == Termination::stall) stalled = true;
                const JobResult* base = find_result(results, baseline, seed);
                double speedup = 1.0;
                if (base != nullptr && base->has_summary) {
                    speedup = estimate_cost(r->summary, base->summary, cost).speedup;
                }
                csv << v.name << "," << seed << "," << csv_real(r->summary.apt) << ","
                    << csv_real(speedup) << "\n";
                if (r->summary.apt_defined) apts.push_back(r->summary.apt);
                speedups.push_back(speedup);
            }
            csv << v.name << ",mean," << (apts.empty() ? "nan" : csv_real(mean_of(apts))) << ","
                << csv_real(mean_of(speedups)) << "\n";
        }
        write_file((fs::path(out_dir) / "ablation.csv").string(), csv.str());

        if (cfg.has_refresh_sweep) {
            // Vanilla baseline plus one delayed-caching run per interval.
            std::vector<JobSpec> rjobs;
            VariantConfig vanilla;
            vanilla.name = "vanilla";
            for (uint64_t seed : seeds) rjobs.push_back(JobSpec{vanilla, seed, false});
            std::vector<VariantConfig> rvariants;
            for (const auto& interval : cfg.refresh_intervals) {
                VariantConfig v;
                v.name = interval ? "refresh-" + std::to_string(*interval) : "refresh-free";
                v.engine = Engine::accel;
                v.strategy = cfg.ablate_strategy;
                v.strategy.dcd_enabled = true;
                v.strategy.refresh_interval = interval;
                v.strategy.seh_enabled = cfg.ablate_seh_in_refresh;
                v.strategy.lac_enabled = cfg.ablate_lac_in_refresh;
                rvariants.push_back(v);
                for (uint64_t seed : seeds) rjobs.push_back(JobSpec{v, seed, false});
            }
            std::vector<JobResult> rresults = execute_jobs(cfg, rjobs, out_dir, opts.parallel, "");
            std::ostringstream rcsv;
            rcsv << "interval,apf,speedup\n";
            for (const VariantConfig& v : rvariants) {
                std::vector<double> apfs, speedups;
                for (uint64_t seed : seeds) {
                    const JobResult* r = find_result(rresults, v.name, seed);
                    const JobResult* base = find_result(rresults, "vanilla", seed);
                    if (r == nullptr || !r->has_summary) continue;
                    if (r->terminated_by == Termination::stall) stalled = true;
                    apfs.push_back(r->summary.apf);
                    if (base != nullptr && base->has_summary) {
                        speedups.push_back(estimate_cost(r->summary, base->summary, cost).speedup);
                    }
                }
                const std::string label =
                    v.name.rfind("refresh-", 0) == 0 ? v.name.substr(8) : v.name;
                rcsv << label << "," << csv_real(mean_of(apfs)) << ","
                     << csv_real(mean_of(speedups)) << "\n";
            }
            write_file((fs::path(out_dir) / "refresh.csv").string(), rcsv.str());
        }
        if (stalled) {
            std::cerr << "decode stalled with force_accept_on_stall disabled\n";
            return kExitStall;
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigError;
    }
}

int cmd_sweep(const RunOptions& opts) {
    ExperimentConfig cfg;
    try {
        cfg = load_experiment_config(opts.config_path);
        if (cfg.sweep_pairs.empty()) {
            throw ConfigError("sweep requires a nonempty [sweep] pairs list");
        }
        for (const auto& [tau_hot, l_hot] : cfg.sweep_pairs) {
            StrategyConfig probe;
            probe.tau_hot = tau_hot;
            probe.l_hot = l_hot;
            probe.validate(cfg.decode.tau);
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    }
    try {
        const std::vector<uint64_t>& seeds =
            opts.seeds_override.empty() ? cfg.seeds : opts.seeds_override;
        const std::string out_dir = resolve_out_dir(cfg, opts);
        fs::create_directories(out_dir);

        std::vector<JobSpec> jobs;
        std::vector<VariantConfig> variants;
        for (const auto& [tau_hot, l_hot] : cfg.sweep_pairs) {
            VariantConfig v;
            std::ostringstream name;
            name << "hot_" << tau_hot << "_" << l_hot;
            v.name = name.str();
            v.engine = Engine::accel;
            v.strategy.dcd_enabled = true;
            v.strategy.lac_enabled = true;
            v.strategy.seh_enabled = cfg.sweep_seh;
            v.strategy.tau_hot = tau_hot;
            v.strategy.l_hot = l_hot;
            variants.push_back(v);
            for (uint64_t seed : seeds) jobs.push_back(JobSpec{v, seed, false});
        }
        std::vector<JobResult> results = execute_jobs(cfg, jobs, out_dir, opts.parallel, "");

        bool stalled = false;
        std::ostringstream csv;
        csv << "tau_hot,l_hot,apf\n";
        for (size_t i = 0; i < variants.size(); ++i) {
            std::vector<double> apfs;
            for (uint64_t seed : seeds) {
                const JobResult* r = find_result(results, variants[i].name, seed);
                if (r == nullptr || !r->has_summary) continue;
                if (r->terminated_by == Termination::stall) stalled = true;
                apfs.push_back(r->summary.apf);
            }
            csv << csv_real(cfg.sweep_pairs[i].first) << "," << cfg.sweep_pairs[i].second << ","
                << csv_real(mean_of(apfs)) << "\n";
        }
        write_file((fs::path(out_dir) / "sweep.csv").string(), csv.str());
        if (stalled) {
            std::cerr << "decode stalled with force_accept_on_stall disabled\n";
            return kExitStall;
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigError;
    }
}

namespace {

std::string token_signature(const StepTrace& s) {
    std::ostringstream os;
    os << "block " << s.block_index << " iteration " << s.iteration << ":";
    for (const AcceptedToken& a : s.accepted) {
        os << " " << a.position << "=" << a.token;
    }
    return os.str();
}

std::string first_difference(const StepTrace& a, const StepTrace& b) {
    if (a.accepted != b.accepted) return "accepted tokens differ";
    if (a.active_positions != b.active_positions) return "active positions differ";
    if (a.masked_positions != b.masked_positions) return "masked positions differ";
    for (size_t l = 0; l < std::min(a.layers.size(), b.layers.size()); ++l) {
        if (a.layers[l].experts != b.layers[l].experts) {
            return "expert set differs at layer " + std::to_string(a.layers[l].layer);
        }
    }
    if (a.layers.size() != b.layers.size()) return "layer counts differ";
    if (a.confidences != b.confidences) return "confidences differ";
    if (a.classes != b.classes || a.has_classes != b.has_classes) return "classes differ";
    if (a.branches != b.branches) return "branch records differ";
    for (size_t l = 0; l < a.layers.size(); ++l) {
        if (!(a.layers[l] == b.layers[l])) {
            return "routing differs at layer " + std::to_string(a.layers[l].layer);
        }
    }
    if (a.hidden != b.hidden) return "hidden snapshots differ";
    return "records differ";
}

}  // namespace

DiffReport diff_trace_files(const DiffOptions& opts) {
    std::vector<StepTrace> a = load_traces(opts.path_a);
    std::vector<StepTrace> b = load_traces(opts.path_b);
    DiffReport report;

    if (!opts.full) {
        // Token outcomes and acceptance order only, decode steps only.
        std::vector<const StepTrace*> da, db;
        for (const auto& s : a) {
            if (!s.commit) da.push_back(&s);
        }
        for (const auto& s : b) {
            if (!s.commit) db.push_back(&s);
        }
        const size_t n = std::min(da.size(), db.size());
        for (size_t i = 0; i < n; ++i) {
            const std::string sa = token_signature(*da[i]);
            const std::string sb = token_signature(*db[i]);
            if (sa != sb) {
                report.identical = false;
                if (static_cast<int>(report.differences.size()) < opts.max_report) {
                    report.differences.push_back("step " + std::to_string(i) + ": " + sa +
                                                 " vs " + sb);
                }
            }
        }
        if (da.size() != db.size()) {
            report.identical = false;
            report.differences.push_back("decode step counts differ: " +
                                         std::to_string(da.size()) + " vs " +
                                         std::to_string(db.size()));
        }
        return report;
    }

    const size_t n = std::min(a.size(), b.size());
    for (size_t i = 0; i < n; ++i) {
        if (!(a[i] == b[i])) {
            report.identical = false;
            if (static_cast<int>(report.differences.size()) < opts.max_report) {
                report.differences.push_back("step " + std::to_string(i) + " (block " +
                                             std::to_string(a[i].block_index) + ", iteration " +
                                             std::to_string(a[i].iteration) +
                                             "): " + first_difference(a[i], b[i]));
            }
        }
    }
    if (a.size() != b.size()) {
        report.identical = false;
        report.differences.push_back("step counts differ: " + std::to_string(a.size()) +
                                     " vs " + std::to_string(b.size()));
    }
    return report;
}

int cmd_diff(const DiffOptions& opts) {
    try {
        DiffReport report = diff_trace_files(opts);
        if (report.identical) {
            std::cout << "traces identical (" << (opts.full ? "full" : "tokens-only")
                      << " mode)\n";
            return kExitOk;
        }
        std::cout << "traces differ (" << (opts.full ? "full" : "tokens-only") << " mode):\n";
        for (const std::string& d : report.differences) std::cout << "  " << d << "\n";
        return 1;
    } catch (const SchemaMismatchError& e) {
        std::cerr << "schema mismatch: " << e.what() << "\n";
        return kExitSchemaMismatch;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigError;
    }
}

}  // namespace moediff

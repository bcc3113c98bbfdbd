#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moediff/runner.hpp"

namespace {

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> seeds;
    std::string cur;
    auto flush = [&]() {
        if (!cur.empty()) {
            seeds.push_back(std::stoull(cur));
            cur.clear();
        }
    };
    for (char c : csv) {
        if (c == ',') {
            flush();
        } else if (c != ' ') {
            cur += c;
        }
    }
    flush();
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moediff: block-diffusion decoding engine for MoE language models"};
    app.require_subcommand(1);

    moediff::RunOptions opts;
    std::string seeds_csv;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config_path, "experiment config file")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--out", opts.out_override, "output directory (overrides config)");
        sub->add_option("--seeds", seeds_csv, "comma-separated seeds (overrides config)");
        sub->add_option("--parallel", opts.parallel, "worker threads for per-seed runs")
            ->check(CLI::PositiveNumber);
    };

    CLI::App* run = app.add_subcommand("run", "decode per seed per variant; write traces and summary.csv");
    add_common(run);
    CLI::App* ablate = app.add_subcommand("ablate", "cumulative strategy ablation; write ablation.csv (and refresh.csv)");
    add_common(ablate);
    CLI::App* sweep = app.add_subcommand("sweep", "hot-token hyperparameter sweep; write sweep.csv");
    add_common(sweep);

    moediff::DiffOptions diff_opts;
    std::string diff_mode = "full";
    CLI::App* diff = app.add_subcommand("diff-traces", "structural diff of two trace files");
    diff->add_option("a", diff_opts.path_a, "first trace file")->required();
    diff->add_option("b", diff_opts.path_b, "second trace file")->required();
    diff->add_option("--mode", diff_mode, "comparison mode: full | tokens-only")
        ->check(CLI::IsMember({"full", "tokens-only"}));
    diff->add_option("--max-report", diff_opts.max_report, "max differences to print");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : moediff::kExitConfigError;
    }

    if (!seeds_csv.empty()) {
        try {
            opts.seeds_override = parse_seed_list(seeds_csv);
        } catch (...) {
            std::fprintf(stderr, "config error: bad --seeds list '%s'\n", seeds_csv.c_str());
            return moediff::kExitConfigError;
        }
    }

    if (run->parsed()) return moediff::cmd_run(opts);
    if (ablate->parsed()) return moediff::cmd_ablate(opts);
    if (sweep->parsed()) return moediff::cmd_sweep(opts);
    diff_opts.full = diff_mode == "full";
    return moediff::cmd_diff(diff_opts);
}

// debias: runs the ensemble debiasing experiment from a JSON config.
//
// Exit codes: 0 success, 1 runtime error, 2 config error.
// Flags override the config file.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "debias/experiment.hpp"

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> mode;
    std::vector<double> lambda_grid;
};

debias::ExperimentConfig effective_config(const Options& o) {
    debias::ExperimentConfig c = debias::load_config(o.config);
    if (o.seed) {
        c.seed = *o.seed;
    }
    if (o.out) {
        c.output_dir = *o.out;
    }
    if (o.mode) {
        try {
            c.ensemble_mode = debias::parse_ensemble_mode(*o.mode);
        } catch (const debias::Error& e) {
            throw debias::ConfigError(e.what());
        }
    }
    if (!o.lambda_grid.empty()) {
        c.sweep_lambdas = o.lambda_grid;
    }
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ensemble debiasing experiment runner"};
    app.require_subcommand(1);
    Options opts;

    const std::vector<std::pair<std::string, std::string>> stages{
        {"run-all", "Run every stage in order"},
        {"pretrain", "Prepare data and train the anchor"},
        {"split", "Build the counter-biased subsets"},
        {"members", "Train member models and baselines"},
        {"ensemble-eval", "Evaluate the ensemble and baselines"},
        {"distill", "Distill the ensemble into one student"},
        {"sweep", "Fine-tune across a lambda grid"},
        {"report", "Render report.md and report.csv"},
    };
    for (const auto& [name, help] : stages) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("config", opts.config, "Experiment config (JSON)")->required();
        sub->add_option("--seed", opts.seed, "Base seed");
        sub->add_option("--out", opts.out, "Output directory");
        sub->add_option("--mode", opts.mode, "Ensemble mode: logit_sum or avg_prob");
        sub->add_option("--lambda-grid", opts.lambda_grid, "Sweep lambdas, strictly increasing")->delimiter(',');
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        debias::Experiment exp(effective_config(opts));
        if (stage == "run-all") {
            exp.run_all();
        } else {
            std::filesystem::create_directories(exp.artifacts().root);
            if (stage == "pretrain") {
                exp.run_pretrain();
            } else if (stage == "split") {
                exp.run_split();
            } else if (stage == "members") {
                exp.run_members();
            } else if (stage == "ensemble-eval") {
                exp.run_ensemble_eval();
            } else if (stage == "distill") {
                exp.run_distill();
            } else if (stage == "sweep") {
                exp.run_sweep();
            } else if (stage == "report") {
                exp.run_report();
            }
        }
        std::cout << stage << ": done (" << exp.artifacts().root.string() << ", config " << exp.config_print()
                  << ")\n";
        return 0;
    } catch (const debias::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

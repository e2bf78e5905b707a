#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "lossnet/harness.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    unsigned threads = 0;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file (JSON)")->required();
    cmd->add_option("--out", args.out_dir, "output directory (overrides the config)");
    cmd->add_option("--seed", args.seed, "seed override")->each([&](const std::string&) { args.seed_set = true; });
    cmd->add_option("--threads", args.threads, "worker threads (default: available parallelism)");
    cmd->add_flag("--verbose", args.verbose, "print progress notes");
}

int run_command(const std::string& command, const CommonArgs& args) {
    std::ifstream in(args.config_path);
    if (!in) {
        std::cerr << "cannot open config file: " << args.config_path << "\n";
        return 1;
    }
    std::stringstream buffer;
    buffer << in.rdbuf();

    lossnet::harness::ExperimentConfig cfg;
    try {
        cfg = lossnet::harness::parse_config(buffer.str(), command);
    } catch (const lossnet::harness::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    if (args.seed_set) cfg.seed = args.seed;
    if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
    if (const char* env = std::getenv("LOSSNETLAB_OUT")) cfg.output_dir = env;

    const unsigned threads = args.threads > 0 ? args.threads : lossnet::default_threads();
    lossnet::harness::RunResult result;
    try {
        result = lossnet::harness::run(cfg, threads, args.verbose);
    } catch (const lossnet::harness::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    for (const auto& m : result.messages) std::cout << m << "\n";
    std::cout << "manifest: " << result.manifest_path.string() << "\n";
    return result.exit_code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"loss-network mean-field and metastability laboratory"};
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"integrate", "integrate the mean-field flow from an initial distribution"},
        {"equilibria", "locate and classify the Erlang fixed points"},
        {"simulate", "run one finite-N stochastic realization"},
        {"exit-times", "exit-time Monte Carlo around a stable equilibrium"},
        {"quasipotential", "minimize the discretized action toward a target point"},
        {"verify", "run the model identity checks"},
        {"sweep", "scan a parameter grid for equilibria"},
    };

    std::vector<CommonArgs> args(commands.size());
    for (std::size_t i = 0; i < commands.size(); ++i) {
        CLI::App* cmd = app.add_subcommand(commands[i].first, commands[i].second);
        add_common(cmd, args[i]);
    }

    CLI11_PARSE(app, argc, argv);

    for (std::size_t i = 0; i < commands.size(); ++i) {
        if (app.get_subcommand(commands[i].first)->parsed()) {
            // config blocks use underscore names
            std::string block = commands[i].first;
            for (auto& c : block)
                if (c == '-') c = '_';
            return run_command(block, args[i]);
        }
    }
    return 1;
}

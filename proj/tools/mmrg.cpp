// mmrg: toy weight-space merging experiments for latent video diffusion.
//
//   mmrg pipeline --config exp.cfg
//   mmrg sweep-k --switch-k 0 --strategy con-first --dry-run

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "mmrg/error.hpp"
#include "mmrg/experiment.hpp"

namespace {

std::string flag_name(std::string key) {
    for (char& c : key) {
        if (c == '_') c = '-';
    }
    return "--" + key;
}

const char* describe(const std::string& cmd) {
    static const std::map<std::string, const char*> help = {
        {"gen-data", "generate the pretrain and fine-tune corpora"},
        {"pretrain", "train the base denoiser on the high-motion corpus"},
        {"finetune", "attach the adapter and fine-tune on the low-motion corpus"},
        {"extrapolate", "write dyn = pre + alpha (pre - sft)"},
        {"dare", "write DARE(sft - pre) as an isolated delta"},
        {"isolate", "write the adt, deg and con sets"},
        {"build-enhanced", "merge dyn_star and con_star from the isolated sets"},
        {"sample", "sample n videos from --model"},
        {"sample-decoupled", "sample n videos with the time-switched pair"},
        {"eval", "evaluate --model and write eval_<model>.csv"},
        {"taylor-check", "compare the measured D change with its first-order prediction"},
        {"pipeline", "run every stage and write reports.csv"},
        {"sweep-alpha", "evaluate extrapolation over --alphas"},
        {"sweep-k", "evaluate the decoupled sampler over --ks"},
    };
    return help.at(cmd);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy weight-space merging for latent video diffusion"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    bool dry_run = false;
    bool show_config = false;
    std::map<std::string, std::string> overrides;

    app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app.add_flag("--dry-run", dry_run, "validate the config and print the plan without touching disk");
    app.add_flag("--show-config", show_config, "print the resolved config before running");
    for (const auto& key : mmrg::config_keys()) {
        app.add_option_function<std::string>(
            flag_name(key), [&overrides, key](const std::string& v) { overrides[key] = v; },
            "override config key " + key);
    }
    for (const auto& cmd : mmrg::experiment::commands()) {
        app.add_subcommand(cmd, describe(cmd));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        mmrg::experiment_config cfg;
        if (!config_path.empty()) cfg = mmrg::load_config(config_path, cfg);
        if (const char* env = std::getenv("MMRG_WORKDIR"); env && *env) cfg.workdir = env;
        for (const auto& [key, value] : overrides) mmrg::set_config_value(cfg, key, value);

        mmrg::experiment exp(cfg, &std::cerr);
        if (show_config || dry_run) std::cout << mmrg::dump_config(exp.config());
        if (dry_run) {
            std::cout << "plan for " << command << ":\n";
            for (const auto& line : exp.plan(command)) std::cout << "  " << line << "\n";
            return 0;
        }
        exp.run(command);
    } catch (const std::exception& e) {
        std::cerr << "mmrg " << command << ": " << e.what() << "\n";
        return mmrg::exit_code_for(e);
    }
    return 0;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mmrg/corpus.hpp"
#include "mmrg/decoupled_sampler.hpp"
#include "mmrg/metrics.hpp"
#include "mmrg/schedule.hpp"

namespace mmrg {

struct experiment_config {
    std::filesystem::path workdir = "mmrg-work";

    // model
    int frames = 8;
    int dim = 16;
    int hidden = 32;
    int time_dim = 8;

    // schedule
    int T = 50;
    schedule_kind schedule = schedule_kind::linear_beta;

    // data
    int pretrain_clips = 512;
    int finetune_clips = 512;
    double pretrain_motion = 0.25;
    double finetune_motion = 0.05;
    uint64_t data_seed = 1;

    // training
    double lr = 0.1;
    int batch = 32;
    int pretrain_steps = 8000;
    int finetune_steps = 1000;
    double cond_dropout = 0.1;
    uint64_t train_seed = 3;
    uint64_t adapter_seed = 4;

    // merge
    double alpha = 0.5;
    double p = 0.7;
    uint64_t seed1 = 11;
    uint64_t seed2 = 12;
    double w_deg = 1.0;
    double w_adt = 1.0;

    // sampler
    int steps = 50;
    double cfg_scale = 7.5;
    int switch_k = -1;  // -1: steps / 2
    switch_strategy strategy = switch_strategy::dyn_first;

    // eval
    int n = 200;
    uint64_t eval_seed = 1000;
    std::vector<uint64_t> seeds;  // explicit list; overrides eval_seed/n
    magnitude_class eval_magnitude = magnitude_class::low;
    std::string model = "sft";    // target of sample / eval
    int threads = 1;

    // sweeps and first-order check
    std::vector<double> alphas = {0.0, 0.35, 0.5, 0.7, 1.0, 2.0};
    std::vector<int> ks;  // empty: {0, steps/4, steps/2, steps}
    std::vector<double> taylor_alphas = {0.01, 0.02, 0.05, 0.1};
    double fd_step = 1e-4;
    int taylor_n = 4;
    int taylor_steps = 10;

    int effective_k() const { return switch_k < 0 ? steps / 2 : switch_k; }
    std::vector<int> effective_ks() const;
    std::vector<uint64_t> eval_seeds() const;
    void validate() const;
};

// Config keys in file order; each accepts the value syntax of its field
// (lists are comma-separated).
const std::vector<std::string>& config_keys();
void set_config_value(experiment_config& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const experiment_config& cfg, const std::string& key);

// key = value lines; '#' starts a comment. Unknown keys are errors.
experiment_config parse_config(const std::string& text, experiment_config base = {});
experiment_config load_config(const std::filesystem::path& path, experiment_config base = {});
std::string dump_config(const experiment_config& cfg);

// Artifact file names inside the workdir.
namespace artifact {
inline constexpr const char* pretrain_corpus = "corpus_pretrain.mmrg";
inline constexpr const char* finetune_corpus = "corpus_finetune.mmrg";
inline constexpr const char* pre = "pre.mmrg";
inline constexpr const char* sft = "sft.mmrg";
inline constexpr const char* dyn = "dyn.mmrg";
inline constexpr const char* dare = "dare.mmrg";
inline constexpr const char* adt = "adt.mmrg";
inline constexpr const char* deg = "deg.mmrg";
inline constexpr const char* con = "con.mmrg";
inline constexpr const char* dyn_star = "dyn_star.mmrg";
inline constexpr const char* con_star = "con_star.mmrg";
inline constexpr const char* reports = "reports.csv";
inline constexpr const char* sweep_alpha = "sweep_alpha.csv";
inline constexpr const char* sweep_k = "sweep_k.csv";
inline constexpr const char* taylor = "taylor.csv";
} // namespace artifact

std::string csv_field(const std::string& s);
std::string csv_row(const std::vector<std::string>& fields);

struct stage_report {
    std::string stage;
    eval_report report;
};

struct alpha_row {
    double alpha = 0.0;
    eval_report report;
};

struct k_row {
    int k = 0;
    switch_strategy strategy = switch_strategy::dyn_first;
    eval_report report;
};

class experiment {
public:
    explicit experiment(experiment_config cfg, std::ostream* log = nullptr);

    const experiment_config& config() const { return cfg_; }
    std::filesystem::path path(const char* name) const { return cfg_.workdir / name; }

    // Commands, as exposed by the CLI. Each reads its inputs from and writes
    // its outputs to the workdir.
    void gen_data();
    void pretrain();
    void finetune();
    void extrapolate();
    void dare();
    void isolate();
    void build_enhanced();
    void sample();
    void sample_decoupled();
    eval_report eval();
    taylor_report taylor_check();
    std::vector<stage_report> pipeline();
    std::vector<alpha_row> sweep_alpha();
    std::vector<k_row> sweep_k();

    // Dispatch by CLI name; the returned lines describe what `name` would
    // read and write (used by --dry-run).
    static const std::vector<std::string>& commands();
    void run(const std::string& name);
    std::vector<std::string> plan(const std::string& name) const;

    eval_report evaluate(const std::string& model);

private:
    experiment_config cfg_;
    std::ostream* log_;
    noise_schedule sched_;

    void say(const std::string& line) const;
    eval_plan make_plan() const;
    model_pair load_pair() const;
    switch_schedule make_switch(int k) const;
    void write_text(const char* name, const std::string& text) const;
};

// Maps exception types to process exit codes: 0 ok, 2 config, 3 numeric,
// 4 missing artifact, 1 anything else.
int exit_code_for(const std::exception& e);

} // namespace mmrg

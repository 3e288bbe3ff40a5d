#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmrg/corpus.hpp"
#include "mmrg/denoiser.hpp"
#include "mmrg/schedule.hpp"

namespace mmrg {

enum class trainable_set { all, adapter_and_temporal };

trainable_set parse_trainable(const std::string& s);
std::string to_string(trainable_set t);

struct train_config {
    double lr = 1e-2;
    int batch = 32;
    int steps = 1000;
    uint64_t seed = 0;
    trainable_set trainable = trainable_set::all;
    // Probability of replacing a clip's condition with the null token so the
    // unconditional branch used by classifier-free guidance is trained.
    double cond_dropout = 0.1;
    // Size of the fixed draw set used for the before/after loss report.
    int eval_draws = 128;
};

struct train_result {
    param_set params;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Mean noise-prediction loss over `draws` fixed (clip, t, eps) draws.
double evaluate_loss(const param_set& theta, const std::vector<clip>& corpus, const noise_schedule& sched,
                     uint64_t seed, int draws);

// SGD on the noise-prediction loss starting from `init`. Frozen groups are
// never written. Returned weights are rounded to f32.
train_result train_from(const param_set& init, const std::vector<clip>& corpus, const noise_schedule& sched,
                        const train_config& config);

// Fresh initialisation from config.seed, then train_from.
train_result train(const denoiser_spec& spec, const std::vector<clip>& corpus, const noise_schedule& sched,
                   const train_config& config);

} // namespace mmrg

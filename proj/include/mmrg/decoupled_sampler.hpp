#pragma once

#include <string>

#include "mmrg/ddim.hpp"
#include "mmrg/denoiser.hpp"
#include "mmrg/tensor_store.hpp"

namespace mmrg {

enum class switch_strategy { dyn_first, con_first };

switch_strategy parse_strategy(const std::string& s);
std::string to_string(switch_strategy s);

struct switch_schedule {
    int T = 50;  // total denoising steps
    int K = 25;  // switch threshold, 0 <= K <= T
    switch_strategy strategy = switch_strategy::dyn_first;

    void validate() const;
};

// dyn_first: 1 iff t > T - K. con_first: 0 iff t > T - K.
double alpha_t(int t, const switch_schedule& sched);

// The two enhanced models; identical tensor names and shapes, both adapted.
class model_pair {
public:
    model_pair(tensor_map dyn_star, tensor_map con_star);

    const tensor_map& dyn_star() const { return dyn_star_; }
    const tensor_map& con_star() const { return con_star_; }
    const param_set& dyn_params() const { return dyn_params_; }
    const param_set& con_params() const { return con_params_; }
    const denoiser_spec& spec() const { return dyn_params_.spec(); }

private:
    tensor_map dyn_star_;
    tensor_map con_star_;
    param_set dyn_params_;
    param_set con_params_;
};

// a * dyn_star + (1 - a) * con_star; the endpoints return an operand verbatim.
tensor_map blend(const model_pair& pair, double a);

// DDIM sampling where denoising step t uses dyn_star when alpha_t(t) = 1 and
// con_star otherwise.
latent_video decoupled_sample(const model_pair& pair, const switch_schedule& sched_switch,
                              const noise_schedule& sched_noise, const cond_embedding* cond, int steps,
                              double cfg_scale, uint64_t seed);

} // namespace mmrg

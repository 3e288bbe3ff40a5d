#include "mmrg/decoupled_sampler.hpp"

#include "mmrg/error.hpp"

namespace mmrg {

switch_strategy parse_strategy(const std::string& s) {
    if (s == "dyn_first" || s == "dyn-first") return switch_strategy::dyn_first;
    if (s == "con_first" || s == "con-first") return switch_strategy::con_first;
    throw config_error("unknown switch strategy '" + s + "'");
}

std::string to_string(switch_strategy s) {
    return s == switch_strategy::dyn_first ? "dyn_first" : "con_first";
}

void switch_schedule::validate() const {
    if (T < 1) throw config_error("switch schedule needs T >= 1");
    if (K < 0 || K > T) {
        throw config_error("switch threshold K=" + std::to_string(K) + " outside [0, " + std::to_string(T) + "]");
    }
}

double alpha_t(int t, const switch_schedule& sched) {
    sched.validate();
    if (t < 1 || t > sched.T) {
        throw config_error("denoising step " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
    }
    const bool early = t > sched.T - sched.K;
    if (sched.strategy == switch_strategy::dyn_first) {
        return early ? 1.0 : 0.0;
    }
    return early ? 0.0 : 1.0;
}

model_pair::model_pair(tensor_map dyn_star, tensor_map con_star)
    : dyn_star_(std::move(dyn_star)), con_star_(std::move(con_star)) {
    if (dyn_star_.entries.size() != con_star_.entries.size()) {
        throw format_error("enhanced models have different tensor counts");
    }
    for (auto a = dyn_star_.entries.begin(), b = con_star_.entries.begin(); a != dyn_star_.entries.end(); ++a, ++b) {
        if (a->first != b->first || a->second.shape != b->second.shape) {
            throw format_error("enhanced models disagree on tensor '" + a->first + "'");
        }
    }
    dyn_params_ = param_set::from_tensor_map(dyn_star_);
    con_params_ = param_set::from_tensor_map(con_star_, dyn_params_.spec());
    if (!dyn_params_.spec().has_adapter) {
        throw format_error("enhanced models must carry adapter weights");
    }
}

tensor_map blend(const model_pair& pair, double a) {
    if (!(a >= 0.0 && a <= 1.0)) {
        throw config_error("blend weight must lie in [0, 1]");
    }
    if (a == 1.0) return pair.dyn_star();
    if (a == 0.0) return pair.con_star();
    tensor_map out = pair.con_star();
    for (auto& [name, t] : out.entries) {
        const auto& dyn = pair.dyn_star().entries.at(name);
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = static_cast<float>(a * static_cast<double>(dyn.data[i]) +
                                           (1.0 - a) * static_cast<double>(t.data[i]));
        }
    }
    return out;
}

latent_video decoupled_sample(const model_pair& pair, const switch_schedule& sched_switch,
                              const noise_schedule& sched_noise, const cond_embedding* cond, int steps,
                              double cfg_scale, uint64_t seed) {
    sched_switch.validate();
    if (sched_switch.T != steps) {
        throw config_error("switch schedule spans " + std::to_string(sched_switch.T) + " steps but sampler runs " +
                           std::to_string(steps));
    }
    auto select = [&](int step) -> const param_set& {
        return alpha_t(step, sched_switch) == 1.0 ? pair.dyn_params() : pair.con_params();
    };
    return ddim_sample_with(select, sched_noise, cond, steps, cfg_scale, seed);
}

} // namespace mmrg

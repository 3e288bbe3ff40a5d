#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmrg/tensor_store.hpp"

namespace mmrg {

enum class delta_role { adt, deg, con_full, raw };

std::string to_string(delta_role role);
delta_role parse_delta_role(const std::string& s);

// Named deltas relative to `base_id`. With role con_full the entries are a
// full weight map rather than differences.
struct delta_map {
    std::map<std::string, delta_tensor> entries;
    std::string base_id;
    delta_role role = delta_role::raw;
    std::optional<uint64_t> mask_seed;
    std::optional<double> prune_rate;

    bool operator==(const delta_map&) const = default;
};

// Binary keep-masks (1 = keep) produced by a seeded drop-rate draw.
struct mask_map {
    std::map<std::string, std::vector<uint8_t>> entries;
    uint64_t seed = 0;
    double drop_rate = 0.0;
};

std::string model_id(const tensor_map& map);

// Keep-mask for one tensor. Element i is dropped iff the i-th uniform of the
// substream keyed by (seed, name) falls below p; regenerating with the same
// arguments yields the same mask.
std::vector<uint8_t> dare_mask(const std::string& name, size_t numel, double p, uint64_t seed);
mask_map make_masks(const delta_map& d, double p, uint64_t seed);

delta_map delta(const tensor_map& a, const tensor_map& b, const param_partition& partition);

// pre + alpha * (pre - sft) over the shared names; adapter tensors are dropped.
tensor_map extrapolate(const tensor_map& theta_pre, const tensor_map& theta_sft, double alpha,
                       const param_partition& partition);

// Drop each entry with probability p, rescale survivors by 1 / (1 - p).
delta_map dare_prune(const delta_map& d, double p, uint64_t seed);

// base + sum_i w_i * delta_i on base names. Names an adt delta carries that
// the base lacks (adapter modules) are attached verbatim.
tensor_map task_arithmetic(const tensor_map& base, const std::vector<const delta_map*>& deltas,
                           const std::vector<double>& weights);
tensor_map task_arithmetic(const tensor_map& base, const std::vector<delta_map>& deltas,
                           const std::vector<double>& weights);

struct isolated_sets {
    delta_map theta_adt;  // adapter tensors + DARE(sft - pre)
    delta_map theta_deg;  // DARE(dyn - pre)
    delta_map theta_con;  // sft - shared part of theta_adt, full weights
};

isolated_sets isolate_parameter_sets(const tensor_map& theta_pre, const tensor_map& theta_sft,
                                     const tensor_map& theta_dyn, const param_partition& partition,
                                     double p, uint64_t seed1, uint64_t seed2);

struct enhanced_models {
    tensor_map theta_dyn_star;
    tensor_map theta_con_star;
};

enhanced_models build_enhanced_models(const tensor_map& theta_pre, const isolated_sets& sets,
                                      double w_deg = 1.0, double w_adt = 1.0);

// Full-weight view of a con_full delta map (rounded to f32).
tensor_map to_weights(const delta_map& full);

// Container form: values rounded to f32, stage "isolated_delta", role and
// mask provenance in meta.
tensor_map to_tensor_map(const delta_map& d);
delta_map from_tensor_map(const tensor_map& m);

} // namespace mmrg

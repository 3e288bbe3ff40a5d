#include "mmrg/merge_core.hpp"

#include <cmath>
#include <cstdio>

#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"

namespace mmrg {

namespace {

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

delta_tensor widen(const tensor& t) {
    return delta_tensor(t.shape, std::vector<double>(t.data.begin(), t.data.end()));
}

tensor narrow(const delta_tensor& t, const std::string& name) {
    tensor out(t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) {
        out.data[i] = static_cast<float>(t.data[i]);
        if (!std::isfinite(out.data[i])) {
            throw numeric_error("non-finite value produced for '" + name + "'");
        }
    }
    return out;
}

void check_drop_rate(double p) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw config_error("drop rate must lie in [0, 1), got " + format_real(p));
    }
}

const tensor& shared_tensor(const tensor_map& m, const std::string& name, const char* which) {
    auto it = m.entries.find(name);
    if (it == m.entries.end()) {
        throw format_error(std::string(which) + " checkpoint lacks shared tensor '" + name + "'");
    }
    return it->second;
}

void check_same_shape(const std::string& name, const shape_t& a, const shape_t& b) {
    if (a != b) {
        throw format_error("shape mismatch for '" + name + "': [" + shape_to_string(a) + "] vs [" +
                           shape_to_string(b) + "]");
    }
}

meta_map derived_meta(const meta_map& from, const std::string& stage) {
    meta_map meta = from;
    meta.erase("model_id");
    meta["stage"] = stage;
    return meta;
}

} // namespace

std::string to_string(delta_role role) {
    switch (role) {
    case delta_role::adt: return "adt";
    case delta_role::deg: return "deg";
    case delta_role::con_full: return "con_full";
    case delta_role::raw: return "raw";
    }
    return "raw";
}

delta_role parse_delta_role(const std::string& s) {
    if (s == "adt") return delta_role::adt;
    if (s == "deg") return delta_role::deg;
    if (s == "con_full") return delta_role::con_full;
    if (s == "raw") return delta_role::raw;
    throw format_error("unknown delta role '" + s + "'");
}

std::string model_id(const tensor_map& map) {
    if (auto it = map.meta.find("model_id"); it != map.meta.end()) {
        return it->second;
    }
    auto stage = map.stage();
    return stage.empty() ? "anonymous" : stage;
}

std::vector<uint8_t> dare_mask(const std::string& name, size_t numel, double p, uint64_t seed) {
    check_drop_rate(p);
    const counter_rng stream = counter_rng(seed).derive(name);
    std::vector<uint8_t> keep(numel);
    for (size_t i = 0; i < numel; ++i) {
        keep[i] = counter_rng::to_unit(stream.at(i)) >= p ? 1 : 0;
    }
    return keep;
}

mask_map make_masks(const delta_map& d, double p, uint64_t seed) {
    mask_map masks;
    masks.seed = seed;
    masks.drop_rate = p;
    for (const auto& [name, t] : d.entries) {
        masks.entries.emplace(name, dare_mask(name, t.numel(), p, seed));
    }
    return masks;
}

delta_map delta(const tensor_map& a, const tensor_map& b, const param_partition& partition) {
    delta_map out;
    out.base_id = model_id(b);
    for (const auto& name : partition.shared_names) {
        const auto& ta = shared_tensor(a, name, "first");
        const auto& tb = shared_tensor(b, name, "second");
        check_same_shape(name, ta.shape, tb.shape);
        delta_tensor d(ta.shape);
        for (size_t i = 0; i < d.data.size(); ++i) {
            d.data[i] = static_cast<double>(ta.data[i]) - static_cast<double>(tb.data[i]);
        }
        out.entries.emplace(name, std::move(d));
    }
    return out;
}

tensor_map extrapolate(const tensor_map& theta_pre, const tensor_map& theta_sft, double alpha,
                       const param_partition& partition) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        throw config_error("extrapolation strength must be finite and non-negative, got " + format_real(alpha));
    }
    tensor_map out;
    out.meta = derived_meta(theta_pre.meta, "dyn");
    out.meta["alpha"] = format_real(alpha);
    for (const auto& name : partition.shared_names) {
        const auto& pre = shared_tensor(theta_pre, name, "pretrained");
        const auto& sft = shared_tensor(theta_sft, name, "fine-tuned");
        check_same_shape(name, pre.shape, sft.shape);
        delta_tensor acc(pre.shape);
        for (size_t i = 0; i < acc.data.size(); ++i) {
            const double p = pre.data[i];
            acc.data[i] = p + alpha * (p - static_cast<double>(sft.data[i]));
        }
        out.entries.emplace(name, narrow(acc, name));
    }
    return out;
}

delta_map dare_prune(const delta_map& d, double p, uint64_t seed) {
    check_drop_rate(p);
    if (d.role == delta_role::con_full) {
        throw config_error("cannot DARE-prune a full weight map (role con_full)");
    }
    if (d.role != delta_role::raw) {
        throw config_error("dare_prune expects a raw delta, got role " + to_string(d.role));
    }
    const double scale = 1.0 / (1.0 - p);
    delta_map out;
    out.base_id = d.base_id;
    out.role = d.role;
    out.mask_seed = seed;
    out.prune_rate = p;
    for (const auto& [name, t] : d.entries) {
        const auto keep = dare_mask(name, t.numel(), p, seed);
        delta_tensor pruned(t.shape);
        for (size_t i = 0; i < t.data.size(); ++i) {
            pruned.data[i] = keep[i] ? t.data[i] * scale : 0.0;
        }
        out.entries.emplace(name, std::move(pruned));
    }
    return out;
}

tensor_map task_arithmetic(const tensor_map& base, const std::vector<const delta_map*>& deltas,
                           const std::vector<double>& weights) {
    if (deltas.empty() || deltas.size() != weights.size()) {
        throw config_error("task_arithmetic needs as many weights as deltas (and at least one), got " +
                           std::to_string(deltas.size()) + " deltas and " + std::to_string(weights.size()) +
                           " weights");
    }
    for (const auto* d : deltas) {
        if (d->role == delta_role::con_full) {
            throw config_error("a con_full map is full weights, not a delta; use it as the base");
        }
    }

    tensor_map out;
    out.meta = base.meta;
    out.meta.erase("model_id");
    for (const auto& [name, bt] : base.entries) {
        delta_tensor acc = widen(bt);
        for (size_t k = 0; k < deltas.size(); ++k) {
            auto it = deltas[k]->entries.find(name);
            if (it == deltas[k]->entries.end()) {
                continue;
            }
            check_same_shape(name, bt.shape, it->second.shape);
            const double w = weights[k];
            for (size_t i = 0; i < acc.data.size(); ++i) {
                acc.data[i] += w * it->second.data[i];
            }
        }
        out.entries.emplace(name, narrow(acc, name));
    }
    for (const auto* d : deltas) {
        for (const auto& [name, t] : d->entries) {
            if (base.contains(name)) {
                continue;
            }
            if (d->role != delta_role::adt) {
                throw format_error("delta tensor '" + name + "' has no counterpart in the base");
            }
            if (!out.entries.emplace(name, narrow(t, name)).second) {
                throw format_error("adapter tensor '" + name + "' attached twice");
            }
        }
    }
    return out;
}

tensor_map task_arithmetic(const tensor_map& base, const std::vector<delta_map>& deltas,
                           const std::vector<double>& weights) {
    std::vector<const delta_map*> ptrs;
    for (const auto& d : deltas) {
        ptrs.push_back(&d);
    }
    return task_arithmetic(base, ptrs, weights);
}

isolated_sets isolate_parameter_sets(const tensor_map& theta_pre, const tensor_map& theta_sft,
                                     const tensor_map& theta_dyn, const param_partition& partition,
                                     double p, uint64_t seed1, uint64_t seed2) {
    check_drop_rate(p);
    if (validate_compatibility(theta_sft, theta_pre).adapter_names != partition.adapter_names) {
        throw format_error("partition does not match the pretrained / fine-tuned checkpoints");
    }
    for (const auto& [name, t] : theta_dyn.entries) {
        if (!partition.shared_names.count(name)) {
            throw format_error("extrapolated checkpoint carries non-shared tensor '" + name + "'");
        }
    }

    isolated_sets sets;

    sets.theta_adt = dare_prune(delta(theta_sft, theta_pre, partition), p, seed2);
    sets.theta_adt.role = delta_role::adt;
    sets.theta_adt.base_id = model_id(theta_pre);
    for (const auto& name : partition.adapter_names) {
        sets.theta_adt.entries.emplace(name, widen(theta_sft.at(name)));
    }

    sets.theta_deg = dare_prune(delta(theta_dyn, theta_pre, partition), p, seed1);
    sets.theta_deg.role = delta_role::deg;
    sets.theta_deg.base_id = model_id(theta_pre);

    sets.theta_con.role = delta_role::con_full;
    sets.theta_con.base_id = model_id(theta_sft);
    for (const auto& name : partition.shared_names) {
        const auto& sft = theta_sft.at(name);
        const auto& adt = sets.theta_adt.entries.at(name);
        delta_tensor con(sft.shape);
        for (size_t i = 0; i < con.data.size(); ++i) {
            con.data[i] = static_cast<double>(sft.data[i]) - adt.data[i];
        }
        sets.theta_con.entries.emplace(name, std::move(con));
    }
    return sets;
}

tensor_map to_weights(const delta_map& full) {
    if (full.role != delta_role::con_full) {
        throw config_error("to_weights expects a con_full map, got role " + to_string(full.role));
    }
    tensor_map out;
    for (const auto& [name, t] : full.entries) {
        out.entries.emplace(name, narrow(t, name));
    }
    return out;
}

enhanced_models build_enhanced_models(const tensor_map& theta_pre, const isolated_sets& sets, double w_deg,
                                      double w_adt) {
    if (sets.theta_adt.role != delta_role::adt || sets.theta_deg.role != delta_role::deg ||
        sets.theta_con.role != delta_role::con_full) {
        throw format_error("isolated sets carry unexpected roles");
    }
    bool has_adapter = false;
    for (const auto& [name, _] : sets.theta_adt.entries) {
        has_adapter = has_adapter || !theta_pre.contains(name);
    }
    if (!has_adapter) {
        throw format_error("theta_adt carries no adapter tensors");
    }
    for (const auto& [name, _] : sets.theta_con.entries) {
        if (!theta_pre.contains(name)) {
            throw format_error("theta_con tensor '" + name + "' is not in the pretrained checkpoint");
        }
    }
    if (sets.theta_con.entries.size() != theta_pre.entries.size()) {
        throw format_error("theta_con does not cover the pretrained checkpoint");
    }

    enhanced_models out;
    out.theta_dyn_star = task_arithmetic(theta_pre, std::vector<const delta_map*>{&sets.theta_deg, &sets.theta_adt},
                                         std::vector<double>{w_deg, w_adt});
    out.theta_dyn_star.meta = derived_meta(theta_pre.meta, "dyn_star");

    tensor_map con_base = to_weights(sets.theta_con);
    out.theta_con_star = task_arithmetic(con_base, std::vector<const delta_map*>{&sets.theta_adt}, std::vector<double>{w_adt});
    out.theta_con_star.meta = derived_meta(theta_pre.meta, "con_star");

    auto same_names = [](const tensor_map& a, const tensor_map& b) {
        if (a.entries.size() != b.entries.size()) return false;
        for (auto ia = a.entries.begin(), ib = b.entries.begin(); ia != a.entries.end(); ++ia, ++ib) {
            if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
        }
        return true;
    };
    if (!same_names(out.theta_dyn_star, out.theta_con_star)) {
        throw format_error("enhanced models disagree on tensor names");
    }
    return out;
}

tensor_map to_tensor_map(const delta_map& d) {
    tensor_map out;
    for (const auto& [name, t] : d.entries) {
        out.entries.emplace(name, narrow(t, name));
    }
    out.meta["stage"] = "isolated_delta";
    out.meta["role"] = to_string(d.role);
    out.meta["base_id"] = d.base_id;
    if (d.prune_rate) {
        out.meta["prune_rate"] = format_real(*d.prune_rate);
    }
    if (d.mask_seed) {
        out.meta["mask_seed"] = std::to_string(*d.mask_seed);
    }
    return out;
}

delta_map from_tensor_map(const tensor_map& m) {
    if (m.stage() != "isolated_delta") {
        throw format_error("expected a stage 'isolated_delta' container, got '" + m.stage() + "'");
    }
    delta_map d;
    auto get = [&](const char* key) -> const std::string* {
        auto it = m.meta.find(key);
        return it == m.meta.end() ? nullptr : &it->second;
    };
    const auto* role = get("role");
    if (!role) {
        throw format_error("delta container lacks 'role' meta");
    }
    d.role = parse_delta_role(*role);
    if (const auto* b = get("base_id")) d.base_id = *b;
    try {
        if (const auto* p = get("prune_rate")) d.prune_rate = std::stod(*p);
        if (const auto* s = get("mask_seed")) d.mask_seed = std::stoull(*s);
    } catch (const std::exception&) {
        throw format_error("malformed prune_rate / mask_seed meta");
    }
    for (const auto& [name, t] : m.entries) {
        d.entries.emplace(name, widen(t));
    }
    return d;
}

} // namespace mmrg

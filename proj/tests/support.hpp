#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mmrg/denoiser.hpp"
#include "mmrg/rng.hpp"
#include "mmrg/tensor_store.hpp"

namespace test {

inline mmrg::tensor make_tensor(mmrg::shape_t shape, std::initializer_list<float> values) {
    return mmrg::tensor(std::move(shape), std::vector<float>(values));
}

inline mmrg::tensor_map one_tensor_map(const std::string& name, std::initializer_list<float> values,
                                       const std::string& stage = "pretrained") {
    mmrg::tensor_map m;
    m.entries.emplace(name, make_tensor({static_cast<int64_t>(values.size())}, values));
    m.meta["stage"] = stage;
    return m;
}

// Random checkpoint of the given spec with values perturbed away from init.
inline mmrg::tensor_map random_checkpoint(const mmrg::denoiser_spec& spec, uint64_t seed, const std::string& stage,
                                          double scale = 0.05) {
    mmrg::param_set p = mmrg::init_params(spec, seed);
    mmrg::counter_rng rng(seed ^ 0x5eedULL);
    for (double& v : p.values()) v += scale * rng.normal();
    return p.to_tensor_map({{"stage", stage}, {"model_id", stage}});
}

// Scratch directory removed on scope exit.
struct temp_dir {
    std::filesystem::path path;
    explicit temp_dir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("mmrg_test_" + tag + "_" + std::to_string(mmrg::mix64(reinterpret_cast<uintptr_t>(this))));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~temp_dir() { std::filesystem::remove_all(path); }
    temp_dir(const temp_dir&) = delete;
    temp_dir& operator=(const temp_dir&) = delete;
};

inline mmrg::denoiser_spec tiny_spec(bool adapter = false) {
    mmrg::denoiser_spec s;
    s.frames = 3;
    s.dim = 4;
    s.hidden = 6;
    s.time_dim = 4;
    s.has_adapter = adapter;
    return s;
}

inline mmrg::denoiser_spec small_spec(bool adapter = false) {
    mmrg::denoiser_spec s;
    s.frames = 4;
    s.dim = 12;
    s.hidden = 8;
    s.time_dim = 2;
    s.has_adapter = adapter;
    return s;
}

} // namespace test

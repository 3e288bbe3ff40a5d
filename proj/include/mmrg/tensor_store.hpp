#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace mmrg {

using shape_t = std::vector<int64_t>;

int64_t shape_numel(const shape_t& shape);
std::string shape_to_string(const shape_t& shape);

// Dense row-major array. Checkpoints hold `tensor` (f32); merge arithmetic
// works on `delta_tensor` (f64) so identities like pre + (sft - pre) == sft
// survive without intermediate rounding.
template <class T>
struct basic_tensor {
    shape_t shape;
    std::vector<T> data;

    basic_tensor() = default;
    basic_tensor(shape_t s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}
    explicit basic_tensor(shape_t s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T{}) {}

    size_t numel() const { return data.size(); }
    bool operator==(const basic_tensor&) const = default;
};

using tensor = basic_tensor<float>;
using delta_tensor = basic_tensor<double>;

using meta_map = std::map<std::string, std::string>;

// Named tensors with free-form metadata. std::map keeps names unique and
// iteration lexicographic.
struct tensor_map {
    std::map<std::string, tensor> entries;
    meta_map meta;

    bool contains(const std::string& name) const { return entries.count(name) != 0; }
    const tensor& at(const std::string& name) const;
    std::string stage() const;
    size_t param_count() const;

    bool operator==(const tensor_map&) const = default;
};

// Stages a checkpoint may declare in its "stage" meta key.
inline const std::set<std::string> checkpoint_stages = {
    "pretrained", "sft", "dyn", "dyn_star", "con_star", "isolated_delta"};

struct param_partition {
    std::set<std::string> adapter_names;
    std::set<std::string> shared_names;
};

inline constexpr uint32_t container_version = 1;
inline constexpr uint64_t container_alignment = 64;

// Container encoding with no checkpoint-level rules (used for corpora too).
std::string encode_container(const tensor_map& map);
tensor_map decode_container(std::string_view bytes);

void write_container(const tensor_map& map, const std::filesystem::path& path);
tensor_map read_container(const std::filesystem::path& path);

// Checkpoint IO: container IO plus the "stage" meta requirement.
void save_checkpoint(const tensor_map& map, const std::filesystem::path& path);
tensor_map load_checkpoint(const std::filesystem::path& path);

// Throws format_error when the map cannot be stored (bad names, shapes,
// non-finite values, meta containing tabs/newlines).
void validate_tensor_map(const tensor_map& map);

// `sft` is the fine-tuned map that may carry extra adapter tensors, `pre` the
// pretrained map it was derived from.
param_partition validate_compatibility(const tensor_map& sft, const tensor_map& pre);

} // namespace mmrg

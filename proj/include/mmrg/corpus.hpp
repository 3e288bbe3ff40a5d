#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmrg/linalg.hpp"
#include "mmrg/schedule.hpp"
#include "mmrg/tensor_store.hpp"

namespace mmrg {

enum class motion_command { left, right, up, down, still };
enum class magnitude_class { low, high };

std::string to_string(motion_command c);
std::string to_string(magnitude_class m);
motion_command parse_command(const std::string& s);
magnitude_class parse_magnitude(const std::string& s);

// Unit direction in the bump plane (axis 0 = right, axis 1 = up); zero for still.
Eigen::Vector2d direction_of(motion_command c);

inline constexpr std::array<motion_command, 4> moving_commands = {
    motion_command::left, motion_command::right, motion_command::up, motion_command::down};

// Stand-in for an encoded text prompt: one token for the command and one for
// the magnitude class, drawn from a fixed table per latent dim.
struct cond_embedding {
    mat_t tokens;  // l x d
    motion_command command = motion_command::still;
    magnitude_class magnitude = magnitude_class::low;
};

cond_embedding make_condition(motion_command command, magnitude_class magnitude, int dim);

// Fixed linear code mapping a 3x3 grid of Gaussian bump activations into the
// latent space. Columns of `basis` are orthonormal; `appearance` spans the
// orthogonal complement and carries the static per-clip content.
struct latent_code {
    static constexpr int grid = 3;
    static constexpr int features = grid * grid;
    static constexpr double bump_width = 1.5;
    static constexpr double bump_amplitude = 3.0;
    static constexpr double appearance_norm = 4.0;
    static constexpr double appearance_jitter = 0.1;

    int dim = 0;
    mat_t basis;       // d x 9
    mat_t appearance;  // d x (d - 9)
    vec_t appearance_mean;

    static const latent_code& for_dim(int dim);

    vec_t bump_features(const Eigen::Vector2d& pos) const;
    // Centroid of the (clamped) decoded bump activations.
    Eigen::Vector2d decode_position(const Eigen::Ref<const vec_t>& frame) const;
};

struct corpus_spec {
    int count = 256;
    int frames = 8;
    int dim = 16;
    double motion_magnitude = 0.25;
    bool conditioned = false;
    magnitude_class label = magnitude_class::high;
    uint64_t seed = 0;

    void validate() const;
};

struct clip {
    latent_video video;
    cond_embedding cond;
    bool conditioned = false;
};

std::vector<clip> gen_corpus(const corpus_spec& spec);

// One tensor per clip ("clip.00000", ...) and a label table in meta.
tensor_map corpus_to_tensor_map(const std::vector<clip>& corpus, const corpus_spec& spec);
std::vector<clip> corpus_from_tensor_map(const tensor_map& m);

} // namespace mmrg

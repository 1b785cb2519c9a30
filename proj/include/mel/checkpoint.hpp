#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "mel/metaexp.hpp"
#include "mel/policy.hpp"

namespace mel {

struct TrainState {
    std::uint64_t step = 0;  // completed steps
    std::uint64_t seed = 0;  // every stream is a pure function of (seed, step, ...)
    PolicyParams params;
    std::optional<PolicySnapshot> snapshot;  // theta_old of the last step
    MetaExperiencePool pool;
};

inline constexpr int kCheckpointVersion = 1;

std::string serialize_checkpoint(const TrainState& state);
// Throws CheckpointError on version mismatch, truncation or checksum failure.
TrainState parse_checkpoint(const std::string& bytes);

// Written to a temporary file and renamed into place.
void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

std::string checkpoint_path(const std::string& run_dir, std::uint64_t step);
// Highest step-<k> under run_dir/checkpoints, if any.
std::optional<std::uint64_t> latest_checkpoint(const std::string& run_dir);

}  // namespace mel

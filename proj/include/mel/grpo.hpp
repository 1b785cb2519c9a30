#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mel/exec.hpp"
#include "mel/policy.hpp"
#include "mel/taskenv.hpp"

namespace mel {

struct RolloutGroup {
    std::string query_id;
    std::size_t query_index = 0;  // position in the step's query batch
    std::vector<TokenId> prompt;
    std::int64_t ground_truth = 0;
    std::vector<Trajectory> trajectories;
    std::vector<int> rewards;
    std::vector<std::size_t> positives;  // Y+ (0-based indices)
    std::vector<std::size_t> negatives;  // Y-

    std::size_t size() const { return trajectories.size(); }
    bool degenerate() const { return positives.empty() || negatives.empty(); }
};

struct AdvantageSet {
    std::vector<double> values;
    bool degenerate = false;
};

struct ClipConfig {
    double epsilon = 0.2;
    double learning_rate = 20.0;
    int inner_epochs = 1;
    double kl_coef = 0.0;  // optional KL-to-snapshot penalty, off by default
};

inline constexpr double kAdvantageStdFloor = 1e-6;

// Samples G trajectories from the snapshot. Sample i draws from the stream
// stream_seed(config.seed, {Rollout, i}).
RolloutGroup rollout_group(const PolicySnapshot& snapshot, const Query& query, int group_size,
                           const DecodingConfig& config);

// One group per query; group q is seeded by (run_seed, step, q).
std::vector<RolloutGroup> rollout_groups(const PolicySnapshot& snapshot, std::span<const Query> queries,
                                         int group_size, const DecodingConfig& config, std::uint64_t run_seed,
                                         std::uint64_t step, Exec exec = Exec::Parallel);

// (r_i - mean) / max(population std, 1e-6); all-equal rewards give zeros.
AdvantageSet normalize_advantages(std::span<const int> rewards);

// exp(log pi_theta - log pi_old) per response token.
std::vector<double> importance_ratios(const PolicyParams& params, const PolicySnapshot& snapshot,
                                      std::span<const TokenId> prompt, const Trajectory& traj);

struct SurrogateResult {
    double value = 0.0;               // token mean of min(rho A, clip(rho) A)
    std::vector<double> grad_weights; // d/d(log pi_t) of the per-token term
    std::size_t clipped = 0;          // tokens whose clipped branch zeroed the gradient
};

SurrogateResult clipped_surrogate(std::span<const double> ratios, std::span<const double> advantages,
                                  double epsilon);

struct GrpoGradient {
    WeightTable gradient;
    double objective = 0.0;
    std::size_t clipped_tokens = 0;
    std::size_t total_tokens = 0;
    std::size_t degenerate_groups = 0;
};

// Ascent direction of the group- and token-averaged clipped surrogate.
// Old log-probabilities are the ones recorded at sampling time.
GrpoGradient grpo_gradient(const PolicyParams& params, std::span<const RolloutGroup> groups,
                           const ClipConfig& config, Exec exec = Exec::Parallel);

// Objective value only (no gradient); shares the definition above.
double grpo_objective(const PolicyParams& params, std::span<const RolloutGroup> groups, const ClipConfig& config);

}  // namespace mel

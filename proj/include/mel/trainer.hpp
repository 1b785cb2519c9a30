#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mel/analyst.hpp"
#include "mel/checkpoint.hpp"
#include "mel/config.hpp"
#include "mel/internalize.hpp"

namespace mel {

// Training queries and the order in which steps consume them: consecutive
// windows over a fresh seeded permutation per epoch.
class TaskSource {
public:
    explicit TaskSource(std::vector<Query> tasks);
    std::vector<Query> batch(std::uint64_t seed, std::uint64_t step, int count) const;
    const std::vector<Query>& tasks() const { return tasks_; }

private:
    std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch) const;
    std::vector<Query> tasks_;
};

// Smallest numeral count that renders every query (at least 10).
int numerals_for(std::span<const Query> queries);
// Re-renders prompt tokens under `vocab`.
void rerender_prompts(std::vector<Query>& queries, const Vocabulary& vocab);

struct EventRecord {
    std::uint64_t step = 0;
    double mean_reward = 0.0;
    double degenerate_fraction = 0.0;
    std::size_t pairs = 0;
    std::size_t candidates = 0;  // this step
    std::size_t validated = 0;
    std::size_t rejected = 0;
    std::size_t analyst_failures = 0;
    double retention_ratio = 0.0;  // pool-wide
    std::size_t mel_batch = 0;
    bool mel_skipped = true;
    std::optional<double> nll_loss;
    std::optional<double> meta_return;
    double surrogate = 0.0;
    double grad_norm_grpo = 0.0;
    double grad_norm_mel = 0.0;
    double grad_norm_joint = 0.0;
    std::size_t clipped_tokens = 0;
    std::size_t total_tokens = 0;
    std::optional<double> wall_ms;  // only outside deterministic mode
};

std::string to_json_line(const EventRecord& e);
EventRecord event_from_json_line(const std::string& line, std::size_t lineno);

struct StepGradients {
    GrpoGradient grpo;
    std::optional<MetaGradient> mel;
    WeightTable joint;  // grpo + lambda * mel
};

// Gradient of the joint objective at `params`. The MEL part is skipped when
// `batch` is null or empty.
StepGradients joint_gradient(const PolicyParams& params, std::span<const RolloutGroup> groups,
                             const InternalizationBatch* batch, double lambda_mel, const ClipConfig& clip,
                             Exec exec = Exec::Parallel);

// Optional capture of one step's internals, for tests.
struct StepTrace {
    std::vector<Query> queries;
    std::vector<RolloutGroup> groups;
    InternalizationBatch batch;
    std::vector<StepGradients> updates;
};

std::unique_ptr<Analyst> make_analyst(const TrainConfig& config, std::shared_ptr<const Vocabulary> vocab);

TrainState initial_state(const TrainConfig& config, const TaskSource& tasks);

// One step of the joint objective: snapshot, rollouts, meta-experience
// construction, gradient, ascent update(s).
EventRecord train_step(TrainState& state, const TrainConfig& config, const TaskSource& tasks, Analyst* analyst,
                       Exec exec = Exec::Parallel, StepTrace* trace = nullptr);

struct RunOptions {
    bool resume = false;
    std::optional<std::uint64_t> stop_after;  // stop early after this step (simulated interruption)
    Exec exec = Exec::Parallel;
    Analyst* analyst = nullptr;  // overrides the configured backend
    bool progress = false;       // one line per step on stderr
};

// Run directory: config.resolved, events.jsonl, checkpoints/step-<k>,
// pool.jsonl, metrics.csv (plus timing.jsonl in deterministic mode).
TrainState run(const TrainConfig& config, const Config& resolved, const TaskSource& tasks, const std::string& run_dir,
               const RunOptions& options = {});

std::vector<EventRecord> read_events(const std::string& path);

}  // namespace mel

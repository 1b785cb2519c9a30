#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mel/config.hpp"
#include "mel/exec.hpp"
#include "mel/policy.hpp"

namespace mel {

struct Metrics {
    double pass_at_1 = 0.0;
    double avg_at_k = 0.0;
    double pass_at_k = 0.0;
};

struct EvalReport {
    int k = 0;
    std::vector<int> greedy;                 // one greedy reward per task
    std::vector<std::vector<int>> rewards;   // tasks x k sampled rewards
    Metrics overall;
    std::map<std::string, Metrics> by_family;
    std::map<int, Metrics> by_length;
};

// Pass@1 from the greedy column; Avg@k = mean of the matrix; Pass@k = share
// of rows with at least one success.
Metrics compute_metrics(std::span<const int> greedy, const std::vector<std::vector<int>>& rewards);

// Sample j of task i at temperature_k uses stream (seed, Eval, i, j).
EvalReport evaluate(const PolicyParams& params, std::span<const Query> tasks, const EvalConfig& config,
                    Exec exec = Exec::Parallel);

// "Pass@1 / Avg@k / Pass@k" as percentages with two decimals, e.g. "30.00 / 25.42 / 60.00".
std::string format_table_row(const Metrics& m);
std::string report_to_json(const EvalReport& r);

// Final (highest-step) checkpoint of a run. Throws CheckpointError naming the path.
PolicyParams load_final_params(const std::string& run_dir);

struct RunComparison {
    std::string run_a;
    std::string run_b;
    Metrics a;
    Metrics b;
    Metrics delta;  // b - a
};

struct ComparisonSummary {
    std::vector<RunComparison> runs;  // one per seed (paired by position)
    Metrics median_delta;
    int wins_b = 0;  // seeds where b's Pass@1 is higher
    int wins_a = 0;
    int ties = 0;
};

RunComparison compare_runs(const std::string& run_a, const std::string& run_b, std::span<const Query> tasks,
                           const EvalConfig& config, Exec exec = Exec::Parallel);
ComparisonSummary compare_run_sets(std::span<const std::string> runs_a, std::span<const std::string> runs_b,
                                   std::span<const Query> tasks, const EvalConfig& config, Exec exec = Exec::Parallel);
std::string comparison_to_text(const ComparisonSummary& s, int k);

double median(std::vector<double> v);

}  // namespace mel

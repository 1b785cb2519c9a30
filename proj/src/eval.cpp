#include "mel/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "mel/checkpoint.hpp"
#include "mel/error.hpp"
#include "mel/rng.hpp"
#include "mel/trainer.hpp"

namespace mel {

Metrics compute_metrics(std::span<const int> greedy, const std::vector<std::vector<int>>& rewards) {
    Metrics m;
    if (greedy.empty()) return m;
    if (rewards.size() != greedy.size()) throw ContractViolation("rewards matrix and greedy column differ in length");
    double p1 = 0.0, avg = 0.0, pk = 0.0;
    for (std::size_t i = 0; i < greedy.size(); ++i) {
        p1 += greedy[i];
        const auto& row = rewards[i];
        if (row.empty()) throw ContractViolation("empty rewards row");
        double s = 0.0;
        bool any = false;
        for (int r : row) {
            s += r;
            any = any || r == 1;
        }
        avg += s / static_cast<double>(row.size());
        pk += any ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(greedy.size());
    m.pass_at_1 = p1 / n;
    m.avg_at_k = avg / n;
    m.pass_at_k = pk / n;
    return m;
}

EvalReport evaluate(const PolicyParams& params, std::span<const Query> tasks, const EvalConfig& config, Exec exec) {
    if (tasks.empty()) throw ContractViolation("evaluation needs at least one task");
    if (config.k < 1) throw ConfigError("eval.k must be >= 1");
    const Vocabulary& vocab = *params.vocab;
    const std::size_t n = tasks.size();
    EvalReport r;
    r.k = config.k;
    r.greedy.assign(n, 0);
    r.rewards.assign(n, std::vector<int>(static_cast<std::size_t>(config.k), 0));
    ExceptionSlot err;
#pragma omp parallel for schedule(dynamic) if (exec == Exec::Parallel)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        err.run([&] {
            const Query& q = tasks[i];
            const auto prompt = render_prompt(vocab, q);
            const DecodingConfig greedy{config.temperature_pass1, config.max_tokens, 0};
            r.greedy[i] = verify(vocab, sample(params, prompt, greedy), q.ground_truth).reward;
            for (int j = 0; j < config.k; ++j) {
                const DecodingConfig dc{config.temperature_k, config.max_tokens,
                                        stream_seed(config.seed, {tag(Stream::Eval), i, static_cast<std::uint64_t>(j)})};
                r.rewards[i][static_cast<std::size_t>(j)] = verify(vocab, sample(params, prompt, dc), q.ground_truth).reward;
            }
        });
    }
    err.rethrow();
    r.overall = compute_metrics(r.greedy, r.rewards);

    std::map<std::string, std::vector<std::size_t>> fam;
    std::map<int, std::vector<std::size_t>> len;
    for (std::size_t i = 0; i < n; ++i) {
        fam[tasks[i].family].push_back(i);
        len[tasks[i].chain_length()].push_back(i);
    }
    auto subset = [&](const std::vector<std::size_t>& idx) {
        std::vector<int> g;
        std::vector<std::vector<int>> m;
        for (std::size_t i : idx) {
            g.push_back(r.greedy[i]);
            m.push_back(r.rewards[i]);
        }
        return compute_metrics(g, m);
    };
    for (const auto& [name, idx] : fam) r.by_family[name] = subset(idx);
    for (const auto& [l, idx] : len) r.by_length[l] = subset(idx);
    return r;
}

std::string format_table_row(const Metrics& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f / %.2f / %.2f", 100.0 * m.pass_at_1, 100.0 * m.avg_at_k, 100.0 * m.pass_at_k);
    return buf;
}

namespace {

nlohmann::ordered_json metrics_json(const Metrics& m, int k) {
    nlohmann::ordered_json j;
    j["pass_at_1"] = m.pass_at_1;
    j["avg_at_" + std::to_string(k)] = m.avg_at_k;
    j["pass_at_" + std::to_string(k)] = m.pass_at_k;
    return j;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["k"] = r.k;
    j["tasks"] = r.greedy.size();
    j["overall"] = metrics_json(r.overall, r.k);
    j["table_row"] = format_table_row(r.overall);
    for (const auto& [name, m] : r.by_family) j["by_family"][name] = metrics_json(m, r.k);
    for (const auto& [l, m] : r.by_length) j["by_length"][std::to_string(l)] = metrics_json(m, r.k);
    return j.dump(2);
}

PolicyParams load_final_params(const std::string& run_dir) {
    const auto step = latest_checkpoint(run_dir);
    if (!step) throw CheckpointError("no checkpoint under " + run_dir + "/checkpoints");
    return load_checkpoint(checkpoint_path(run_dir, *step)).params;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

RunComparison compare_runs(const std::string& run_a, const std::string& run_b, std::span<const Query> tasks,
                           const EvalConfig& config, Exec exec) {
    const PolicyParams pa = load_final_params(run_a);
    const PolicyParams pb = load_final_params(run_b);
    RunComparison c;
    c.run_a = run_a;
    c.run_b = run_b;
    c.a = evaluate(pa, tasks, config, exec).overall;
    c.b = evaluate(pb, tasks, config, exec).overall;
    c.delta = {c.b.pass_at_1 - c.a.pass_at_1, c.b.avg_at_k - c.a.avg_at_k, c.b.pass_at_k - c.a.pass_at_k};
    return c;
}

ComparisonSummary compare_run_sets(std::span<const std::string> runs_a, std::span<const std::string> runs_b,
                                   std::span<const Query> tasks, const EvalConfig& config, Exec exec) {
    if (runs_a.size() != runs_b.size() || runs_a.empty())
        throw ConfigError("compare needs two run lists of equal, non-zero length");
    ComparisonSummary s;
    std::vector<double> d1, dk, pk;
    for (std::size_t i = 0; i < runs_a.size(); ++i) {
        s.runs.push_back(compare_runs(runs_a[i], runs_b[i], tasks, config, exec));
        const auto& d = s.runs.back().delta;
        d1.push_back(d.pass_at_1);
        dk.push_back(d.avg_at_k);
        pk.push_back(d.pass_at_k);
        if (d.pass_at_1 > 0) ++s.wins_b;
        else if (d.pass_at_1 < 0) ++s.wins_a;
        else ++s.ties;
    }
    s.median_delta = {median(d1), median(dk), median(pk)};
    return s;
}

std::string comparison_to_text(const ComparisonSummary& s, int k) {
    std::ostringstream out;
    char buf[160];
    out << "Pass@1 / Avg@" << k << " / Pass@" << k << " (percent)\n";
    for (const auto& r : s.runs) {
        out << "A " << format_table_row(r.a) << "   " << r.run_a << '\n';
        out << "B " << format_table_row(r.b) << "   " << r.run_b << '\n';
        std::snprintf(buf, sizeof buf, "  delta %+.2f / %+.2f / %+.2f\n", 100 * r.delta.pass_at_1,
                      100 * r.delta.avg_at_k, 100 * r.delta.pass_at_k);
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "median delta (B - A): %+.2f / %+.2f / %+.2f\n", 100 * s.median_delta.pass_at_1,
                  100 * s.median_delta.avg_at_k, 100 * s.median_delta.pass_at_k);
    out << buf;
    out << "Pass@1 wins: B " << s.wins_b << ", A " << s.wins_a << ", ties " << s.ties << '\n';
    return out.str();
}

}  // namespace mel

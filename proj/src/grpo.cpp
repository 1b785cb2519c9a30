#include "mel/grpo.hpp"

#include <algorithm>
#include <cmath>

#include "mel/error.hpp"
#include "mel/rng.hpp"

namespace mel {

RolloutGroup rollout_group(const PolicySnapshot& snapshot, const Query& query, int group_size,
                           const DecodingConfig& config) {
    if (group_size < 2) throw ContractViolation("group size must be >= 2");
    const PolicyParams& p = snapshot.params();
    RolloutGroup g;
    g.query_id = query.id;
    g.prompt = query.prompt_tokens;
    g.ground_truth = query.ground_truth;
    g.trajectories.reserve(static_cast<std::size_t>(group_size));
    for (int i = 0; i < group_size; ++i) {
        DecodingConfig c = config;
        c.seed = stream_seed(config.seed, {tag(Stream::Rollout), static_cast<std::uint64_t>(i)});
        g.trajectories.push_back(sample(p, query.prompt_tokens, c));
        const int r = verify(*p.vocab, g.trajectories.back(), query.ground_truth).reward;
        g.rewards.push_back(r);
        (r == 1 ? g.positives : g.negatives).push_back(static_cast<std::size_t>(i));
    }
    return g;
}

std::vector<RolloutGroup> rollout_groups(const PolicySnapshot& snapshot, std::span<const Query> queries,
                                         int group_size, const DecodingConfig& config, std::uint64_t run_seed,
                                         std::uint64_t step, Exec exec) {
    std::vector<RolloutGroup> groups(queries.size());
    auto one = [&](std::size_t q) {
        DecodingConfig c = config;
        c.seed = stream_seed(run_seed, {tag(Stream::Rollout), step, static_cast<std::uint64_t>(q)});
        groups[q] = rollout_group(snapshot, queries[q], group_size, c);
        groups[q].query_index = q;
    };
    if (exec == Exec::Serial) {
        for (std::size_t q = 0; q < queries.size(); ++q) one(q);
        return groups;
    }
    ExceptionSlot err;
    const auto n = static_cast<std::int64_t>(queries.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t q = 0; q < n; ++q) err.run([&] { one(static_cast<std::size_t>(q)); });
    err.rethrow();
    return groups;
}

AdvantageSet normalize_advantages(std::span<const int> rewards) {
    if (rewards.size() < 2) throw ContractViolation("advantage normalisation needs a group of >= 2");
    AdvantageSet a;
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (int r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (int r : rewards) var += (r - mean) * (r - mean);
    var /= n;
    a.values.assign(rewards.size(), 0.0);
    a.degenerate = std::all_of(rewards.begin(), rewards.end(), [&](int r) { return r == rewards[0]; });
    if (a.degenerate) return a;
    const double denom = std::max(std::sqrt(var), kAdvantageStdFloor);
    for (std::size_t i = 0; i < rewards.size(); ++i) a.values[i] = (rewards[i] - mean) / denom;
    return a;
}

std::vector<double> importance_ratios(const PolicyParams& params, const PolicySnapshot& snapshot,
                                      std::span<const TokenId> prompt, const Trajectory& traj) {
    const auto fresh = sequence_log_prob(params, prompt, traj.tokens);
    const auto old = sequence_log_prob(snapshot.params(), prompt, traj.tokens);
    std::vector<double> out(fresh.size());
    for (std::size_t t = 0; t < fresh.size(); ++t) out[t] = std::exp(fresh[t] - old[t]);
    return out;
}

SurrogateResult clipped_surrogate(std::span<const double> ratios, std::span<const double> advantages,
                                  double epsilon) {
    if (ratios.size() != advantages.size()) throw ContractViolation("ratio/advantage length mismatch");
    SurrogateResult r;
    r.grad_weights.assign(ratios.size(), 0.0);
    if (ratios.empty()) return r;
    double sum = 0.0;
    for (std::size_t t = 0; t < ratios.size(); ++t) {
        const double rho = ratios[t], adv = advantages[t];
        const double unclipped = rho * adv;
        const double clipped = std::clamp(rho, 1.0 - epsilon, 1.0 + epsilon) * adv;
        sum += std::min(unclipped, clipped);
        // The unclipped branch is the active one (and carries the gradient)
        // unless the clipped branch is strictly smaller.
        if (unclipped <= clipped) {
            r.grad_weights[t] = unclipped;
        } else {
            ++r.clipped;
        }
    }
    r.value = sum / static_cast<double>(ratios.size());
    return r;
}

namespace {

struct GroupTerm {
    WeightTable grad;
    double objective = 0.0;
    std::size_t clipped = 0;
    std::size_t tokens = 0;
    bool degenerate = false;
};

// Contribution of one group, already divided by G and |y_i| but not by the
// number of groups.
GroupTerm group_term(const PolicyParams& params, const RolloutGroup& g, const ClipConfig& config, bool want_grad) {
    GroupTerm out;
    out.grad = WeightTable(params.vocab_size());
    const AdvantageSet adv = normalize_advantages(g.rewards);
    if (adv.degenerate) {
        out.degenerate = true;
        return out;
    }
    const double inv_g = 1.0 / static_cast<double>(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Trajectory& y = g.trajectories[i];
        if (y.tokens.empty()) continue;
        const auto fresh = sequence_log_prob(params, g.prompt, y.tokens);
        std::vector<double> ratios(fresh.size());
        for (std::size_t t = 0; t < fresh.size(); ++t) ratios[t] = std::exp(fresh[t] - y.token_log_probs[t]);
        const std::vector<double> a(ratios.size(), adv.values[i]);
        SurrogateResult s = clipped_surrogate(ratios, a, config.epsilon);
        const double inv_len = 1.0 / static_cast<double>(y.tokens.size());
        double value = s.value;
        std::vector<double> coeff(ratios.size());
        for (std::size_t t = 0; t < ratios.size(); ++t) {
            double w = s.grad_weights[t];
            if (config.kl_coef != 0.0) {
                // k3 estimator of KL(old || new): r - log r - 1 with r = 1 / rho.
                const double r = 1.0 / ratios[t];
                value -= config.kl_coef * (r - std::log(r) - 1.0) * inv_len;
                w += config.kl_coef * (r - 1.0);
            }
            coeff[t] = w * inv_len * inv_g;
        }
        out.objective += value * inv_g;
        out.clipped += s.clipped;
        out.tokens += y.tokens.size();
        if (want_grad) accumulate_log_prob_grad(params, g.prompt, y.tokens, coeff, out.grad);
    }
    return out;
}

}  // namespace

GrpoGradient grpo_gradient(const PolicyParams& params, std::span<const RolloutGroup> groups,
                           const ClipConfig& config, Exec exec) {
    if (groups.empty()) throw ContractViolation("grpo_gradient needs at least one group");
    std::vector<GroupTerm> terms(groups.size());
    if (exec == Exec::Serial) {
        for (std::size_t q = 0; q < groups.size(); ++q) terms[q] = group_term(params, groups[q], config, true);
    } else {
        ExceptionSlot err;
        const auto n = static_cast<std::int64_t>(groups.size());
#pragma omp parallel for schedule(dynamic)
        for (std::int64_t q = 0; q < n; ++q)
            err.run([&] { terms[static_cast<std::size_t>(q)] = group_term(params, groups[static_cast<std::size_t>(q)], config, true); });
        err.rethrow();
    }
    GrpoGradient out;
    out.gradient = WeightTable(params.vocab_size());
    const double inv_groups = 1.0 / static_cast<double>(groups.size());
    for (const GroupTerm& t : terms) {
        out.gradient.axpy(inv_groups, t.grad);
        out.objective += t.objective * inv_groups;
        out.clipped_tokens += t.clipped;
        out.total_tokens += t.tokens;
        out.degenerate_groups += t.degenerate;
    }
    return out;
}

double grpo_objective(const PolicyParams& params, std::span<const RolloutGroup> groups, const ClipConfig& config) {
    if (groups.empty()) throw ContractViolation("grpo_objective needs at least one group");
    double obj = 0.0;
    for (const RolloutGroup& g : groups) obj += group_term(params, g, config, false).objective;
    return obj / static_cast<double>(groups.size());
}

}  // namespace mel

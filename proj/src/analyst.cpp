#include <sstream>

#include "mel/analyst.hpp"
#include "mel/error.hpp"
#include "mel/rng.hpp"

namespace mel {
namespace {

const char* op_word(Op op) {
    switch (op) {
        case Op::Add: return "addition";
        case Op::Sub: return "subtraction";
        case Op::Mul: return "multiplication";
    }
    return "?";
}

}  // namespace

Bifurcation locate_bifurcation(const Vocabulary& vocab, const Query& query, const Trajectory& negative) {
    (void)vocab;
    const StepOracleReport report = step_oracle(query, negative);
    Bifurcation b;
    if (!report.first_deviation) {
        b.text = "the final answer line";
        return b;
    }
    b.step = report.first_deviation;
    const auto t = static_cast<std::size_t>(*b.step);
    if (t <= negative.steps.size()) {
        std::string body = negative.steps[t - 1].text;
        for (char& c : body)
            if (c == '\n') c = ' ';
        while (!body.empty() && body.back() == ' ') body.pop_back();
        b.text = "step " + std::to_string(t) + " wrote '" + body + "'";
    } else {
        b.text = "step " + std::to_string(t) + " is missing";
    }
    return b;
}

Critique critique_step(const Query& query, const Trajectory& negative, const Bifurcation& b) {
    const std::vector<int> correct = chain_values(query);
    const int m = query.modulus;
    const int len = query.chain_length();
    std::ostringstream s;
    Critique c;

    if (!b.step) {
        bool parsed = false;
        for (const auto& st : negative.steps) parsed = parsed || st.value.has_value();
        if (!parsed || !negative.final_answer) {
            c.kind = ErrorKind::FormatViolation;
            s << "The response never produced a well-formed chain ending in '#### answer'.";
        } else {
            c.kind = ErrorKind::ArithmeticSlip;
            s << "Every step was right but the answer line reported " << *negative.final_answer << " instead of "
              << correct.back() << ".";
        }
        c.text = s.str();
        return c;
    }

    const int t = *b.step;
    const auto idx = static_cast<std::size_t>(t - 1);
    std::optional<int> v;
    if (idx < negative.steps.size()) v = negative.steps[idx].value;
    if (t > len || !v) {
        c.kind = ErrorKind::FormatViolation;
        if (t > len) s << "Step " << t << " goes beyond the " << len << " operations of the chain.";
        else if (idx >= negative.steps.size()) s << "The chain stops before step " << t << ".";
        else s << "Step " << t << " is not of the form 't : value'.";
        c.text = s.str();
        return c;
    }

    const Op op = query.ops[idx];
    const int prev = t == 1 ? query.operands[0] % m : correct[idx - 1];
    const int a = query.operands[idx + 1];
    if (*v >= m) {
        c.kind = ErrorKind::WrongModulus;
        s << "Step " << t << " wrote " << *v << ", which was never reduced modulo " << m << "; the value is "
          << correct[idx] << ".";
    } else {
        std::optional<Op> used;
        for (int o = 0; o < kOpCount; ++o) {
            const auto other = static_cast<Op>(o);
            if (other != op && apply_op(other, prev, a, m) == *v) used = other;
        }
        if (used) {
            c.kind = ErrorKind::WrongOperation;
            s << "Step " << t << " applied " << op_symbol(*used) << " where the chain has " << op_symbol(op) << ": "
              << prev << ' ' << op_symbol(op) << ' ' << a << " mod " << m << " is " << correct[idx] << ", not " << *v
              << ".";
        } else {
            c.kind = ErrorKind::ArithmeticSlip;
            s << "Step " << t << " miscomputed " << prev << ' ' << op_symbol(op) << ' ' << a << " mod " << m << " as "
              << *v << "; it is " << correct[idx] << ".";
        }
    }
    c.text = s.str();
    return c;
}

Heuristic abstract_heuristic(const Query& query, const Critique& c, const Bifurcation& b) {
    Heuristic h;
    const int len = query.chain_length();
    if (b.step && *b.step <= len) h.family = family_of(query.ops[static_cast<std::size_t>(*b.step - 1)]);
    else h.family = HintFamily::Answer;
    h.op = corrective_for(c.kind, h.family);

    const bool answer = h.family == HintFamily::Answer;
    const std::string where =
        answer ? "the answer line" : std::string("a step that applies ") + op_word(static_cast<Op>(h.family));
    switch (c.kind) {
        case ErrorKind::WrongOperation:
            h.text = "On " + where + ", I apply exactly the operator written in the chain to the running value.";
            break;
        case ErrorKind::ArithmeticSlip:
            h.text = answer ? "Before the answer line, I copy the last step value unchanged."
                            : "On " + where + ", I recompute the result before reducing it.";
            break;
        case ErrorKind::WrongModulus:
            h.text = "On " + where + ", I reduce the result modulo the given modulus before writing it.";
            break;
        case ErrorKind::FormatViolation:
            h.text = "I write one 't : value' line per operation, in order, then '#### answer'.";
            break;
    }
    return h;
}

std::vector<TokenId> replay_prompt(const Vocabulary& vocab, const Query& query, std::span<const TokenId> hint) {
    std::vector<TokenId> out;
    out.reserve(query.prompt_tokens.size() + hint.size());
    auto it = query.prompt_tokens.begin();
    if (it != query.prompt_tokens.end() && *it == vocab.bos()) out.push_back(*it++);
    out.insert(out.end(), hint.begin(), hint.end());
    out.insert(out.end(), it, query.prompt_tokens.end());
    return out;
}

MetaExperience ScriptedAnalyst::analyze(const AnalysisContext& ctx) {
    const auto& g = ctx.group;
    const Trajectory& pos = g.trajectories.at(ctx.pair.positive);
    const Trajectory& neg = g.trajectories.at(ctx.pair.negative);

    MetaExperience me;
    const Bifurcation b = locate_bifurcation(*vocab_, ctx.query, neg);
    me.bifurcation_step = b.step;
    me.bifurcation_text = b.text;
    me.critique = critique_step(ctx.query, neg, b);
    me.heuristic = abstract_heuristic(ctx.query, me.critique, b);
    me.provenance = {ctx.query.id, trajectory_id(ctx.step, ctx.query.id, ctx.pair.positive),
                     trajectory_id(ctx.step, ctx.query.id, ctx.pair.negative), name(), ctx.step};
    me.positive_symbols = vocab_->decode(pos.tokens, false);
    me.negative_symbols = vocab_->decode(neg.tokens, false);
    return me;
}

ReplayOutcome ScriptedAnalyst::replay(const MetaExperience& me, const Query& query, const PolicyParams& params,
                                      const ReplayConfig& config) {
    const auto hint = serialize_meta_experience(*vocab_, me, SerializeMode::HintTokens);
    const auto prompt = replay_prompt(*vocab_, query, hint);
    ReplayOutcome out;
    for (int k = 0; k < config.attempts; ++k) {
        DecodingConfig dc{config.temperature, config.max_tokens,
                          stream_seed(config.seed, {tag(Stream::Replay), static_cast<std::uint64_t>(k)})};
        const Trajectory traj = sample(params, prompt, dc);
        ++out.attempts_made;
        if (verify(*vocab_, traj, query.ground_truth).reward == 1) {
            out.status = MeStatus::Validated;
            return out;
        }
    }
    out.status = MeStatus::Rejected;
    out.diagnostics = "replay failed in " + std::to_string(out.attempts_made) + " attempt(s)";
    return out;
}

MeStatus validate_by_replay(Analyst& analyst, MetaExperience& me, const Query& query, const PolicyParams& params,
                            const ReplayConfig& config) {
    if (me.status != MeStatus::Candidate) throw ContractViolation("replay validation needs a candidate");
    if (config.attempts < 1) throw ConfigError("replay attempts must be >= 1");
    const ReplayOutcome r = analyst.replay(me, query, params, config);
    me.status = r.status;
    if (!r.diagnostics.empty()) me.diagnostics = r.diagnostics;
    return me.status;
}

}  // namespace mel

namespace mel {

PipelineStats construct_meta_experiences(Analyst& analyst, MetaExperiencePool& pool,
                                         std::span<const RolloutGroup> groups, std::span<const Query> queries,
                                         const PolicyParams& replay_params, const PipelineConfig& config,
                                         std::uint64_t run_seed, std::uint64_t step, Exec exec) {
    struct Job {
        std::size_t group;
        std::size_t pair_index;
        ContrastivePair pair;
    };
    std::vector<Job> jobs;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const auto seed = stream_seed(run_seed, {tag(Stream::Pairing), step, static_cast<std::uint64_t>(g.query_index)});
        const auto pairs = build_pairs(g, config.pair_cap, seed);
        for (std::size_t p = 0; p < pairs.size(); ++p) jobs.push_back({gi, p, pairs[p]});
    }

    struct Slot {
        std::optional<MetaExperience> me;
        ReplayOutcome replay;
        bool failed = false;
    };
    std::vector<Slot> slots(jobs.size());
    ExceptionSlot err;
#pragma omp parallel for schedule(dynamic) if (exec == Exec::Parallel)
    for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(jobs.size()); ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        err.run([&] {
            const Job& job = jobs[j];
            const RolloutGroup& g = groups[job.group];
            const Query& q = queries[g.query_index];
            Slot& slot = slots[j];
            try {
                slot.me = analyst.analyze({q, g, job.pair, step});
            } catch (const TransportError&) {
                slot.failed = true;
                return;
            }
            if (slot.me->arrival_error) return;
            ReplayConfig rc = config.replay;
            rc.seed = stream_seed(run_seed, {tag(Stream::Replay), step, static_cast<std::uint64_t>(g.query_index),
                                             static_cast<std::uint64_t>(job.pair_index)});
            slot.replay = analyst.replay(*slot.me, q, replay_params, rc);
        });
    }
    err.rethrow();

    PipelineStats stats;
    stats.pairs = jobs.size();
    for (auto& slot : slots) {
        if (slot.failed) {
            ++stats.analyst_failures;
            continue;
        }
        const std::optional<std::string> arrival = slot.me->arrival_error;
        const std::size_t idx = pool.add(std::move(*slot.me));
        ++stats.candidates;
        if (arrival) {
            pool.resolve(idx, MeStatus::Rejected, *arrival);
            ++stats.rejected;
        } else {
            pool.resolve(idx, slot.replay.status, slot.replay.diagnostics);
            if (slot.replay.status == MeStatus::Validated) {
                ++stats.validated;
                stats.validated_indices.push_back(idx);
            } else {
                ++stats.rejected;
            }
        }
    }
    return stats;
}

}  // namespace mel

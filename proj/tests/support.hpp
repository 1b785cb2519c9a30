#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Nothing here calls the softmax, gradient or advantage
// code under test; only the feature extractor (the policy's definition of
// "context") is reused.

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mel/features.hpp"
#include "mel/grpo.hpp"
#include "mel/internalize.hpp"
#include "mel/metaexp.hpp"
#include "mel/policy.hpp"
#include "mel/rng.hpp"
#include "mel/taskenv.hpp"

namespace mel::testing {

using Entry = std::pair<FeatureKey, TokenId>;
using DenseGrad = std::map<Entry, long double>;
using big_float = boost::multiprecision::cpp_dec_float_50;

inline double ln_exact(const big_float& x) { return static_cast<double>(boost::multiprecision::log(x)); }
inline double sqrt_exact(const big_float& x) { return static_cast<double>(boost::multiprecision::sqrt(x)); }

inline std::shared_ptr<const Vocabulary> toy_vocab(int numerals = 10) {
    return std::make_shared<const Vocabulary>(Vocabulary::modchain(numerals));
}

inline std::shared_ptr<const Vocabulary> flat_vocab(int size) {
    std::vector<std::string> s;
    for (int i = 0; i < size; ++i) s.push_back("t" + std::to_string(i));
    return std::make_shared<const Vocabulary>(Vocabulary::custom(std::move(s)));
}

// Active feature keys at every position of `target` scored after `context`.
inline std::vector<std::vector<FeatureKey>> active_keys(const PolicyParams& p, std::span<const TokenId> context,
                                                        std::span<const TokenId> target) {
    ContextState st(*p.vocab);
    st.push(context);
    std::vector<std::vector<FeatureKey>> out;
    for (TokenId t : target) {
        std::vector<FeatureKey> k;
        st.features(p.spec, k);
        out.push_back(std::move(k));
        st.push(t);
    }
    return out;
}

struct PositionDist {
    std::vector<long double> log_p;
    std::vector<FeatureKey> keys;
};

inline std::vector<PositionDist> reference_positions(const PolicyParams& p, std::span<const TokenId> context,
                                                     std::span<const TokenId> target) {
    const auto keys = active_keys(p, context, target);
    std::vector<PositionDist> out;
    const std::size_t V = p.vocab_size();
    for (const auto& ks : keys) {
        std::vector<long double> z(V, 0.0L);
        for (FeatureKey k : ks)
            for (std::size_t a = 0; a < V; ++a) z[a] += p.weights.get(k, static_cast<TokenId>(a));
        long double mx = z[0];
        for (long double v : z) mx = std::max(mx, v);
        long double total = 0.0L;
        for (long double v : z) total += std::exp(v - mx);
        const long double log_z = mx + std::log(total);
        PositionDist d;
        for (long double v : z) d.log_p.push_back(v - log_z);
        d.keys = ks;
        out.push_back(std::move(d));
    }
    return out;
}

inline std::vector<long double> reference_log_probs(const PolicyParams& p, std::span<const TokenId> context,
                                                    std::span<const TokenId> target) {
    const auto pos = reference_positions(p, context, target);
    std::vector<long double> out;
    for (std::size_t t = 0; t < target.size(); ++t) out.push_back(pos[t].log_p[static_cast<std::size_t>(target[t])]);
    return out;
}

// sum_t coeff[t] * (indicator[a == y_t] - p_t(a)) for every active feature.
inline void reference_grad(const PolicyParams& p, std::span<const TokenId> context, std::span<const TokenId> target,
                           std::span<const long double> coeff, DenseGrad& out) {
    const auto pos = reference_positions(p, context, target);
    for (std::size_t t = 0; t < target.size(); ++t) {
        for (FeatureKey k : pos[t].keys) {
            for (std::size_t a = 0; a < p.vocab_size(); ++a) {
                const long double ind = static_cast<TokenId>(a) == target[t] ? 1.0L : 0.0L;
                out[{k, static_cast<TokenId>(a)}] += coeff[t] * (ind - std::exp(pos[t].log_p[a]));
            }
        }
    }
}

inline long double max_abs_gap(const WeightTable& w, const DenseGrad& ref) {
    long double gap = 0.0L;
    for (const auto& [e, v] : ref) gap = std::max(gap, std::fabs(static_cast<long double>(w.get(e.first, e.second)) - v));
    for (const auto& [k, row] : w.data())
        for (std::size_t a = 0; a < row.size(); ++a)
            if (!ref.count({k, static_cast<TokenId>(a)})) gap = std::max(gap, std::fabs(static_cast<long double>(row[a])));
    return gap;
}

inline double symmetric_noise(Rng& rng, double scale) { return (2.0 * rng.uniform() - 1.0) * scale; }

// Adds uniform noise to every row that is active while scoring `target`.
inline void perturb_along(PolicyParams& p, std::span<const TokenId> context, std::span<const TokenId> target, Rng& rng,
                          double scale) {
    for (const auto& ks : active_keys(p, context, target))
        for (FeatureKey k : ks)
            for (std::size_t a = 0; a < p.vocab_size(); ++a)
                p.weights.add(k, static_cast<TokenId>(a), symmetric_noise(rng, scale));
}

// Random direction over the given key set.
inline WeightTable random_direction(const PolicyParams& p, const std::vector<FeatureKey>& keys, Rng& rng) {
    WeightTable d(p.vocab_size());
    for (FeatureKey k : keys)
        for (std::size_t a = 0; a < p.vocab_size(); ++a) d.set(k, static_cast<TokenId>(a), symmetric_noise(rng, 1.0));
    return d;
}

inline Query make_query(const Vocabulary& vocab, std::vector<int> operands, std::vector<Op> ops, int modulus,
                        std::string id = "q") {
    Query q;
    q.id = std::move(id);
    q.family = "modchain";
    q.operands = std::move(operands);
    q.ops = std::move(ops);
    q.modulus = modulus;
    q.ground_truth = chain_values(q).back();
    q.prompt_tokens = render_prompt(vocab, q);
    return q;
}

// Response text such as "1 : 3\n2 : 6\n#### 6 <eos>".
inline Trajectory response(const Vocabulary& vocab, const std::string& text) {
    Trajectory t;
    t.tokens = vocab.encode(text);
    segment_trajectory(vocab, t);
    return t;
}

// Exact chain value from unreduced big-integer arithmetic, reduced once at the end.
inline long long big_int_chain(const Query& q) {
    using boost::multiprecision::cpp_int;
    cpp_int v = q.operands[0];
    for (std::size_t t = 0; t < q.ops.size(); ++t) {
        const cpp_int a = q.operands[t + 1];
        switch (q.ops[t]) {
            case Op::Add: v += a; break;
            case Op::Sub: v -= a; break;
            case Op::Mul: v *= a; break;
        }
    }
    cpp_int r = v % q.modulus;
    if (r < 0) r += q.modulus;
    return static_cast<long long>(r);
}

// Every step right, then the answer; built from the big-integer oracle.
inline std::string correct_response_text(const Query& q) {
    std::string s;
    Query prefix = q;
    for (std::size_t t = 1; t <= q.ops.size(); ++t) {
        prefix.ops.assign(q.ops.begin(), q.ops.begin() + static_cast<std::ptrdiff_t>(t));
        prefix.operands.assign(q.operands.begin(), q.operands.begin() + static_cast<std::ptrdiff_t>(t + 1));
        s += std::to_string(t) + " : " + std::to_string(big_int_chain(prefix)) + "\n";
    }
    return s + "#### " + std::to_string(big_int_chain(q)) + " <eos>";
}

// Standardised advantages from the positive count alone.
inline long double reference_advantage(int reward, int positives, int group) {
    if (positives == 0 || positives == group) return 0.0L;
    const long double k = positives, g = group;
    return reward ? std::sqrt((g - k) / k) : -std::sqrt(k / (g - k));
}

// Plain REINFORCE at theta = theta_old: mean over groups of
// (1/G) sum_i (A_i / |y_i|) sum_t grad log pi(y_it).
inline DenseGrad reinforce_reference(const PolicyParams& p, std::span<const RolloutGroup> groups) {
    DenseGrad out;
    const long double inv_b = 1.0L / static_cast<long double>(groups.size());
    for (const auto& g : groups) {
        int k = 0;
        for (int r : g.rewards) k += r;
        const int G = static_cast<int>(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto& y = g.trajectories[i].tokens;
            if (y.empty()) continue;
            const long double a = reference_advantage(g.rewards[i], k, G);
            if (a == 0.0L) continue;
            const std::vector<long double> c(y.size(), a / static_cast<long double>(y.size()) / G * inv_b);
            reference_grad(p, g.prompt, y, c, out);
        }
    }
    return out;
}

// Constant reward 1 on every meta-experience token, averaged per entry and over entries.
inline DenseGrad constant_reward_reference(const PolicyParams& p, const InternalizationBatch& batch) {
    DenseGrad out;
    const long double inv_n = 1.0L / static_cast<long double>(batch.size());
    for (const auto& e : batch.entries) {
        const std::vector<long double> c(e.target.size(), inv_n / static_cast<long double>(e.target.size()));
        reference_grad(p, e.context.tokens, e.target, c, out);
    }
    return out;
}

inline const std::vector<std::string> kSampleResponses = {"1 : 3\n#### 3 <eos>", "1 : 4\n2 : 1\n#### 1 <eos>",
                                             "1 : 0\n2 : 2\n3 : 2\n#### 2 <eos>", "#### 6 <eos>",
                                             "1 : 5\n2 : 5\n#### 5 <eos>"};

struct RandomInternalizationBatch {
    PolicyParams params;
    InternalizationBatch batch;
};

// Retrospective contexts over generated queries, hint-token targets with random
// content, parameters perturbed on every row the targets touch.
inline RandomInternalizationBatch random_internalization_batch(std::uint64_t seed, const FeatureSpec& spec) {
    const auto v = toy_vocab();
    Rng rng(seed);
    TaskGenConfig c;
    c.count = 4;
    c.seed = seed;
    const auto queries = generate_tasks(*v, c);
    const std::vector<int> moduli = {5, 7};
    RandomInternalizationBatch out{make_base_policy(v, spec, PriorConfig{}, moduli, 4), {}};
    const auto instr = toy_instruction(*v);
    const int n = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < n; ++i) {
        const Query& q = queries[static_cast<std::size_t>(i)];
        const auto pos = v->encode(correct_response_text(q));
        const auto neg = v->encode(kSampleResponses[rng.below(kSampleResponses.size())]);
        MetaExperience me;
        me.critique.kind = static_cast<ErrorKind>(rng.below(4));
        me.heuristic.family = static_cast<HintFamily>(rng.below(4));
        me.heuristic.op = static_cast<CorrectiveOp>(rng.below(6));
        out.batch.entries.push_back({make_retrospective_context(*v, instr, q.prompt_tokens, pos, neg),
                                     serialize_meta_experience(*v, me, SerializeMode::HintTokens)});
    }
    for (const auto& e : out.batch.entries) perturb_along(out.params, e.context.tokens, e.target, rng, 1.0);
    return out;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) {
        path = std::filesystem::temp_directory_path() / ("mel-test-" + name + "-" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str(const std::string& sub = {}) const { return sub.empty() ? path.string() : (path / sub).string(); }
};

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace mel::testing

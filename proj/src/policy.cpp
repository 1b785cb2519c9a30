#include "mel/policy.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mel/error.hpp"
#include "mel/rng.hpp"

namespace mel {

double WeightTable::get(FeatureKey key, TokenId token) const {
    auto it = rows_.find(key);
    return it == rows_.end() ? 0.0 : it->second[static_cast<std::size_t>(token)];
}

std::vector<double>& WeightTable::mutable_row(FeatureKey key) {
    auto [it, inserted] = rows_.try_emplace(key);
    if (inserted) it->second.assign(width_, 0.0);
    return it->second;
}

void WeightTable::set(FeatureKey key, TokenId token, double value) {
    mutable_row(key)[static_cast<std::size_t>(token)] = value;
}

void WeightTable::add(FeatureKey key, TokenId token, double value) {
    if (token == kNoToken) return;
    mutable_row(key)[static_cast<std::size_t>(token)] += value;
}

void WeightTable::axpy(double scale, const WeightTable& other) {
    if (other.width_ != width_ && !other.empty())
        throw ContractViolation("weight tables of different widths");
    for (const auto& [key, row] : other.rows_) {
        auto& mine = mutable_row(key);
        for (std::size_t k = 0; k < width_; ++k) mine[k] += scale * row[k];
    }
}

void WeightTable::scale(double s) {
    for (auto& [key, row] : rows_)
        for (double& x : row) x *= s;
}

std::vector<FeatureKey> WeightTable::sorted_keys() const {
    std::vector<FeatureKey> keys;
    keys.reserve(rows_.size());
    for (const auto& kv : rows_) keys.push_back(kv.first);
    std::sort(keys.begin(), keys.end());
    return keys;
}

double WeightTable::squared_norm() const {
    double s = 0.0;
    for (FeatureKey key : sorted_keys())
        for (double x : rows_.at(key)) s += x * x;
    return s;
}

double WeightTable::norm() const { return std::sqrt(squared_norm()); }

double WeightTable::dot(const WeightTable& other) const {
    double s = 0.0;
    for (FeatureKey key : sorted_keys()) {
        const auto* r = other.row(key);
        if (!r) continue;
        const auto& mine = rows_.at(key);
        for (std::size_t k = 0; k < width_; ++k) s += mine[k] * (*r)[k];
    }
    return s;
}

bool WeightTable::all_finite() const {
    for (const auto& [key, row] : rows_)
        for (double x : row)
            if (!std::isfinite(x)) return false;
    return true;
}

std::size_t WeightTable::nonzeros() const {
    std::size_t n = 0;
    for (const auto& [key, row] : rows_)
        for (double x : row) n += x != 0.0;
    return n;
}

bool WeightTable::operator==(const WeightTable& other) const {
    auto covers = [](const WeightTable& a, const WeightTable& b) {
        for (const auto& [key, row] : a.rows_) {
            const auto* r = b.row(key);
            for (std::size_t k = 0; k < row.size(); ++k) {
                const double theirs = r ? (*r)[k] : 0.0;
                if (row[k] != theirs) return false;
            }
        }
        return true;
    };
    return covers(*this, other) && covers(other, *this);
}

namespace {

struct Scratch {
    std::vector<FeatureKey> keys;
    std::vector<double> logits;
    std::vector<double> probs;
};

void compute_logits(const PolicyParams& p, const ContextState& state, Scratch& s) {
    state.features(p.spec, s.keys);
    s.logits.assign(p.vocab_size(), 0.0);
    for (FeatureKey key : s.keys) {
        if (const auto* row = p.weights.row(key))
            for (std::size_t k = 0; k < s.logits.size(); ++k) s.logits[k] += (*row)[k];
    }
}

// probs = softmax(logits); returns log of the normaliser.
double softmax(const std::vector<double>& logits, std::vector<double>& probs) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    probs.resize(logits.size());
    double total = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        probs[k] = std::exp(logits[k] - mx);
        total += probs[k];
    }
    for (double& q : probs) q /= total;
    return mx + std::log(total);
}

TokenId greedy(const std::vector<double>& logits) {
    // max_element returns the first maximum: ties go to the lowest id.
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenId draw(const std::vector<double>& logits, double temperature, Rng& rng) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    std::vector<double> w(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        w[k] = std::exp((logits[k] - mx) / temperature);
        total += w[k];
    }
    double u = rng.uniform() * total;
    for (std::size_t k = 0; k < w.size(); ++k) {
        u -= w[k];
        if (u < 0.0) return static_cast<TokenId>(k);
    }
    // Rounding fell off the end: take the last token with nonzero weight.
    for (std::size_t k = w.size(); k-- > 0;)
        if (w[k] > 0.0) return static_cast<TokenId>(k);
    return 0;
}

}  // namespace

PolicyParams make_base_policy(std::shared_ptr<const Vocabulary> vocab, const FeatureSpec& spec,
                              const PriorConfig& prior, std::span<const int> moduli, int max_len) {
    PolicyParams p(std::move(vocab), spec);
    write_base_prior(*p.vocab, spec, prior, moduli, max_len, p.weights);
    return p;
}

std::vector<double> token_distribution(const PolicyParams& params, std::span<const TokenId> context) {
    ContextState state(*params.vocab);
    state.push(context);
    Scratch s;
    compute_logits(params, state, s);
    softmax(s.logits, s.probs);
    return s.probs;
}

Trajectory sample(const PolicyParams& params, std::span<const TokenId> prompt, const DecodingConfig& config) {
    if (config.max_tokens < 1) throw ContractViolation("max_tokens must be >= 1");
    if (config.temperature < 0.0) throw ContractViolation("temperature must be >= 0");
    ContextState state(*params.vocab);
    state.push(prompt);
    Rng rng(config.seed);
    Scratch s;
    Trajectory traj;
    const TokenId eos = params.vocab->eos();
    for (int i = 0; i < config.max_tokens; ++i) {
        compute_logits(params, state, s);
        const double log_z = softmax(s.logits, s.probs);
        const TokenId t = config.temperature == 0.0 ? greedy(s.logits) : draw(s.logits, config.temperature, rng);
        traj.tokens.push_back(t);
        traj.token_log_probs.push_back(s.logits[static_cast<std::size_t>(t)] - log_z);
        state.push(t);
        if (t == eos) break;
    }
    segment_trajectory(*params.vocab, traj);
    return traj;
}

std::vector<double> sequence_log_prob(const PolicyParams& params, std::span<const TokenId> context,
                                      std::span<const TokenId> target) {
    ContextState state(*params.vocab);
    state.push(context);
    Scratch s;
    std::vector<double> out;
    out.reserve(target.size());
    for (TokenId t : target) {
        compute_logits(params, state, s);
        const double log_z = softmax(s.logits, s.probs);
        out.push_back(s.logits[static_cast<std::size_t>(t)] - log_z);
        state.push(t);
    }
    return out;
}

std::vector<double> accumulate_log_prob_grad(const PolicyParams& params, std::span<const TokenId> context,
                                             std::span<const TokenId> target, std::span<const double> coeff,
                                             WeightTable& out) {
    if (coeff.size() != target.size()) throw ContractViolation("coefficient/target length mismatch");
    ContextState state(*params.vocab);
    state.push(context);
    Scratch s;
    std::vector<double> log_probs;
    log_probs.reserve(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        const TokenId t = target[i];
        compute_logits(params, state, s);
        const double log_z = softmax(s.logits, s.probs);
        log_probs.push_back(s.logits[static_cast<std::size_t>(t)] - log_z);
        const double c = coeff[i];
        if (c != 0.0) {
            for (FeatureKey key : s.keys) {
                auto& row = out.mutable_row(key);
                for (std::size_t k = 0; k < row.size(); ++k) row[k] -= c * s.probs[k];
                row[static_cast<std::size_t>(t)] += c;
            }
        }
        state.push(t);
    }
    return log_probs;
}

WeightTable log_prob_grad(const PolicyParams& params, std::span<const TokenId> context,
                          std::span<const TokenId> target) {
    WeightTable g(params.vocab_size());
    std::vector<double> ones(target.size(), 1.0);
    accumulate_log_prob_grad(params, context, target, ones, g);
    return g;
}

namespace {

constexpr const char* kParamsMagic = "MELPARAMS";
constexpr int kParamsVersion = 1;

std::string format_double(double x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, p);
}

double parse_double(std::string_view s, std::size_t line) {
    double x = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc() || p != s.data() + s.size()) throw ParseError("bad weight '" + std::string(s) + "'", line);
    return x;
}

}  // namespace

void save_params(std::ostream& out, const PolicyParams& params) {
    out << kParamsMagic << ' ' << kParamsVersion << '\n';
    const Vocabulary& v = *params.vocab;
    if (v.numeral_count() > 0 && v.symbols() == Vocabulary::modchain(v.numeral_count()).symbols())
        out << "vocab modchain " << v.numeral_count() << '\n';
    else
        out << "vocab custom " << nlohmann::json(v.symbols()).dump() << '\n';
    out << "features " << to_string(params.spec) << '\n';
    std::size_t n = 0;
    const auto keys = params.weights.sorted_keys();
    for (FeatureKey key : keys)
        for (double x : *params.weights.row(key)) n += x != 0.0;
    out << "entries " << n << '\n';
    char hex[32];
    for (FeatureKey key : keys) {
        const auto& row = *params.weights.row(key);
        auto [p, ec] = std::to_chars(hex, hex + sizeof hex, key, 16);
        const std::string key_text(hex, p);
        for (std::size_t k = 0; k < row.size(); ++k)
            if (row[k] != 0.0) out << key_text << ' ' << k << ' ' << format_double(row[k]) << '\n';
    }
    out << "end\n";
}

PolicyParams load_params(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> std::string& {
        if (!std::getline(in, line)) throw ParseError("unexpected end of params", lineno + 1);
        ++lineno;
        return line;
    };
    {
        std::istringstream h(next());
        std::string magic;
        int version = 0;
        h >> magic >> version;
        if (magic != kParamsMagic) throw ParseError("not a params file", lineno);
        if (version != kParamsVersion)
            throw ParseError("params format version " + std::to_string(version) + ", this build reads " +
                                 std::to_string(kParamsVersion),
                             lineno);
    }
    std::shared_ptr<const Vocabulary> vocab;
    {
        const std::string& l = next();
        if (l.rfind("vocab modchain ", 0) == 0) {
            vocab = std::make_shared<const Vocabulary>(Vocabulary::modchain(std::stoi(l.substr(15))));
        } else if (l.rfind("vocab custom ", 0) == 0) {
            try {
                vocab = std::make_shared<const Vocabulary>(
                    Vocabulary::custom(nlohmann::json::parse(l.substr(13)).get<std::vector<std::string>>()));
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(e.what(), lineno);
            }
        } else {
            throw ParseError("expected vocab line", lineno);
        }
    }
    FeatureSpec spec;
    {
        const std::string& l = next();
        if (l.rfind("features ", 0) != 0) throw ParseError("expected features line", lineno);
        spec = parse_feature_spec(l.substr(9));
    }
    std::size_t count = 0;
    {
        const std::string& l = next();
        if (l.rfind("entries ", 0) != 0) throw ParseError("expected entries line", lineno);
        count = std::stoull(l.substr(8));
    }
    PolicyParams params(vocab, spec);
    for (std::size_t i = 0; i < count; ++i) {
        const std::string& l = next();
        const auto s1 = l.find(' '), s2 = l.find(' ', s1 + 1);
        if (s1 == std::string::npos || s2 == std::string::npos) throw ParseError("malformed weight entry", lineno);
        FeatureKey key = 0;
        auto [p, ec] = std::from_chars(l.data(), l.data() + s1, key, 16);
        if (ec != std::errc() || p != l.data() + s1) throw ParseError("bad feature key", lineno);
        int tok = -1;
        auto [p2, ec2] = std::from_chars(l.data() + s1 + 1, l.data() + s2, tok);
        if (ec2 != std::errc() || tok < 0 || static_cast<std::size_t>(tok) >= vocab->size())
            throw ParseError("bad token id", lineno);
        const double w = parse_double(std::string_view(l).substr(s2 + 1), lineno);
        if (!std::isfinite(w)) throw ParseError("non-finite weight", lineno);
        params.weights.set(key, tok, w);
    }
    if (next() != "end") throw ParseError("expected end marker", lineno);
    return params;
}

}  // namespace mel

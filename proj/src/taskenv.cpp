#include "mel/taskenv.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mel/error.hpp"
#include "mel/rng.hpp"

namespace mel {

bool is_prime(int n) {
    if (n < 2) return false;
    for (int d = 2; d * d <= n; ++d)
        if (n % d == 0) return false;
    return true;
}

std::int64_t apply_op(Op op, std::int64_t lhs, std::int64_t rhs, int modulus) {
    std::int64_t r = 0;
    switch (op) {
        case Op::Add: r = lhs + rhs; break;
        case Op::Sub: r = lhs - rhs; break;
        case Op::Mul: r = lhs * rhs; break;
    }
    r %= modulus;
    return r < 0 ? r + modulus : r;
}

std::vector<int> chain_values(const Query& q) {
    std::vector<int> values;
    values.reserve(q.ops.size());
    std::int64_t v = q.operands.at(0) % q.modulus;
    for (std::size_t t = 0; t < q.ops.size(); ++t) {
        v = apply_op(q.ops[t], v, q.operands.at(t + 1), q.modulus);
        values.push_back(static_cast<int>(v));
    }
    return values;
}

std::string prompt_text(const Query& q) {
    std::string s = std::to_string(q.operands.at(0));
    for (std::size_t t = 0; t < q.ops.size(); ++t) {
        s += ' ';
        s += op_symbol(q.ops[t]);
        s += ' ';
        s += std::to_string(q.operands.at(t + 1));
    }
    s += " mod " + std::to_string(q.modulus);
    return s;
}

std::vector<TokenId> render_prompt(const Vocabulary& vocab, const Query& q) {
    std::vector<TokenId> out;
    out.push_back(vocab.bos());
    auto num = [&](int v) {
        TokenId t = vocab.numeral(v);
        if (t == kNoToken) throw ConfigError("value " + std::to_string(v) + " has no numeral token");
        return t;
    };
    out.push_back(num(q.operands.at(0)));
    for (std::size_t t = 0; t < q.ops.size(); ++t) {
        out.push_back(vocab.op_token(q.ops[t]));
        out.push_back(num(q.operands.at(t + 1)));
    }
    out.push_back(vocab.mod());
    out.push_back(num(q.modulus));
    out.push_back(vocab.prompt_end());
    return out;
}

int numerals_required(const TaskGenConfig& config) {
    int need = config.difficulty.max_len + 1;
    for (int m : config.moduli) need = std::max(need, m + 1);
    return std::max(need, 10);
}

namespace {

void check_gen_config(const Vocabulary& vocab, const TaskGenConfig& c) {
    if (c.family != "modchain") throw ConfigError("unknown task family '" + c.family + "'");
    if (c.count < 1) throw ConfigError("task count must be >= 1");
    if (c.difficulty.min_len < 1 || c.difficulty.min_len > c.difficulty.max_len)
        throw ConfigError("difficulty range is empty");
    if (c.moduli.empty()) throw ConfigError("modulus set is empty");
    for (int m : c.moduli) {
        if (!is_prime(m) || m > kMaxModulus)
            throw ConfigError("modulus " + std::to_string(m) + " is not a prime <= " + std::to_string(kMaxModulus));
        if (m >= vocab.numeral_count())
            throw ConfigError("modulus " + std::to_string(m) + " exceeds the vocabulary's numerals");
    }
    if (c.difficulty.max_len + 1 > vocab.numeral_count())
        throw ConfigError("chain length exceeds the vocabulary's step numerals");
}

}  // namespace

std::vector<Query> generate_tasks(const Vocabulary& vocab, const TaskGenConfig& config) {
    check_gen_config(vocab, config);
    std::vector<Query> out;
    out.reserve(static_cast<std::size_t>(config.count));
    const int span = config.difficulty.max_len - config.difficulty.min_len + 1;
    for (int i = 0; i < config.count; ++i) {
        Rng rng(stream_seed(config.seed, {tag(Stream::TaskGen), static_cast<std::uint64_t>(i)}));
        Query q;
        q.family = config.family;
        q.id = config.family + "-" + std::to_string(config.seed) + "-" + std::to_string(i);
        const int len = config.difficulty.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
        q.modulus = config.moduli[rng.below(config.moduli.size())];
        q.operands.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(q.modulus))));
        for (int t = 0; t < len; ++t) {
            q.ops.push_back(static_cast<Op>(rng.below(kOpCount)));
            q.operands.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(q.modulus))));
        }
        q.ground_truth = chain_values(q).back();
        q.prompt_tokens = render_prompt(vocab, q);
        out.push_back(std::move(q));
    }
    return out;
}

namespace {

int parse_int(std::string_view s, const char* what) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError(std::string("bad integer for ") + what + ": '" + std::string(s) + "'");
    return v;
}

}  // namespace

TaskGenConfig parse_gen_spec(std::string_view spec) {
    TaskGenConfig c;
    std::size_t pos = 0;
    while (pos <= spec.size()) {
        std::size_t comma = spec.find(',', pos);
        if (comma == std::string_view::npos) comma = spec.size();
        std::string_view item = spec.substr(pos, comma - pos);
        pos = comma + 1;
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string_view::npos) throw ConfigError("expected key=value in --gen, got '" + std::string(item) + "'");
        std::string_view key = item.substr(0, eq), val = item.substr(eq + 1);
        if (key == "family") c.family = std::string(val);
        else if (key == "count") c.count = parse_int(val, "count");
        else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(val, "seed"));
        else if (key == "min_len") c.difficulty.min_len = parse_int(val, "min_len");
        else if (key == "max_len") c.difficulty.max_len = parse_int(val, "max_len");
        else if (key == "moduli") {
            c.moduli.clear();
            std::size_t p = 0;
            while (p <= val.size()) {
                std::size_t colon = val.find(':', p);
                if (colon == std::string_view::npos) colon = val.size();
                if (colon > p) c.moduli.push_back(parse_int(val.substr(p, colon - p), "moduli"));
                p = colon + 1;
            }
        } else {
            throw ConfigError("unknown --gen key '" + std::string(key) + "'");
        }
    }
    return c;
}

void segment_trajectory(const Vocabulary& vocab, Trajectory& traj) {
    traj.steps.clear();
    const auto& toks = traj.tokens;
    std::size_t region_end = toks.size();
    for (std::size_t i = toks.size(); i-- > 0;) {
        if (toks[i] == vocab.answer_marker()) {
            region_end = i;
            break;
        }
    }
    // Without a marker the whole response (minus a trailing <eos>) is steps.
    if (region_end == toks.size() && !toks.empty() && toks.back() == vocab.eos()) region_end = toks.size() - 1;

    std::size_t begin = 0;
    int index = 1;
    auto close_step = [&](std::size_t end_exclusive, std::size_t content_end) {
        StepRecord s;
        s.index = index++;
        s.token_begin = begin;
        s.token_end = end_exclusive;
        std::vector<TokenId> body;
        bool in_hint = false;
        for (std::size_t i = begin; i < content_end; ++i) {
            if (toks[i] == vocab.hint_open()) in_hint = true;
            else if (toks[i] == vocab.hint_close()) in_hint = false;
            else if (!in_hint) body.push_back(toks[i]);
        }
        s.text = vocab.decode(std::span(toks).subspan(begin, content_end - begin));
        if (body.size() == 3 && vocab.numeral_value(body[0]) && body[1] == vocab.colon())
            s.value = vocab.numeral_value(body[2]);
        traj.steps.push_back(std::move(s));
        begin = end_exclusive;
    };
    for (std::size_t i = 0; i < region_end; ++i) {
        if (toks[i] == vocab.newline()) close_step(i + 1, i);
    }
    if (begin < region_end) close_step(region_end, region_end);

    traj.final_answer = extract_answer(vocab.decode(toks));
}

std::optional<std::int64_t> extract_answer(std::string_view text) {
    const std::size_t marker = text.rfind("####");
    if (marker == std::string_view::npos) return std::nullopt;
    std::string_view rest = text.substr(marker + 4);
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
    while (!rest.empty() && is_space(rest.front())) rest.remove_prefix(1);
    while (!rest.empty() && is_space(rest.back())) rest.remove_suffix(1);
    if (rest.empty()) return std::nullopt;
    bool negative = false;
    if (rest.front() == '+' || rest.front() == '-') {
        negative = rest.front() == '-';
        rest.remove_prefix(1);
    }
    if (rest.empty() || !std::all_of(rest.begin(), rest.end(), [](char c) { return c >= '0' && c <= '9'; }))
        return std::nullopt;
    while (rest.size() > 1 && rest.front() == '0') rest.remove_prefix(1);
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
    if (ec != std::errc() || p != rest.data() + rest.size()) return std::nullopt;
    return negative ? -v : v;
}

VerificationResult IntegerVerifier::verify_text(std::string_view text, std::int64_t ground_truth) const {
    auto answer = extract_answer(text);
    if (!answer) return {0, true};
    return {*answer == ground_truth ? 1 : 0, false};
}

VerificationResult verify(const Vocabulary& vocab, const Trajectory& traj, std::int64_t ground_truth,
                          const Verifier& verifier) {
    return verifier.verify_text(vocab.decode(traj.tokens), ground_truth);
}

VerificationResult verify(const Vocabulary& vocab, const Trajectory& traj, std::int64_t ground_truth) {
    static const IntegerVerifier v;
    return verify(vocab, traj, ground_truth, v);
}

StepOracleReport step_oracle(const Query& q, const Trajectory& traj) {
    StepOracleReport r;
    r.correct_values = chain_values(q);
    const std::size_t n = traj.steps.size();
    r.per_step_correct.assign(n, false);
    bool any_parsed = false;
    for (std::size_t t = 0; t < n; ++t) {
        const auto& v = traj.steps[t].value;
        any_parsed = any_parsed || v.has_value();
        r.per_step_correct[t] = t < r.correct_values.size() && v && *v == r.correct_values[t];
    }
    if (!any_parsed) return r;
    for (std::size_t t = 0; t < n; ++t) {
        if (!r.per_step_correct[t]) {
            r.first_deviation = static_cast<int>(t + 1);
            return r;
        }
    }
    // Every present step matches; a truncated chain deviates where it stops.
    if (n < r.correct_values.size()) r.first_deviation = static_cast<int>(n + 1);
    return r;
}

void write_task_file(std::ostream& out, std::span<const Query> queries) {
    for (const Query& q : queries) {
        nlohmann::ordered_json j;
        j["id"] = q.id;
        j["family"] = q.family;
        j["operands"] = q.operands;
        std::vector<std::string> ops;
        for (Op op : q.ops) ops.emplace_back(op_symbol(op));
        j["ops"] = ops;
        j["modulus"] = q.modulus;
        j["ground_truth"] = q.ground_truth;
        j["prompt"] = prompt_text(q);
        out << j.dump() << '\n';
    }
}

std::vector<Query> read_task_file(std::istream& in, const Vocabulary& vocab) {
    std::vector<Query> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Query q;
        try {
            auto j = nlohmann::json::parse(line);
            q.id = j.at("id").get<std::string>();
            q.family = j.at("family").get<std::string>();
            q.operands = j.at("operands").get<std::vector<int>>();
            for (const auto& s : j.at("ops")) {
                auto op = parse_op(s.get<std::string>());
                if (!op) throw ParseError("unknown operator " + s.dump(), lineno);
                q.ops.push_back(*op);
            }
            q.modulus = j.at("modulus").get<int>();
            q.ground_truth = j.at("ground_truth").get<std::int64_t>();
            if (q.family != "modchain") throw ParseError("unknown task family '" + q.family + "'", lineno);
            if (q.ops.empty() || q.operands.size() != q.ops.size() + 1)
                throw ParseError("operands/ops length mismatch", lineno);
            if (!is_prime(q.modulus)) throw ParseError("modulus is not prime", lineno);
            if (chain_values(q).back() != q.ground_truth)
                throw ParseError("ground_truth does not match the chain evaluation", lineno);
            if (j.contains("prompt") && j["prompt"].get<std::string>() != prompt_text(q))
                throw ParseError("prompt text does not match operands/ops", lineno);
            q.prompt_tokens = render_prompt(vocab, q);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), lineno);
        } catch (const ConfigError& e) {
            throw ParseError(e.what(), lineno);
        }
        out.push_back(std::move(q));
    }
    return out;
}

void save_tasks(const std::string& path, std::span<const Query> queries) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write task file " + path);
    write_task_file(f, queries);
}

std::vector<Query> load_tasks(const std::string& path, const Vocabulary& vocab) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read task file " + path);
    return read_task_file(f, vocab);
}

}  // namespace mel

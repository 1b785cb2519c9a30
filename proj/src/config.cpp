#include "mel/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

#include "mel/error.hpp"

namespace mel {
namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

const ConfigKey* find_key(const std::string& name) {
    for (const auto& k : config_schema())
        if (name == k.name) return &k;
    return nullptr;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

bool parse_bool(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "on" || s == "yes") return out = true, true;
    if (s == "false" || s == "0" || s == "off" || s == "no") return out = false, true;
    return false;
}

void check_value(const ConfigKey& k, const std::string& v) {
    bool ok = true;
    switch (k.type) {
        case ValueType::Int: {
            std::int64_t x;
            ok = parse_number(v, x);
            break;
        }
        case ValueType::UInt: {
            std::uint64_t x;
            ok = parse_number(v, x);
            break;
        }
        case ValueType::Real: {
            double x;
            ok = parse_number(v, x);
            break;
        }
        case ValueType::Bool: {
            bool x;
            ok = parse_bool(v, x);
            break;
        }
        case ValueType::String: break;
    }
    if (!ok) throw ConfigError(std::string("bad value for ") + k.name + ": '" + v + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"seed", ValueType::UInt, "0", "run seed; every random stream is derived from it"},
        {"task.file", ValueType::String, "", "training task file (JSONL); empty means generate from task.gen"},
        {"task.gen", ValueType::String, "family=modchain,count=2000,seed=1", "generation spec for training tasks"},
        {"eval.file", ValueType::String, "", "held-out task file (JSONL); empty means generate from eval.gen"},
        {"eval.gen", ValueType::String, "family=modchain,count=500,seed=2", "generation spec for held-out tasks"},
        {"policy.features", ValueType::String, "window=6;ngram=1;phase=1;hint=1", "feature families of the toy policy"},
        {"prior.format", ValueType::Real, "6", "base prior: output format"},
        {"prior.numeral_value", ValueType::Real, "2", "base prior: numerals in value slots"},
        {"prior.arith", ValueType::Real, "3", "base prior: correct value in the arithmetic slot"},
        {"prior.confusion", ValueType::Real, "3.5", "base prior: value of the confused operator (x as +, b - a for a - b)"},
        {"prior.answer_copy", ValueType::Real, "3", "base prior: copy the last value into the answer"},
        {"prior.hint_open", ValueType::Real, "2", "base prior: open a [HINT] block at response start"},
        {"prior.hint_grammar", ValueType::Real, "6", "base prior: well-formed hint blocks"},
        {"prior.careful", ValueType::Real, "4", "base prior: follow a hint for the matching step family"},
        {"train.algorithm", ValueType::String, "mel", "mel | grpo"},
        {"train.group_size", ValueType::Int, "8", "G, rollouts per query"},
        {"train.queries_per_step", ValueType::Int, "32", "queries per training step"},
        {"train.minibatch", ValueType::Int, "32", "queries per parameter update (equal to the step batch by default)"},
        {"train.learning_rate", ValueType::Real, "20", "ascent step size"},
        {"train.clip_epsilon", ValueType::Real, "0.2", "clip range of the importance ratio"},
        {"train.inner_epochs", ValueType::Int, "1", "passes over the step's groups"},
        {"train.kl_coef", ValueType::Real, "0", "KL-to-snapshot penalty weight"},
        {"train.temperature", ValueType::Real, "1", "rollout temperature"},
        {"train.max_tokens", ValueType::Int, "40", "response length cap"},
        {"train.total_steps", ValueType::UInt, "200", "training steps"},
        {"train.checkpoint_interval", ValueType::UInt, "50", "steps between checkpoints"},
        {"train.deterministic", ValueType::Bool, "true", "keep wall-clock out of events.jsonl"},
        {"mel.lambda", ValueType::Real, "1", "weight of the meta-experience term"},
        {"mel.observe", ValueType::Bool, "false", "run the pipeline even when mel.lambda is 0"},
        {"mel.pair_cap", ValueType::Int, "2", "contrastive pairs per query per step"},
        {"mel.replay_attempts", ValueType::Int, "1", "replay attempts per candidate"},
        {"mel.replay_temperature", ValueType::Real, "0", "replay decoding temperature"},
        {"mel.serialize", ValueType::String, "hint-tokens", "hint-tokens | natural-language"},
        {"analyst.backend", ValueType::String, "scripted", "scripted | remote"},
        {"analyst.endpoint", ValueType::String, "", "remote analyst URL, http://host:port/path"},
        {"analyst.token", ValueType::String, "", "bearer token for the remote analyst"},
        {"analyst.timeout_ms", ValueType::Int, "30000", "per-request timeout"},
        {"analyst.retries", ValueType::Int, "2", "extra attempts after a transport failure"},
        {"analyst.max_in_flight", ValueType::Int, "4", "concurrent remote requests"},
        {"analyst.max_tokens", ValueType::Int, "2048", "remote generation length"},
        {"analyst.temperature", ValueType::Real, "1", "remote analysis temperature"},
        {"eval.k", ValueType::Int, "8", "samples per task for Avg@k and Pass@k"},
        {"eval.temperature", ValueType::Real, "0.6", "sampling temperature for Avg@k and Pass@k"},
        {"eval.max_tokens", ValueType::Int, "40", "response length cap at evaluation"},
        {"eval.seed", ValueType::UInt, "0", "evaluation seed"},
    };
    return schema;
}

Config::Config() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
}

void Config::set(const std::string& key, const std::string& value) {
    const ConfigKey* k = find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    check_value(*k, value);
    values_[key] = value;
}

void Config::set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    merge_stream(in, path);
}

void Config::merge_stream(std::istream& in, const std::string& origin) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        try {
            set_override(body);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

const std::string& Config::raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

std::int64_t Config::get_int(const std::string& key) const {
    std::int64_t v = 0;
    if (!parse_number(raw(key), v)) throw ConfigError("not an integer: " + key);
    return v;
}

std::uint64_t Config::get_uint(const std::string& key) const {
    std::uint64_t v = 0;
    if (!parse_number(raw(key), v)) throw ConfigError("not an unsigned integer: " + key);
    return v;
}

double Config::get_real(const std::string& key) const {
    double v = 0;
    if (!parse_number(raw(key), v)) throw ConfigError("not a number: " + key);
    return v;
}

bool Config::get_bool(const std::string& key) const {
    bool v = false;
    if (!parse_bool(raw(key), v)) throw ConfigError("not a boolean: " + key);
    return v;
}

void Config::write_resolved(std::ostream& out) const {
    for (const auto& k : config_schema()) out << k.name << " = " << values_.at(k.name) << '\n';
}

TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    const std::string& algo = c.get_string("train.algorithm");
    if (algo == "mel") t.algorithm = Algorithm::Mel;
    else if (algo == "grpo") t.algorithm = Algorithm::Grpo;
    else throw ConfigError("train.algorithm must be mel or grpo, got '" + algo + "'");
    t.seed = c.get_uint("seed");
    t.group_size = static_cast<int>(c.get_int("train.group_size"));
    t.queries_per_step = static_cast<int>(c.get_int("train.queries_per_step"));
    t.minibatch = static_cast<int>(c.get_int("train.minibatch"));
    t.clip.learning_rate = c.get_real("train.learning_rate");
    t.clip.epsilon = c.get_real("train.clip_epsilon");
    t.clip.inner_epochs = static_cast<int>(c.get_int("train.inner_epochs"));
    t.clip.kl_coef = c.get_real("train.kl_coef");
    t.temperature = c.get_real("train.temperature");
    t.max_tokens = static_cast<int>(c.get_int("train.max_tokens"));
    t.total_steps = c.get_uint("train.total_steps");
    t.checkpoint_interval = c.get_uint("train.checkpoint_interval");
    t.deterministic = c.get_bool("train.deterministic");
    t.lambda_mel = c.get_real("mel.lambda");
    t.observe_pipeline = c.get_bool("mel.observe");
    t.pipeline.pair_cap = static_cast<int>(c.get_int("mel.pair_cap"));
    t.pipeline.replay.attempts = static_cast<int>(c.get_int("mel.replay_attempts"));
    t.pipeline.replay.temperature = c.get_real("mel.replay_temperature");
    t.pipeline.replay.max_tokens = t.max_tokens;
    const std::string& ser = c.get_string("mel.serialize");
    if (ser == "hint-tokens") t.serialize = SerializeMode::HintTokens;
    else if (ser == "natural-language") t.serialize = SerializeMode::NaturalLanguage;
    else throw ConfigError("mel.serialize must be hint-tokens or natural-language, got '" + ser + "'");
    t.analyst_backend = c.get_string("analyst.backend");
    if (t.analyst_backend != "scripted" && t.analyst_backend != "remote")
        throw ConfigError("analyst.backend must be scripted or remote, got '" + t.analyst_backend + "'");
    t.remote.endpoint = c.get_string("analyst.endpoint");
    t.remote.token = c.get_string("analyst.token");
    t.remote.timeout_ms = static_cast<int>(c.get_int("analyst.timeout_ms"));
    t.remote.retries = static_cast<int>(c.get_int("analyst.retries"));
    t.remote.max_in_flight = static_cast<int>(c.get_int("analyst.max_in_flight"));
    t.remote.max_tokens = static_cast<int>(c.get_int("analyst.max_tokens"));
    t.remote.temperature = c.get_real("analyst.temperature");
    try {
        t.features = parse_feature_spec(c.get_string("policy.features"));
    } catch (const ParseError& e) {
        throw ConfigError(std::string("policy.features: ") + e.what());
    }
    t.prior.format = c.get_real("prior.format");
    t.prior.numeral_value = c.get_real("prior.numeral_value");
    t.prior.answer_copy = c.get_real("prior.answer_copy");
    t.prior.arith = c.get_real("prior.arith");
    t.prior.confusion = c.get_real("prior.confusion");
    t.prior.hint_open = c.get_real("prior.hint_open");
    t.prior.hint_grammar = c.get_real("prior.hint_grammar");
    t.prior.careful = c.get_real("prior.careful");

    if (t.group_size < 2) throw ConfigError("train.group_size must be >= 2");
    if (t.queries_per_step < 1) throw ConfigError("train.queries_per_step must be >= 1");
    if (t.minibatch < 1) throw ConfigError("train.minibatch must be >= 1");
    if (t.clip.inner_epochs < 1) throw ConfigError("train.inner_epochs must be >= 1");
    if (!(t.clip.epsilon > 0.0)) throw ConfigError("train.clip_epsilon must be > 0");
    if (!(t.clip.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (t.clip.kl_coef < 0.0) throw ConfigError("train.kl_coef must be >= 0");
    if (t.lambda_mel < 0.0) throw ConfigError("mel.lambda must be >= 0");
    if (t.pipeline.pair_cap < 1) throw ConfigError("mel.pair_cap must be >= 1");
    if (t.pipeline.replay.attempts < 1) throw ConfigError("mel.replay_attempts must be >= 1");
    if (t.temperature < 0.0 || t.pipeline.replay.temperature < 0.0) throw ConfigError("temperatures must be >= 0");
    if (t.max_tokens < 1) throw ConfigError("train.max_tokens must be >= 1");
    if (t.checkpoint_interval < 1) throw ConfigError("train.checkpoint_interval must be >= 1");
    return t;
}

TaskConfig task_config_from(const Config& c) { return {c.get_string("task.file"), c.get_string("task.gen")}; }
TaskConfig heldout_config_from(const Config& c) { return {c.get_string("eval.file"), c.get_string("eval.gen")}; }

EvalConfig eval_config_from(const Config& c) {
    EvalConfig e;
    e.k = static_cast<int>(c.get_int("eval.k"));
    e.temperature_k = c.get_real("eval.temperature");
    e.max_tokens = static_cast<int>(c.get_int("eval.max_tokens"));
    e.seed = c.get_uint("eval.seed");
    if (e.k < 1) throw ConfigError("eval.k must be >= 1");
    if (e.temperature_k < 0.0) throw ConfigError("eval.temperature must be >= 0");
    return e;
}

}  // namespace mel

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mel/analyst.hpp"
#include "mel/features.hpp"
#include "mel/grpo.hpp"
#include "mel/metaexp.hpp"

namespace mel {

enum class ValueType { Int, UInt, Real, Bool, String };

struct ConfigKey {
    const char* name;
    ValueType type;
    const char* default_value;
    const char* doc;
};

// Every key the tools understand, in documentation order.
const std::vector<ConfigKey>& config_schema();

// Flat "key = value" settings. Unknown keys and ill-typed values are
// rejected when set, so a Config always holds a valid value for every key.
class Config {
public:
    Config();  // all defaults

    void set(const std::string& key, const std::string& value);
    // "key=value"
    void set_override(const std::string& assignment);
    // Lines "key = value"; '#' starts a comment; blank lines ignored.
    void merge_file(const std::string& path);
    void merge_stream(std::istream& in, const std::string& origin = "<stream>");

    const std::string& raw(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_uint(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const { return raw(key); }

    // Every key in schema order, one "key = value" line each.
    void write_resolved(std::ostream& out) const;

private:
    std::map<std::string, std::string> values_;
};

enum class Algorithm { Grpo, Mel };

struct TrainConfig {
    Algorithm algorithm = Algorithm::Mel;
    std::uint64_t seed = 0;
    int group_size = 8;
    int queries_per_step = 32;
    int minibatch = 32;
    ClipConfig clip;
    double temperature = 1.0;
    int max_tokens = 40;
    std::uint64_t total_steps = 200;
    std::uint64_t checkpoint_interval = 50;
    double lambda_mel = 1.0;
    bool observe_pipeline = false;
    PipelineConfig pipeline;
    SerializeMode serialize = SerializeMode::HintTokens;
    std::string analyst_backend = "scripted";
    RemoteConfig remote;
    FeatureSpec features;
    PriorConfig prior;
    bool deterministic = true;

    bool mel_term_active() const { return algorithm == Algorithm::Mel && lambda_mel > 0.0; }
    bool pipeline_active() const { return algorithm == Algorithm::Mel && (lambda_mel > 0.0 || observe_pipeline); }
};

struct TaskConfig {
    std::string file;  // task file; empty means generate
    std::string gen;   // generation spec
};

struct EvalConfig {
    int k = 8;
    double temperature_pass1 = 0.0;
    double temperature_k = 0.6;
    int max_tokens = 40;
    std::uint64_t seed = 0;
};

TrainConfig train_config_from(const Config& c);
TaskConfig task_config_from(const Config& c);
EvalConfig eval_config_from(const Config& c);
TaskConfig heldout_config_from(const Config& c);

}  // namespace mel

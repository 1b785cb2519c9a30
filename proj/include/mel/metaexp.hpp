#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mel/features.hpp"
#include "mel/grpo.hpp"
#include "mel/taskenv.hpp"
#include "mel/vocab.hpp"

namespace mel {

enum class ErrorKind : std::uint8_t { WrongOperation, ArithmeticSlip, WrongModulus, FormatViolation };
enum class CorrectiveOp : std::uint8_t { UseAdd, UseSub, UseMul, Reduce, Recheck, Format };
enum class MeStatus : std::uint8_t { Candidate, Validated, Rejected };

const char* to_symbol(ErrorKind k);
const char* to_symbol(HintFamily f);
const char* to_symbol(CorrectiveOp op);
const char* to_string(MeStatus s);
std::optional<ErrorKind> parse_error_kind(std::string_view s);
std::optional<HintFamily> parse_hint_family(std::string_view s);
std::optional<CorrectiveOp> parse_corrective_op(std::string_view s);
std::optional<MeStatus> parse_status(std::string_view s);

HintFamily family_of(Op op);
// Canonical corrective rule for an error kind on a step family.
CorrectiveOp corrective_for(ErrorKind kind, HintFamily family);

struct ContrastivePair {
    std::string query_id;
    std::size_t positive = 0;  // index into the group
    std::size_t negative = 0;
    bool operator==(const ContrastivePair&) const = default;
};

struct Critique {
    ErrorKind kind = ErrorKind::ArithmeticSlip;
    std::string text;
};

struct Heuristic {
    HintFamily family = HintFamily::Answer;
    CorrectiveOp op = CorrectiveOp::Recheck;
    std::string text;
};

struct Provenance {
    std::string query_id;
    std::string positive_id;
    std::string negative_id;
    std::string backend;
    std::uint64_t created_step = 0;
};

// Sections of a remote analyst reply (empty for the scripted backend).
struct AnalystSections {
    std::string failure_path;
    std::string success_factors;
    std::string reflective_summary;
    std::string heuristics;
};

struct MetaExperience {
    std::optional<int> bifurcation_step;  // s*, 1-based; none when the error is in the answer
    std::string bifurcation_text;
    Critique critique;      // C
    Heuristic heuristic;    // H
    Provenance provenance;
    MeStatus status = MeStatus::Candidate;
    std::string diagnostics;
    AnalystSections sections;
    // Raw symbol sequences (control tokens included) of y+ and y-.
    std::string positive_symbols;
    std::string negative_symbols;
    // Set when a remote reply could not be parsed; the entry is rejected on arrival.
    std::optional<std::string> arrival_error;
};

std::string trajectory_id(std::uint64_t step, const std::string& query_id, std::size_t sample);

enum class SerializeMode { HintTokens, NaturalLanguage };

// [HINT] <error-kind> <step-family> <corrective-op> [/HINT], or the critique
// and heuristic text tokenised under `vocab`.
std::vector<TokenId> serialize_meta_experience(const Vocabulary& vocab, const MetaExperience& me, SerializeMode mode);

struct HintContent {
    ErrorKind kind;
    HintFamily family;
    CorrectiveOp op;
    bool operator==(const HintContent&) const = default;
};
std::optional<HintContent> parse_hint_tokens(const Vocabulary& vocab, std::span<const TokenId> tokens);

// Plain-text rendering used as {experience} in the validation prompt.
std::string render_experience_text(const MetaExperience& me);

// Seeded matching of Y+ x Y-. Each round pairs every element of the longer
// side once, cycling the shorter side, so the first min(|Y+|,|Y-|) pairs are
// disjoint on both sides. Empty when either side is empty.
std::vector<ContrastivePair> build_pairs(const RolloutGroup& group, int cap, std::uint64_t seed);

struct PoolCounters {
    std::size_t candidates = 0;
    std::size_t validated = 0;
    std::size_t rejected = 0;
    bool operator==(const PoolCounters&) const = default;
};

class MetaExperiencePool {
public:
    // Adds a candidate; returns its index.
    std::size_t add(MetaExperience me);
    // candidate -> validated | rejected. Any other transition throws.
    void resolve(std::size_t index, MeStatus status, std::string diagnostics = {});

    const std::vector<MetaExperience>& entries() const { return entries_; }
    const MetaExperience& at(std::size_t i) const { return entries_.at(i); }
    std::size_t size() const { return entries_.size(); }
    const PoolCounters& counters() const { return counters_; }
    // validated / max(1, validated + rejected)
    double retention_ratio() const;
    std::vector<std::size_t> with_status(MeStatus s) const;

    void save_jsonl(std::ostream& out) const;
    static MetaExperiencePool load_jsonl(std::istream& in);

private:
    std::vector<MetaExperience> entries_;
    PoolCounters counters_;
};

std::string to_json_line(const MetaExperience& me);
MetaExperience meta_experience_from_json_line(const std::string& line, std::size_t lineno = 0);

}  // namespace mel

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mel/vocab.hpp"

namespace mel {

using FeatureKey = std::uint64_t;

// Which feature families the log-linear policy reads.
struct FeatureSpec {
    int window = 6;     // W: trailing tokens exposed as offset n-grams
    bool ngram = true;  // offset unigrams over the last W tokens + last bigram
    bool phase = true;  // parsed step phase, arithmetic slot, answer slot, hint slots
    bool hint = true;   // presence of completed [HINT] blocks in the episode
    bool operator==(const FeatureSpec&) const = default;
};

std::string to_string(const FeatureSpec& spec);
FeatureSpec parse_feature_spec(const std::string& text);

enum class Phase : std::uint8_t {
    None = 0,    // nothing parsed yet
    Prompt,      // inside the query prompt
    StepStart,   // expecting a step label, [HINT] or ####
    Colon,       // after a step label
    Value,       // after ':' -- the arithmetic slot
    AfterValue,  // expecting the step separator
    Answer,      // after ####
    AfterAnswer, // expecting <eos>
    OffTrack,    // malformed since the last separator
    Done,        // after <eos>
    Hint,        // inside a [HINT] block
};

// Hint step families, matching the fam+/fam-/fam*/fam# symbols.
enum class HintFamily : std::uint8_t { Add = 0, Sub = 1, Mul = 2, Answer = 3 };

// Incremental parser over a token stream. Feeding tokens one by one and
// asking for features at each point is equivalent to recomputing from the
// whole prefix; it exists so sequences score in linear time.
//
// Episode scope starts at <bos>. The response phase resets at "=>" and at
// <sep>, so a meta-experience scored after a retrospective context sees the
// same phase keys as a fresh response would.
class ContextState {
public:
    explicit ContextState(const Vocabulary& vocab);

    void push(TokenId t);
    void push(std::span<const TokenId> ts) {
        for (TokenId t : ts) push(t);
    }

    // Active feature keys for predicting the next token. Keys are unique.
    void features(const FeatureSpec& spec, std::vector<FeatureKey>& out) const;

    Phase phase() const { return in_hint_ ? Phase::Hint : phase_; }
    int steps_done() const { return steps_done_; }
    int chain_length() const { return static_cast<int>(ops_.size()); }
    int modulus() const { return modulus_; }
    int last_value() const { return last_value_; }
    unsigned hint_mask() const { return hint_mask_; }

private:
    void reset_response();
    void push_recent(TokenId t);

    const Vocabulary* vocab_;
    std::array<TokenId, 16> recent_{};  // recent_[0] is the newest token
    int recent_count_ = 0;

    bool in_prompt_ = false;
    bool expect_modulus_ = false;
    std::vector<int> operands_;
    std::vector<Op> ops_;
    int modulus_ = -1;

    Phase phase_ = Phase::None;
    int steps_done_ = 0;
    int last_value_ = -1;
    int segment_value_ = -1;
    bool segment_ok_ = false;
    bool hint_since_reset_ = false;

    bool in_hint_ = false;
    int hint_slot_ = 0;
    TokenId hint_prev_ = kNoToken;
    std::vector<TokenId> hint_content_;
    unsigned hint_mask_ = 0;  // bit per HintFamily seen since <bos>
};

// Strengths of the "base model" prior written into fresh toy parameters: the
// output format, numerals in the value slot, partial arithmetic skill with
// systematic operator confusions (x read as +, a - b computed as b - a),
// copying the last value into the answer, a small chance to open a [HINT]
// block, well-formed hint grammar, and hint-following (a completed hint for a
// step family makes the correct value likely on matching steps).
struct PriorConfig {
    double format = 6.0;
    double numeral_value = 2.0;
    double arith = 3.0;
    double confusion = 3.5;
    double answer_copy = 3.0;
    double hint_open = 2.0;
    double hint_grammar = 6.0;
    double careful = 4.0;
};

class WeightTable;

// Writes the prior for every key reachable by chains over `moduli` up to
// `max_len` operations.
void write_base_prior(const Vocabulary& vocab, const FeatureSpec& spec, const PriorConfig& prior,
                      std::span<const int> moduli, int max_len, WeightTable& weights);

// Human-readable rendering of a key, for debugging and checkpoint inspection.
std::string describe_feature(FeatureKey key);

}  // namespace mel

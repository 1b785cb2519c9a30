#include "mel/features.hpp"

#include <algorithm>
#include <sstream>

#include "mel/error.hpp"
#include "mel/policy.hpp"

namespace mel {

namespace {

enum class Kind : std::uint64_t {
    NGram = 1,
    Bigram = 2,
    PhaseBasic = 3,
    Arith = 4,
    ValueRange = 5,
    AnswerCopy = 6,
    HintGrammar = 7,
    HintSlot = 8,
    HintPresence = 9,
    Careful = 10,
    CarefulAnswer = 11,
};

constexpr int kFieldBits = 14;
constexpr std::uint64_t kFieldMask = (1ULL << kFieldBits) - 1;

// Fields are biased by one so that -1 ("absent") packs as 0.
FeatureKey pack(Kind kind, int a = -1, int b = -1, int c = -1, int d = -1) {
    auto f = [](int v) { return static_cast<std::uint64_t>(v + 1) & kFieldMask; };
    return (static_cast<std::uint64_t>(kind) << 56) | (f(a) << 42) | (f(b) << 28) | (f(c) << 14) | f(d);
}

int field(FeatureKey key, int i) {
    const int shift = 42 - 14 * i;
    return static_cast<int>((key >> shift) & kFieldMask) - 1;
}

constexpr int kMaxStepsKey = 15;
constexpr int kMaxHintSlot = 5;

const char* kFamilySymbols[4] = {"fam+", "fam-", "fam*", "fam#"};

}  // namespace

std::string to_string(const FeatureSpec& spec) {
    std::ostringstream s;
    s << "window=" << spec.window << ";ngram=" << spec.ngram << ";phase=" << spec.phase << ";hint=" << spec.hint;
    return s.str();
}

FeatureSpec parse_feature_spec(const std::string& text) {
    FeatureSpec spec;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ';')) {
        auto eq = item.find('=');
        if (eq == std::string::npos) throw ParseError("bad feature spec item '" + item + "'");
        std::string k = item.substr(0, eq), v = item.substr(eq + 1);
        int n = 0;
        try {
            n = std::stoi(v);
        } catch (const std::exception&) {
            throw ParseError("bad feature spec value '" + item + "'");
        }
        if (k == "window") spec.window = n;
        else if (k == "ngram") spec.ngram = n != 0;
        else if (k == "phase") spec.phase = n != 0;
        else if (k == "hint") spec.hint = n != 0;
        else throw ParseError("unknown feature spec key '" + k + "'");
    }
    if (spec.window < 0 || spec.window > 16) throw ParseError("feature window must be in [0, 16]");
    return spec;
}

ContextState::ContextState(const Vocabulary& vocab) : vocab_(&vocab) { recent_.fill(kNoToken); }

void ContextState::push_recent(TokenId t) {
    for (std::size_t i = recent_.size() - 1; i > 0; --i) recent_[i] = recent_[i - 1];
    recent_[0] = t;
    recent_count_ = std::min<int>(recent_count_ + 1, static_cast<int>(recent_.size()));
}

void ContextState::reset_response() {
    phase_ = Phase::StepStart;
    steps_done_ = 0;
    last_value_ = operands_.empty() ? -1 : operands_.front();
    segment_value_ = -1;
    segment_ok_ = false;
    hint_since_reset_ = false;
}

void ContextState::push(TokenId t) {
    push_recent(t);
    const Vocabulary& v = *vocab_;

    if (t == v.bos()) {
        in_prompt_ = true;
        expect_modulus_ = false;
        operands_.clear();
        ops_.clear();
        modulus_ = -1;
        phase_ = Phase::Prompt;
        steps_done_ = 0;
        last_value_ = -1;
        hint_since_reset_ = false;
        in_hint_ = false;
        hint_mask_ = 0;
        return;
    }

    if (in_hint_) {
        if (t == v.hint_close()) {
            in_hint_ = false;
            if (hint_content_.size() == 3) {
                const std::string& sym = v.symbol(hint_content_[1]);
                for (unsigned f = 0; f < 4; ++f)
                    if (sym == kFamilySymbols[f]) hint_mask_ |= 1u << f;
            }
            if (!in_prompt_) hint_since_reset_ = true;
        } else if (t == v.hint_open()) {
            hint_content_.clear();
            hint_slot_ = 1;
            hint_prev_ = t;
        } else {
            if (hint_content_.size() < 8) hint_content_.push_back(t);
            hint_slot_ = std::min(hint_slot_ + 1, kMaxHintSlot);
            hint_prev_ = t;
        }
        return;
    }
    if (t == v.hint_open()) {
        in_hint_ = true;
        hint_slot_ = 1;
        hint_prev_ = t;
        hint_content_.clear();
        return;
    }

    if (in_prompt_) {
        if (auto num = v.numeral_value(t)) {
            if (expect_modulus_) {
                modulus_ = *num;
                expect_modulus_ = false;
            } else {
                operands_.push_back(*num);
            }
        } else if (auto op = v.token_op(t)) {
            ops_.push_back(*op);
        } else if (t == v.mod()) {
            expect_modulus_ = true;
        } else if (t == v.prompt_end()) {
            in_prompt_ = false;
            reset_response();
        }
        return;
    }
    if (phase_ == Phase::None) return;

    if (t == v.sep()) {
        reset_response();
        return;
    }
    if (t == v.answer_marker()) {
        phase_ = Phase::Answer;
        return;
    }
    if (t == v.newline()) {
        ++steps_done_;
        last_value_ = (segment_ok_ && phase_ == Phase::AfterValue) ? segment_value_ : -1;
        segment_ok_ = false;
        segment_value_ = -1;
        phase_ = Phase::StepStart;
        return;
    }
    if (t == v.eos()) {
        phase_ = Phase::Done;
        return;
    }
    const auto num = v.numeral_value(t);
    switch (phase_) {
        case Phase::StepStart:
            segment_ok_ = num.has_value();
            phase_ = num ? Phase::Colon : Phase::OffTrack;
            break;
        case Phase::Colon:
            phase_ = t == v.colon() ? Phase::Value : Phase::OffTrack;
            break;
        case Phase::Value:
            if (num) {
                segment_value_ = *num;
                phase_ = Phase::AfterValue;
            } else {
                phase_ = Phase::OffTrack;
            }
            break;
        case Phase::Answer:
            phase_ = num ? Phase::AfterAnswer : Phase::OffTrack;
            break;
        default:
            phase_ = Phase::OffTrack;
            break;
    }
    if (phase_ == Phase::OffTrack) segment_ok_ = false;
}

void ContextState::features(const FeatureSpec& spec, std::vector<FeatureKey>& out) const {
    out.clear();
    if (spec.ngram) {
        for (int k = 1; k <= spec.window; ++k) {
            const TokenId tok = k <= recent_count_ ? recent_[static_cast<std::size_t>(k - 1)] : kNoToken;
            out.push_back(pack(Kind::NGram, k, tok));
        }
        if (spec.window >= 2) {
            const TokenId a = recent_count_ >= 1 ? recent_[0] : kNoToken;
            const TokenId b = recent_count_ >= 2 ? recent_[1] : kNoToken;
            out.push_back(pack(Kind::Bigram, a, b));
        }
    }

    const Phase p = phase();
    const int len = chain_length();
    const int step = steps_done_ + 1;
    const bool in_chain = step <= len && step >= 1;
    const int op = in_chain ? static_cast<int>(ops_[static_cast<std::size_t>(step - 1)]) : -1;
    const int operand = in_chain && operands_.size() > static_cast<std::size_t>(step) ? operands_[static_cast<std::size_t>(step)] : -1;

    if (spec.phase) {
        if (p == Phase::Hint) {
            unsigned opmask = 0;
            for (Op o : ops_) opmask |= 1u << static_cast<unsigned>(o);
            out.push_back(pack(Kind::HintGrammar, hint_slot_));
            out.push_back(pack(Kind::HintSlot, hint_slot_, hint_prev_, static_cast<int>(opmask)));
        } else {
            out.push_back(pack(Kind::PhaseBasic, static_cast<int>(p), std::min(steps_done_, kMaxStepsKey), len,
                               hint_since_reset_ ? 1 : 0));
            if (p == Phase::Value) {
                out.push_back(pack(Kind::Arith, last_value_, op, operand, modulus_));
                out.push_back(pack(Kind::ValueRange, modulus_));
            } else if (p == Phase::Answer) {
                out.push_back(pack(Kind::AnswerCopy, last_value_));
            }
        }
    }
    if (spec.hint && hint_mask_ != 0) {
        out.push_back(pack(Kind::HintPresence, static_cast<int>(p), static_cast<int>(hint_mask_)));
        if (p == Phase::Value && op >= 0 && (hint_mask_ & (1u << static_cast<unsigned>(op))))
            out.push_back(pack(Kind::Careful, last_value_, op, operand, modulus_));
        if (p == Phase::Answer && (hint_mask_ & (1u << static_cast<unsigned>(HintFamily::Answer))))
            out.push_back(pack(Kind::CarefulAnswer, last_value_));
    }
}

void write_base_prior(const Vocabulary& vocab, const FeatureSpec& spec, const PriorConfig& prior,
                      std::span<const int> moduli, int max_len, WeightTable& w) {
    const int numerals = vocab.numeral_count();
    int value_span = 10;
    for (int m : moduli) value_span = std::max(value_span, m);
    value_span = std::min(value_span, numerals);

    if (spec.phase) {
        const int max_steps = std::min(max_len + 2, kMaxStepsKey);
        for (int len = 1; len <= max_len; ++len) {
            for (int d = 0; d <= max_steps; ++d) {
                for (int hs = 0; hs <= 1; ++hs) {
                    auto key = [&](Phase ph) { return pack(Kind::PhaseBasic, static_cast<int>(ph), d, len, hs); };
                    if (d < len) w.add(key(Phase::StepStart), vocab.numeral(d + 1), prior.format);
                    else w.add(key(Phase::StepStart), vocab.answer_marker(), prior.format);
                    if (d == 0 && hs == 0) w.add(key(Phase::StepStart), vocab.hint_open(), prior.hint_open);
                    w.add(key(Phase::Colon), vocab.colon(), prior.format);
                    w.add(key(Phase::AfterValue), vocab.newline(), prior.format);
                    w.add(key(Phase::AfterAnswer), vocab.eos(), prior.format);
                    w.add(key(Phase::OffTrack), vocab.newline(), prior.format);
                }
            }
        }
        for (int m : moduli)
            for (int v = 0; v < value_span; ++v) w.add(pack(Kind::ValueRange, m), vocab.numeral(v), prior.numeral_value);
        for (int m : moduli) {
            for (int prev = 0; prev < m; ++prev)
                for (int op = 0; op < kOpCount; ++op)
                    for (int a = 0; a < m; ++a) {
                        const FeatureKey k = pack(Kind::Arith, prev, op, a, m);
                        const auto o = static_cast<Op>(op);
                        w.add(k, vocab.numeral(static_cast<int>(apply_op(o, prev, a, m))), prior.arith);
                        if (o == Op::Mul) w.add(k, vocab.numeral(static_cast<int>(apply_op(Op::Add, prev, a, m))), prior.confusion);
                        if (o == Op::Sub) w.add(k, vocab.numeral(static_cast<int>(apply_op(Op::Sub, a, prev, m))), prior.confusion);
                    }
        }
        for (int last = -1; last < value_span; ++last) {
            const FeatureKey k = pack(Kind::AnswerCopy, last);
            for (int v = 0; v < value_span; ++v) w.add(k, vocab.numeral(v), prior.numeral_value);
            if (last >= 0) w.add(k, vocab.numeral(last), prior.answer_copy);
        }
        auto add_symbols = [&](int slot, std::initializer_list<const char*> syms) {
            for (const char* s : syms)
                if (auto id = vocab.find(s)) w.add(pack(Kind::HintGrammar, slot), *id, prior.hint_grammar);
        };
        add_symbols(1, {"wrong-operation", "arithmetic-slip", "wrong-modulus", "format-violation"});
        add_symbols(2, {"fam+", "fam-", "fam*", "fam#"});
        add_symbols(3, {"use+", "use-", "use*", "reduce", "recheck", "format"});
        add_symbols(4, {"[/HINT]"});
        add_symbols(5, {"[/HINT]"});
    }
    if (spec.hint) {
        for (int m : moduli) {
            for (int prev = 0; prev < m; ++prev)
                for (int op = 0; op < kOpCount; ++op)
                    for (int a = 0; a < m; ++a) {
                        const auto v = apply_op(static_cast<Op>(op), prev, a, m);
                        w.add(pack(Kind::Careful, prev, op, a, m), vocab.numeral(static_cast<int>(v)), prior.careful);
                    }
        }
        for (int last = 0; last < value_span; ++last)
            w.add(pack(Kind::CarefulAnswer, last), vocab.numeral(last), prior.careful);
    }
}

std::string describe_feature(FeatureKey key) {
    static const char* names[] = {"?",          "ngram",     "bigram",  "phase",  "arith",  "vrange",
                                  "answer",     "hgrammar",  "hslot",   "hpres",  "careful", "careful-answer"};
    const auto kind = static_cast<std::size_t>(key >> 56);
    std::ostringstream s;
    s << (kind < std::size(names) ? names[kind] : "?") << '(' << field(key, 0) << ',' << field(key, 1) << ','
      << field(key, 2) << ',' << field(key, 3) << ')';
    return s.str();
}

}  // namespace mel

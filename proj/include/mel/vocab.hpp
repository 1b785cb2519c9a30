#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mel {

using TokenId = std::int32_t;
inline constexpr TokenId kNoToken = -1;

enum class Op : std::uint8_t { Add = 0, Sub = 1, Mul = 2 };
inline constexpr int kOpCount = 3;

const char* op_symbol(Op op);
std::optional<Op> parse_op(std::string_view s);

// Token alphabet. Ids are dense 0..size()-1 and the id<->symbol map is a
// bijection. Structural symbols that a given vocabulary lacks report kNoToken.
class Vocabulary {
public:
    // Numerals "0".."numerals-1", operators, structural markers, hint grammar.
    static Vocabulary modchain(int numerals = 10);
    // Arbitrary symbol list (no structure); used for small synthetic tests.
    static Vocabulary custom(std::vector<std::string> symbols);

    std::size_t size() const { return symbols_.size(); }
    std::optional<TokenId> find(std::string_view symbol) const;
    const std::string& symbol(TokenId id) const { return symbols_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& symbols() const { return symbols_; }

    int numeral_count() const { return numerals_; }
    TokenId numeral(int value) const;  // kNoToken if out of range
    std::optional<int> numeral_value(TokenId id) const {
        if (id >= 0 && id < numerals_) return id;
        return std::nullopt;
    }
    TokenId op_token(Op op) const { return op_[static_cast<int>(op)]; }
    std::optional<Op> token_op(TokenId id) const;

    TokenId bos() const { return bos_; }
    TokenId eos() const { return eos_; }
    TokenId sep() const { return sep_; }
    TokenId newline() const { return newline_; }
    TokenId colon() const { return colon_; }
    TokenId mod() const { return mod_; }
    TokenId prompt_end() const { return prompt_end_; }
    TokenId answer_marker() const { return answer_; }
    TokenId hint_open() const { return hint_open_; }
    TokenId hint_close() const { return hint_close_; }
    TokenId analyze() const { return analyze_; }

    // Symbols never rendered into verifier-facing text.
    bool is_control(TokenId id) const { return id == bos_ || id == eos_ || id == sep_; }

    // Whitespace-separated symbols; a newline character is its own token.
    // Throws SerializationError naming the first unknown symbol.
    std::vector<TokenId> encode(std::string_view text) const;
    // Space-joined symbols; the newline token renders as '\n'. Control
    // tokens are skipped when `skip_control` is set.
    std::string decode(std::span<const TokenId> tokens, bool skip_control = true) const;

private:
    void index();

    std::vector<std::string> symbols_;
    std::unordered_map<std::string, TokenId> ids_;
    int numerals_ = 0;
    TokenId op_[kOpCount] = {kNoToken, kNoToken, kNoToken};
    TokenId bos_ = kNoToken, eos_ = kNoToken, sep_ = kNoToken, newline_ = kNoToken, colon_ = kNoToken,
            mod_ = kNoToken, prompt_end_ = kNoToken, answer_ = kNoToken, hint_open_ = kNoToken,
            hint_close_ = kNoToken, analyze_ = kNoToken;
};

}  // namespace mel

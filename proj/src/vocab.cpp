#include "mel/vocab.hpp"

#include "mel/error.hpp"

namespace mel {

const char* op_symbol(Op op) {
    switch (op) {
        case Op::Add: return "+";
        case Op::Sub: return "-";
        case Op::Mul: return "*";
    }
    return "?";
}

std::optional<Op> parse_op(std::string_view s) {
    if (s == "+") return Op::Add;
    if (s == "-") return Op::Sub;
    if (s == "*") return Op::Mul;
    return std::nullopt;
}

namespace {
constexpr const char* kNewlineSymbol = "\n";
}

Vocabulary Vocabulary::modchain(int numerals) {
    if (numerals < 2) throw ConfigError("modchain vocabulary needs at least 2 numerals");
    Vocabulary v;
    v.numerals_ = numerals;
    for (int i = 0; i < numerals; ++i) v.symbols_.push_back(std::to_string(i));
    for (const char* s : {"+", "-", "*", "mod", "=>", ":", kNewlineSymbol, "####", "[HINT]", "[/HINT]", "<eos>",
                          "<bos>", "<sep>", "[ANALYZE]",
                          // error kinds
                          "wrong-operation", "arithmetic-slip", "wrong-modulus", "format-violation",
                          // step families
                          "fam+", "fam-", "fam*", "fam#",
                          // corrective ops
                          "use+", "use-", "use*", "reduce", "recheck", "format"}) {
        v.symbols_.emplace_back(s);
    }
    v.index();
    return v;
}

Vocabulary Vocabulary::custom(std::vector<std::string> symbols) {
    Vocabulary v;
    v.symbols_ = std::move(symbols);
    v.index();
    return v;
}

void Vocabulary::index() {
    ids_.clear();
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
        const std::string& s = symbols_[i];
        if (s.empty()) throw ConfigError("empty vocabulary symbol at id " + std::to_string(i));
        if (!ids_.emplace(s, static_cast<TokenId>(i)).second) throw ConfigError("duplicate vocabulary symbol '" + s + "'");
    }
    auto get = [&](const char* s) {
        auto it = ids_.find(s);
        return it == ids_.end() ? kNoToken : it->second;
    };
    op_[0] = get("+");
    op_[1] = get("-");
    op_[2] = get("*");
    bos_ = get("<bos>");
    eos_ = get("<eos>");
    sep_ = get("<sep>");
    newline_ = get(kNewlineSymbol);
    colon_ = get(":");
    mod_ = get("mod");
    prompt_end_ = get("=>");
    answer_ = get("####");
    hint_open_ = get("[HINT]");
    hint_close_ = get("[/HINT]");
    analyze_ = get("[ANALYZE]");
}

std::optional<TokenId> Vocabulary::find(std::string_view symbol) const {
    auto it = ids_.find(std::string(symbol));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocabulary::numeral(int value) const {
    return (value >= 0 && value < numerals_) ? static_cast<TokenId>(value) : kNoToken;
}

std::optional<Op> Vocabulary::token_op(TokenId id) const {
    for (int i = 0; i < kOpCount; ++i)
        if (id != kNoToken && op_[i] == id) return static_cast<Op>(i);
    return std::nullopt;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t i = 0;
    auto emit = [&](std::string_view sym) {
        auto id = find(sym);
        if (!id) throw SerializationError("symbol '" + std::string(sym) + "' is not in the vocabulary");
        out.push_back(*id);
    };
    while (i < text.size()) {
        const char c = text[i];
        if (c == '\n') {
            emit(kNewlineSymbol);
            ++i;
        } else if (c == ' ' || c == '\t' || c == '\r') {
            ++i;
        } else {
            std::size_t j = i;
            while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\r' && text[j] != '\n') ++j;
            emit(text.substr(i, j - i));
            i = j;
        }
    }
    return out;
}

std::string Vocabulary::decode(std::span<const TokenId> tokens, bool skip_control) const {
    std::string out;
    bool line_start = true;
    for (TokenId t : tokens) {
        if (skip_control && is_control(t)) continue;
        if (t == newline_) {
            out += '\n';
            line_start = true;
            continue;
        }
        if (!line_start) out += ' ';
        out += symbol(t);
        line_start = false;
    }
    return out;
}

}  // namespace mel

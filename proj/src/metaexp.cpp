#include "mel/metaexp.hpp"

#include <algorithm>
#include <istream>
#include <json.hpp>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mel/error.hpp"
#include "mel/rng.hpp"

namespace mel {
namespace {

constexpr const char* kKindSymbols[] = {"wrong-operation", "arithmetic-slip", "wrong-modulus", "format-violation"};
constexpr const char* kFamilySymbols[] = {"fam+", "fam-", "fam*", "fam#"};
constexpr const char* kCorrectiveSymbols[] = {"use+", "use-", "use*", "reduce", "recheck", "format"};
constexpr const char* kStatusNames[] = {"candidate", "validated", "rejected"};

template <typename E, std::size_t N>
std::optional<E> lookup(const char* const (&table)[N], std::string_view s) {
    for (std::size_t i = 0; i < N; ++i)
        if (s == table[i]) return static_cast<E>(i);
    return std::nullopt;
}

}  // namespace

const char* to_symbol(ErrorKind k) { return kKindSymbols[static_cast<int>(k)]; }
const char* to_symbol(HintFamily f) { return kFamilySymbols[static_cast<int>(f)]; }
const char* to_symbol(CorrectiveOp op) { return kCorrectiveSymbols[static_cast<int>(op)]; }
const char* to_string(MeStatus s) { return kStatusNames[static_cast<int>(s)]; }
std::optional<ErrorKind> parse_error_kind(std::string_view s) { return lookup<ErrorKind>(kKindSymbols, s); }
std::optional<HintFamily> parse_hint_family(std::string_view s) { return lookup<HintFamily>(kFamilySymbols, s); }
std::optional<CorrectiveOp> parse_corrective_op(std::string_view s) {
    return lookup<CorrectiveOp>(kCorrectiveSymbols, s);
}
std::optional<MeStatus> parse_status(std::string_view s) { return lookup<MeStatus>(kStatusNames, s); }

HintFamily family_of(Op op) { return static_cast<HintFamily>(static_cast<int>(op)); }

CorrectiveOp corrective_for(ErrorKind kind, HintFamily family) {
    switch (kind) {
        case ErrorKind::WrongOperation:
            switch (family) {
                case HintFamily::Add: return CorrectiveOp::UseAdd;
                case HintFamily::Sub: return CorrectiveOp::UseSub;
                case HintFamily::Mul: return CorrectiveOp::UseMul;
                case HintFamily::Answer: return CorrectiveOp::Recheck;
            }
            break;
        case ErrorKind::ArithmeticSlip: return CorrectiveOp::Recheck;
        case ErrorKind::WrongModulus: return CorrectiveOp::Reduce;
        case ErrorKind::FormatViolation: return CorrectiveOp::Format;
    }
    return CorrectiveOp::Recheck;
}

std::string trajectory_id(std::uint64_t step, const std::string& query_id, std::size_t sample) {
    return std::to_string(step) + "/" + query_id + "/" + std::to_string(sample);
}

std::vector<TokenId> serialize_meta_experience(const Vocabulary& vocab, const MetaExperience& me,
                                               SerializeMode mode) {
    if (mode == SerializeMode::NaturalLanguage) {
        std::string text = me.critique.text;
        if (!me.heuristic.text.empty()) text += "\n" + me.heuristic.text;
        return vocab.encode(text);
    }
    const std::string syms[] = {"[HINT]", to_symbol(me.critique.kind), to_symbol(me.heuristic.family),
                                to_symbol(me.heuristic.op), "[/HINT]"};
    std::vector<TokenId> out;
    for (const auto& s : syms) {
        auto id = vocab.find(s);
        if (!id) throw SerializationError("symbol not in vocabulary: " + s);
        out.push_back(*id);
    }
    return out;
}

std::optional<HintContent> parse_hint_tokens(const Vocabulary& vocab, std::span<const TokenId> tokens) {
    if (tokens.size() != 5) return std::nullopt;
    if (tokens[0] != vocab.hint_open() || tokens[4] != vocab.hint_close() || tokens[0] == kNoToken) return std::nullopt;
    auto sym = [&](TokenId t) -> std::string_view {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) return {};
        return vocab.symbol(t);
    };
    auto kind = parse_error_kind(sym(tokens[1]));
    auto fam = parse_hint_family(sym(tokens[2]));
    auto op = parse_corrective_op(sym(tokens[3]));
    if (!kind || !fam || !op) return std::nullopt;
    return HintContent{*kind, *fam, *op};
}

std::string render_experience_text(const MetaExperience& me) {
    std::ostringstream s;
    s << "Bifurcation point: ";
    if (me.bifurcation_step) s << "step " << *me.bifurcation_step << ". ";
    s << me.bifurcation_text << "\n";
    s << "Critique (" << to_symbol(me.critique.kind) << "): " << me.critique.text << "\n";
    s << "Heuristics:\n" << me.heuristic.text;
    return s.str();
}

std::vector<ContrastivePair> build_pairs(const RolloutGroup& group, int cap, std::uint64_t seed) {
    std::vector<ContrastivePair> out;
    if (group.positives.empty() || group.negatives.empty() || cap <= 0) return out;
    std::vector<std::size_t> pos = group.positives;
    std::vector<std::size_t> neg = group.negatives;
    Rng rng(seed);
    rng.shuffle(pos);
    rng.shuffle(neg);

    const bool pos_longer = pos.size() >= neg.size();
    const std::vector<std::size_t>& longer = pos_longer ? pos : neg;
    const std::vector<std::size_t>& shorter = pos_longer ? neg : pos;
    const std::size_t a = longer.size(), b = shorter.size();
    const std::size_t total = std::min(static_cast<std::size_t>(cap), a * b);
    out.reserve(total);
    for (std::size_t r = 0; r < b && out.size() < total; ++r) {
        for (std::size_t j = 0; j < a && out.size() < total; ++j) {
            const std::size_t l = longer[j];
            const std::size_t s = shorter[(j + r) % b];
            out.push_back({group.query_id, pos_longer ? l : s, pos_longer ? s : l});
        }
    }
    return out;
}

std::size_t MetaExperiencePool::add(MetaExperience me) {
    if (me.status != MeStatus::Candidate) throw ContractViolation("pool entries must arrive as candidates");
    entries_.push_back(std::move(me));
    ++counters_.candidates;
    return entries_.size() - 1;
}

void MetaExperiencePool::resolve(std::size_t index, MeStatus status, std::string diagnostics) {
    MetaExperience& me = entries_.at(index);
    if (me.status != MeStatus::Candidate || status == MeStatus::Candidate)
        throw ContractViolation(std::string("illegal status transition ") + to_string(me.status) + " -> " +
                                to_string(status));
    me.status = status;
    if (!diagnostics.empty()) me.diagnostics = std::move(diagnostics);
    if (status == MeStatus::Validated) ++counters_.validated;
    else ++counters_.rejected;
}

double MetaExperiencePool::retention_ratio() const {
    const std::size_t resolved = counters_.validated + counters_.rejected;
    return static_cast<double>(counters_.validated) / static_cast<double>(std::max<std::size_t>(1, resolved));
}

std::vector<std::size_t> MetaExperiencePool::with_status(MeStatus s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].status == s) out.push_back(i);
    return out;
}

std::string to_json_line(const MetaExperience& me) {
    nlohmann::ordered_json j;
    j["query_id"] = me.provenance.query_id;
    j["positive_id"] = me.provenance.positive_id;
    j["negative_id"] = me.provenance.negative_id;
    j["backend"] = me.provenance.backend;
    j["created_step"] = me.provenance.created_step;
    j["status"] = to_string(me.status);
    j["bifurcation_step"] = me.bifurcation_step ? nlohmann::ordered_json(*me.bifurcation_step) : nullptr;
    j["bifurcation_text"] = me.bifurcation_text;
    j["error_kind"] = to_symbol(me.critique.kind);
    j["critique"] = me.critique.text;
    j["step_family"] = to_symbol(me.heuristic.family);
    j["corrective_op"] = to_symbol(me.heuristic.op);
    j["heuristic"] = me.heuristic.text;
    j["diagnostics"] = me.diagnostics;
    j["positive"] = me.positive_symbols;
    j["negative"] = me.negative_symbols;
    if (!me.sections.failure_path.empty() || !me.sections.heuristics.empty()) {
        j["sections"] = {{"failure_path", me.sections.failure_path},
                         {"success_factors", me.sections.success_factors},
                         {"reflective_summary", me.sections.reflective_summary},
                         {"heuristics", me.sections.heuristics}};
    }
    return j.dump();
}

MetaExperience meta_experience_from_json_line(const std::string& line, std::size_t lineno) {
    MetaExperience me;
    try {
        const auto j = nlohmann::json::parse(line);
        me.provenance.query_id = j.at("query_id").get<std::string>();
        me.provenance.positive_id = j.at("positive_id").get<std::string>();
        me.provenance.negative_id = j.at("negative_id").get<std::string>();
        me.provenance.backend = j.at("backend").get<std::string>();
        me.provenance.created_step = j.at("created_step").get<std::uint64_t>();
        auto status = parse_status(j.at("status").get<std::string>());
        if (!status) throw ParseError("unknown status", lineno);
        me.status = *status;
        if (!j.at("bifurcation_step").is_null()) me.bifurcation_step = j.at("bifurcation_step").get<int>();
        me.bifurcation_text = j.at("bifurcation_text").get<std::string>();
        auto kind = parse_error_kind(j.at("error_kind").get<std::string>());
        auto fam = parse_hint_family(j.at("step_family").get<std::string>());
        auto op = parse_corrective_op(j.at("corrective_op").get<std::string>());
        if (!kind || !fam || !op) throw ParseError("unknown hint symbol", lineno);
        me.critique = {*kind, j.at("critique").get<std::string>()};
        me.heuristic = {*fam, *op, j.at("heuristic").get<std::string>()};
        me.diagnostics = j.at("diagnostics").get<std::string>();
        me.positive_symbols = j.at("positive").get<std::string>();
        me.negative_symbols = j.at("negative").get<std::string>();
        if (j.contains("sections")) {
            const auto& s = j.at("sections");
            me.sections = {s.at("failure_path").get<std::string>(), s.at("success_factors").get<std::string>(),
                           s.at("reflective_summary").get<std::string>(), s.at("heuristics").get<std::string>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("pool record: ") + e.what(), lineno);
    }
    return me;
}

void MetaExperiencePool::save_jsonl(std::ostream& out) const {
    for (const auto& me : entries_) out << to_json_line(me) << '\n';
}

MetaExperiencePool MetaExperiencePool::load_jsonl(std::istream& in) {
    MetaExperiencePool pool;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        MetaExperience me = meta_experience_from_json_line(line, lineno);
        switch (me.status) {
            case MeStatus::Candidate: ++pool.counters_.candidates; break;
            case MeStatus::Validated: ++pool.counters_.candidates; ++pool.counters_.validated; break;
            case MeStatus::Rejected: ++pool.counters_.candidates; ++pool.counters_.rejected; break;
        }
        pool.entries_.push_back(std::move(me));
    }
    return pool;
}

}  // namespace mel

#pragma once

#include <array>
#include <span>
#include <vector>

#include "mel/exec.hpp"
#include "mel/metaexp.hpp"
#include "mel/policy.hpp"

namespace mel {

// [I, <sep>, x, <sep>, y+, <sep>, y-, <sep>]
struct RetrospectiveContext {
    std::vector<TokenId> tokens;
    std::array<std::size_t, 4> segment_begin{};  // offsets of I, x, y+, y-
    std::array<std::size_t, 4> segment_end{};
};

// The analysis instruction as it exists in the toy vocabulary: the [ANALYZE] marker.
std::vector<TokenId> toy_instruction(const Vocabulary& vocab);

RetrospectiveContext make_retrospective_context(const Vocabulary& vocab, std::span<const TokenId> instruction,
                                                std::span<const TokenId> prompt, std::span<const TokenId> positive,
                                                std::span<const TokenId> negative);

struct InternalizationEntry {
    RetrospectiveContext context;
    std::vector<TokenId> target;  // serialized M*
};

struct InternalizationBatch {
    std::vector<InternalizationEntry> entries;
    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }
};

// One entry per validated pool entry in `indices`, in order. The query is
// looked up by provenance id. Throws ContractViolation for non-validated entries.
InternalizationBatch build_internalization_batch(const Vocabulary& vocab, const MetaExperiencePool& pool,
                                                 std::span<const std::size_t> indices, std::span<const Query> queries,
                                                 std::span<const TokenId> instruction,
                                                 SerializeMode mode = SerializeMode::HintTokens);

// mean over entries of -(1/|M*|) sum_t log pi(M*_t | C_retro, M*_<t)
double nll_loss(const PolicyParams& params, const InternalizationBatch& batch, Exec exec = Exec::Parallel);
double meta_return(const PolicyParams& params, const InternalizationBatch& batch, Exec exec = Exec::Parallel);

struct MetaGradient {
    WeightTable gradient;  // of meta_return
    double meta_return = 0.0;
};
MetaGradient meta_gradient(const PolicyParams& params, const InternalizationBatch& batch, Exec exec = Exec::Parallel);

}  // namespace mel

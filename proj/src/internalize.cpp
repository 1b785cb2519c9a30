#include "mel/internalize.hpp"

#include <algorithm>

#include "mel/error.hpp"

namespace mel {
namespace {

void check_batch(const InternalizationBatch& batch) {
    if (batch.empty()) throw ContractViolation("internalization batch is empty");
    for (const auto& e : batch.entries)
        if (e.target.empty()) throw ContractViolation("internalization target is empty");
}

double entry_mean_log_prob(const PolicyParams& params, const InternalizationEntry& e) {
    const auto lp = sequence_log_prob(params, e.context.tokens, e.target);
    double s = 0.0;
    for (double v : lp) s += v;
    return s / static_cast<double>(lp.size());
}

}  // namespace

std::vector<TokenId> toy_instruction(const Vocabulary& vocab) {
    if (vocab.analyze() == kNoToken) throw SerializationError("symbol not in vocabulary: [ANALYZE]");
    return {vocab.analyze()};
}

RetrospectiveContext make_retrospective_context(const Vocabulary& vocab, std::span<const TokenId> instruction,
                                                std::span<const TokenId> prompt, std::span<const TokenId> positive,
                                                std::span<const TokenId> negative) {
    if (vocab.sep() == kNoToken) throw SerializationError("symbol not in vocabulary: <sep>");
    RetrospectiveContext c;
    const std::span<const TokenId> parts[4] = {instruction, prompt, positive, negative};
    for (std::size_t i = 0; i < 4; ++i) {
        c.segment_begin[i] = c.tokens.size();
        c.tokens.insert(c.tokens.end(), parts[i].begin(), parts[i].end());
        c.segment_end[i] = c.tokens.size();
        c.tokens.push_back(vocab.sep());
    }
    return c;
}

InternalizationBatch build_internalization_batch(const Vocabulary& vocab, const MetaExperiencePool& pool,
                                                 std::span<const std::size_t> indices, std::span<const Query> queries,
                                                 std::span<const TokenId> instruction, SerializeMode mode) {
    InternalizationBatch batch;
    for (std::size_t idx : indices) {
        const MetaExperience& me = pool.at(idx);
        if (me.status != MeStatus::Validated)
            throw ContractViolation("internalization requires validated meta-experiences");
        auto q = std::find_if(queries.begin(), queries.end(),
                              [&](const Query& x) { return x.id == me.provenance.query_id; });
        if (q == queries.end()) throw ContractViolation("unknown query id " + me.provenance.query_id);
        const auto pos = vocab.encode(me.positive_symbols);
        const auto neg = vocab.encode(me.negative_symbols);
        batch.entries.push_back({make_retrospective_context(vocab, instruction, q->prompt_tokens, pos, neg),
                                 serialize_meta_experience(vocab, me, mode)});
    }
    return batch;
}

double nll_loss(const PolicyParams& params, const InternalizationBatch& batch, Exec exec) {
    return -meta_return(params, batch, exec);
}

double meta_return(const PolicyParams& params, const InternalizationBatch& batch, Exec exec) {
    check_batch(batch);
    const auto n = static_cast<std::ptrdiff_t>(batch.size());
    std::vector<double> per(batch.size());
    ExceptionSlot err;
#pragma omp parallel for schedule(dynamic) if (exec == Exec::Parallel)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        err.run([&] { per[static_cast<std::size_t>(i)] = entry_mean_log_prob(params, batch.entries[static_cast<std::size_t>(i)]); });
    err.rethrow();
    double s = 0.0;
    for (double v : per) s += v;
    return s / static_cast<double>(n);
}

MetaGradient meta_gradient(const PolicyParams& params, const InternalizationBatch& batch, Exec exec) {
    check_batch(batch);
    const std::size_t n = batch.size();
    std::vector<WeightTable> tables(n, WeightTable(params.vocab_size()));
    std::vector<double> per(n);
    ExceptionSlot err;
#pragma omp parallel for schedule(dynamic) if (exec == Exec::Parallel)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        err.run([&] {
            const auto& e = batch.entries[i];
            const std::vector<double> coeff(e.target.size(), 1.0 / static_cast<double>(e.target.size()));
            const auto lp = accumulate_log_prob_grad(params, e.context.tokens, e.target, coeff, tables[i]);
            double s = 0.0;
            for (double v : lp) s += v;
            per[i] = s / static_cast<double>(lp.size());
        });
    }
    err.rethrow();
    MetaGradient out{WeightTable(params.vocab_size()), 0.0};
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.gradient.axpy(inv, tables[i]);
        out.meta_return += per[i];
    }
    out.meta_return *= inv;
    return out;
}

}  // namespace mel

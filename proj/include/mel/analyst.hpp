#pragma once

#include <cstdint>
#include <memory>
#include <semaphore>
#include <string>

#include "mel/exec.hpp"
#include "mel/grpo.hpp"
#include "mel/metaexp.hpp"
#include "mel/policy.hpp"

namespace mel {

struct AnalysisContext {
    const Query& query;
    const RolloutGroup& group;
    ContrastivePair pair;
    std::uint64_t step = 0;
};

struct ReplayConfig {
    int attempts = 1;
    double temperature = 0.0;
    int max_tokens = 40;
    std::uint64_t seed = 0;
};

struct ReplayOutcome {
    MeStatus status = MeStatus::Rejected;
    int attempts_made = 0;
    std::string diagnostics;
};

class Analyst {
public:
    virtual ~Analyst() = default;
    virtual std::string name() const = 0;
    // Locates s*, writes the critique and abstracts a heuristic.
    // May throw TransportError (retriable).
    virtual MetaExperience analyze(const AnalysisContext& ctx) = 0;
    // Re-attempts the query with the meta-experience injected.
    virtual ReplayOutcome replay(const MetaExperience& me, const Query& query, const PolicyParams& params,
                                 const ReplayConfig& config) = 0;
};

// Oracle-backed analyst for the toy environment.
class ScriptedAnalyst final : public Analyst {
public:
    explicit ScriptedAnalyst(std::shared_ptr<const Vocabulary> vocab) : vocab_(std::move(vocab)) {}
    std::string name() const override { return "scripted"; }
    MetaExperience analyze(const AnalysisContext& ctx) override;
    ReplayOutcome replay(const MetaExperience& me, const Query& query, const PolicyParams& params,
                         const ReplayConfig& config) override;

private:
    std::shared_ptr<const Vocabulary> vocab_;
};

// The three stages the scripted analyst runs, exposed for testing.
struct Bifurcation {
    std::optional<int> step;
    std::string text;
};
Bifurcation locate_bifurcation(const Vocabulary& vocab, const Query& query, const Trajectory& negative);
Critique critique_step(const Query& query, const Trajectory& negative, const Bifurcation& b);
Heuristic abstract_heuristic(const Query& query, const Critique& c, const Bifurcation& b);

// <bos> [HINT] ... [/HINT] a0 op1 a1 ... mod m =>
std::vector<TokenId> replay_prompt(const Vocabulary& vocab, const Query& query, std::span<const TokenId> hint);

// Checks the candidate precondition, runs the analyst's replay and applies
// the resulting status to `me`.
MeStatus validate_by_replay(Analyst& analyst, MetaExperience& me, const Query& query, const PolicyParams& params,
                            const ReplayConfig& config);

struct PipelineConfig {
    int pair_cap = 2;  // contrastive pairs per query per step
    ReplayConfig replay;
};

struct PipelineStats {
    std::size_t pairs = 0;
    std::size_t candidates = 0;
    std::size_t validated = 0;
    std::size_t rejected = 0;
    std::size_t analyst_failures = 0;  // transport errors; the pair is dropped
    std::vector<std::size_t> validated_indices;  // pool indices added this call
};

// Pairs every non-degenerate group, analyzes and replay-validates each pair
// (concurrently), then records the results in the pool in (group, pair)
// order. `queries[g.query_index]` must be the query of group g.
PipelineStats construct_meta_experiences(Analyst& analyst, MetaExperiencePool& pool,
                                         std::span<const RolloutGroup> groups, std::span<const Query> queries,
                                         const PolicyParams& replay_params, const PipelineConfig& config,
                                         std::uint64_t run_seed, std::uint64_t step, Exec exec = Exec::Parallel);

// ----- remote backend -----------------------------------------------------

struct RemoteConfig {
    std::string endpoint;  // http://host:port/path
    std::string token;
    int timeout_ms = 30000;
    int retries = 2;  // extra attempts after the first
    int max_in_flight = 4;
    int max_tokens = 2048;
    double temperature = 1.0;
};

// POSTs a JSON body and returns the response body. Throws TransportError.
class Transport {
public:
    virtual ~Transport() = default;
    virtual std::string post(const std::string& json_body) = 0;
};

std::unique_ptr<Transport> make_http_transport(const RemoteConfig& config);

// Appendix templates with placeholders substituted in one pass.
std::string fill_meta_experience_prompt(const std::string& question, const std::string& error_ans,
                                        const std::string& correct_ans);
std::string fill_validation_prompt(const std::string& experience, const std::string& question);
const char* meta_experience_template();
const char* validation_template();

std::string question_text(const Query& query);

// Splits a reply on the four mandatory headings. Throws AnalysisParseError.
AnalystSections parse_analyst_reply(const std::string& text);

class RemoteAnalyst final : public Analyst {
public:
    RemoteAnalyst(std::shared_ptr<const Vocabulary> vocab, RemoteConfig config,
                  std::unique_ptr<Transport> transport = nullptr);
    std::string name() const override { return "remote"; }
    MetaExperience analyze(const AnalysisContext& ctx) override;
    ReplayOutcome replay(const MetaExperience& me, const Query& query, const PolicyParams& params,
                         const ReplayConfig& config) override;

    // One request with retries: returns the "text" field of the reply.
    std::string complete(const std::string& prompt, int max_tokens, double temperature);

private:
    std::shared_ptr<const Vocabulary> vocab_;
    RemoteConfig config_;
    std::unique_ptr<Transport> transport_;
    std::counting_semaphore<1024> in_flight_;
};

}  // namespace mel

#include <gtest/gtest.h>
#include <omp.h>

#include "mel/eval.hpp"
#include "mel/trainer.hpp"
#include "support.hpp"

using namespace mel;
using namespace mel::testing;

namespace {

// The sandbox may have one core; force a real team so the parallel path runs.
class Parallel : public ::testing::Test {
protected:
    void SetUp() override {
        saved_ = omp_get_max_threads();
        omp_set_num_threads(4);
    }
    void TearDown() override { omp_set_num_threads(saved_); }

    std::shared_ptr<const Vocabulary> v = toy_vocab();
    std::vector<Query> queries = [this] {
        TaskGenConfig c;
        c.count = 16;
        c.seed = 8;
        return generate_tasks(*v, c);
    }();
    PolicyParams params = make_base_policy(v, FeatureSpec{}, PriorConfig{}, std::vector<int>{5, 7}, 4);

private:
    int saved_ = 1;
};

bool same_groups(const std::vector<RolloutGroup>& a, const std::vector<RolloutGroup>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].rewards != b[i].rewards || a[i].size() != b[i].size()) return false;
        for (std::size_t j = 0; j < a[i].size(); ++j) {
            if (a[i].trajectories[j].tokens != b[i].trajectories[j].tokens) return false;
            if (a[i].trajectories[j].token_log_probs != b[i].trajectories[j].token_log_probs) return false;
        }
    }
    return true;
}

}  // namespace

TEST_F(Parallel, Rollouts) {
    const PolicySnapshot snap(params);
    const auto s = rollout_groups(snap, queries, 8, {1.0, 40, 0}, 4, 2, Exec::Serial);
    const auto p = rollout_groups(snap, queries, 8, {1.0, 40, 0}, 4, 2, Exec::Parallel);
    EXPECT_TRUE(same_groups(s, p));
}

TEST_F(Parallel, GrpoGradient) {
    const auto groups = rollout_groups(PolicySnapshot(params), queries, 8, {1.0, 40, 0}, 4, 2, Exec::Serial);
    PolicyParams moved = params;
    Rng rng(1);
    for (const auto& g : groups)
        for (const auto& t : g.trajectories) perturb_along(moved, g.prompt, t.tokens, rng, 0.05);
    const auto s = grpo_gradient(moved, groups, ClipConfig{}, Exec::Serial);
    const auto p = grpo_gradient(moved, groups, ClipConfig{}, Exec::Parallel);
    EXPECT_TRUE(s.gradient == p.gradient);
    EXPECT_EQ(s.objective, p.objective);
    EXPECT_EQ(s.clipped_tokens, p.clipped_tokens);
}

TEST_F(Parallel, PipelineAndMetaGradient) {
    const auto groups = rollout_groups(PolicySnapshot(params), queries, 8, {1.0, 40, 0}, 4, 2, Exec::Serial);
    ScriptedAnalyst analyst(v);
    MetaExperiencePool ps, pp;
    const auto ss = construct_meta_experiences(analyst, ps, groups, queries, params, {}, 4, 2, Exec::Serial);
    const auto sp = construct_meta_experiences(analyst, pp, groups, queries, params, {}, 4, 2, Exec::Parallel);
    EXPECT_EQ(ss.validated_indices, sp.validated_indices);
    std::ostringstream a, b;
    ps.save_jsonl(a);
    pp.save_jsonl(b);
    EXPECT_EQ(a.str(), b.str());
    ASSERT_FALSE(ss.validated_indices.empty());
    const auto batch = build_internalization_batch(*v, ps, ss.validated_indices, queries, toy_instruction(*v));
    const auto gs = meta_gradient(params, batch, Exec::Serial);
    const auto gp = meta_gradient(params, batch, Exec::Parallel);
    EXPECT_TRUE(gs.gradient == gp.gradient);
    EXPECT_EQ(gs.meta_return, gp.meta_return);
}

TEST_F(Parallel, Evaluate) {
    EvalConfig c;
    c.k = 4;
    const auto s = evaluate(params, queries, c, Exec::Serial);
    const auto p = evaluate(params, queries, c, Exec::Parallel);
    EXPECT_EQ(s.greedy, p.greedy);
    EXPECT_EQ(s.rewards, p.rewards);
}

TEST_F(Parallel, TrainingSteps) {
    TrainConfig cfg;
    cfg.group_size = 4;
    cfg.queries_per_step = 8;
    cfg.minibatch = 8;
    const TaskSource tasks(queries);
    TrainState a = initial_state(cfg, tasks), b = initial_state(cfg, tasks);
    ScriptedAnalyst analyst(a.params.vocab);
    for (int s = 0; s < 3; ++s) {
        const auto ea = train_step(a, cfg, tasks, &analyst, Exec::Serial);
        const auto eb = train_step(b, cfg, tasks, &analyst, Exec::Parallel);
        EXPECT_EQ(to_json_line(ea), to_json_line(eb));
    }
    EXPECT_TRUE(a.params.weights == b.params.weights);
}

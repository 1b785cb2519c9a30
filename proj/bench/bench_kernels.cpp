// Serial reference vs OpenMP path for the hot kernels. Run with
// OMP_NUM_THREADS set to the number of cores you want to compare against.

#include <benchmark/benchmark.h>

#include "mel/analyst.hpp"
#include "mel/eval.hpp"
#include "mel/grpo.hpp"
#include "mel/internalize.hpp"
#include "mel/trainer.hpp"

using namespace mel;

namespace {

struct Workload {
    std::shared_ptr<const Vocabulary> vocab;
    std::vector<Query> queries;
    PolicyParams params;
    std::vector<RolloutGroup> groups;
    InternalizationBatch batch;

    Workload() {
        TaskGenConfig gen;
        gen.count = 32;
        gen.seed = 1;
        vocab = std::make_shared<const Vocabulary>(Vocabulary::modchain(numerals_required(gen)));
        queries = generate_tasks(*vocab, gen);
        params = make_base_policy(vocab, FeatureSpec{}, PriorConfig{}, std::vector<int>{5, 7}, 4);
        groups = rollout_groups(PolicySnapshot(params), queries, 8, {1.0, 40, 0}, 1, 1, Exec::Serial);
        ScriptedAnalyst analyst(vocab);
        MetaExperiencePool pool;
        const auto stats = construct_meta_experiences(analyst, pool, groups, queries, params, {}, 1, 1, Exec::Serial);
        batch = build_internalization_batch(*vocab, pool, stats.validated_indices, queries, toy_instruction(*vocab));
    }
};

const Workload& workload() {
    static const Workload w;
    return w;
}

Exec mode(const benchmark::State& s) { return s.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

void BM_Rollouts(benchmark::State& state) {
    const auto& w = workload();
    const PolicySnapshot snap(w.params);
    for (auto _ : state)
        benchmark::DoNotOptimize(rollout_groups(snap, w.queries, 8, {1.0, 40, 0}, 1, 1, mode(state)));
}

void BM_GrpoGradient(benchmark::State& state) {
    const auto& w = workload();
    for (auto _ : state) benchmark::DoNotOptimize(grpo_gradient(w.params, w.groups, ClipConfig{}, mode(state)));
}

void BM_MetaGradient(benchmark::State& state) {
    const auto& w = workload();
    for (auto _ : state) benchmark::DoNotOptimize(meta_gradient(w.params, w.batch, mode(state)));
}

void BM_Evaluate(benchmark::State& state) {
    const auto& w = workload();
    EvalConfig c;
    c.k = 4;
    for (auto _ : state) benchmark::DoNotOptimize(evaluate(w.params, w.queries, c, mode(state)));
}

}  // namespace

// Argument 0 is the serial reference, 1 the parallel kernel.
BENCHMARK(BM_Rollouts)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GrpoGradient)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MetaGradient)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Evaluate)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

#include "mel/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "mel/error.hpp"
#include "mel/export.hpp"
#include "mel/rng.hpp"

namespace mel {
namespace fs = std::filesystem;

TaskSource::TaskSource(std::vector<Query> tasks) : tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw ConfigError("task set is empty");
}

std::vector<std::size_t> TaskSource::epoch_order(std::uint64_t seed, std::uint64_t epoch) const {
    std::vector<std::size_t> order(tasks_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(stream_seed(seed, {tag(Stream::TaskOrder), epoch}));
    rng.shuffle(order);
    return order;
}

std::vector<Query> TaskSource::batch(std::uint64_t seed, std::uint64_t step, int count) const {
    if (step < 1 || count < 1) throw ContractViolation("batch needs step >= 1 and count >= 1");
    const std::uint64_t n = tasks_.size();
    std::uint64_t pos = (step - 1) * static_cast<std::uint64_t>(count);
    std::vector<Query> out;
    out.reserve(static_cast<std::size_t>(count));
    std::uint64_t cached_epoch = ~std::uint64_t{0};
    std::vector<std::size_t> order;
    for (int i = 0; i < count; ++i, ++pos) {
        const std::uint64_t epoch = pos / n;
        if (epoch != cached_epoch) {
            order = epoch_order(seed, epoch);
            cached_epoch = epoch;
        }
        out.push_back(tasks_[order[pos % n]]);
    }
    return out;
}

int numerals_for(std::span<const Query> queries) {
    int need = 10;
    for (const auto& q : queries) {
        need = std::max(need, q.modulus + 1);
        need = std::max(need, q.chain_length() + 1);
        for (int a : q.operands) need = std::max(need, a + 1);
    }
    return need;
}

void rerender_prompts(std::vector<Query>& queries, const Vocabulary& vocab) {
    for (auto& q : queries) q.prompt_tokens = render_prompt(vocab, q);
}

std::string to_json_line(const EventRecord& e) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["mean_reward"] = e.mean_reward;
    j["degenerate_fraction"] = e.degenerate_fraction;
    j["pairs"] = e.pairs;
    j["candidates"] = e.candidates;
    j["validated"] = e.validated;
    j["rejected"] = e.rejected;
    j["analyst_failures"] = e.analyst_failures;
    j["retention_ratio"] = e.retention_ratio;
    j["mel_batch"] = e.mel_batch;
    j["mel_skipped"] = e.mel_skipped;
    j["nll_loss"] = e.nll_loss ? nlohmann::ordered_json(*e.nll_loss) : nullptr;
    j["meta_return"] = e.meta_return ? nlohmann::ordered_json(*e.meta_return) : nullptr;
    j["surrogate"] = e.surrogate;
    j["grad_norm_grpo"] = e.grad_norm_grpo;
    j["grad_norm_mel"] = e.grad_norm_mel;
    j["grad_norm_joint"] = e.grad_norm_joint;
    j["clipped_tokens"] = e.clipped_tokens;
    j["total_tokens"] = e.total_tokens;
    if (e.wall_ms) j["wall_ms"] = *e.wall_ms;
    return j.dump();
}

EventRecord event_from_json_line(const std::string& line, std::size_t lineno) {
    EventRecord e;
    try {
        const auto j = nlohmann::json::parse(line);
        e.step = j.at("step").get<std::uint64_t>();
        e.mean_reward = j.at("mean_reward").get<double>();
        e.degenerate_fraction = j.at("degenerate_fraction").get<double>();
        e.pairs = j.at("pairs").get<std::size_t>();
        e.candidates = j.at("candidates").get<std::size_t>();
        e.validated = j.at("validated").get<std::size_t>();
        e.rejected = j.at("rejected").get<std::size_t>();
        e.analyst_failures = j.at("analyst_failures").get<std::size_t>();
        e.retention_ratio = j.at("retention_ratio").get<double>();
        e.mel_batch = j.at("mel_batch").get<std::size_t>();
        e.mel_skipped = j.at("mel_skipped").get<bool>();
        if (!j.at("nll_loss").is_null()) e.nll_loss = j.at("nll_loss").get<double>();
        if (!j.at("meta_return").is_null()) e.meta_return = j.at("meta_return").get<double>();
        e.surrogate = j.at("surrogate").get<double>();
        e.grad_norm_grpo = j.at("grad_norm_grpo").get<double>();
        e.grad_norm_mel = j.at("grad_norm_mel").get<double>();
        e.grad_norm_joint = j.at("grad_norm_joint").get<double>();
        e.clipped_tokens = j.at("clipped_tokens").get<std::size_t>();
        e.total_tokens = j.at("total_tokens").get<std::size_t>();
        if (j.contains("wall_ms")) e.wall_ms = j.at("wall_ms").get<double>();
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("event record: ") + ex.what(), lineno);
    }
    return e;
}

std::vector<EventRecord> read_events(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<EventRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        out.push_back(event_from_json_line(line, lineno));
        if (out.size() > 1 && out.back().step <= out[out.size() - 2].step)
            throw ParseError("event steps are not increasing", lineno);
    }
    return out;
}

StepGradients joint_gradient(const PolicyParams& params, std::span<const RolloutGroup> groups,
                             const InternalizationBatch* batch, double lambda_mel, const ClipConfig& clip,
                             Exec exec) {
    StepGradients g{grpo_gradient(params, groups, clip, exec), std::nullopt, WeightTable(params.vocab_size())};
    g.joint = g.grpo.gradient;
    if (batch && !batch->empty() && lambda_mel > 0.0) {
        g.mel = meta_gradient(params, *batch, exec);
        g.joint.axpy(lambda_mel, g.mel->gradient);
    }
    return g;
}

std::unique_ptr<Analyst> make_analyst(const TrainConfig& config, std::shared_ptr<const Vocabulary> vocab) {
    if (config.analyst_backend == "remote") {
        if (config.remote.endpoint.empty()) throw ConfigError("analyst.backend=remote needs analyst.endpoint");
        return std::make_unique<RemoteAnalyst>(std::move(vocab), config.remote);
    }
    return std::make_unique<ScriptedAnalyst>(std::move(vocab));
}

TrainState initial_state(const TrainConfig& config, const TaskSource& tasks) {
    std::set<int> moduli;
    int max_len = 1;
    for (const auto& q : tasks.tasks()) {
        moduli.insert(q.modulus);
        max_len = std::max(max_len, q.chain_length());
    }
    const std::vector<int> mods(moduli.begin(), moduli.end());
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary::modchain(numerals_for(tasks.tasks())));
    TrainState s;
    s.seed = config.seed;
    s.params = make_base_policy(vocab, config.features, config.prior, mods, max_len);
    return s;
}

EventRecord train_step(TrainState& state, const TrainConfig& config, const TaskSource& tasks, Analyst* analyst,
                       Exec exec, StepTrace* trace) {
    const std::uint64_t step = state.step + 1;
    const Vocabulary& vocab = *state.params.vocab;
    state.snapshot.emplace(state.params);
    const PolicySnapshot& snapshot = *state.snapshot;

    std::vector<Query> queries = tasks.batch(state.seed, step, config.queries_per_step);
    rerender_prompts(queries, vocab);
    const DecodingConfig dc{config.temperature, config.max_tokens, 0};
    std::vector<RolloutGroup> groups =
        rollout_groups(snapshot, queries, config.group_size, dc, state.seed, step, exec);

    EventRecord ev;
    ev.step = step;
    std::size_t reward_sum = 0, reward_count = 0, degenerate = 0;
    for (const auto& g : groups) {
        for (int r : g.rewards) reward_sum += static_cast<std::size_t>(r);
        reward_count += g.rewards.size();
        degenerate += g.degenerate() ? 1 : 0;
    }
    ev.mean_reward = static_cast<double>(reward_sum) / static_cast<double>(reward_count);
    ev.degenerate_fraction = static_cast<double>(degenerate) / static_cast<double>(groups.size());

    InternalizationBatch batch;
    if (config.pipeline_active()) {
        if (!analyst) throw ContractViolation("the meta-experience pipeline needs an analyst");
        const PipelineStats ps = construct_meta_experiences(*analyst, state.pool, groups, queries, snapshot.params(),
                                                            config.pipeline, state.seed, step, exec);
        ev.pairs = ps.pairs;
        ev.candidates = ps.candidates;
        ev.validated = ps.validated;
        ev.rejected = ps.rejected;
        ev.analyst_failures = ps.analyst_failures;
        if (config.mel_term_active() && !ps.validated_indices.empty())
            batch = build_internalization_batch(vocab, state.pool, ps.validated_indices, queries,
                                                toy_instruction(vocab), config.serialize);
    }
    ev.retention_ratio = state.pool.retention_ratio();
    ev.mel_batch = batch.size();
    ev.mel_skipped = batch.empty();

    const std::size_t mb = static_cast<std::size_t>(config.minibatch);
    bool first = true;
    for (int epoch = 0; epoch < config.clip.inner_epochs; ++epoch) {
        for (std::size_t begin = 0; begin < groups.size(); begin += mb) {
            const std::size_t end = std::min(groups.size(), begin + mb);
            const std::span<const RolloutGroup> part(groups.data() + begin, end - begin);
            StepGradients g = joint_gradient(state.params, part, &batch, config.lambda_mel, config.clip, exec);
            if (first) {
                ev.surrogate = g.grpo.objective;
                ev.grad_norm_grpo = g.grpo.gradient.norm();
                ev.grad_norm_joint = g.joint.norm();
                if (g.mel) {
                    ev.grad_norm_mel = g.mel->gradient.norm();
                    ev.meta_return = g.mel->meta_return;
                    ev.nll_loss = -g.mel->meta_return;
                }
                first = false;
            }
            ev.clipped_tokens += g.grpo.clipped_tokens;
            ev.total_tokens += g.grpo.total_tokens;
            state.params.weights.axpy(config.clip.learning_rate, g.joint);
            if (trace) trace->updates.push_back(std::move(g));
        }
    }
    if (!state.params.weights.all_finite()) throw ContractViolation("parameters became non-finite at step " + std::to_string(step));
    state.step = step;
    if (trace) {
        trace->queries = std::move(queries);
        trace->groups = std::move(groups);
        trace->batch = std::move(batch);
    }
    return ev;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, path);
}

}  // namespace

TrainState run(const TrainConfig& config, const Config& resolved, const TaskSource& tasks, const std::string& run_dir,
               const RunOptions& options) {
    const fs::path dir(run_dir);
    fs::create_directories(dir / "checkpoints");
    {
        std::ostringstream cfg;
        resolved.write_resolved(cfg);
        write_text(dir / "config.resolved", cfg.str());
    }

    TrainState state;
    std::vector<std::string> kept_events;
    const fs::path events_path = dir / "events.jsonl";
    const auto latest = options.resume ? latest_checkpoint(run_dir) : std::nullopt;
    if (latest) {
        state = load_checkpoint(checkpoint_path(run_dir, *latest));
        if (state.seed != config.seed) throw ConfigError("resume: checkpoint seed differs from the configured seed");
        std::ifstream in(events_path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            if (event_from_json_line(line, lineno).step <= state.step) kept_events.push_back(line);
        }
    } else {
        for (const auto& entry : fs::directory_iterator(dir / "checkpoints")) fs::remove(entry.path());
        fs::remove(dir / "timing.jsonl");
        state = initial_state(config, tasks);
    }
    {
        std::ofstream out(events_path, std::ios::binary | std::ios::trunc);
        for (const auto& l : kept_events) out << l << '\n';
    }

    std::unique_ptr<Analyst> owned;
    Analyst* analyst = options.analyst;
    if (!analyst && config.pipeline_active()) {
        owned = make_analyst(config, state.params.vocab);
        analyst = owned.get();
    }

    std::ofstream events(events_path, std::ios::binary | std::ios::app);
    std::ofstream timing;
    if (config.deterministic) timing.open(dir / "timing.jsonl", std::ios::app);

    const std::uint64_t last = options.stop_after ? std::min(config.total_steps, *options.stop_after) : config.total_steps;
    auto write_pool = [&] {
        std::ostringstream pool;
        state.pool.save_jsonl(pool);
        write_text(dir / "pool.jsonl", pool.str());
    };
    while (state.step < last) {
        const auto t0 = std::chrono::steady_clock::now();
        EventRecord ev = train_step(state, config, tasks, analyst, options.exec);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (config.deterministic) timing << "{\"step\":" << ev.step << ",\"wall_ms\":" << ms << "}\n";
        else ev.wall_ms = ms;
        events << to_json_line(ev) << '\n';
        events.flush();
        if (options.progress)
            std::cerr << "step " << ev.step << " reward " << ev.mean_reward << " validated " << ev.validated
                      << " retention " << ev.retention_ratio << '\n';
        if (state.step % config.checkpoint_interval == 0 || state.step == config.total_steps) {
            save_checkpoint(checkpoint_path(run_dir, state.step), state);
            write_pool();
        }
    }
    events.close();
    write_pool();
    {
        std::ofstream csv(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
        write_metrics_csv(csv, read_events(events_path.string()));
    }
    return state;
}

}  // namespace mel

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mel/checkpoint.hpp"
#include "mel/config.hpp"
#include "mel/error.hpp"
#include "mel/eval.hpp"
#include "mel/export.hpp"
#include "mel/trainer.hpp"

namespace {

using namespace mel;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRemote = 3 };

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// Task files are read under a wide vocabulary and re-rendered later under the
// policy's own.
std::vector<Query> load_task_set(const TaskConfig& tc) {
    if (!tc.file.empty()) return load_tasks(tc.file, Vocabulary::modchain(4096));
    const TaskGenConfig gen = parse_gen_spec(tc.gen);
    return generate_tasks(Vocabulary::modchain(numerals_required(gen)), gen);
}

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("--config", config_file, "flat key = value config file");
        app->add_option("--set", overrides, "override one key (key=value); repeatable");
    }
    Config load() const {
        Config c;
        if (!config_file.empty()) c.merge_file(config_file);
        for (const auto& o : overrides) c.set_override(o);
        return c;
    }
};

int cmd_gen_tasks(const std::string& spec, const std::string& out) {
    const TaskGenConfig gen = parse_gen_spec(spec);
    const auto tasks = generate_tasks(Vocabulary::modchain(numerals_required(gen)), gen);
    if (out.empty() || out == "-") write_task_file(std::cout, tasks);
    else save_tasks(out, tasks);
    return kOk;
}

int cmd_train(const Common& common, const std::string& run_dir, const std::string& task_file, const std::string& gen,
              bool resume, bool progress) {
    Config cfg = common.load();
    if (!task_file.empty()) cfg.set("task.file", task_file);
    if (!gen.empty()) cfg.set("task.gen", gen);
    const TrainConfig tc = train_config_from(cfg);
    TaskSource tasks(load_task_set(task_config_from(cfg)));
    RunOptions opts;
    opts.resume = resume;
    opts.progress = progress;
    const TrainState s = run(tc, cfg, tasks, run_dir, opts);
    std::cout << "trained " << s.step << " steps; pool " << s.pool.counters().validated << " validated / "
              << s.pool.counters().candidates << " candidates (retention " << s.pool.retention_ratio() << ")\n";
    return kOk;
}

int cmd_eval(const Common& common, const std::string& run_dir, const std::string& checkpoint,
             const std::string& task_file, const std::string& gen, bool json) {
    Config cfg = common.load();
    if (!task_file.empty()) cfg.set("eval.file", task_file);
    if (!gen.empty()) cfg.set("eval.gen", gen);
    const EvalConfig ec = eval_config_from(cfg);
    const PolicyParams params =
        !checkpoint.empty() ? load_checkpoint(checkpoint).params : load_final_params(run_dir);
    std::vector<Query> tasks = load_task_set(heldout_config_from(cfg));
    rerender_prompts(tasks, *params.vocab);
    const EvalReport r = evaluate(params, tasks, ec);
    if (json) {
        std::cout << report_to_json(r) << '\n';
    } else {
        std::cout << "tasks " << tasks.size() << "\nPass@1 / Avg@" << ec.k << " / Pass@" << ec.k << ": "
                  << format_table_row(r.overall) << '\n';
        for (const auto& [l, m] : r.by_length) std::cout << "  length " << l << ": " << format_table_row(m) << '\n';
    }
    return kOk;
}

int cmd_compare(const Common& common, const std::string& a, const std::string& b, const std::string& task_file,
                const std::string& gen) {
    Config cfg = common.load();
    if (!task_file.empty()) cfg.set("eval.file", task_file);
    if (!gen.empty()) cfg.set("eval.gen", gen);
    const auto runs_a = split_list(a), runs_b = split_list(b);
    const EvalConfig ec = eval_config_from(cfg);
    std::vector<Query> tasks = load_task_set(heldout_config_from(cfg));
    const ComparisonSummary s = compare_run_sets(runs_a, runs_b, tasks, ec);
    std::cout << comparison_to_text(s, ec.k);
    return kOk;
}

int cmd_pool_inspect(const std::string& run_dir, const std::string& pool_file, const std::string& status,
                     std::size_t limit) {
    const std::string path = !pool_file.empty() ? pool_file : (std::filesystem::path(run_dir) / "pool.jsonl").string();
    const MetaExperiencePool pool = read_pool(path);
    std::optional<MeStatus> filter;
    if (!status.empty()) {
        filter = parse_status(status);
        if (!filter) throw ConfigError("unknown status '" + status + "' (candidate, validated, rejected)");
    }
    std::size_t shown = 0;
    for (const auto& me : pool.entries()) {
        if (filter && me.status != *filter) continue;
        if (limit && shown >= limit) break;
        ++shown;
        std::cout << "[" << to_string(me.status) << "] " << me.provenance.query_id << "  step "
                  << me.provenance.created_step << "  " << me.provenance.backend << '\n'
                  << "  y+ " << me.provenance.positive_id << "   y- " << me.provenance.negative_id << '\n'
                  << "  bifurcation: ";
        if (me.bifurcation_step) std::cout << "step " << *me.bifurcation_step << ", ";
        std::cout << me.bifurcation_text << '\n'
                  << "  critique (" << to_symbol(me.critique.kind) << "): " << me.critique.text << '\n'
                  << "  heuristic [" << to_symbol(me.heuristic.family) << ' ' << to_symbol(me.heuristic.op)
                  << "]: " << me.heuristic.text << '\n';
        if (!me.diagnostics.empty()) std::cout << "  diagnostics: " << me.diagnostics << '\n';
    }
    const auto& c = pool.counters();
    std::cout << shown << " shown; candidates " << c.candidates << ", validated " << c.validated << ", rejected "
              << c.rejected << ", retention " << pool.retention_ratio() << '\n';
    return kOk;
}

int cmd_export(const Common& common, const std::string& run_dir, const std::string& what, const std::string& out,
               const std::string& task_file, const std::string& gen) {
    const ExportKind kind = parse_export_kind(what);
    std::vector<Query> tasks;
    if (kind == ExportKind::InternalizationDataset) {
        Config cfg = common.load();
        const auto resolved = std::filesystem::path(run_dir) / "config.resolved";
        if (common.config_file.empty() && std::filesystem::exists(resolved)) {
            cfg.merge_file(resolved.string());
            for (const auto& o : common.overrides) cfg.set_override(o);
        }
        if (!task_file.empty()) cfg.set("task.file", task_file);
        if (!gen.empty()) cfg.set("task.gen", gen);
        tasks = load_task_set(task_config_from(cfg));
    }
    export_run(run_dir, kind, out, tasks);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-experience learning on verifiable toy tasks"};
    app.require_subcommand(1);
    Common common;

    std::string gen, out, run_dir, task_file, checkpoint, a, b, pool_file, status, what;
    bool resume = false, progress = false, json = false;
    std::size_t limit = 0;

    auto* g = app.add_subcommand("gen-tasks", "generate a task file");
    g->add_option("--gen", gen, "family=modchain,count=N,seed=S[,min_len=,max_len=,moduli=5:7]")->required();
    g->add_option("--out", out, "output path (default stdout)");

    auto* t = app.add_subcommand("train", "train a policy");
    common.attach(t);
    t->add_option("--run-dir", run_dir, "run directory")->required();
    t->add_option("--task-file", task_file, "training tasks (JSONL)");
    t->add_option("--gen", gen, "generate training tasks instead");
    t->add_flag("--resume", resume, "continue from the latest checkpoint");
    t->add_flag("--progress", progress, "print one line per step");

    auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
    common.attach(e);
    auto* e_run = e->add_option("--run-dir", run_dir, "run directory (final checkpoint)");
    e->add_option("--checkpoint", checkpoint, "checkpoint file")->excludes(e_run);
    e->add_option("--task-file", task_file, "held-out tasks (JSONL)");
    e->add_option("--gen", gen, "generate held-out tasks instead");
    e->add_flag("--json", json, "print the full report as JSON");

    auto* c = app.add_subcommand("compare", "compare runs on identical tasks and seeds");
    common.attach(c);
    c->add_option("--a", a, "baseline run directories, comma separated")->required();
    c->add_option("--b", b, "candidate run directories, comma separated")->required();
    c->add_option("--task-file", task_file, "held-out tasks (JSONL)");
    c->add_option("--gen", gen, "generate held-out tasks instead");

    auto* p = app.add_subcommand("pool", "meta-experience pool tools");
    p->require_subcommand(1);
    auto* pi = p->add_subcommand("inspect", "pretty-print pool entries");
    auto* pi_run = pi->add_option("--run-dir", run_dir, "run directory");
    pi->add_option("--pool", pool_file, "pool file")->excludes(pi_run);
    pi->add_option("--status", status, "candidate | validated | rejected");
    pi->add_option("--limit", limit, "show at most this many entries");

    auto* x = app.add_subcommand("export", "export run artifacts");
    common.attach(x);
    x->add_option("--run-dir", run_dir, "run directory")->required();
    x->add_option("--what", what, "metrics-csv | curves-svg | pool-summary | internalization-dataset")->required();
    x->add_option("--out", out, "output path (default stdout)");
    x->add_option("--task-file", task_file, "training tasks, for internalization-dataset");
    x->add_option("--gen", gen, "training task spec, for internalization-dataset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*g) return cmd_gen_tasks(gen, out);
        if (*t) return cmd_train(common, run_dir, task_file, gen, resume, progress);
        if (*e) {
            if (run_dir.empty() && checkpoint.empty()) throw ConfigError("eval needs --run-dir or --checkpoint");
            return cmd_eval(common, run_dir, checkpoint, task_file, gen, json);
        }
        if (*c) return cmd_compare(common, a, b, task_file, gen);
        if (*pi) {
            if (run_dir.empty() && pool_file.empty()) throw ConfigError("pool inspect needs --run-dir or --pool");
            return cmd_pool_inspect(run_dir, pool_file, status, limit);
        }
        if (*x) return cmd_export(common, run_dir, what, out, task_file, gen);
    } catch (const ConfigError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kUsage;
    } catch (const TransportError& err) {
        std::cerr << "remote analyst failure: " << err.what() << '\n';
        return kRemote;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kData;
    }
    return kUsage;
}

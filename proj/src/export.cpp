#include "mel/export.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <ostream>
#include <sstream>

#include "mel/error.hpp"
#include "mel/internalize.hpp"

namespace mel {
namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::string fmt(double v, const char* f = "%.3f") {
    char buf[32];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

void polyline(std::ostream& out, std::span<const EventRecord> events, double (*value)(const EventRecord&),
              double x0, double y0, double w, double h, const char* color) {
    if (events.empty()) return;
    const double smin = static_cast<double>(events.front().step);
    const double smax = static_cast<double>(events.back().step);
    const double span = std::max(1.0, smax - smin);
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& e : events) {
        const double x = x0 + w * (static_cast<double>(e.step) - smin) / span;
        const double y = y0 + h * (1.0 - std::clamp(value(e), 0.0, 1.0));
        out << fmt(x, "%.2f") << ',' << fmt(y, "%.2f") << ' ';
    }
    out << "\"/>\n";
}

void panel(std::ostream& out, std::span<const EventRecord> events, double (*value)(const EventRecord&),
           const char* title, double x0, double y0, const char* color) {
    const double w = 520, h = 200;
    out << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
    out << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\" font-size=\"13\">" << title << "</text>\n";
    out << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << w << "\" height=\"" << h
        << "\" fill=\"none\" stroke=\"#888\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = y0 + h * (1.0 - i / 4.0);
        out << "<line x1=\"" << x0 << "\" x2=\"" << x0 + w << "\" y1=\"" << y << "\" y2=\"" << y
            << "\" stroke=\"#eee\"/>\n";
        out << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt(i / 4.0, "%.2f")
            << "</text>\n";
    }
    if (!events.empty()) {
        out << "<text x=\"" << x0 << "\" y=\"" << y0 + h + 16 << "\">" << events.front().step << "</text>\n";
        out << "<text x=\"" << x0 + w << "\" y=\"" << y0 + h + 16 << "\" text-anchor=\"end\">" << events.back().step
            << "</text>\n";
        out << "<text x=\"" << x0 + w / 2 << "\" y=\"" << y0 + h + 16 << "\" text-anchor=\"middle\">step</text>\n";
        out << "<text x=\"" << x0 + w + 6 << "\" y=\"" << y0 + 12 << "\">final " << fmt(value(events.back()))
            << "</text>\n";
    }
    polyline(out, events, value, x0, y0, w, h, color);
    out << "</g>\n";
}

}  // namespace

void write_metrics_csv(std::ostream& out, std::span<const EventRecord> events) {
    out << "step,mean_reward,degenerate_fraction,pairs,candidates,validated,rejected,analyst_failures,"
           "retention_ratio,mel_batch,mel_skipped,nll_loss,meta_return,surrogate,grad_norm_grpo,grad_norm_mel,"
           "grad_norm_joint,clipped_tokens,total_tokens,wall_ms\n";
    for (const auto& e : events) {
        out << e.step << ',' << num(e.mean_reward) << ',' << num(e.degenerate_fraction) << ',' << e.pairs << ','
            << e.candidates << ',' << e.validated << ',' << e.rejected << ',' << e.analyst_failures << ','
            << num(e.retention_ratio) << ',' << e.mel_batch << ',' << (e.mel_skipped ? 1 : 0) << ','
            << opt(e.nll_loss) << ',' << opt(e.meta_return) << ',' << num(e.surrogate) << ','
            << num(e.grad_norm_grpo) << ',' << num(e.grad_norm_mel) << ',' << num(e.grad_norm_joint) << ','
            << e.clipped_tokens << ',' << e.total_tokens << ',' << opt(e.wall_ms) << '\n';
    }
}

void write_curves_svg(std::ostream& out, std::span<const EventRecord> events) {
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"540\" viewBox=\"0 0 640 540\">\n";
    out << "<rect width=\"640\" height=\"540\" fill=\"white\"/>\n";
    panel(out, events, [](const EventRecord& e) { return e.mean_reward; }, "Mean training reward", 50, 30, "#1f77b4");
    panel(out, events, [](const EventRecord& e) { return e.retention_ratio; }, "Retention ratio", 50, 300, "#d62728");
    out << "</svg>\n";
}

void write_pool_summary(std::ostream& out, const MetaExperiencePool& pool, std::span<const EventRecord> events) {
    const auto& c = pool.counters();
    out << "entries: " << pool.size() << '\n';
    out << "candidates: " << c.candidates << "  validated: " << c.validated << "  rejected: " << c.rejected << '\n';
    out << "retention ratio (pool): " << fmt(pool.retention_ratio(), "%.4g") << '\n';
    if (!events.empty())
        out << "retention ratio (final logged): " << fmt(events.back().retention_ratio, "%.4g") << " at step "
            << events.back().step << '\n';
    std::map<std::string, std::array<std::size_t, 3>> table;
    for (const auto& me : pool.entries()) table[to_symbol(me.critique.kind)][static_cast<int>(me.status)]++;
    out << '\n' << "error kind          candidate  validated  rejected\n";
    for (const char* kind : {"wrong-operation", "arithmetic-slip", "wrong-modulus", "format-violation"}) {
        const auto& row = table[kind];
        char buf[96];
        std::snprintf(buf, sizeof buf, "%-18s %10zu %10zu %9zu\n", kind, row[0], row[1], row[2]);
        out << buf;
    }
}

void write_internalization_dataset(std::ostream& out, const MetaExperiencePool& pool, std::span<const Query> queries,
                                   const Vocabulary& vocab) {
    const auto validated = pool.with_status(MeStatus::Validated);
    for (std::size_t idx : validated) {
        const MetaExperience& me = pool.at(idx);
        nlohmann::ordered_json j;
        j["query_id"] = me.provenance.query_id;
        j["created_step"] = me.provenance.created_step;
        const std::size_t one[] = {idx};
        const auto batch = build_internalization_batch(vocab, pool, one, queries, toy_instruction(vocab));
        j["context"] = vocab.decode(batch.entries[0].context.tokens, false);
        j["target"] = vocab.decode(batch.entries[0].target, false);
        j["critique"] = me.critique.text;
        j["heuristic"] = me.heuristic.text;
        out << j.dump() << '\n';
    }
}

ExportKind parse_export_kind(const std::string& s) {
    if (s == "metrics-csv") return ExportKind::MetricsCsv;
    if (s == "curves-svg") return ExportKind::CurvesSvg;
    if (s == "pool-summary") return ExportKind::PoolSummary;
    if (s == "internalization-dataset") return ExportKind::InternalizationDataset;
    throw ConfigError("unknown export '" + s + "' (metrics-csv, curves-svg, pool-summary, internalization-dataset)");
}

MetaExperiencePool read_pool(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    return MetaExperiencePool::load_jsonl(in);
}

void export_run(const std::string& run_dir, ExportKind kind, const std::string& out_path,
                std::span<const Query> queries) {
    namespace fs = std::filesystem;
    const fs::path dir(run_dir);
    std::ostringstream out;
    switch (kind) {
        case ExportKind::MetricsCsv:
            write_metrics_csv(out, read_events((dir / "events.jsonl").string()));
            break;
        case ExportKind::CurvesSvg:
            write_curves_svg(out, read_events((dir / "events.jsonl").string()));
            break;
        case ExportKind::PoolSummary:
            write_pool_summary(out, read_pool((dir / "pool.jsonl").string()),
                               read_events((dir / "events.jsonl").string()));
            break;
        case ExportKind::InternalizationDataset: {
            const auto step = latest_checkpoint(run_dir);
            if (!step) throw CheckpointError("no checkpoint under " + run_dir + "/checkpoints");
            const auto params = load_checkpoint(checkpoint_path(run_dir, *step)).params;
            std::vector<Query> qs(queries.begin(), queries.end());
            rerender_prompts(qs, *params.vocab);
            write_internalization_dataset(out, read_pool((dir / "pool.jsonl").string()), qs, *params.vocab);
            break;
        }
    }
    if (out_path.empty() || out_path == "-") {
        std::fwrite(out.str().data(), 1, out.str().size(), stdout);
        return;
    }
    std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
    if (!f) throw ParseError("cannot write " + out_path);
    f << out.str();
}

}  // namespace mel

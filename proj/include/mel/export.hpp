#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mel/metaexp.hpp"
#include "mel/trainer.hpp"

namespace mel {

// Columns, in order:
//   step, mean_reward, degenerate_fraction, pairs, candidates, validated,
//   rejected, analyst_failures, retention_ratio, mel_batch, mel_skipped (0/1),
//   nll_loss, meta_return (empty when the MEL term was skipped), surrogate,
//   grad_norm_grpo, grad_norm_mel, grad_norm_joint, clipped_tokens,
//   total_tokens, wall_ms (empty in deterministic mode)
void write_metrics_csv(std::ostream& out, std::span<const EventRecord> events);

// Two panels, mean training reward and retention ratio against step.
void write_curves_svg(std::ostream& out, std::span<const EventRecord> events);

// Counts by error kind and status, plus the retention series endpoint.
void write_pool_summary(std::ostream& out, const MetaExperiencePool& pool, std::span<const EventRecord> events);

// One JSON object per validated entry: the retrospective context and the
// target M* as symbol strings, for training an external model.
void write_internalization_dataset(std::ostream& out, const MetaExperiencePool& pool, std::span<const Query> queries,
                                   const Vocabulary& vocab);

enum class ExportKind { MetricsCsv, CurvesSvg, PoolSummary, InternalizationDataset };
ExportKind parse_export_kind(const std::string& s);

// Reads the run directory and writes one export to `out_path`.
void export_run(const std::string& run_dir, ExportKind kind, const std::string& out_path,
                std::span<const Query> queries = {});

MetaExperiencePool read_pool(const std::string& path);

}  // namespace mel

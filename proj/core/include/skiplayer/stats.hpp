#pragma once

#include <string>
#include <vector>

#include "skiplayer/decode.hpp"
#include "skiplayer/model.hpp"

namespace skiplayer {

// Printable form of a token id: printable ASCII as-is, other bytes as
// \xHH, specials as <pad>/<eot>.
std::string token_display(int32_t id);

struct SkipStatRow {
  int32_t token = 0;
  std::string display;
  double mean_skipped = 0;  // average layers skipped when this token is input
  int64_t count = 0;
};

// Aggregates a decode trace per input-token type. Rows are sorted by mean
// skipped layers descending, ties by token id ascending.
std::vector<SkipStatRow> skip_stats(const DecodeTrace& trace);

// token <tab> mean_skipped <tab> count, preceded by a header line.
std::string skip_stats_tsv(const std::vector<SkipStatRow>& rows);

DecodeTrace trace_from_json(const std::string& text);
std::string trace_to_json(const DecodeTrace& trace);

// Analytic per-token forward cost in FLOPs (2 per multiply-accumulate),
// averaged over a length-`time` causal context. Active-layer work scales
// with the realized capacity; the router and key/value projections are
// charged for every token of routed layers; embedding lookup is free and
// the output head costs d*vocab MACs.
struct FlopsReport {
  std::vector<double> layer_flops;  // per layer, per token
  double router_flops = 0;          // summed over layers
  double kv_flops = 0;              // summed over routed layers
  double head_flops = 0;            // output projection
  double total = 0;
  double eff_layers = 0;            // sum of per-layer capacities
};

FlopsReport flops_per_token(const ModelConfig& cfg,
                            const std::vector<double>& capacity, int64_t time);

std::string flops_tsv(const ModelConfig& cfg, const FlopsReport& report);

}  // namespace skiplayer

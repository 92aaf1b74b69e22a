#include "skiplayer/stats.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include <json.hpp>

namespace skiplayer {

std::string token_display(int32_t id) {
  if (id == 256) return "<pad>";
  if (id == 257) return "<eot>";
  if (id >= 33 && id <= 126) return std::string(1, static_cast<char>(id));
  if (id == 32) return "<sp>";
  char buf[8];
  std::snprintf(buf, sizeof(buf), "\\x%02x", static_cast<unsigned>(id));
  return buf;
}

std::vector<SkipStatRow> skip_stats(const DecodeTrace& trace) {
  SKL_CHECK_ARG(!trace.steps.empty(), "skip_stats: trace is empty");
  struct Acc {
    int64_t count = 0;
    int64_t skipped = 0;
  };
  std::map<int32_t, Acc> by_token;
  for (const auto& step : trace.steps) {
    SKL_CHECK_ARG(static_cast<int64_t>(step.executed.size()) == trace.layers,
                  "skip_stats: step bit count does not match layer count");
    int64_t executed = 0;
    for (uint8_t b : step.executed) executed += (b != 0);
    Acc& a = by_token[step.input_token];
    a.count += 1;
    a.skipped += trace.layers - executed;
  }
  std::vector<SkipStatRow> rows;
  rows.reserve(by_token.size());
  for (const auto& [token, acc] : by_token) {
    rows.push_back({token, token_display(token),
                    static_cast<double>(acc.skipped) /
                        static_cast<double>(acc.count),
                    acc.count});
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.mean_skipped != b.mean_skipped) return a.mean_skipped > b.mean_skipped;
    return a.token < b.token;
  });
  return rows;
}

std::string skip_stats_tsv(const std::vector<SkipStatRow>& rows) {
  std::string out = "token\tmean_skipped\tcount\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "\t%.4f\t%lld\n", r.mean_skipped,
                  static_cast<long long>(r.count));
    out += r.display;
    out += buf;
  }
  return out;
}

std::string trace_to_json(const DecodeTrace& trace) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : trace.steps) {
    steps.push_back({{"token", s.input_token},
                     {"chosen", s.chosen_token},
                     {"executed", s.executed}});
  }
  nlohmann::json j{{"layers", trace.layers}, {"steps", steps}};
  return j.dump();
}

DecodeTrace trace_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail_arg(std::string("trace: invalid JSON: ") + e.what());
  }
  SKL_CHECK_ARG(j.is_object() && j.contains("layers") && j.contains("steps"),
                "trace: expected object with 'layers' and 'steps'");
  DecodeTrace trace;
  trace.layers = j.at("layers").get<int64_t>();
  SKL_CHECK_ARG(trace.layers > 0, "trace: layer count must be positive");
  for (const auto& s : j.at("steps")) {
    DecodeTrace::Step step;
    step.input_token = s.at("token").get<int32_t>();
    step.chosen_token = s.at("chosen").get<int32_t>();
    step.executed = s.at("executed").get<std::vector<uint8_t>>();
    for (uint8_t b : step.executed)
      SKL_CHECK_ARG(b == 0 || b == 1, "trace: executed bits must be 0 or 1");
    SKL_CHECK_ARG(static_cast<int64_t>(step.executed.size()) == trace.layers,
                  "trace: step bit count does not match layer count");
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

FlopsReport flops_per_token(const ModelConfig& cfg,
                            const std::vector<double>& capacity,
                            int64_t time) {
  cfg.validate();
  SKL_CHECK_ARG(static_cast<int64_t>(capacity.size()) == cfg.layers,
                "flops: need one capacity per layer");
  for (double r : capacity)
    SKL_CHECK_ARG(r >= 0.0 && r <= 1.0, "flops: capacity outside [0, 1]");
  SKL_CHECK_ARG(time > 0, "flops: time must be positive");

  const double d = static_cast<double>(cfg.dim);
  const double h = static_cast<double>(cfg.ffn_hidden());
  const double v = static_cast<double>(cfg.vocab);
  const double ctx = (static_cast<double>(time) + 1.0) / 2.0;
  const double router_macs = cfg.has_router_weights() ? 2.0 * d : 0.0;

  FlopsReport rep;
  rep.layer_flops.reserve(static_cast<size_t>(cfg.layers));
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const double r = (cfg.variant == Variant::standard ||
                      cfg.variant == Variant::highway)
                         ? 1.0
                         : capacity[static_cast<size_t>(l)];
    double macs = 0, kv = 0;
    switch (cfg.variant) {
      case Variant::skiplayer:
      case Variant::random:
        kv = 2.0 * d * d;
        macs = r * (2.0 * d * d + 2.0 * ctx * d + 2.0 * d * h) + kv +
               router_macs;
        break;
      case Variant::wideffn:
        macs = 4.0 * d * d + 2.0 * ctx * d + r * (2.0 * d * h) + router_macs;
        break;
      case Variant::highway:
        macs = 4.0 * d * d + 2.0 * ctx * d + 2.0 * d * h + d;
        break;
      case Variant::standard:
        macs = 4.0 * d * d + 2.0 * ctx * d + 2.0 * d * h;
        break;
    }
    rep.layer_flops.push_back(2.0 * macs);
    rep.router_flops += 2.0 * router_macs;
    rep.kv_flops += 2.0 * kv;
    rep.eff_layers += r;
    rep.total += 2.0 * macs;
  }
  rep.head_flops = 2.0 * d * v;
  rep.total += rep.head_flops;
  return rep;
}

std::string flops_tsv(const ModelConfig& cfg, const FlopsReport& report) {
  char buf[128];
  std::string out = "field\tvalue\n";
  auto line = [&](const char* k, double x) {
    std::snprintf(buf, sizeof(buf), "%s\t%.1f\n", k, x);
    out += buf;
  };
  out += "variant\t" + to_string(cfg.variant) + "\n";
  for (size_t l = 0; l < report.layer_flops.size(); ++l) {
    std::snprintf(buf, sizeof(buf), "layer%zu_flops\t%.1f\n", l,
                  report.layer_flops[l]);
    out += buf;
  }
  line("router_flops", report.router_flops);
  line("kv_flops", report.kv_flops);
  line("head_flops", report.head_flops);
  line("total_flops_per_token", report.total);
  std::snprintf(buf, sizeof(buf), "eff_layers\t%.4f\n", report.eff_layers);
  out += buf;
  return out;
}

}  // namespace skiplayer

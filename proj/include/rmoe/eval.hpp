#pragma once

// Average precision (tie-grouped AUPRC), macro averaging over event types,
// occurrence ratios, and base-vs-challenger gain tables.
//
// metrics.csv
//   event_index,event_name,positives,occurrence_ratio,auprc
//   one row per target type (auprc "n/a" when the type has no positives),
//   then "macro,,<total positives>,<mean occurrence ratio>,<macro auprc>".
// gains.csv
//   event_index,event_name,occurrence_ratio,base_auprc,challenger_auprc,gain_pct
//   gain_pct = 100 (challenger - base) / base, "n/a" when undefined; last row "macro".
// gain_vs_occurrence.csv
//   occurrence_ratio,gain_pct   (evaluated types with a defined gain)
// All floats are printed with 6 decimals.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rmoe/data.hpp"
#include "rmoe/models.hpp"
#include "rmoe/tensor.hpp"

namespace rmoe {

/// Scores and binary labels for one event type, pooled over all sequences
/// and time steps.
struct ScoredPairs {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
};

/// Average precision without interpolation. Items are ranked by descending
/// score; tied scores form one group and
///   AP = sum_k (R_k - R_{k-1}) P_k
/// over groups k. Returns nullopt when there are no positives.
inline std::optional<double> auprc(std::span<const double> scores,
                                   std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("auprc: scores and labels differ in length");
  const std::size_t total_pos =
      static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (total_pos == 0) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t prev_tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] != 0) ++tp;
      ++j;
    }
    seen = j;
    if (tp != prev_tp) {
      const double precision = static_cast<double>(tp) / static_cast<double>(seen);
      ap += static_cast<double>(tp - prev_tp) * precision;
      prev_tp = tp;
    }
    i = j;
  }
  // One division at the end keeps a perfect ranking at exactly 1.
  return ap / static_cast<double>(total_pos);
}

inline std::optional<double> auprc(const ScoredPairs& p) { return auprc(p.scores, p.labels); }

/// Unweighted mean over types with a defined AUPRC.
inline double macro_auprc(std::span<const std::optional<double>> per_type) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& a : per_type) {
    if (a) {
      total += *a;
      ++n;
    }
  }
  if (n == 0) throw Error("macro_auprc: no event type has a positive label");
  return total / static_cast<double>(n);
}

/// Fraction of windows (pooled over all sequences) in which each input event
/// type occurs.
inline std::vector<double> occurrence_ratio(const std::vector<WindowedSequence>& seqs,
                                            const EventVocabulary& vocab) {
  std::size_t windows = 0;
  std::vector<std::size_t> counts(vocab.n_inputs(), 0);
  for (const auto& s : seqs) {
    for (const auto& w : s.windows) {
      ++windows;
      for (std::size_t j = 0; j < counts.size(); ++j) counts[j] += w[j] != 0 ? 1 : 0;
    }
  }
  if (windows == 0) throw Error("occurrence_ratio: test split has no windows");
  std::vector<double> out(counts.size());
  for (std::size_t j = 0; j < counts.size(); ++j) {
    out[j] = static_cast<double>(counts[j]) / static_cast<double>(windows);
  }
  return out;
}

/// Per-target-type pairs from any per-sequence predictor that returns one
/// |E'| vector per step t = 1..T-1.
inline std::vector<ScoredPairs> collect_scores(
    const std::vector<WindowedSequence>& seqs, const EventVocabulary& vocab,
    const std::function<std::vector<Vec>(std::size_t, const WindowedSequence&)>& predictor) {
  std::vector<ScoredPairs> pairs(vocab.n_targets());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.length() < 2) continue;
    const auto preds = predictor(i, s);
    if (preds.size() != s.length() - 1) throw Error("collect_scores: predictor returned wrong length");
    for (std::size_t t = 0; t < preds.size(); ++t) {
      for (std::size_t k = 0; k < vocab.n_targets(); ++k) {
        pairs[k].scores.push_back(preds[t][k]);
        pairs[k].labels.push_back(s.windows[t + 1][vocab.target_indices[k]]);
      }
    }
  }
  return pairs;
}

inline std::vector<ScoredPairs> collect_scores(const std::vector<WindowedSequence>& seqs,
                                               const EventVocabulary& vocab,
                                               const AnyModel& model) {
  return collect_scores(seqs, vocab,
                        [&](std::size_t, const WindowedSequence& s) { return predict(model, s); });
}

/// Scores from the exact generator distribution given each sequence's
/// latent subpopulation.
inline std::vector<ScoredPairs> collect_oracle_scores(const std::vector<WindowedSequence>& seqs,
                                                      const std::vector<std::size_t>& labels,
                                                      const EventVocabulary& vocab,
                                                      const SyntheticWorld& world) {
  if (labels.size() != seqs.size()) throw Error("oracle scoring: one label per sequence required");
  return collect_scores(seqs, vocab, [&](std::size_t i, const WindowedSequence& s) {
    std::vector<Vec> out;
    for (std::size_t t = 0; t + 1 < s.length(); ++t) {
      const Vec p = oracle_predict(world, labels[i], s.windows[t]);
      Vec sel(vocab.n_targets());
      for (std::size_t k = 0; k < sel.size(); ++k) sel[k] = p[vocab.target_indices[k]];
      out.push_back(std::move(sel));
    }
    return out;
  });
}

struct MetricsReport {
  std::vector<std::size_t> event_index;  // input index of each target type
  std::vector<std::string> event_name;
  std::vector<std::size_t> positives;
  std::vector<double> occurrence;
  std::vector<std::optional<double>> auprc;
  double macro = 0.0;

  std::size_t evaluated() const {
    return static_cast<std::size_t>(std::count_if(auprc.begin(), auprc.end(),
                                                  [](const auto& a) { return a.has_value(); }));
  }
  std::vector<std::size_t> excluded() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < auprc.size(); ++k) {
      if (!auprc[k]) out.push_back(event_index[k]);
    }
    return out;
  }
};

inline MetricsReport make_report(const std::vector<ScoredPairs>& pairs, const EventVocabulary& vocab,
                                 const std::vector<double>& occurrence) {
  if (pairs.size() != vocab.n_targets()) throw Error("make_report: one score list per target type");
  MetricsReport r;
  for (std::size_t k = 0; k < vocab.n_targets(); ++k) {
    const std::size_t e = vocab.target_indices[k];
    r.event_index.push_back(e);
    r.event_name.push_back(vocab.input_names[e]);
    r.positives.push_back(pairs[k].positives());
    r.occurrence.push_back(occurrence.at(e));
    r.auprc.push_back(auprc(pairs[k]));
  }
  r.macro = macro_auprc(r.auprc);
  return r;
}

/// Scores a model on a test split and builds the report.
inline MetricsReport evaluate(const AnyModel& model, const std::vector<WindowedSequence>& test,
                              const EventVocabulary& vocab) {
  return make_report(collect_scores(test, vocab, model), vocab, occurrence_ratio(test, vocab));
}

inline std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline constexpr const char* kMetricsHeader =
    "event_index,event_name,positives,occurrence_ratio,auprc";
inline constexpr const char* kGainsHeader =
    "event_index,event_name,occurrence_ratio,base_auprc,challenger_auprc,gain_pct";
inline constexpr const char* kGainVsOccurrenceHeader = "occurrence_ratio,gain_pct";

inline std::string metrics_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  std::size_t total_pos = 0;
  double occ = 0.0;
  for (std::size_t k = 0; k < r.event_index.size(); ++k) {
    os << r.event_index[k] << ',' << r.event_name[k] << ',' << r.positives[k] << ','
       << fmt6(r.occurrence[k]) << ',' << (r.auprc[k] ? fmt6(*r.auprc[k]) : "n/a") << '\n';
    total_pos += r.positives[k];
    occ += r.occurrence[k];
  }
  occ /= static_cast<double>(std::max<std::size_t>(1, r.event_index.size()));
  os << "macro,," << total_pos << ',' << fmt6(occ) << ',' << fmt6(r.macro) << '\n';
  return os.str();
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace detail

/// Parses a metrics.csv written by metrics_csv (values at 6-decimal precision).
inline MetricsReport parse_metrics_csv(std::istream& in, const std::string& origin = "metrics.csv") {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw Error(origin + ": unexpected header (expected '" + kMetricsHeader + "')");
  }
  MetricsReport r;
  bool saw_macro = false;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 5) throw Error(origin + ":" + std::to_string(line_no) + ": expected 5 columns");
    try {
      if (cells[0] == "macro") {
        r.macro = std::stod(cells[4]);
        saw_macro = true;
        continue;
      }
      r.event_index.push_back(std::stoul(cells[0]));
      r.event_name.push_back(cells[1]);
      r.positives.push_back(std::stoul(cells[2]));
      r.occurrence.push_back(std::stod(cells[3]));
      r.auprc.push_back(cells[4] == "n/a" ? std::nullopt : std::optional<double>(std::stod(cells[4])));
    } catch (const std::logic_error&) {
      throw Error(origin + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  if (!saw_macro) throw Error(origin + ": missing macro row");
  return r;
}

inline MetricsReport load_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics file " + path);
  return parse_metrics_csv(in, path);
}

struct GainRow {
  std::string event_index;  // "macro" for the summary row
  std::string event_name;
  double occurrence = 0.0;
  std::optional<double> base;
  std::optional<double> challenger;
  std::optional<double> gain_pct;
};

inline std::optional<double> percent_gain(std::optional<double> base, std::optional<double> chal) {
  if (!base || !chal || *base == 0.0) return std::nullopt;
  return 100.0 * (*chal - *base) / *base;
}

/// Per-type and macro gains of `challenger` over `base`. Both reports must
/// cover the same event types with the same evaluated subset.
inline std::vector<GainRow> gain_report(const MetricsReport& base, const MetricsReport& challenger) {
  if (base.event_index != challenger.event_index || base.event_name != challenger.event_name) {
    throw Error("gain_report: reports cover different event types");
  }
  for (std::size_t k = 0; k < base.auprc.size(); ++k) {
    if (base.auprc[k].has_value() != challenger.auprc[k].has_value()) {
      throw Error("gain_report: evaluated type sets differ at event " +
                  std::to_string(base.event_index[k]));
    }
  }
  std::vector<GainRow> rows;
  double occ = 0.0;
  for (std::size_t k = 0; k < base.event_index.size(); ++k) {
    rows.push_back({std::to_string(base.event_index[k]), base.event_name[k], base.occurrence[k],
                    base.auprc[k], challenger.auprc[k],
                    percent_gain(base.auprc[k], challenger.auprc[k])});
    occ += base.occurrence[k];
  }
  occ /= static_cast<double>(std::max<std::size_t>(1, base.event_index.size()));
  rows.push_back({"macro", "", occ, base.macro, challenger.macro,
                  percent_gain(base.macro, challenger.macro)});
  return rows;
}

inline std::string gains_csv(const std::vector<GainRow>& rows) {
  auto opt = [](const std::optional<double>& x) { return x ? fmt6(*x) : std::string("n/a"); };
  std::ostringstream os;
  os << kGainsHeader << '\n';
  for (const auto& r : rows) {
    os << r.event_index << ',' << r.event_name << ',' << fmt6(r.occurrence) << ',' << opt(r.base)
       << ',' << opt(r.challenger) << ',' << opt(r.gain_pct) << '\n';
  }
  return os.str();
}

inline std::string gain_vs_occurrence_csv(const std::vector<GainRow>& rows) {
  std::ostringstream os;
  os << kGainVsOccurrenceHeader << '\n';
  for (const auto& r : rows) {
    if (r.event_index == "macro" || !r.gain_pct) continue;
    os << fmt6(r.occurrence) << ',' << fmt6(*r.gain_pct) << '\n';
  }
  return os.str();
}

}  // namespace rmoe

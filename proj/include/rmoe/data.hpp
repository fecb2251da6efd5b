#pragma once

// Event vocabularies, windowed sequences, sliding-window segmentation, the
// synthetic heterogeneous-population generator with its exact oracle, and
// the JSON-lines dataset format.
//
// Dataset file (one file per partition):
//   line 1:  {"format_version":1,"vocab":{"input_names":[...],"target_indices":[...]},
//             "W":24,"seed":7,"partition":"train"}
//   line 2+: {"id":"seq-000000","windows":[[0,4],[],[2]]}
// Each window lists the sorted indices of the events that occurred in it.
// The trailing, partially filled window of a stream is kept.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rmoe/layers.hpp"
#include "rmoe/tensor.hpp"

namespace rmoe {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

struct EventVocabulary {
  std::vector<std::string> input_names;
  std::vector<std::size_t> target_indices;

  std::size_t n_inputs() const noexcept { return input_names.size(); }
  std::size_t n_targets() const noexcept { return target_indices.size(); }

  void validate() const {
    if (input_names.empty()) throw Error("vocabulary: no input events");
    std::set<std::string> seen;
    for (const auto& n : input_names) {
      if (!seen.insert(n).second) throw Error("vocabulary: duplicate event name '" + n + "'");
    }
    if (target_indices.empty()) throw Error("vocabulary: empty target set");
    for (std::size_t i = 0; i < target_indices.size(); ++i) {
      if (target_indices[i] >= input_names.size()) {
        throw Error("vocabulary: target index " + std::to_string(target_indices[i]) +
                    " out of range");
      }
      if (i > 0 && target_indices[i] <= target_indices[i - 1]) {
        throw Error("vocabulary: target indices must be sorted and unique");
      }
    }
  }

  /// Names "e0".."e{n-1}", every event a target.
  static EventVocabulary numbered(std::size_t n) {
    EventVocabulary v;
    for (std::size_t i = 0; i < n; ++i) v.input_names.push_back("e" + std::to_string(i));
    v.target_indices.resize(n);
    std::iota(v.target_indices.begin(), v.target_indices.end(), std::size_t{0});
    return v;
  }

  bool operator==(const EventVocabulary&) const = default;
};

/// FNV-1a over names and target indices; identifies a vocabulary in
/// checkpoints and datasets.
inline std::uint64_t vocab_hash(const EventVocabulary& v) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (const auto& n : v.input_names) {
    for (char c : n) mix(static_cast<unsigned char>(c));
    mix(0);
  }
  mix(0xff);
  for (std::size_t t : v.target_indices) {
    for (char c : std::to_string(t)) mix(static_cast<unsigned char>(c));
    mix(',');
  }
  return h;
}

inline std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

inline json vocab_to_json(const EventVocabulary& v) {
  return json{{"input_names", v.input_names}, {"target_indices", v.target_indices}};
}

inline EventVocabulary vocab_from_json(const json& j) {
  EventVocabulary v;
  v.input_names = j.at("input_names").get<std::vector<std::string>>();
  v.target_indices = j.at("target_indices").get<std::vector<std::size_t>>();
  v.validate();
  return v;
}

inline EventVocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary file " + path);
  try {
    return vocab_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error("vocabulary file " + path + ": " + e.what());
  }
}

inline void save_vocabulary(const std::string& path, const EventVocabulary& v) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocabulary file " + path);
  out << vocab_to_json(v).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Sequences

struct WindowedSequence {
  std::string id;
  std::vector<BinaryVec> windows;

  std::size_t length() const noexcept { return windows.size(); }
  bool operator==(const WindowedSequence&) const = default;
};

/// Target entries of window t, in vocabulary target order.
inline BinaryVec target_bits(const BinaryVec& window, std::span<const std::size_t> targets) {
  BinaryVec out(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) out[i] = window[targets[i]];
  return out;
}

struct RawEvent {
  double hours = 0.0;
  std::size_t index = 0;
};

struct RawStream {
  std::string id;
  std::vector<RawEvent> events;
};

/// Window i covers [i W, (i+1) W). The number of windows is
/// floor(max timestamp / W) + 1; an empty stream has none.
inline WindowedSequence window_segment(const RawStream& s, double window_hours,
                                       const EventVocabulary& vocab) {
  if (!(window_hours > 0.0) || !std::isfinite(window_hours)) {
    throw Error("window_segment: window width must be positive");
  }
  WindowedSequence out{s.id, {}};
  if (s.events.empty()) return out;
  double max_t = 0.0;
  for (const auto& e : s.events) {
    if (!std::isfinite(e.hours) || e.hours < 0.0) {
      throw Error("window_segment: invalid timestamp in stream " + s.id);
    }
    if (e.index >= vocab.n_inputs()) {
      throw Error("window_segment: event index " + std::to_string(e.index) +
                  " outside vocabulary of size " + std::to_string(vocab.n_inputs()));
    }
    max_t = std::max(max_t, e.hours);
  }
  const auto n_windows = static_cast<std::size_t>(std::floor(max_t / window_hours)) + 1;
  out.windows.assign(n_windows, BinaryVec(vocab.n_inputs(), 0));
  for (const auto& e : s.events) {
    const auto w = static_cast<std::size_t>(std::floor(e.hours / window_hours));
    out.windows[w][e.index] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic world

/// K latent subpopulations, each a first-order logistic Markov chain over
/// binary event vectors:  P(y_{t+1,j} = 1 | y_t, k) = sigmoid(A_k[j,:] y_t + b_k[j]).
struct SyntheticWorld {
  std::size_t n_events = 0;
  std::vector<double> mixing;  // pi, on the simplex
  std::vector<Vec> initial;    // rho_k: Bernoulli rates of y_1
  std::vector<Mat> dynamics;   // A_k: n_events x n_events
  std::vector<Vec> bias;       // b_k

  std::size_t subpopulations() const noexcept { return mixing.size(); }

  void validate() const {
    const std::size_t k = mixing.size();
    if (k == 0) throw Error("world: no subpopulations");
    if (initial.size() != k || dynamics.size() != k || bias.size() != k) {
      throw Error("world: per-subpopulation tensors disagree on K");
    }
    double total = 0.0;
    for (double p : mixing) {
      if (!(p >= 0.0)) throw Error("world: negative mixing weight");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error("world: mixing weights do not sum to 1");
    for (std::size_t i = 0; i < k; ++i) {
      if (initial[i].size() != n_events || bias[i].size() != n_events ||
          dynamics[i].rows() != n_events || dynamics[i].cols() != n_events) {
        throw Error("world: tensor shape mismatch in subpopulation " + std::to_string(i));
      }
      if (!all_finite(dynamics[i].span()) || !all_finite(bias[i].span()) ||
          !all_finite(initial[i].span())) {
        throw Error("world: non-finite parameter in subpopulation " + std::to_string(i));
      }
    }
  }
};

/// Knobs for random world construction.
struct WorldSpec {
  std::size_t subpopulations = 4;
  std::size_t n_events = 30;
  double bias_low = -5.0;       // per-event base logit range; sparse events
  double bias_high = -2.5;
  double bias_spread = 2.0;     // subpopulation-specific bias jitter (std-dev)
  double density = 0.2;         // fraction of nonzero couplings in A_k
  double coupling_scale = 3.0;  // std-dev of nonzero couplings
  double persistence = 1.5;     // shared positive self-coupling on the diagonal
  double initial_low = 0.05;
  double initial_high = 0.4;
};

/// Draws a world. Couplings are independent across subpopulations, so
/// subpopulations follow genuinely different dynamics.
inline SyntheticWorld make_world(const WorldSpec& spec, std::uint64_t seed) {
  if (spec.subpopulations == 0 || spec.n_events == 0) {
    throw Error("make_world: need at least one subpopulation and one event");
  }
  Rng rng(split_seed(seed, 0x5707));
  SyntheticWorld w;
  w.n_events = spec.n_events;
  const std::size_t n = spec.n_events;
  Vec shared_bias(n);
  for (auto& b : shared_bias) b = rng.uniform(spec.bias_low, spec.bias_high);
  w.mixing.assign(spec.subpopulations, 1.0 / static_cast<double>(spec.subpopulations));
  for (std::size_t k = 0; k < spec.subpopulations; ++k) {
    Vec rho(n);
    for (auto& r : rho) r = rng.uniform(spec.initial_low, spec.initial_high);
    Mat a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (rng.uniform() < spec.density) a(i, j) = spec.coupling_scale * rng.normal();
      }
      a(i, i) += spec.persistence;
    }
    Vec b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = shared_bias[i] + spec.bias_spread * rng.normal();
    w.initial.push_back(std::move(rho));
    w.dynamics.push_back(std::move(a));
    w.bias.push_back(std::move(b));
  }
  return w;
}

/// Exact conditional next-window distribution of subpopulation k given y_t.
inline Vec oracle_predict(const SyntheticWorld& w, std::size_t k, std::span<const std::uint8_t> y) {
  if (k >= w.subpopulations()) {
    throw Error("oracle_predict: subpopulation " + std::to_string(k) + " out of range");
  }
  if (y.size() != w.n_events) throw Error("oracle_predict: input width mismatch");
  Vec x(w.n_events);
  for (std::size_t j = 0; j < y.size(); ++j) x[j] = y[j] != 0 ? 1.0 : 0.0;
  return sigmoid_vec(affine(w.dynamics[k], x, w.bias[k]));
}

struct SyntheticData {
  std::vector<WindowedSequence> sequences;
  std::vector<std::size_t> labels;  // latent subpopulation per sequence
};

inline std::string sequence_id(std::size_t i) {
  std::ostringstream os;
  os << "seq-" << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

/// Sequence i is drawn from its own child stream split_seed(seed, i), so the
/// output does not depend on generation order.
inline SyntheticData generate_synthetic(const SyntheticWorld& w, std::size_t n_sequences,
                                        std::size_t min_length, std::size_t max_length,
                                        std::uint64_t seed) {
  w.validate();
  if (min_length < 2 || max_length < min_length) {
    throw Error("generate_synthetic: need 2 <= min_length <= max_length");
  }
  const std::size_t n = w.n_events;
  SyntheticData out;
  out.sequences.reserve(n_sequences);
  out.labels.reserve(n_sequences);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    Rng rng(split_seed(seed, i));
    const double u = rng.uniform();
    std::size_t k = 0;
    double cum = w.mixing[0];
    while (u >= cum && k + 1 < w.mixing.size()) cum += w.mixing[++k];
    const std::size_t len =
        min_length + static_cast<std::size_t>(rng.below(max_length - min_length + 1));

    WindowedSequence seq{sequence_id(i), {}};
    seq.windows.reserve(len);
    BinaryVec y(n);
    for (std::size_t j = 0; j < n; ++j) y[j] = rng.bernoulli(w.initial[k][j]) ? 1 : 0;
    seq.windows.push_back(y);
    const Mat& a = w.dynamics[k];
    for (std::size_t t = 1; t < len; ++t) {
      BinaryVec next(n);
      for (std::size_t j = 0; j < n; ++j) {
        // Sparse accumulation over the set bits of y_t.
        double logit = w.bias[k][j];
        for (std::size_t m = 0; m < n; ++m) {
          if (y[m] != 0) logit += a(j, m);
        }
        const double p = 1.0 / (1.0 + std::exp(-logit));
        next[j] = rng.bernoulli(p) ? 1 : 0;
      }
      y = std::move(next);
      seq.windows.push_back(y);
    }
    out.sequences.push_back(std::move(seq));
    out.labels.push_back(k);
  }
  return out;
}

inline json world_to_json(const SyntheticWorld& w) {
  json j;
  j["n_events"] = w.n_events;
  j["mixing"] = w.mixing;
  j["initial"] = json::array();
  j["dynamics"] = json::array();
  j["bias"] = json::array();
  for (std::size_t k = 0; k < w.subpopulations(); ++k) {
    j["initial"].push_back(w.initial[k].values());
    j["dynamics"].push_back(std::vector<double>(w.dynamics[k].span().begin(),
                                                w.dynamics[k].span().end()));
    j["bias"].push_back(w.bias[k].values());
  }
  return j;
}

inline SyntheticWorld world_from_json(const json& j) {
  SyntheticWorld w;
  w.n_events = j.at("n_events").get<std::size_t>();
  w.mixing = j.at("mixing").get<std::vector<double>>();
  for (const auto& r : j.at("initial")) w.initial.emplace_back(r.get<std::vector<double>>());
  for (const auto& a : j.at("dynamics")) {
    w.dynamics.emplace_back(w.n_events, w.n_events, a.get<std::vector<double>>());
  }
  for (const auto& b : j.at("bias")) w.bias.emplace_back(b.get<std::vector<double>>());
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Splits

struct DatasetSplit {
  std::vector<WindowedSequence> train;
  std::vector<WindowedSequence> test;
  double ratio = 0.8;  // train fraction
  std::uint64_t seed = 0;
};

namespace detail {
inline std::size_t holdout_size(std::size_t n, double fraction) {
  auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
  return std::clamp<std::size_t>(k, 1, n - 1);
}
}  // namespace detail

/// Shuffles under `seed`; the last floor(n (1 - ratio)) sequences (at least
/// one) go to test.
inline DatasetSplit split_train_test(const std::vector<WindowedSequence>& seqs, double ratio,
                                     std::uint64_t seed) {
  if (seqs.size() < 2) throw Error("split_train_test: need at least 2 sequences");
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error("split_train_test: ratio must be in (0,1)");
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_test = detail::holdout_size(seqs.size(), 1.0 - ratio);
  DatasetSplit out;
  out.ratio = ratio;
  out.seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < seqs.size() - n_test ? out.train : out.test).push_back(seqs[order[i]]);
  }
  return out;
}

/// Internal validation hold-out: the last `fraction` of the training
/// sequences after a shuffle under `seed`.
inline std::pair<std::vector<WindowedSequence>, std::vector<WindowedSequence>> split_validation(
    const std::vector<WindowedSequence>& train, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error("validation fraction must be in (0,1)");
  if (train.size() < 2) throw Error("split_validation: need at least 2 sequences");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(split_seed(seed, 0x7a1));
  rng.shuffle(order);
  const std::size_t n_val = detail::holdout_size(train.size(), fraction);
  std::pair<std::vector<WindowedSequence>, std::vector<WindowedSequence>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < train.size() - n_val ? out.first : out.second).push_back(train[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

struct DatasetHeader {
  int format_version = 1;
  EventVocabulary vocab;
  double window_hours = 24.0;
  std::uint64_t seed = 0;
  std::string partition;
};

struct DatasetFile {
  DatasetHeader header;
  std::vector<WindowedSequence> sequences;
};

inline void save_dataset(const std::string& path, const DatasetHeader& header,
                         const std::vector<WindowedSequence>& seqs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset file " + path);
  json h{{"format_version", header.format_version},
         {"vocab", vocab_to_json(header.vocab)},
         {"W", header.window_hours},
         {"seed", header.seed}};
  if (!header.partition.empty()) h["partition"] = header.partition;
  out << h.dump() << '\n';
  for (const auto& s : seqs) {
    json windows = json::array();
    for (const auto& w : s.windows) {
      json bits = json::array();
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (w[j] != 0) bits.push_back(j);
      }
      windows.push_back(std::move(bits));
    }
    out << json{{"id", s.id}, {"windows", std::move(windows)}}.dump() << '\n';
  }
  if (!out) throw Error("write failed for dataset file " + path);
}

/// Errors name the 1-based line. When `expected_vocab_hash` is non-zero the
/// header vocabulary must hash to it.
inline DatasetFile load_dataset(const std::string& path, std::uint64_t expected_vocab_hash = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset file " + path);
  DatasetFile file;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> Error {
    return Error(path + ":" + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(in, line)) {
    line_no = 1;
    throw fail("missing header line");
  }
  line_no = 1;
  try {
    const json h = json::parse(line);
    file.header.format_version = h.at("format_version").get<int>();
    if (file.header.format_version != 1) throw fail("unsupported format_version");
    file.header.vocab = vocab_from_json(h.at("vocab"));
    file.header.window_hours = h.at("W").get<double>();
    file.header.seed = h.at("seed").get<std::uint64_t>();
    if (h.contains("partition")) file.header.partition = h["partition"].get<std::string>();
  } catch (const json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  } catch (const Error& e) {
    throw fail(e.what());
  }
  if (expected_vocab_hash != 0 && vocab_hash(file.header.vocab) != expected_vocab_hash) {
    throw fail("vocabulary hash mismatch: file " + hex64(vocab_hash(file.header.vocab)) +
               ", expected " + hex64(expected_vocab_hash));
  }
  const std::size_t n = file.header.vocab.n_inputs();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    WindowedSequence s;
    try {
      const json j = json::parse(line);
      s.id = j.at("id").get<std::string>();
      for (const auto& bits : j.at("windows")) {
        BinaryVec w(n, 0);
        long prev = -1;
        for (const auto& b : bits) {
          const auto idx = b.get<long>();
          if (idx < 0 || static_cast<std::size_t>(idx) >= n) {
            throw fail("event index " + std::to_string(idx) + " outside vocabulary");
          }
          if (idx <= prev) throw fail("window indices must be sorted and unique");
          prev = idx;
          w[static_cast<std::size_t>(idx)] = 1;
        }
        s.windows.push_back(std::move(w));
      }
    } catch (const json::exception& e) {
      throw fail(std::string("malformed sequence: ") + e.what());
    }
    file.sequences.push_back(std::move(s));
  }
  return file;
}

}  // namespace rmoe

// Command-line driver: synthetic data generation, the training phases,
// evaluation, expert/hidden-size sweeps and gain reports.
//
// Exit codes: 0 success, 2 usage error (bad flags, missing inputs),
// 3 runtime failure (numeric divergence, corrupt or mismatched artifacts,
// failed sweep cells).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "rmoe/rmoe.hpp"

#ifndef RMOE_GIT_DESCRIBE
#define RMOE_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace rmoe;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Files and manifests

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path);
}

void require_file(const std::string& path, const std::string& flag) {
  if (path.empty()) throw UsageError(flag + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(flag + ": no such file: " + path);
}

std::string prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("--out: cannot create directory " + dir);
  return dir;
}

std::string file_hash(const std::string& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : read_file(path)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One manifest per run directory; each invocation appends a record.
class Manifest {
 public:
  Manifest(std::string command, std::string out_dir)
      : out_dir_(std::move(out_dir)), started_(utc_now()) {
    record_["command"] = std::move(command);
    record_["version"] = RMOE_GIT_DESCRIBE;
    record_["config"] = json::object();
    record_["inputs"] = json::object();
    record_["artifacts"] = json::array();
  }
  void config(const std::string& key, json value) { record_["config"][key] = std::move(value); }
  void input(const std::string& path) { record_["inputs"][path] = file_hash(path); }
  void artifact(const std::string& path) { record_["artifacts"].push_back(path); }
  void extra(const std::string& key, json value) { record_[key] = std::move(value); }

  void commit() {
    record_["started"] = started_;
    record_["finished"] = utc_now();
    const std::string path = (fs::path(out_dir_) / "run.json").string();
    json runs = json::array();
    if (fs::exists(path)) {
      runs = json::parse(read_file(path), nullptr, false);
      if (!runs.is_array()) throw Error("existing manifest " + path + " is not a JSON array");
    }
    runs.push_back(record_);
    write_file(path, runs.dump(2) + "\n");
  }

 private:
  std::string out_dir_;
  std::string started_;
  json record_;
};

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// Shared training flags

struct TrainFlags {
  std::string data;
  std::string out;
  TrainConfig cfg;
  bool decoupled = false;
  bool quiet = false;

  void add_to(CLI::App* sub) {
    sub->add_option("--data", data, "Dataset directory written by gen-data")->required();
    sub->add_option("--out", out, "Output run directory")->required();
    sub->add_option("--lr", cfg.lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--l2", cfg.l2, "L2 weight")->capture_default_str();
    sub->add_option("--epochs", cfg.max_epochs, "Maximum epochs")->capture_default_str();
    sub->add_option("--patience", cfg.patience, "Early-stopping patience")->capture_default_str();
    sub->add_option("--batch-size", cfg.batch_size, "Sequences per update")->capture_default_str();
    sub->add_option("--val-fraction", cfg.val_fraction, "Validation hold-out of the training split")
        ->capture_default_str();
    sub->add_option("--seed", cfg.seed, "Seed for init, shuffling and the validation split")
        ->capture_default_str();
    sub->add_flag("--decoupled-decay", decoupled, "Apply l2 as decoupled weight decay");
    sub->add_flag("--quiet", quiet, "Do not print per-epoch progress");
  }

  void finalize() {
    if (decoupled) cfg.decay = WeightDecay::decoupled;
    try {
      cfg.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }

  void record(Manifest& m) const {
    m.config("data", data);
    m.config("lr", cfg.lr);
    m.config("l2", cfg.l2);
    m.config("epochs", cfg.max_epochs);
    m.config("patience", cfg.patience);
    m.config("batch_size", cfg.batch_size);
    m.config("val_fraction", cfg.val_fraction);
    m.config("seed", cfg.seed);
    m.config("decay", decoupled ? "decoupled" : "coupled");
  }
};

struct DataDir {
  std::string train_path, test_path, world_path;
};

DataDir data_dir(const std::string& dir) {
  DataDir d{join(dir, "train.jsonl"), join(dir, "test.jsonl"), join(dir, "world.json")};
  if (!fs::is_directory(dir)) throw UsageError("--data: no such directory: " + dir);
  return d;
}

template <class Model>
FitHooks<Model> progress_hooks(bool quiet) {
  FitHooks<Model> h;
  if (!quiet) {
    h.on_epoch_end = [](std::size_t epoch, Model&) {
      std::fprintf(stderr, "  epoch %zu done\n", epoch);
    };
  }
  return h;
}

std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,best\n";
  char buf[96];
  std::snprintf(buf, sizeof buf, "0,n/a,%.17g,%d\n", h.initial_val_loss, h.best_epoch == 0);
  os << buf;
  for (const auto& e : h.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%d\n", e.epoch, e.train_loss, e.val_loss,
                  e.epoch == h.best_epoch);
    os << buf;
  }
  return os.str();
}

template <class Model>
void write_training_artifacts(const std::string& out, const TrainResult<Model>& r,
                              const EventVocabulary& vocab, Manifest& m) {
  const std::string ckpt = join(out, "model.json");
  const std::string hist = join(out, "history.csv");
  save_checkpoint(ckpt, AnyModel{r.model}, vocab);
  write_file(hist, history_csv(r.history));
  m.artifact(ckpt);
  m.artifact(hist);
  json seconds = json::array();
  for (const auto& e : r.history.epochs) seconds.push_back(e.seconds);
  m.extra("epoch_seconds", std::move(seconds));
  m.extra("epochs_run", r.history.epochs_run());
  m.extra("best_epoch", r.history.best_epoch);
  m.extra("best_val_loss", r.history.best_val_loss());
  m.commit();
  std::printf("epochs run: %zu, best epoch: %zu, best validation loss: %.6f\n",
              r.history.epochs_run(), r.history.best_epoch, r.history.best_val_loss());
  std::printf("checkpoint: %s\n", ckpt.c_str());
}

struct LoadedTrain {
  DatasetFile file;
  std::vector<WindowedSequence> train, val;
};

LoadedTrain load_training_split(const TrainFlags& f, Manifest& m) {
  const DataDir d = data_dir(f.data);
  require_file(d.train_path, "--data");
  LoadedTrain t;
  t.file = load_dataset(d.train_path);
  m.input(d.train_path);
  if (t.file.sequences.size() < 2) throw UsageError("training split needs at least 2 sequences");
  std::tie(t.train, t.val) = split_validation(t.file.sequences, f.cfg.val_fraction, f.cfg.seed);
  return t;
}

Combine parse_combine(const std::string& s) {
  try {
    return combine_from_string(s);
  } catch (const Error& e) {
    throw UsageError(std::string("--combine: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataFlags {
  std::size_t k = 4;
  std::size_t n_events = 30;
  std::size_t n_seqs = 2500;
  std::size_t len_min = 10;
  std::size_t len_max = 20;
  double window = 24.0;
  double train_ratio = 0.8;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_data(const GenDataFlags& f) {
  if (f.k < 1) throw UsageError("--k-subpops must be >= 1");
  if (f.n_events < 1) throw UsageError("--n-events must be >= 1");
  if (f.n_seqs < 2) throw UsageError("--n-seqs must be >= 2");
  if (f.len_min < 2) throw UsageError("--len-min must be >= 2 (a sequence needs two windows)");
  if (f.len_max < f.len_min) throw UsageError("--len-max must be >= --len-min");
  if (!(f.window > 0.0)) throw UsageError("--window must be positive");
  if (!(f.train_ratio > 0.0 && f.train_ratio < 1.0)) throw UsageError("--train-ratio must be in (0,1)");
  const std::string out = prepare_out_dir(f.out);

  Manifest m("gen-data", out);
  m.config("k_subpops", f.k);
  m.config("n_events", f.n_events);
  m.config("n_seqs", f.n_seqs);
  m.config("len_min", f.len_min);
  m.config("len_max", f.len_max);
  m.config("window", f.window);
  m.config("train_ratio", f.train_ratio);
  m.config("seed", f.seed);

  WorldSpec spec;
  spec.subpopulations = f.k;
  spec.n_events = f.n_events;
  const SyntheticWorld world = make_world(spec, split_seed(f.seed, 0));
  const SyntheticData data =
      generate_synthetic(world, f.n_seqs, f.len_min, f.len_max, split_seed(f.seed, 1));
  const DatasetSplit split = split_train_test(data.sequences, f.train_ratio, split_seed(f.seed, 2));
  const EventVocabulary vocab = EventVocabulary::numbered(f.n_events);

  DatasetHeader header;
  header.vocab = vocab;
  header.window_hours = f.window;
  header.seed = f.seed;
  const std::string train_path = join(out, "train.jsonl");
  const std::string test_path = join(out, "test.jsonl");
  const std::string vocab_path = join(out, "vocab.json");
  const std::string world_path = join(out, "world.json");
  header.partition = "train";
  save_dataset(train_path, header, split.train);
  header.partition = "test";
  save_dataset(test_path, header, split.test);
  save_vocabulary(vocab_path, vocab);

  json labels = json::object();
  for (std::size_t i = 0; i < data.sequences.size(); ++i) labels[data.sequences[i].id] = data.labels[i];
  json wj{{"world", world_to_json(world)}, {"labels", std::move(labels)}, {"seed", f.seed}};
  write_file(world_path, wj.dump() + "\n");
  for (const auto& p : {train_path, test_path, vocab_path, world_path}) m.artifact(p);
  m.commit();

  std::size_t windows = 0;
  for (const auto& s : data.sequences) windows += s.length();
  const auto occ = occurrence_ratio(data.sequences, vocab);
  double mean_occ = 0.0;
  for (double o : occ) mean_occ += o;
  mean_occ /= static_cast<double>(occ.size());
  std::printf("sequences: %zu (train %zu, test %zu)\n", data.sequences.size(), split.train.size(),
              split.test.size());
  std::printf("windows: %zu, event types: %zu, subpopulations: %zu\n", windows, f.n_events, f.k);
  std::printf("mean occurrence ratio: %.6f\n", mean_occ);
  return 0;
}

// ---------------------------------------------------------------------------
// Training commands

struct BaseFlags {
  TrainFlags t;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 512;
};

int cmd_train_base(BaseFlags& f) {
  f.t.finalize();
  if (f.embed_dim < 1 || f.hidden_dim < 1) throw UsageError("dimensions must be >= 1");
  const std::string out = prepare_out_dir(f.t.out);
  Manifest m("train-base", out);
  f.t.record(m);
  m.config("embed_dim", f.embed_dim);
  m.config("hidden_dim", f.hidden_dim);
  const LoadedTrain d = load_training_split(f.t, m);
  ModelConfig mc;
  mc.embed_dim = f.embed_dim;
  mc.hidden_dim = f.hidden_dim;
  const auto r = train_base(d.train, d.val, d.file.header.vocab, mc, f.t.cfg,
                            progress_hooks<BaseModel>(f.t.quiet));
  write_training_artifacts(out, r, d.file.header.vocab, m);
  return 0;
}

struct RmoeFlags {
  TrainFlags t;
  std::string base_checkpoint;
  std::size_t experts = ModelConfig{}.n_experts;
  std::size_t hidden_dim = ModelConfig{}.expert_hidden_dim;
  std::string combine = to_string(ModelConfig{}.combine);
  double expert_bias = std::numeric_limits<double>::quiet_NaN();  // NaN: mode default
  bool no_freeze = false;

  RmoeFlags() { t.cfg = TrainConfig::rmoe_defaults(); }
};

BaseModel load_base(const std::string& path, Manifest* m) {
  require_file(path, "--base-checkpoint");
  Checkpoint c = load_checkpoint(path);
  if (m) m->input(path);
  auto* base = std::get_if<BaseModel>(&c.model);
  if (!base) throw Error("--base-checkpoint: expected a base model, found kind " + model_kind(c.model));
  return std::move(*base);
}

int cmd_train_rmoe(RmoeFlags& f) {
  if (f.base_checkpoint.empty()) throw UsageError("train-rmoe requires --base-checkpoint");
  require_file(f.base_checkpoint, "--base-checkpoint");
  f.t.finalize();
  if (f.experts < 1 || f.hidden_dim < 1) throw UsageError("--experts and --hidden-dim must be >= 1");
  ModelConfig mc;
  mc.n_experts = f.experts;
  mc.expert_hidden_dim = f.hidden_dim;
  mc.combine = parse_combine(f.combine);
  if (!std::isnan(f.expert_bias)) mc.expert_bias = f.expert_bias;
  const std::string out = prepare_out_dir(f.t.out);
  Manifest m("train-rmoe", out);
  f.t.record(m);
  m.config("base_checkpoint", f.base_checkpoint);
  m.config("experts", f.experts);
  m.config("hidden_dim", f.hidden_dim);
  m.config("combine", f.combine);
  m.config("expert_bias", mc.initial_expert_bias());
  m.config("freeze", !f.no_freeze);
  const BaseModel base = load_base(f.base_checkpoint, &m);
  const LoadedTrain d = load_training_split(f.t, m);
  const auto r = train_rmoe(base, d.train, d.val, d.file.header.vocab, mc, f.t.cfg, !f.no_freeze,
                            progress_hooks<RmoeModel>(f.t.quiet));
  m.extra("base_parameter_hash", hex64(parameter_hash(base)));
  write_training_artifacts(out, r, d.file.header.vocab, m);
  return 0;
}

struct MoeFlags {
  TrainFlags t;
  std::size_t embed_dim = 64;
  std::size_t experts = ModelConfig{}.n_experts;
  std::size_t hidden_dim = ModelConfig{}.expert_hidden_dim;
};

int cmd_train_moe(MoeFlags& f) {
  f.t.finalize();
  if (f.embed_dim < 1 || f.experts < 1 || f.hidden_dim < 1) throw UsageError("dimensions must be >= 1");
  const std::string out = prepare_out_dir(f.t.out);
  Manifest m("train-moe", out);
  f.t.record(m);
  m.config("embed_dim", f.embed_dim);
  m.config("experts", f.experts);
  m.config("hidden_dim", f.hidden_dim);
  const LoadedTrain d = load_training_split(f.t, m);
  ModelConfig mc;
  mc.embed_dim = f.embed_dim;
  mc.n_experts = f.experts;
  mc.expert_hidden_dim = f.hidden_dim;
  const auto r = train_moe_ablation(d.train, d.val, d.file.header.vocab, mc, f.t.cfg,
                                    progress_hooks<StandaloneMoe>(f.t.quiet));
  write_training_artifacts(out, r, d.file.header.vocab, m);
  return 0;
}

int cmd_train_lr(TrainFlags& f) {
  f.finalize();
  const std::string out = prepare_out_dir(f.out);
  Manifest m("train-lr", out);
  f.record(m);
  const LoadedTrain d = load_training_split(f, m);
  const auto r = train_lr(d.train, d.val, d.file.header.vocab, f.cfg, progress_hooks<LrModel>(f.quiet));
  write_training_artifacts(out, r, d.file.header.vocab, m);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  std::string checkpoint;
  std::string data;
  std::string test;
  std::string out;
  bool oracle = false;
  std::string world;
};

std::vector<std::size_t> world_labels(const json& wj, const std::vector<WindowedSequence>& seqs) {
  const json& labels = wj.at("labels");
  std::vector<std::size_t> out;
  for (const auto& s : seqs) {
    auto it = labels.find(s.id);
    if (it == labels.end()) throw Error("world file has no latent label for sequence " + s.id);
    out.push_back(it->get<std::size_t>());
  }
  return out;
}

int cmd_eval(const EvalFlags& f) {
  if (f.oracle && f.world.empty()) throw UsageError("--oracle requires --world");
  if (f.checkpoint.empty() && !f.oracle) throw UsageError("eval needs --checkpoint or --oracle");
  std::string test_path = f.test;
  if (test_path.empty()) {
    if (f.data.empty()) throw UsageError("eval needs --data or --test");
    test_path = data_dir(f.data).test_path;
  }
  require_file(test_path, f.test.empty() ? "--data" : "--test");
  if (!f.checkpoint.empty()) require_file(f.checkpoint, "--checkpoint");
  if (f.oracle) require_file(f.world, "--world");
  const std::string out = prepare_out_dir(f.out);

  Manifest m("eval", out);
  m.config("checkpoint", f.checkpoint);
  m.config("test", test_path);
  m.config("oracle", f.oracle);
  m.config("world", f.world);
  m.input(test_path);

  if (!f.checkpoint.empty()) {
    const Checkpoint c = load_checkpoint(f.checkpoint);
    m.input(f.checkpoint);
    const DatasetFile test = load_dataset(test_path, vocab_hash(c.vocab));
    const MetricsReport r = evaluate(c.model, test.sequences, c.vocab);
    const std::string path = join(out, "metrics.csv");
    write_file(path, metrics_csv(r));
    m.artifact(path);
    std::printf("%s macro AUPRC: %s (%zu of %zu types evaluated)\n", model_kind(c.model).c_str(),
                fmt6(r.macro).c_str(), r.evaluated(), r.auprc.size());
    m.extra("macro_auprc", r.macro);
  }
  if (f.oracle) {
    const json wj = json::parse(read_file(f.world));
    m.input(f.world);
    const SyntheticWorld world = world_from_json(wj.at("world"));
    const DatasetFile test = load_dataset(test_path);
    const EventVocabulary& vocab = test.header.vocab;
    if (vocab.n_inputs() != world.n_events) throw Error("world and dataset disagree on the event count");
    const auto pairs = collect_oracle_scores(test.sequences, world_labels(wj, test.sequences), vocab, world);
    const MetricsReport r = make_report(pairs, vocab, occurrence_ratio(test.sequences, vocab));
    const std::string path = join(out, "oracle_metrics.csv");
    write_file(path, metrics_csv(r));
    m.artifact(path);
    std::printf("oracle macro AUPRC: %s\n", fmt6(r.macro).c_str());
    m.extra("oracle_macro_auprc", r.macro);
  }
  m.commit();
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepFlags {
  std::string base_checkpoint;
  std::string data;
  std::string out;
  std::vector<std::size_t> experts{std::begin(SearchGrid::experts), std::end(SearchGrid::experts)};
  std::vector<std::size_t> hidden_dims{std::begin(SearchGrid::hidden_dims),
                                       std::end(SearchGrid::hidden_dims)};
  std::vector<std::uint64_t> seeds{0};
  bool ablation = false;
  std::size_t jobs = 1;
  TrainConfig rmoe_cfg = TrainConfig::rmoe_defaults();
  TrainConfig moe_cfg = TrainConfig::base_defaults();
  std::string combine = to_string(ModelConfig{}.combine);
  double expert_bias = std::numeric_limits<double>::quiet_NaN();  // NaN: mode default
};

struct SweepCell {
  std::string model;  // "rmoe" or "moe"
  std::size_t n = 0;
  std::size_t hidden = 0;
  std::uint64_t seed = 0;
  std::optional<double> macro;
  std::string error;
};

int cmd_sweep(SweepFlags& f) {
  if (f.base_checkpoint.empty()) throw UsageError("sweep requires --base-checkpoint");
  require_file(f.base_checkpoint, "--base-checkpoint");
  const DataDir d = data_dir(f.data);
  require_file(d.train_path, "--data");
  require_file(d.test_path, "--data");
  if (f.experts.empty() || f.hidden_dims.empty() || f.seeds.empty()) {
    throw UsageError("--experts, --hidden-dims and --seeds must be non-empty");
  }
  for (auto n : f.experts) {
    if (n < 1) throw UsageError("--experts entries must be >= 1");
  }
  for (auto h : f.hidden_dims) {
    if (h < 1) throw UsageError("--hidden-dims entries must be >= 1");
  }
  if (f.jobs < 1) throw UsageError("--jobs must be >= 1");
  const Combine combine = parse_combine(f.combine);
  try {
    f.rmoe_cfg.validate();
    f.moe_cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const std::string out = prepare_out_dir(f.out);

  Manifest m("sweep", out);
  m.config("base_checkpoint", f.base_checkpoint);
  m.config("data", f.data);
  m.config("experts", f.experts);
  m.config("hidden_dims", f.hidden_dims);
  m.config("seeds", f.seeds);
  m.config("ablation", f.ablation);
  m.config("jobs", f.jobs);
  m.config("combine", f.combine);
  if (std::isnan(f.expert_bias)) {
    m.config("expert_bias", "mode default");
  } else {
    m.config("expert_bias", f.expert_bias);
  }
  m.config("lr", f.rmoe_cfg.lr);
  m.config("l2", f.rmoe_cfg.l2);
  m.config("moe_lr", f.moe_cfg.lr);
  m.config("moe_l2", f.moe_cfg.l2);
  m.config("epochs", f.rmoe_cfg.max_epochs);
  m.config("patience", f.rmoe_cfg.patience);

  const BaseModel base = load_base(f.base_checkpoint, &m);
  const DatasetFile train_file = load_dataset(d.train_path);
  const DatasetFile test_file = load_dataset(d.test_path, vocab_hash(train_file.header.vocab));
  m.input(d.train_path);
  m.input(d.test_path);
  const EventVocabulary& vocab = train_file.header.vocab;

  std::vector<SweepCell> cells;
  for (auto seed : f.seeds) {
    for (auto n : f.experts) {
      for (auto h : f.hidden_dims) {
        cells.push_back({"rmoe", n, h, seed, std::nullopt, {}});
        if (f.ablation) cells.push_back({"moe", n, h, seed, std::nullopt, {}});
      }
    }
  }

  std::mutex io;
  auto run_cell = [&](SweepCell& c) {
    try {
      TrainConfig cfg = c.model == "rmoe" ? f.rmoe_cfg : f.moe_cfg;
      cfg.seed = c.seed;
      const auto [train, val] = split_validation(train_file.sequences, cfg.val_fraction, cfg.seed);
      ModelConfig mc;
      mc.embed_dim = base.embed_dim();
      mc.n_experts = c.n;
      mc.expert_hidden_dim = c.hidden;
      mc.combine = combine;
      if (!std::isnan(f.expert_bias)) mc.expert_bias = f.expert_bias;
      const AnyModel model = c.model == "rmoe"
                                 ? AnyModel{train_rmoe(base, train, val, vocab, mc, cfg).model}
                                 : AnyModel{train_moe_ablation(train, val, vocab, mc, cfg).model};
      const MetricsReport r = evaluate(model, test_file.sequences, vocab);
      const std::string cell_dir = join(join(out, "cells"), c.model + "-n" + std::to_string(c.n) +
                                                                "-d" + std::to_string(c.hidden) +
                                                                "-s" + std::to_string(c.seed));
      fs::create_directories(cell_dir);
      write_file(join(cell_dir, "metrics.csv"), metrics_csv(r));
      c.macro = r.macro;
      std::lock_guard lock(io);
      std::fprintf(stderr, "  %s n=%zu d'=%zu seed=%llu macro AUPRC %s\n", c.model.c_str(), c.n,
                   c.hidden, static_cast<unsigned long long>(c.seed), fmt6(r.macro).c_str());
    } catch (const std::exception& e) {
      c.error = e.what();
      std::lock_guard lock(io);
      std::fprintf(stderr, "  %s n=%zu d'=%zu seed=%llu FAILED: %s\n", c.model.c_str(), c.n,
                   c.hidden, static_cast<unsigned long long>(c.seed), e.what());
    }
  };

  // Cells are share-nothing; results land in their fixed slot, so the CSV
  // does not depend on scheduling.
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(cells[i]);
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::min(f.jobs, cells.size()); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream csv;
  csv << "model,n_experts,expert_hidden_dim,seed,macro_auprc,status\n";
  std::size_t failed = 0;
  for (const auto& c : cells) {
    csv << c.model << ',' << c.n << ',' << c.hidden << ',' << c.seed << ','
        << (c.macro ? fmt6(*c.macro) : "n/a") << ',' << (c.error.empty() ? "ok" : "failed") << '\n';
    failed += !c.error.empty();
  }
  const std::string path = join(out, "sweep.csv");
  write_file(path, csv.str());
  m.artifact(path);
  m.extra("failed_cells", failed);
  m.commit();
  std::printf("sweep: %zu cells, %zu failed; summary in %s\n", cells.size(), failed, path.c_str());
  return failed == 0 ? 0 : 3;
}

// ---------------------------------------------------------------------------
// report

struct ReportFlags {
  std::string base;
  std::string challenger;
  std::string out;
};

int cmd_report(const ReportFlags& f) {
  require_file(f.base, "--base");
  require_file(f.challenger, "--challenger");
  const std::string out = prepare_out_dir(f.out);
  Manifest m("report", out);
  m.config("base", f.base);
  m.config("challenger", f.challenger);
  m.input(f.base);
  m.input(f.challenger);
  const auto rows = gain_report(load_metrics_csv(f.base), load_metrics_csv(f.challenger));
  const std::string gains = join(out, "gains.csv");
  const std::string plot = join(out, "gain_vs_occurrence.csv");
  write_file(gains, gains_csv(rows));
  write_file(plot, gain_vs_occurrence_csv(rows));
  m.artifact(gains);
  m.artifact(plot);
  m.commit();
  const GainRow& macro = rows.back();
  std::printf("macro AUPRC: base %s, challenger %s, gain %s%%\n", fmt6(macro.base.value_or(0)).c_str(),
              fmt6(macro.challenger.value_or(0)).c_str(),
              macro.gain_pct ? fmt6(*macro.gain_pct).c_str() : "n/a");
  return 0;
}

void add_config(CLI::App* sub) {
  // Expanded by expand_config before parsing; registered so --help shows it.
  sub->add_option("--config", "Flat key=value file; keys are long flag names without dashes. "
                              "Flags given on the command line take precedence");
}

// Rewrites `--config FILE` into `--key=value` tokens for every key not
// already given explicitly. Blank lines and lines starting with '#' are
// skipped.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) return args;
  require_file(path, "--config");
  auto given = [&rest](const std::string& key) {
    const std::string flag = "--" + key;
    return std::any_of(rest.begin(), rest.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  std::ifstream in(path);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> injected;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    auto trim = [](std::string x) {
      const auto a = x.find_first_not_of(" \t\r");
      const auto b = x.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : x.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(path + ":" + std::to_string(line_no) + ": empty key");
    if (!given(key)) injected.push_back("--" + key + "=" + value);
  }
  // Subcommand name first, then file values, then the explicit flags.
  std::vector<std::string> out;
  std::size_t i = 0;
  if (!rest.empty() && rest[0].rfind("-", 0) != 0) out.push_back(rest[i++]);
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(i), rest.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual mixture-of-experts sequence models: data, training, evaluation"};
  app.set_version_flag("--version", RMOE_GIT_DESCRIBE);
  app.require_subcommand(1);

  GenDataFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic multi-subpopulation dataset");
  add_config(gen_cmd);
  gen_cmd->add_option("--k-subpops", gen.k, "Number of latent subpopulations")->capture_default_str();
  gen_cmd->add_option("--n-events", gen.n_events, "Number of event types")->capture_default_str();
  gen_cmd->add_option("--n-seqs", gen.n_seqs, "Number of sequences")->capture_default_str();
  gen_cmd->add_option("--len-min", gen.len_min, "Minimum windows per sequence (>= 2)")->capture_default_str();
  gen_cmd->add_option("--len-max", gen.len_max, "Maximum windows per sequence")->capture_default_str();
  gen_cmd->add_option("--window", gen.window, "Window width in hours (recorded in headers)")
      ->capture_default_str();
  gen_cmd->add_option("--train-ratio", gen.train_ratio, "Train fraction of the train/test split")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();

  BaseFlags base;
  auto* base_cmd = app.add_subcommand("train-base", "Train the population-wide GRU model");
  add_config(base_cmd);
  base.t.add_to(base_cmd);
  base_cmd->add_option("--embed-dim", base.embed_dim, "Embedding width")->capture_default_str();
  base_cmd->add_option("--hidden-dim", base.hidden_dim, "GRU hidden width")->capture_default_str();

  RmoeFlags rmoe;
  auto* rmoe_cmd = app.add_subcommand("train-rmoe", "Train a residual mixture on a frozen base model");
  add_config(rmoe_cmd);
  rmoe.t.add_to(rmoe_cmd);
  rmoe_cmd->add_option("--base-checkpoint", rmoe.base_checkpoint, "Base model checkpoint");
  rmoe_cmd->add_option("--experts", rmoe.experts, "Number of experts")->capture_default_str();
  rmoe_cmd->add_option("--hidden-dim", rmoe.hidden_dim, "Expert and gate hidden width")
      ->capture_default_str();
  rmoe_cmd->add_option("--combine", rmoe.combine, "prob_sum or logit_sum")->capture_default_str();
  rmoe_cmd->add_option("--expert-bias", rmoe.expert_bias,
                     "Initial expert head bias (default -5 for prob_sum, 0 for logit_sum)");
  rmoe_cmd->add_flag("--no-freeze", rmoe.no_freeze, "Also update the base model (control runs only)");

  MoeFlags moe;
  auto* moe_cmd = app.add_subcommand("train-moe", "Train a plain mixture from scratch (ablation)");
  add_config(moe_cmd);
  moe.t.add_to(moe_cmd);
  moe_cmd->add_option("--embed-dim", moe.embed_dim, "Embedding width")->capture_default_str();
  moe_cmd->add_option("--experts", moe.experts, "Number of experts")->capture_default_str();
  moe_cmd->add_option("--hidden-dim", moe.hidden_dim, "Expert and gate hidden width")
      ->capture_default_str();

  TrainFlags lr;
  auto* lr_cmd = app.add_subcommand("train-lr", "Train the logistic-regression baseline");
  add_config(lr_cmd);
  lr.add_to(lr_cmd);

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "Per-type and macro AUPRC on a test split");
  add_config(eval_cmd);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
  eval_cmd->add_option("--data", ev.data, "Dataset directory (uses test.jsonl)");
  eval_cmd->add_option("--test", ev.test, "Explicit test dataset file");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_flag("--oracle", ev.oracle, "Also score the exact generator (needs --world)");
  eval_cmd->add_option("--world", ev.world, "world.json written by gen-data");

  SweepFlags sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid over expert count and hidden width");
  add_config(sweep_cmd);
  sweep_cmd->add_option("--base-checkpoint", sw.base_checkpoint, "Base model checkpoint");
  sweep_cmd->add_option("--data", sw.data, "Dataset directory")->required();
  sweep_cmd->add_option("--out", sw.out, "Output directory")->required();
  sweep_cmd->add_option("--experts", sw.experts, "Expert counts")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--hidden-dims", sw.hidden_dims, "Expert hidden widths")
      ->delimiter(',')
      ->capture_default_str();
  sweep_cmd->add_option("--seeds", sw.seeds, "Seeds")->delimiter(',')->capture_default_str();
  sweep_cmd->add_flag("--ablation", sw.ablation, "Also train a plain mixture per cell");
  sweep_cmd->add_option("--jobs", sw.jobs, "Parallel cells")->capture_default_str();
  sweep_cmd->add_option("--combine", sw.combine, "prob_sum or logit_sum")->capture_default_str();
  sweep_cmd->add_option("--expert-bias", sw.expert_bias,
                     "Initial expert head bias (default -5 for prob_sum, 0 for logit_sum)");
  sweep_cmd->add_option("--lr", sw.rmoe_cfg.lr, "Residual mixture learning rate")->capture_default_str();
  sweep_cmd->add_option("--l2", sw.rmoe_cfg.l2, "Residual mixture L2 weight")->capture_default_str();
  sweep_cmd->add_option("--moe-lr", sw.moe_cfg.lr, "Plain mixture learning rate")->capture_default_str();
  sweep_cmd->add_option("--moe-l2", sw.moe_cfg.l2, "Plain mixture L2 weight")->capture_default_str();
  std::size_t sweep_epochs = sw.rmoe_cfg.max_epochs;
  std::size_t sweep_patience = sw.rmoe_cfg.patience;
  sweep_cmd->add_option("--epochs", sweep_epochs, "Maximum epochs per cell")->capture_default_str();
  sweep_cmd->add_option("--patience", sweep_patience, "Early-stopping patience")->capture_default_str();

  ReportFlags rep;
  auto* report_cmd = app.add_subcommand("report", "Per-type gains of a challenger over a base model");
  add_config(report_cmd);
  report_cmd->add_option("--base", rep.base, "Base metrics.csv");
  report_cmd->add_option("--challenger", rep.challenger, "Challenger metrics.csv");
  report_cmd->add_option("--out", rep.out, "Output directory")->required();

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
    app.parse(args);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (base_cmd->parsed()) return cmd_train_base(base);
    if (rmoe_cmd->parsed()) return cmd_train_rmoe(rmoe);
    if (moe_cmd->parsed()) return cmd_train_moe(moe);
    if (lr_cmd->parsed()) return cmd_train_lr(lr);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (sweep_cmd->parsed()) {
      sw.rmoe_cfg.max_epochs = sw.moe_cfg.max_epochs = sweep_epochs;
      sw.rmoe_cfg.patience = sw.moe_cfg.patience = sweep_patience;
      return cmd_sweep(sw);
    }
    if (report_cmd->parsed()) return cmd_report(rep);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}

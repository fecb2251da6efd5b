#pragma once

// Model checkpoints as a single JSON document:
//
//   {
//     "format": "rmoe-checkpoint", "format_version": 1,
//     "kind": "base" | "rmoe" | "moe" | "lr",
//     "vocab_hash": "<16 hex digits>",
//     "vocab": {"input_names": [...], "target_indices": [...]},
//     "hyper": {"embed_dim": 64, "hidden_dim": 512, "expert_hidden_dim": 64,
//               "n_experts": 50, "combine": "prob_sum"},
//     "frozen": true,
//     "tensors": [{"name": "base.gru.W_r", "shape": [512, 64], "data": [...]}, ...]
//   }
//
// Vectors have a one-element shape. Doubles are written in shortest
// round-trip form, so load(save(m)) reproduces every parameter bit.

#include <fstream>
#include <string>
#include <variant>

#include <json.hpp>

#include "rmoe/data.hpp"
#include "rmoe/models.hpp"

namespace rmoe {

struct Checkpoint {
  AnyModel model;
  EventVocabulary vocab;
};

namespace detail {

struct Hyper {
  std::size_t embed_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t expert_hidden_dim = 0;
  std::size_t n_experts = 0;
  Combine combine = Combine::prob_sum;
  bool frozen = false;
};

inline Hyper hyper_of(const AnyModel& m) {
  Hyper h;
  std::visit(
      [&h](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, BaseModel>) {
          h.embed_dim = x.embed_dim();
          h.hidden_dim = x.hidden_dim();
        } else if constexpr (std::is_same_v<T, RmoeModel>) {
          h.embed_dim = x.base.embed_dim();
          h.hidden_dim = x.base.hidden_dim();
          h.expert_hidden_dim = x.moe.hidden_dim();
          h.n_experts = x.moe.n_experts();
          h.combine = x.combine;
          h.frozen = x.frozen;
        } else if constexpr (std::is_same_v<T, StandaloneMoe>) {
          h.embed_dim = x.emb.dim();
          h.expert_hidden_dim = x.moe.hidden_dim();
          h.n_experts = x.moe.n_experts();
        }
      },
      m);
  return h;
}

inline AnyModel zero_model(const std::string& kind, const Hyper& h, const EventVocabulary& v) {
  const std::size_t ne = v.n_inputs();
  const std::size_t nt = v.n_targets();
  if (kind == "base") return BaseModel::zeros(ne, nt, h.embed_dim, h.hidden_dim);
  if (kind == "rmoe") {
    RmoeModel m;
    m.base = BaseModel::zeros(ne, nt, h.embed_dim, h.hidden_dim);
    m.moe = MoeModel::zeros(h.embed_dim, h.expert_hidden_dim, h.n_experts, nt);
    m.combine = h.combine;
    m.frozen = h.frozen;
    return m;
  }
  if (kind == "moe") {
    return StandaloneMoe{EmbeddingParams::zeros(ne, h.embed_dim),
                         MoeModel::zeros(h.embed_dim, h.expert_hidden_dim, h.n_experts, nt)};
  }
  if (kind == "lr") return LrModel::zeros(ne, nt);
  throw Error("checkpoint: unknown model kind '" + kind + "'");
}

}  // namespace detail

inline json checkpoint_to_json(const AnyModel& model, const EventVocabulary& vocab) {
  const detail::Hyper h = detail::hyper_of(model);
  json j;
  j["format"] = "rmoe-checkpoint";
  j["format_version"] = 1;
  j["kind"] = model_kind(model);
  j["vocab_hash"] = hex64(vocab_hash(vocab));
  j["vocab"] = vocab_to_json(vocab);
  j["hyper"] = {{"embed_dim", h.embed_dim},
                {"hidden_dim", h.hidden_dim},
                {"expert_hidden_dim", h.expert_hidden_dim},
                {"n_experts", h.n_experts},
                {"combine", to_string(h.combine)}};
  j["frozen"] = h.frozen;
  json tensors = json::array();
  std::visit(
      [&tensors](const auto& m) {
        for (const auto& t : tensor_refs_const(m)) {
          json shape = t.cols == 0 ? json::array({t.rows}) : json::array({t.rows, t.cols});
          tensors.push_back({{"name", t.name},
                             {"shape", std::move(shape)},
                             {"data", std::vector<double>(t.values.begin(), t.values.end())}});
        }
      },
      model);
  j["tensors"] = std::move(tensors);
  return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "rmoe-checkpoint") throw Error("not a checkpoint");
    if (j.at("format_version").get<int>() != 1) throw Error("unsupported checkpoint version");
    Checkpoint c;
    c.vocab = vocab_from_json(j.at("vocab"));
    if (hex64(vocab_hash(c.vocab)) != j.at("vocab_hash").get<std::string>()) {
      throw Error("checkpoint vocabulary does not match its recorded hash");
    }
    const json& hj = j.at("hyper");
    detail::Hyper h;
    h.embed_dim = hj.at("embed_dim").get<std::size_t>();
    h.hidden_dim = hj.at("hidden_dim").get<std::size_t>();
    h.expert_hidden_dim = hj.at("expert_hidden_dim").get<std::size_t>();
    h.n_experts = hj.at("n_experts").get<std::size_t>();
    h.combine = combine_from_string(hj.at("combine").get<std::string>());
    h.frozen = j.at("frozen").get<bool>();
    c.model = detail::zero_model(j.at("kind").get<std::string>(), h, c.vocab);
    const json& tensors = j.at("tensors");
    std::visit(
        [&tensors](auto& m) {
          auto refs = tensor_refs(m);
          if (refs.size() != tensors.size()) {
            throw Error("checkpoint: expected " + std::to_string(refs.size()) + " tensors, found " +
                        std::to_string(tensors.size()));
          }
          for (std::size_t k = 0; k < refs.size(); ++k) {
            const json& t = tensors[k];
            if (t.at("name").get<std::string>() != refs[k].name) {
              throw Error("checkpoint: expected tensor " + refs[k].name + ", found " +
                          t.at("name").get<std::string>());
            }
            const auto data = t.at("data").get<std::vector<double>>();
            if (data.size() != refs[k].values.size()) {
              throw Error("checkpoint: tensor " + refs[k].name + " has wrong size");
            }
            std::copy(data.begin(), data.end(), refs[k].values.begin());
          }
        },
        c.model);
    return c;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const AnyModel& model,
                            const EventVocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << checkpoint_to_json(model, vocab).dump() << '\n';
  if (!out) throw Error("write failed for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace rmoe

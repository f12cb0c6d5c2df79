// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Model configuration and its JSON schema. The loader accepts the upstream
// HuggingFace-style field names (hidden_size, num_hidden_layers, vocab_size,
// aux_loss_alpha, audio_expert_indices, hidden_act, ...) alongside this
// project's own fields; unknown fields are rejected by name.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mamoe/errors.hpp"
#include "mamoe/moe.hpp"

namespace mamoe::model {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int n_experts = 8;
  int k = 2;
  int d_ff = 64;
  int shared_d_ff = 64;
  int v_text = 64;
  int code_vocab = 64;
  int d_feat = 16;
  int max_seq_len = 64;
  moe::Variant variant = moe::Variant::mamoe;
  double aux_alpha = 0.001;
  bool renormalize_topk = false;
  std::uint64_t seed = 42;
  Precision precision = Precision::f64;
  std::vector<int> audio_expert_indices;  // empty selects the half split

  moe::ExpertPartition partition() const {
    if (audio_expert_indices.empty()) return moe::ExpertPartition::half_split(n_experts);
    std::vector<int> text;
    std::set<int> audio(audio_expert_indices.begin(), audio_expert_indices.end());
    for (int i = 0; i < n_experts; ++i)
      if (!audio.count(i)) text.push_back(i);
    return moe::ExpertPartition(n_experts, std::move(text), audio_expert_indices);
  }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(d_model, "hidden_size");
    positive(n_heads, "num_attention_heads");
    positive(n_experts, "n_experts");
    positive(k, "K");
    positive(d_ff, "intermediate_size");
    positive(shared_d_ff, "shared_d_ff");
    positive(v_text, "vocab_size");
    positive(code_vocab, "code_vocab");
    positive(d_feat, "d_feat");
    positive(max_seq_len, "max_seq_len");
    if (n_layers < 0) throw ConfigError("num_hidden_layers must be nonnegative");
    if (d_model % n_heads != 0)
      throw ConfigError("hidden_size " + std::to_string(d_model) +
                        " not divisible by num_attention_heads " + std::to_string(n_heads));
    if (aux_alpha < 0) throw ConfigError("aux_loss_alpha must be nonnegative");
    partition().validate();
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {

inline int get_int(const nlohmann::json& j, const std::string& key) {
  if (!j.at(key).is_number_integer())
    throw ConfigError("config field '" + key + "' must be an integer");
  return j.at(key).get<int>();
}

}  // namespace detail

inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");

  static const std::set<std::string> known = {
      // upstream-style fields
      "hidden_size", "num_hidden_layers", "num_attention_heads", "vocab_size",
      "intermediate_size", "aux_loss_alpha", "audio_expert_indices", "hidden_act",
      "n_routed_experts", "num_experts_per_tok", "torch_dtype",
      // accepted and ignored upstream fields
      "architectures", "auto_map", "attention_bias", "attention_dropout",
      "bos_token_id", "eos_token_id", "rope_scaling", "use_cache",
      "hubert_model_path", "quantizer_model_path",
      // project fields
      "n_experts", "K", "d_ff", "shared_d_ff", "code_vocab", "d_feat", "variant",
      "renormalize_topk", "seed", "max_seq_len", "precision", "n_heads"};

  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config field: " + key);

  ModelConfig cfg;
  cfg.audio_expert_indices.clear();

  if (j.contains("hidden_size")) cfg.d_model = detail::get_int(j, "hidden_size");
  if (j.contains("num_hidden_layers")) cfg.n_layers = detail::get_int(j, "num_hidden_layers");
  if (j.contains("num_attention_heads")) cfg.n_heads = detail::get_int(j, "num_attention_heads");
  if (j.contains("n_heads")) cfg.n_heads = detail::get_int(j, "n_heads");
  if (j.contains("vocab_size")) cfg.v_text = detail::get_int(j, "vocab_size");
  if (j.contains("intermediate_size")) cfg.d_ff = detail::get_int(j, "intermediate_size");
  if (j.contains("d_ff")) cfg.d_ff = detail::get_int(j, "d_ff");
  if (j.contains("shared_d_ff")) cfg.shared_d_ff = detail::get_int(j, "shared_d_ff");
  if (j.contains("code_vocab")) cfg.code_vocab = detail::get_int(j, "code_vocab");
  if (j.contains("d_feat")) cfg.d_feat = detail::get_int(j, "d_feat");
  if (j.contains("max_seq_len")) cfg.max_seq_len = detail::get_int(j, "max_seq_len");
  if (j.contains("n_routed_experts")) cfg.n_experts = detail::get_int(j, "n_routed_experts");
  if (j.contains("n_experts")) cfg.n_experts = detail::get_int(j, "n_experts");
  if (j.contains("num_experts_per_tok")) cfg.k = detail::get_int(j, "num_experts_per_tok");
  if (j.contains("K")) cfg.k = detail::get_int(j, "K");
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("aux_loss_alpha")) cfg.aux_alpha = j.at("aux_loss_alpha").get<double>();
  if (j.contains("renormalize_topk")) cfg.renormalize_topk = j.at("renormalize_topk").get<bool>();
  if (j.contains("variant"))
    cfg.variant = moe::variant_from_string(j.at("variant").get<std::string>());

  if (j.contains("hidden_act")) {
    const auto act = j.at("hidden_act").get<std::string>();
    if (act != "silu") throw ConfigError("hidden_act must be 'silu', got '" + act + "'");
  }

  if (j.contains("precision")) {
    const auto p = j.at("precision").get<std::string>();
    if (p == "f32") cfg.precision = Precision::f32;
    else if (p == "f64") cfg.precision = Precision::f64;
    else throw ConfigError("precision must be 'f32' or 'f64', got '" + p + "'");
  }
  if (j.contains("torch_dtype")) {
    // Closest supported working precision for upstream dtype names.
    const auto d = j.at("torch_dtype").get<std::string>();
    if (d == "bfloat16" || d == "float16" || d == "float32") cfg.precision = Precision::f32;
    else if (d == "float64" || d == "double") cfg.precision = Precision::f64;
    else throw ConfigError("unsupported torch_dtype: " + d);
  }

  if (j.contains("audio_expert_indices")) {
    const auto& arr = j.at("audio_expert_indices");
    if (!arr.is_array() || arr.empty())
      throw ConfigError("audio_expert_indices must be a non-empty array");
    for (const auto& v : arr) cfg.audio_expert_indices.push_back(v.get<int>());
    std::sort(cfg.audio_expert_indices.begin(), cfg.audio_expert_indices.end());
    if (!j.contains("n_experts") && !j.contains("n_routed_experts"))
      cfg.n_experts = cfg.audio_expert_indices.back() + 1;
  }

  cfg.validate();
  return cfg;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["hidden_size"] = cfg.d_model;
  j["num_hidden_layers"] = cfg.n_layers;
  j["num_attention_heads"] = cfg.n_heads;
  j["n_experts"] = cfg.n_experts;
  j["K"] = cfg.k;
  j["intermediate_size"] = cfg.d_ff;
  j["shared_d_ff"] = cfg.shared_d_ff;
  j["vocab_size"] = cfg.v_text;
  j["code_vocab"] = cfg.code_vocab;
  j["d_feat"] = cfg.d_feat;
  j["max_seq_len"] = cfg.max_seq_len;
  j["variant"] = moe::to_string(cfg.variant);
  j["aux_loss_alpha"] = cfg.aux_alpha;
  j["renormalize_topk"] = cfg.renormalize_topk;
  j["seed"] = cfg.seed;
  j["precision"] = to_string(cfg.precision);
  j["hidden_act"] = "silu";
  if (!cfg.audio_expert_indices.empty())
    j["audio_expert_indices"] = cfg.audio_expert_indices;
  return j;
}

}  // namespace mamoe::model

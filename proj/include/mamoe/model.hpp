// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy causal transformer: token/position embeddings, multi-head causal
// attention, pre-norm residual blocks with a MAMoE feed-forward path, a text
// LM head and an audio-code prediction head over the shared final states.

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mamoe/config.hpp"
#include "mamoe/moe.hpp"
#include "mamoe/rng.hpp"
#include "mamoe/stream.hpp"
#include "mamoe/tensor.hpp"

namespace mamoe::model {

using numkit::Tape;
using numkit::TensorPtr;

template <class T>
struct AttentionWeights {
  TensorPtr<T> wq, wk, wv, wo;  // each [d_model x d_model]
};

/// Multi-head scaled dot-product attention with a strict causal mask:
/// output row t depends only on input rows <= t.
template <class T>
TensorPtr<T> attention_forward(Tape<T>& tape, const TensorPtr<T>& hidden,
                               const AttentionWeights<T>& w, int n_heads) {
  const std::size_t d = hidden->cols();
  if (d % static_cast<std::size_t>(n_heads) != 0)
    throw ShapeError("attention: width of " + numkit::shape_str(*hidden) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  const std::size_t head_dim = d / static_cast<std::size_t>(n_heads);

  auto q = numkit::matmul(tape, hidden, w.wq);
  auto k = numkit::matmul(tape, hidden, w.wk);
  auto v = numkit::matmul(tape, hidden, w.wv);

  std::vector<TensorPtr<T>> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    std::vector<int> cols(head_dim);
    std::iota(cols.begin(), cols.end(), h * static_cast<int>(head_dim));
    auto qh = numkit::select_cols(tape, q, cols);
    auto kh = numkit::select_cols(tape, k, cols);
    auto vh = numkit::select_cols(tape, v, cols);
    auto scores = numkit::scale(tape, numkit::matmul_nt(tape, qh, kh),
                                T{1} / std::sqrt(static_cast<T>(head_dim)));
    auto probs = numkit::causal_softmax_rows(tape, scores);
    heads.push_back(numkit::matmul(tape, probs, vh));
  }
  auto merged = n_heads == 1 ? heads[0] : numkit::concat_cols(tape, heads);
  return numkit::matmul(tape, merged, w.wo);
}

template <class T>
struct Block {
  AttentionWeights<T> attn;
  TensorPtr<T> norm1_gain;
  TensorPtr<T> norm2_gain;
  moe::MoeLayer<T> moe;
};

template <class T>
struct BlockOutput {
  TensorPtr<T> hidden;
  std::vector<moe::RoutingDecision<T>> decisions;
  TensorPtr<T> aux_loss;
};

/// Pre-norm residual block: X = H + attn(norm(H)); H' = X + moe(norm(X)).
template <class T>
BlockOutput<T> block_forward(Tape<T>& tape, const TensorPtr<T>& hidden,
                             const std::vector<int>& modalities, const Block<T>& block,
                             int n_heads) {
  auto attn_out =
      attention_forward(tape, numkit::rmsnorm_rows(tape, hidden, block.norm1_gain),
                        block.attn, n_heads);
  auto x = numkit::add(tape, hidden, attn_out);
  auto moe_out =
      block.moe.forward(tape, numkit::rmsnorm_rows(tape, x, block.norm2_gain), modalities);
  return {numkit::add(tape, x, moe_out.output), std::move(moe_out.decisions),
          moe_out.aux_loss};
}

template <class T>
struct ForwardOutput {
  TensorPtr<T> text_logits;  // [L x V_text]
  TensorPtr<T> code_logits;  // [L x code_vocab]
  TensorPtr<T> aux_loss;     // scalar, mean over layers
  std::vector<std::vector<moe::RoutingDecision<T>>> decisions;  // per layer
  std::vector<int> modalities;  // m_t per token
};

/// Supervision for one position: which head scores it and the target id.
struct Target {
  enum class Head { text, code };
  bool supervised = false;
  Head head = Head::text;
  int id = 0;
};

inline Target text_target(int id) { return {true, Target::Head::text, id}; }
inline Target code_target(int id) { return {true, Target::Head::code, id}; }
inline Target no_target() { return {}; }

template <class T = double>
class Model {
 public:
  explicit Model(ModelConfig cfg)
      : cfg_(std::move(cfg)), encoder_(cfg_.seed, cfg_.d_feat, cfg_.code_vocab) {
    cfg_.validate();
    auto init = [this](std::size_t r, std::size_t c, const std::string& name) {
      auto t = numkit::make_tensor<T>(r, c);
      rng::Xoshiro256 g(rng::mix({cfg_.seed, rng::hash_name(name)}));
      for (auto& v : t->data) v = static_cast<T>(kInitStd * g.normal());
      return t;
    };
    auto ones = [](std::size_t r, std::size_t c) {
      return numkit::make_tensor<T>(r, c, T{1});
    };

    tok_embedding_ = init(static_cast<std::size_t>(cfg_.v_text),
                          static_cast<std::size_t>(cfg_.d_model), "tok_embedding");
    pos_embedding_ = init(static_cast<std::size_t>(cfg_.max_seq_len),
                          static_cast<std::size_t>(cfg_.d_model), "pos_embedding");
    audio_proj_ = init(static_cast<std::size_t>(cfg_.d_feat),
                       static_cast<std::size_t>(cfg_.d_model), "audio_proj");
    final_norm_gain_ = ones(1, static_cast<std::size_t>(cfg_.d_model));
    text_head_ = init(static_cast<std::size_t>(cfg_.d_model),
                      static_cast<std::size_t>(cfg_.v_text), "text_head");
    code_head_ = init(static_cast<std::size_t>(cfg_.d_model),
                      static_cast<std::size_t>(cfg_.code_vocab), "code_head");

    const auto part = cfg_.partition();
    moe::RouterConfig router{cfg_.k, cfg_.variant, cfg_.aux_alpha, cfg_.renormalize_topk};
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    blocks_.reserve(static_cast<std::size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      AttentionWeights<T> attn{init(d, d, p + "attn.wq"), init(d, d, p + "attn.wk"),
                               init(d, d, p + "attn.wv"), init(d, d, p + "attn.wo")};
      moe::ParamInit<T> moe_init = init;
      blocks_.push_back(Block<T>{std::move(attn), ones(1, d), ones(1, d),
                                 moe::MoeLayer<T>(cfg_.d_model, cfg_.d_ff, cfg_.shared_d_ff,
                                                  part, router, moe_init, p + "moe.")});
    }
  }

  ForwardOutput<T> forward(Tape<T>& tape, const stream::ModalitySequence& seq) const {
    if (seq.tokens.empty()) throw ArgumentError("model forward: empty sequence");
    if (static_cast<int>(seq.tokens.size()) > cfg_.max_seq_len)
      throw ArgumentError("model forward: sequence length " +
                          std::to_string(seq.tokens.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));

    auto assembled = stream::assemble(tape, seq, tok_embedding_, audio_proj_, encoder_);
    std::vector<int> positions(seq.tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    auto hidden = numkit::add(tape, assembled.hidden,
                              numkit::gather_rows(tape, pos_embedding_, positions));

    ForwardOutput<T> out;
    out.modalities = assembled.modalities;
    TensorPtr<T> aux_total;
    for (const auto& block : blocks_) {
      auto b = block_forward(tape, hidden, assembled.modalities, block, cfg_.n_heads);
      hidden = b.hidden;
      out.decisions.push_back(std::move(b.decisions));
      aux_total = aux_total ? numkit::add(tape, aux_total, b.aux_loss) : b.aux_loss;
    }

    auto final_hidden = numkit::rmsnorm_rows(tape, hidden, final_norm_gain_);
    out.text_logits = numkit::matmul(tape, final_hidden, text_head_);
    out.code_logits = numkit::matmul(tape, final_hidden, code_head_);
    out.aux_loss = aux_total ? numkit::scale(tape, aux_total,
                                             T{1} / static_cast<T>(blocks_.size()))
                             : numkit::make_tensor<T>(1, 1);
    return out;
  }

  std::vector<std::pair<std::string, TensorPtr<T>>> parameters() const {
    std::vector<std::pair<std::string, TensorPtr<T>>> out;
    out.emplace_back("tok_embedding", tok_embedding_);
    out.emplace_back("pos_embedding", pos_embedding_);
    out.emplace_back("audio_proj", audio_proj_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      out.emplace_back(p + "attn.wq", blocks_[l].attn.wq);
      out.emplace_back(p + "attn.wk", blocks_[l].attn.wk);
      out.emplace_back(p + "attn.wv", blocks_[l].attn.wv);
      out.emplace_back(p + "attn.wo", blocks_[l].attn.wo);
      out.emplace_back(p + "norm1", blocks_[l].norm1_gain);
      out.emplace_back(p + "norm2", blocks_[l].norm2_gain);
      for (auto& named : blocks_[l].moe.parameters(p + "moe.")) out.push_back(named);
    }
    out.emplace_back("final_norm", final_norm_gain_);
    out.emplace_back("text_head", text_head_);
    out.emplace_back("code_head", code_head_);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  const stream::PseudoEncoder& encoder() const { return encoder_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }
  const TensorPtr<T>& tok_embedding() const { return tok_embedding_; }
  const TensorPtr<T>& audio_proj() const { return audio_proj_; }
  const TensorPtr<T>& final_norm_gain() const { return final_norm_gain_; }
  const TensorPtr<T>& text_head() const { return text_head_; }
  const TensorPtr<T>& code_head() const { return code_head_; }

 private:
  static constexpr double kInitStd = 0.08;

  ModelConfig cfg_;
  stream::PseudoEncoder encoder_;
  TensorPtr<T> tok_embedding_;
  TensorPtr<T> pos_embedding_;
  TensorPtr<T> audio_proj_;
  TensorPtr<T> final_norm_gain_;
  TensorPtr<T> text_head_;
  TensorPtr<T> code_head_;
  std::vector<Block<T>> blocks_;
};

/// Summed cross-entropy over supervised positions plus the count, split by
/// head; building block for the mean task loss.
template <class T>
std::pair<TensorPtr<T>, int> supervised_ce_sum(Tape<T>& tape, const ForwardOutput<T>& out,
                                               const std::vector<Target>& targets) {
  const std::size_t rows = out.text_logits->rows();
  if (targets.size() != rows)
    throw ShapeError("task_loss: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " positions");
  std::vector<int> text_ids(rows, -1), code_ids(rows, -1);
  int count = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!targets[t].supervised) continue;
    ++count;
    if (targets[t].head == Target::Head::text) text_ids[t] = targets[t].id;
    else code_ids[t] = targets[t].id;
  }
  auto total = numkit::add(tape, numkit::cross_entropy_sum(tape, out.text_logits, text_ids),
                           numkit::cross_entropy_sum(tape, out.code_logits, code_ids));
  return {total, count};
}

/// Mean token cross-entropy over supervised positions (text positions scored
/// on the text head, code positions on the code head) plus alpha * aux.
template <class T>
TensorPtr<T> task_loss(Tape<T>& tape, const ForwardOutput<T>& out,
                       const std::vector<Target>& targets, double alpha) {
  auto [sum, count] = supervised_ce_sum(tape, out, targets);
  if (count == 0) throw ArgumentError("task_loss: no supervised positions");
  auto mean = numkit::scale(tape, sum, T{1} / static_cast<T>(count));
  return numkit::add(tape, mean, numkit::scale(tape, out.aux_loss, static_cast<T>(alpha)));
}

}  // namespace mamoe::model

// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Modality-aware mixture-of-experts layer: disjoint modality expert groups, a
// parallel shared expert, masked top-K routing, the per-group load-balancing
// loss, and the ablation variants (vanilla routing, no shared expert, dense).

#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mamoe/errors.hpp"
#include "mamoe/stream.hpp"
#include "mamoe/tensor.hpp"

namespace mamoe::moe {

using numkit::Tape;
using numkit::TensorPtr;

/// Disjoint split of the routed expert index space {0..N-1} into a text
/// group and an audio group.
struct ExpertPartition {
  int n_experts = 0;
  std::vector<int> text_indices;
  std::vector<int> audio_indices;

  ExpertPartition() = default;

  ExpertPartition(int n, std::vector<int> text, std::vector<int> audio)
      : n_experts(n), text_indices(std::move(text)), audio_indices(std::move(audio)) {
    std::sort(text_indices.begin(), text_indices.end());
    std::sort(audio_indices.begin(), audio_indices.end());
    validate();
  }

  /// Lower half text, upper half audio (the index-based 50% split).
  static ExpertPartition half_split(int n) {
    std::vector<int> text, audio;
    for (int i = 0; i < n / 2; ++i) text.push_back(i);
    for (int i = n / 2; i < n; ++i) audio.push_back(i);
    return ExpertPartition(n, std::move(text), std::move(audio));
  }

  const std::vector<int>& group(stream::Modality m) const {
    return m == stream::Modality::text ? text_indices : audio_indices;
  }

  void validate() const {
    if (text_indices.empty() || audio_indices.empty())
      throw ConfigError("ExpertPartition: both groups must be non-empty");
    std::set<int> seen;
    for (int i : text_indices) seen.insert(i);
    for (int i : audio_indices) {
      if (seen.count(i))
        throw ConfigError("ExpertPartition: expert " + std::to_string(i) +
                          " appears in both groups");
      seen.insert(i);
    }
    if (static_cast<int>(seen.size()) != n_experts || *seen.begin() != 0 ||
        *seen.rbegin() != n_experts - 1)
      throw ConfigError("ExpertPartition: groups must cover exactly {0.." +
                        std::to_string(n_experts - 1) + "}");
  }
};

enum class Variant { mamoe, vanilla, no_shared, dense };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::mamoe: return "mamoe";
    case Variant::vanilla: return "vanilla";
    case Variant::no_shared: return "no_shared";
    case Variant::dense: return "dense";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "mamoe") return Variant::mamoe;
  if (s == "vanilla") return Variant::vanilla;
  if (s == "no_shared") return Variant::no_shared;
  if (s == "dense") return Variant::dense;
  throw ConfigError("unknown variant: " + s);
}

struct RouterConfig {
  int k = 2;
  Variant variant = Variant::mamoe;
  double aux_alpha = 0.001;
  bool renormalize_topk = false;
};

/// Routed-expert MLP: down(silu(h*gate) ⊙ (h*up)). The same record type
/// instantiates the shared expert and the dense path.
template <class T>
struct Expert {
  TensorPtr<T> gate_w;  // [d_model x d_ff]
  TensorPtr<T> up_w;    // [d_model x d_ff]
  TensorPtr<T> down_w;  // [d_ff x d_model]
};

template <class T>
TensorPtr<T> expert_forward(Tape<T>& tape, const Expert<T>& e, const TensorPtr<T>& h) {
  auto gated = numkit::silu(tape, numkit::matmul(tape, h, e.gate_w));
  auto up = numkit::matmul(tape, h, e.up_w);
  return numkit::matmul(tape, numkit::mul(tape, gated, up), e.down_w);
}

/// Per-token routing outcome.
template <class T>
struct RoutingDecision {
  std::vector<int> indices;      // selected experts, descending-score order
  std::vector<T> weights;        // gate weights aligned with indices
  std::vector<T> masked_scores;  // s'_t over all N experts
  std::vector<T> raw_scores;     // s_t over all N experts
};

/// Raw gating scores s_t = softmax(h * W_g); rows sum to one.
template <class T>
TensorPtr<T> gate_scores(Tape<T>& tape, const TensorPtr<T>& h, const TensorPtr<T>& w_g) {
  return numkit::softmax_rows(tape, numkit::matmul(tape, h, w_g));
}

/// Binary mask over experts for a token of the given modality.
inline std::vector<int> build_mask(int modality, const ExpertPartition& part) {
  if (modality != 0 && modality != 1)
    throw ArgumentError("build_mask: modality must be 0 or 1, got " +
                        std::to_string(modality));
  std::vector<int> mask(static_cast<std::size_t>(part.n_experts), 0);
  for (int i : part.group(static_cast<stream::Modality>(modality)))
    mask[static_cast<std::size_t>(i)] = 1;
  return mask;
}

namespace detail {

/// Top-K over the candidate index set, ordered by (score desc, index asc).
/// A candidate set whose scores are all zero still yields the K lowest
/// candidate indices with zero weights, so routing is total.
template <class T>
std::pair<std::vector<int>, std::vector<T>> decide(const std::vector<T>& masked_scores,
                                                   const std::vector<int>& candidates,
                                                   int k) {
  std::vector<int> order = candidates;
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    const T va = masked_scores[static_cast<std::size_t>(a)];
    const T vb = masked_scores[static_cast<std::size_t>(b)];
    if (va != vb) return va > vb;
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  std::vector<T> weights;
  weights.reserve(order.size());
  for (int i : order) weights.push_back(masked_scores[static_cast<std::size_t>(i)]);
  return {std::move(order), std::move(weights)};
}

}  // namespace detail

/// Modality-aware routing of one token: score, mask, top-K.
template <class T>
RoutingDecision<T> route(const std::vector<T>& h, int modality, const TensorPtr<T>& w_g,
                         const ExpertPartition& part, int k) {
  const int n = part.n_experts;
  if (static_cast<std::size_t>(w_g->cols()) != static_cast<std::size_t>(n))
    throw ShapeError("route: gating weights " + numkit::shape_str(*w_g) + " vs " +
                     std::to_string(n) + " experts");
  const auto& group = part.group(static_cast<stream::Modality>(modality));
  if (k < 1 || k > static_cast<int>(group.size()))
    throw ConfigError("route: K=" + std::to_string(k) + " outside [1, " +
                      std::to_string(group.size()) + "]");

  Tape<T> scratch;
  auto hrow = numkit::make_tensor<T>(1, h.size());
  hrow->data = h;
  auto s = gate_scores(scratch, hrow, w_g);

  RoutingDecision<T> d;
  d.raw_scores = s->data;
  const auto mask = build_mask(modality, part);
  d.masked_scores.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    d.masked_scores[static_cast<std::size_t>(i)] =
        d.raw_scores[static_cast<std::size_t>(i)] * static_cast<T>(mask[static_cast<std::size_t>(i)]);
  auto [idx, w] = detail::decide(d.masked_scores, group, k);
  d.indices = std::move(idx);
  d.weights = std::move(w);
  return d;
}

// ---------------------------------------------------------------------------
// Load-balancing auxiliary loss
// ---------------------------------------------------------------------------

template <class T>
struct TokenRouting {
  RoutingDecision<T> decision;
  int modality = 0;
};

namespace detail {

/// One (expert subset, token subset) pair the balance loss averages over.
struct BalanceGroup {
  std::vector<int> experts;
  std::vector<int> token_rows;
};

/// Selection fractions f_i over a group: how often expert i was selected by
/// the group's tokens, normalized so the f's sum to one.
template <class T>
std::vector<double> selection_fractions(const std::vector<const RoutingDecision<T>*>& tokens,
                                        const std::vector<int>& experts) {
  std::vector<double> f(experts.size(), 0.0);
  if (tokens.empty()) return f;
  const double k = static_cast<double>(tokens[0]->indices.size());
  for (const auto* d : tokens)
    for (int sel : d->indices)
      for (std::size_t j = 0; j < experts.size(); ++j)
        if (experts[j] == sel) f[j] += 1.0;
  for (auto& v : f) v /= static_cast<double>(tokens.size()) * k;
  return f;
}

}  // namespace detail

/// Switch-style f*P balance loss computed within each modality group:
/// L_g = n_g * sum_i f_i * P_i, averaged over the groups present in the
/// batch. P_i is the group-renormalized mean masked score.
template <class T>
double load_balance_loss(const std::vector<TokenRouting<T>>& batch,
                         const ExpertPartition& part) {
  if (batch.empty()) throw ArgumentError("load_balance_loss: empty batch");

  double total = 0.0;
  int present = 0;
  for (int m = 0; m < 2; ++m) {
    const auto& experts = part.group(static_cast<stream::Modality>(m));
    std::vector<const RoutingDecision<T>*> tokens;
    for (const auto& tr : batch)
      if (tr.modality == m) tokens.push_back(&tr.decision);
    if (tokens.empty()) continue;
    ++present;

    const auto f = detail::selection_fractions(tokens, experts);
    std::vector<double> p(experts.size(), 0.0);
    for (const auto* d : tokens) {
      double mass = 0.0;
      for (int i : experts) mass += static_cast<double>(d->masked_scores[static_cast<std::size_t>(i)]);
      mass = std::max(mass, 1e-30);
      for (std::size_t j = 0; j < experts.size(); ++j)
        p[j] += static_cast<double>(d->masked_scores[static_cast<std::size_t>(experts[j])]) / mass;
    }
    for (auto& v : p) v /= static_cast<double>(tokens.size());

    double lg = 0.0;
    for (std::size_t j = 0; j < experts.size(); ++j) lg += f[j] * p[j];
    total += lg * static_cast<double>(experts.size());
  }
  if (present == 0) throw ArgumentError("load_balance_loss: no routed tokens");
  return total / static_cast<double>(present);
}

// ---------------------------------------------------------------------------
// The MAMoE layer
// ---------------------------------------------------------------------------

template <class T>
struct MoeOutput {
  TensorPtr<T> output;                        // [L x d_model]
  std::vector<RoutingDecision<T>> decisions;  // per token; empty for dense
  TensorPtr<T> aux_loss;                      // scalar; exact zero for dense
};

/// Factory signature used to create parameter tensors: (rows, cols, name).
template <class T>
using ParamInit = std::function<TensorPtr<T>(std::size_t, std::size_t, const std::string&)>;

template <class T>
class MoeLayer {
 public:
  MoeLayer(int d_model, int d_ff, int shared_d_ff, ExpertPartition part,
           RouterConfig router, const ParamInit<T>& init, const std::string& prefix)
      : d_model_(d_model), d_ff_(d_ff), shared_d_ff_(shared_d_ff),
        part_(std::move(part)), router_(router) {
    const int min_group = static_cast<int>(
        std::min(part_.text_indices.size(), part_.audio_indices.size()));
    switch (router_.variant) {
      case Variant::mamoe:
      case Variant::no_shared:
        if (router_.k < 1 || router_.k > min_group)
          throw ConfigError("RouterConfig: K=" + std::to_string(router_.k) +
                            " outside [1, " + std::to_string(min_group) +
                            "] for variant " + to_string(router_.variant));
        break;
      case Variant::vanilla:
        if (router_.k < 1 || router_.k > part_.n_experts)
          throw ConfigError("RouterConfig: K=" + std::to_string(router_.k) +
                            " outside [1, " + std::to_string(part_.n_experts) +
                            "] for variant vanilla");
        break;
      case Variant::dense:
        break;
    }

    auto make_expert = [&](int dff, const std::string& name) {
      Expert<T> e;
      e.gate_w = init(static_cast<std::size_t>(d_model), static_cast<std::size_t>(dff),
                      prefix + name + ".gate_w");
      e.up_w = init(static_cast<std::size_t>(d_model), static_cast<std::size_t>(dff),
                    prefix + name + ".up_w");
      e.down_w = init(static_cast<std::size_t>(dff), static_cast<std::size_t>(d_model),
                      prefix + name + ".down_w");
      return e;
    };

    if (router_.variant == Variant::dense) {
      // Parameter count matched to the active MoE path: K routed experts
      // plus the shared expert.
      dense_ = make_expert(router_.k * d_ff + shared_d_ff, "dense");
      return;
    }

    gate_weight_ = init(static_cast<std::size_t>(d_model),
                        static_cast<std::size_t>(part_.n_experts), prefix + "router.w_g");
    experts_.reserve(static_cast<std::size_t>(part_.n_experts));
    for (int i = 0; i < part_.n_experts; ++i)
      experts_.push_back(make_expert(d_ff, "expert" + std::to_string(i)));
    if (router_.variant != Variant::no_shared)
      shared_ = make_expert(shared_d_ff, "shared");
  }

  MoeOutput<T> forward(Tape<T>& tape, const TensorPtr<T>& hidden,
                       const std::vector<int>& modalities) const {
    const std::size_t rows = hidden->rows();
    if (router_.variant != Variant::dense && modalities.size() != rows)
      throw ShapeError("MoeLayer: " + std::to_string(modalities.size()) +
                       " modality entries for " + numkit::shape_str(*hidden));

    MoeOutput<T> out;
    if (router_.variant == Variant::dense) {
      out.output = expert_forward(tape, *dense_, hidden);
      out.aux_loss = numkit::make_tensor<T>(1, 1);
      return out;
    }

    const int n = part_.n_experts;
    auto raw = gate_scores(tape, hidden, gate_weight_);  // [L x N]

    // Modality mask as a constant matrix; all ones for vanilla routing.
    auto mask = numkit::make_tensor<T>(rows, static_cast<std::size_t>(n));
    if (router_.variant == Variant::vanilla) {
      std::fill(mask->data.begin(), mask->data.end(), T{1});
    } else {
      for (std::size_t t = 0; t < rows; ++t) {
        const auto m = build_mask(modalities[t], part_);
        for (int i = 0; i < n; ++i)
          mask->at(t, static_cast<std::size_t>(i)) = static_cast<T>(m[static_cast<std::size_t>(i)]);
      }
    }
    auto masked = numkit::mul(tape, raw, mask);  // s'_t rows

    // Per-token decisions on the masked score values.
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    out.decisions.reserve(rows);
    for (std::size_t t = 0; t < rows; ++t) {
      const auto& candidates = router_.variant == Variant::vanilla
                                   ? all
                                   : part_.group(static_cast<stream::Modality>(modalities[t]));
      RoutingDecision<T> d;
      d.raw_scores.assign(raw->data.begin() + t * static_cast<std::size_t>(n),
                          raw->data.begin() + (t + 1) * static_cast<std::size_t>(n));
      d.masked_scores.assign(masked->data.begin() + t * static_cast<std::size_t>(n),
                             masked->data.begin() + (t + 1) * static_cast<std::size_t>(n));
      auto [idx, w] = detail::decide(d.masked_scores, candidates, router_.k);
      d.indices = std::move(idx);
      d.weights = std::move(w);
      out.decisions.push_back(std::move(d));
    }

    // Gate-weight source: masked scores, optionally renormalized over each
    // token's selected set.
    TensorPtr<T> weight_src = masked;
    if (router_.renormalize_topk) {
      auto sel = numkit::make_tensor<T>(rows, static_cast<std::size_t>(n));
      for (std::size_t t = 0; t < rows; ++t)
        for (int i : out.decisions[t].indices)
          sel->at(t, static_cast<std::size_t>(i)) = T{1};
      auto selected = numkit::mul(tape, masked, sel);
      weight_src = numkit::div_rows(tape, selected, numkit::row_sum(tape, selected));
      for (std::size_t t = 0; t < rows; ++t) {
        auto& d = out.decisions[t];
        for (std::size_t j = 0; j < d.indices.size(); ++j)
          d.weights[j] = weight_src->at(t, static_cast<std::size_t>(d.indices[j]));
      }
    }

    // Grouped dispatch: one batched MLP application per expert.
    TensorPtr<T> routed;
    for (int e = 0; e < n; ++e) {
      std::vector<int> token_rows;
      std::vector<std::pair<int, int>> coords;
      for (std::size_t t = 0; t < rows; ++t)
        for (int sel : out.decisions[t].indices)
          if (sel == e) {
            token_rows.push_back(static_cast<int>(t));
            coords.emplace_back(static_cast<int>(t), e);
          }
      if (token_rows.empty()) continue;
      auto x = numkit::gather_rows(tape, hidden, token_rows);
      auto y = expert_forward(tape, experts_[static_cast<std::size_t>(e)], x);
      auto w = numkit::gather_elems(tape, weight_src, coords);
      auto scaled = numkit::scale_rows(tape, y, w);
      auto placed = numkit::scatter_rows(tape, scaled, token_rows, rows);
      routed = routed ? numkit::add(tape, routed, placed) : placed;
    }

    if (shared_) {
      auto shared_out = expert_forward(tape, *shared_, hidden);
      out.output = routed ? numkit::add(tape, routed, shared_out) : shared_out;
    } else {
      out.output = routed;
    }

    out.aux_loss = balance_loss_taped(tape, masked, out.decisions, modalities);
    return out;
  }

  /// Shared-expert output alone (the parallel path of the composition).
  TensorPtr<T> shared_forward(Tape<T>& tape, const TensorPtr<T>& hidden) const {
    if (!shared_) throw ArgumentError("MoeLayer: variant has no shared expert");
    return expert_forward(tape, *shared_, hidden);
  }

  std::vector<std::pair<std::string, TensorPtr<T>>> parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, TensorPtr<T>>> out;
    auto push_expert = [&](const Expert<T>& e, const std::string& name) {
      out.emplace_back(prefix + name + ".gate_w", e.gate_w);
      out.emplace_back(prefix + name + ".up_w", e.up_w);
      out.emplace_back(prefix + name + ".down_w", e.down_w);
    };
    if (router_.variant == Variant::dense) {
      push_expert(*dense_, "dense");
      return out;
    }
    out.emplace_back(prefix + "router.w_g", gate_weight_);
    for (int i = 0; i < part_.n_experts; ++i)
      push_expert(experts_[static_cast<std::size_t>(i)], "expert" + std::to_string(i));
    if (shared_) push_expert(*shared_, "shared");
    return out;
  }

  const ExpertPartition& partition() const { return part_; }
  const RouterConfig& router() const { return router_; }
  const TensorPtr<T>& gate_weight() const { return gate_weight_; }
  const std::vector<Expert<T>>& experts() const { return experts_; }
  const Expert<T>& shared_expert() const { return *shared_; }
  const Expert<T>& dense_expert() const { return *dense_; }

 private:
  /// Taped counterpart of load_balance_loss; f_i are constants, only the
  /// P_i term carries gradient.
  TensorPtr<T> balance_loss_taped(Tape<T>& tape, const TensorPtr<T>& masked,
                                  const std::vector<RoutingDecision<T>>& decisions,
                                  const std::vector<int>& modalities) const {
    std::vector<detail::BalanceGroup> groups;
    if (router_.variant == Variant::vanilla) {
      // Modality-agnostic routing gets the standard single-group loss.
      detail::BalanceGroup g;
      g.experts.resize(static_cast<std::size_t>(part_.n_experts));
      std::iota(g.experts.begin(), g.experts.end(), 0);
      g.token_rows.resize(decisions.size());
      std::iota(g.token_rows.begin(), g.token_rows.end(), 0);
      groups.push_back(std::move(g));
    } else {
      for (int m = 0; m < 2; ++m) {
        detail::BalanceGroup g;
        g.experts = part_.group(static_cast<stream::Modality>(m));
        for (std::size_t t = 0; t < modalities.size(); ++t)
          if (modalities[t] == m) g.token_rows.push_back(static_cast<int>(t));
        if (!g.token_rows.empty()) groups.push_back(std::move(g));
      }
    }

    TensorPtr<T> total;
    for (const auto& g : groups) {
      std::vector<const RoutingDecision<T>*> tokens;
      for (int t : g.token_rows) tokens.push_back(&decisions[static_cast<std::size_t>(t)]);
      const auto f = detail::selection_fractions(tokens, g.experts);

      auto group_scores = numkit::select_cols(tape, masked, g.experts);
      auto normalized =
          numkit::div_rows(tape, group_scores, numkit::row_sum(tape, group_scores));
      auto p = numkit::col_mean(tape, numkit::gather_rows(tape, normalized, g.token_rows));

      auto coeff = numkit::make_tensor<T>(1, g.experts.size());
      for (std::size_t j = 0; j < g.experts.size(); ++j)
        coeff->data[j] = static_cast<T>(f[j] * static_cast<double>(g.experts.size()));
      auto lg = numkit::sum_all(tape, numkit::mul(tape, p, coeff));
      total = total ? numkit::add(tape, total, lg) : lg;
    }
    return numkit::scale(tape, total, T{1} / static_cast<T>(groups.size()));
  }

  int d_model_;
  int d_ff_;
  int shared_d_ff_;
  ExpertPartition part_;
  RouterConfig router_;
  TensorPtr<T> gate_weight_;
  std::vector<Expert<T>> experts_;
  std::optional<Expert<T>> shared_;
  std::optional<Expert<T>> dense_;
};

}  // namespace mamoe::moe

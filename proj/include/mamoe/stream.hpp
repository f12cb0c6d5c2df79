// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Interleaved bimodal input construction: synthetic audio frames from a
// deterministic pseudo-encoder, projection to model dimension, text
// embedding lookup, and modality bookkeeping.

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mamoe/errors.hpp"
#include "mamoe/rng.hpp"
#include "mamoe/tensor.hpp"

namespace mamoe::stream {

enum class Modality : int { text = 0, audio = 1 };

/// One token of an interleaved sequence. The payload id is a text-token id
/// for text and a discrete audio-code id for audio; audio codes are rendered
/// to continuous frames by the PseudoEncoder during assembly.
struct ModalityToken {
  Modality modality = Modality::text;
  int id = 0;
};

struct ModalitySequence {
  std::vector<ModalityToken> tokens;

  std::size_t length() const { return tokens.size(); }
};

inline ModalityToken text_token(int id) { return {Modality::text, id}; }
inline ModalityToken audio_token(int code) { return {Modality::audio, code}; }

/// Deterministic stand-in for a frozen audio feature extractor: each code id
/// maps to a fixed pseudo-random frame in [-1, 1]^d_feat, a pure function of
/// (seed, code).
class PseudoEncoder {
 public:
  PseudoEncoder(std::uint64_t seed, int d_feat, int code_vocab)
      : seed_(seed), d_feat_(d_feat), code_vocab_(code_vocab) {
    if (d_feat <= 0 || code_vocab <= 0)
      throw ArgumentError("PseudoEncoder: d_feat and code_vocab must be positive");
  }

  std::vector<double> frame(int code) const {
    if (code < 0 || code >= code_vocab_)
      throw ArgumentError("PseudoEncoder: code " + std::to_string(code) +
                          " outside [0, " + std::to_string(code_vocab_) + ")");
    rng::Xoshiro256 g(rng::mix({seed_, 0x617564696FULL, static_cast<std::uint64_t>(code)}));
    std::vector<double> out(static_cast<std::size_t>(d_feat_));
    for (auto& v : out) v = 2.0 * g.uniform() - 1.0;
    return out;
  }

  std::uint64_t seed() const { return seed_; }
  int d_feat() const { return d_feat_; }
  int code_vocab() const { return code_vocab_; }

 private:
  std::uint64_t seed_;
  int d_feat_;
  int code_vocab_;
};

/// Renders a code sequence to a [L_audio x d_feat] frame matrix (a leaf
/// tensor; frames are inputs, not trainable).
template <class T>
numkit::TensorPtr<T> synth_frames(const std::vector<int>& codes, const PseudoEncoder& enc) {
  auto out = numkit::make_tensor<T>(codes.size(), static_cast<std::size_t>(enc.d_feat()));
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto f = enc.frame(codes[i]);
    for (std::size_t j = 0; j < f.size(); ++j) out->at(i, j) = static_cast<T>(f[j]);
  }
  return out;
}

/// H_audio = F * W_proj; W_proj is trainable.
template <class T>
numkit::TensorPtr<T> project_audio(numkit::Tape<T>& tape, const numkit::TensorPtr<T>& frames,
                                   const numkit::TensorPtr<T>& w_proj) {
  return numkit::matmul(tape, frames, w_proj);
}

/// Embedding lookup: row i of the result is E[ids[i]].
template <class T>
numkit::TensorPtr<T> embed_text(numkit::Tape<T>& tape, const std::vector<int>& ids,
                                const numkit::TensorPtr<T>& embedding) {
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= embedding->rows())
      throw ArgumentError("embed_text: id " + std::to_string(id) + " outside [0, " +
                          std::to_string(embedding->rows()) + ")");
  return numkit::gather_rows(tape, embedding, ids);
}

template <class T>
struct AssembledInput {
  numkit::TensorPtr<T> hidden;   // [L x d_model], original token order
  std::vector<int> modalities;   // m_t per token, 0 text / 1 audio
};

/// Builds the unified input matrix: text rows via embedding lookup, audio
/// rows via synth_frames -> project_audio, rows kept in original order.
template <class T>
AssembledInput<T> assemble(numkit::Tape<T>& tape, const ModalitySequence& seq,
                           const numkit::TensorPtr<T>& embedding,
                           const numkit::TensorPtr<T>& w_proj, const PseudoEncoder& enc) {
  if (seq.tokens.empty()) throw ArgumentError("assemble: empty sequence");
  const std::size_t total = seq.tokens.size();

  std::vector<int> text_ids, text_pos, audio_codes, audio_pos, modalities;
  modalities.reserve(total);
  for (std::size_t t = 0; t < total; ++t) {
    const auto& tok = seq.tokens[t];
    modalities.push_back(static_cast<int>(tok.modality));
    if (tok.modality == Modality::text) {
      text_ids.push_back(tok.id);
      text_pos.push_back(static_cast<int>(t));
    } else {
      audio_codes.push_back(tok.id);
      audio_pos.push_back(static_cast<int>(t));
    }
  }

  numkit::TensorPtr<T> hidden;
  if (!text_ids.empty()) {
    auto text_block = embed_text(tape, text_ids, embedding);
    hidden = numkit::scatter_rows(tape, text_block, text_pos, total);
  }
  if (!audio_codes.empty()) {
    auto frames = synth_frames<T>(audio_codes, enc);
    auto audio_block = project_audio(tape, frames, w_proj);
    auto scattered = numkit::scatter_rows(tape, audio_block, audio_pos, total);
    hidden = hidden ? numkit::add(tape, hidden, scattered) : scattered;
  }
  return {hidden, std::move(modalities)};
}

// ---------------------------------------------------------------------------
// Sequence fixture format: JSON lines, each {"modality": 0|1, "id": int}
// ---------------------------------------------------------------------------

inline ModalitySequence read_sequence_jsonl(std::istream& in) {
  ModalitySequence seq;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("sequence fixture line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("modality") || !j.contains("id") || j.size() != 2)
      throw ParseError("sequence fixture line " + std::to_string(line_no) +
                       ": expected {\"modality\": 0|1, \"id\": int}");
    const int m = j["modality"].get<int>();
    if (m != 0 && m != 1)
      throw ParseError("sequence fixture line " + std::to_string(line_no) +
                       ": modality must be 0 or 1");
    const int id = j["id"].get<int>();
    if (id < 0)
      throw ParseError("sequence fixture line " + std::to_string(line_no) +
                       ": id must be nonnegative");
    seq.tokens.push_back({static_cast<Modality>(m), id});
  }
  return seq;
}

inline ModalitySequence read_sequence_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sequence fixture: " + path);
  return read_sequence_jsonl(in);
}

inline void write_sequence_jsonl(std::ostream& out, const ModalitySequence& seq) {
  for (const auto& tok : seq.tokens) {
    nlohmann::json j;
    j["modality"] = static_cast<int>(tok.modality);
    j["id"] = tok.id;
    out << j.dump() << '\n';
  }
}

inline void write_sequence_jsonl(const std::string& path, const ModalitySequence& seq) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_sequence_jsonl(out, seq);
}

}  // namespace mamoe::stream

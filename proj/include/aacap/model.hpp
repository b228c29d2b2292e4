// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aacap/corpus.hpp"
#include "aacap/nn.hpp"
#include "aacap/random.hpp"
#include "aacap/text.hpp"

namespace aacap {

using nn::Matrix;
using nn::Real;

struct ModelConfig {
  std::uint32_t d_in = EmbeddingSequence::kDefaultDim;
  // Classifier size per head is vocab * (d_model + 1).
  std::uint32_t d_model = 256;
  std::uint32_t n_layers = 6;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 2048;
  double trunk_dropout = 0.2;
  double frontend_dropout = 0.5;
  // Decoder input positions, BOS included.
  std::uint32_t max_len = 32;
  std::uint64_t init_seed = 0;

  // Throws kInvalidArgument on a broken invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Mode { kTrain, kEval };

struct LanguageHead {
  LanguageId language = LanguageId::kEn;
  nn::Param embedding;     // vocab x d_model
  nn::Linear classifier;   // d_model -> vocab

  std::size_t vocab_size() const { return static_cast<std::size_t>(embedding.value.rows()); }
};

// One input-embedding source. Plain decoding uses a single source with
// weight 1; mixup blends two sources of equal length.
struct TokenSource {
  std::span<const TokenId> ids;
  Real weight = 1.0;
};

// Everything the backward pass needs from one forward pass.
struct ForwardCache {
  LanguageId language = LanguageId::kEn;
  Matrix audio;
  nn::DropoutMask frontend_drop_in, frontend_drop_out;
  Matrix frontend_dropped_in, frontend_pre_act;
  Matrix memory;
  std::vector<std::vector<TokenId>> source_ids;
  std::vector<Real> source_weights;
  nn::DropoutMask embed_drop;
  std::vector<nn::DecoderLayer::Cache> layers;
  Matrix final_hidden;
};

class MultilingualModel {
 public:
  MultilingualModel() = default;
  // Heads are created in the given order; vocabulary sizes must be >= 1
  // unless the model is only used for accounting.
  MultilingualModel(ModelConfig config, std::span<const std::pair<LanguageId, std::size_t>> heads);

  const ModelConfig& config() const { return config_; }
  bool has_language(LanguageId lang) const { return heads_.contains(lang); }
  std::vector<LanguageId> languages() const;
  const LanguageHead& head(LanguageId lang) const;
  LanguageHead& head(LanguageId lang);

  // Projected audio frames (frames x d_model).
  Matrix encode_audio(const Matrix& audio, Mode mode = Mode::kEval, Rng* rng = nullptr) const;

  // Next-token logits (len x vocab) for a decoder input sequence that starts
  // with BOS. Row t depends on ids[0..t] only.
  Matrix forward(const Matrix& audio, std::span<const TokenId> ids, LanguageId lang, Mode mode = Mode::kEval,
                 Rng* rng = nullptr) const;
  Matrix decode_logits(const Matrix& memory, std::span<const TokenId> ids, LanguageId lang) const;

  // Batched convenience wrapper; each element is a (len_i x vocab) matrix.
  std::vector<Matrix> forward_batch(std::span<const Matrix> audio, std::span<const TokenIds> ids, LanguageId lang,
                                    Mode mode = Mode::kEval, Rng* rng = nullptr) const;

  // Training forward pass keeping the activations for `backward`. `rng`
  // drives dropout and may be null in eval mode.
  Matrix forward_cached(const Matrix& audio, std::span<const TokenSource> sources, LanguageId lang, Mode mode,
                        Rng* rng, ForwardCache& cache) const;
  // Accumulates parameter gradients for d(loss)/d(logits).
  void backward(const ForwardCache& cache, const Matrix& dlogits);

  std::vector<nn::NamedParam> trunk_parameters();
  std::vector<nn::NamedParam> head_parameters(LanguageId lang);
  std::vector<nn::NamedParam> parameters();
  void zero_grad();

 private:
  void check_language(LanguageId lang) const;
  Matrix embed_sources(std::span<const TokenSource> sources, const LanguageHead& head) const;

  ModelConfig config_;
  nn::Linear frontend_;
  std::vector<nn::DecoderLayer> layers_;
  std::map<LanguageId, LanguageHead> heads_;
  Matrix positions_;
};

Matrix to_matrix(const EmbeddingSequence& seq);

// ---------------------------------------------------------------------------
// Parameter accounting

struct HeadParamCount {
  LanguageId language = LanguageId::kEn;
  std::uint64_t embedding = 0;
  std::uint64_t classifier = 0;
};

struct ParamReport {
  // The frozen audio encoder is not part of this toolkit; its size is a
  // constant carried so totals are comparable with full systems.
  static constexpr std::uint64_t kFrozenEncoder = 28'000'000;

  std::uint64_t frontend = 0;
  std::uint64_t trunk = 0;
  std::vector<HeadParamCount> heads;
  std::uint64_t trainable = 0;
  std::uint64_t frozen_encoder = kFrozenEncoder;
  std::uint64_t total = 0;
};

// Closed form from the configuration and per-language vocabulary sizes.
ParamReport count_params(const ModelConfig& config, std::span<const std::pair<LanguageId, std::size_t>> vocab_sizes);
// Sum over the tensors a constructed model actually holds.
ParamReport count_params(const MultilingualModel& model);

// Relative size reduction (percent) of one multilingual model against one
// monolingual model per language.
double size_comparison(std::span<const std::pair<LanguageId, ParamReport>> mono_reports,
                       const ParamReport& multi_report);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Container: "ACKP", u32 version, u32 length + UTF-8 JSON header (model
// config and vocabularies), u32 tensor count, then per tensor: u32 length +
// name, u32 rows, u32 cols, rows*cols little-endian float64 in row-major
// order.

struct Checkpoint {
  MultilingualModel model;
  std::map<LanguageId, Vocabulary> vocabularies;
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view json, ModelConfig base = {});

}  // namespace aacap

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "aacap/corpus.hpp"
#include "aacap/model.hpp"
#include "aacap/random.hpp"
#include "aacap/text.hpp"

namespace aacap {

struct SpecAugConfig {
  std::uint32_t n_time_masks = 2;
  std::uint32_t max_time_width = 4;
  std::uint32_t n_channel_masks = 2;
  std::uint32_t max_channel_width = 64;
};

struct TrainConfig {
  std::uint32_t epochs = 100;
  double lr0 = 5e-4;
  double weight_decay = 2.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double label_smoothing_eps = 0.1;
  bool mixup = true;
  double mixup_alpha = 0.4;
  // Replaces the Beta(alpha, alpha) draw when set.
  std::optional<double> mixup_fixed_lambda;
  bool spec_augment = true;
  SpecAugConfig specaug;
  std::uint32_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Loss

// Label-smoothed target: 1 - eps on the reference token, eps / (V - 1) on
// every other token.
struct WeightedTargets {
  std::span<const TokenIds> targets;  // one id sequence per batch element
  double weight = 1.0;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Matrix> dlogits;
};

// sum_k weight_k * (mean over non-pad positions of source k of the smoothed
// cross-entropy). Throws when a source has only padding.
LossAndGrad mixed_smoothed_cross_entropy(std::span<const Matrix> logits, std::span<const WeightedTargets> sources,
                                         double eps, TokenId pad_id = Vocabulary::kPad);

double smoothed_cross_entropy(std::span<const Matrix> logits, std::span<const TokenIds> targets, double eps,
                              TokenId pad_id = Vocabulary::kPad);

// ---------------------------------------------------------------------------
// Mixup

struct MixupDraw {
  double lambda = 1.0;
  std::vector<std::size_t> partner;  // partner[i] is mixed into element i
};

MixupDraw draw_mixup(std::size_t batch, double alpha, Rng& rng);

// lambda * a + (1 - lambda) * b.
Matrix mixup_embeddings(const Matrix& a, const Matrix& b, double lambda);
std::vector<Matrix> mixup_embeddings(std::span<const Matrix> a, std::span<const Matrix> b, double lambda);

// ---------------------------------------------------------------------------
// SpecAugment on the embedding sequence (rows = frames, cols = channels)

struct MaskSpan {
  std::size_t start = 0;
  std::size_t width = 0;
};

struct MaskPlan {
  std::vector<MaskSpan> time;
  std::vector<MaskSpan> channel;
};

// Each mask width is uniform on [0, min(max_width, extent)], its start
// uniform over the positions where it fits.
MaskPlan draw_masks(std::size_t frames, std::size_t channels, const SpecAugConfig& cfg, Rng& rng);
void apply_masks(Matrix& seq, const MaskPlan& plan);
Matrix spec_mask(const Matrix& seq, const SpecAugConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Optimisation

double cosine_lr(double epoch, double epochs, double lr0);

// Adam with decoupled weight decay. Decay applies to weight matrices only
// (ParamKind::kWeight); biases, normalisation parameters and embeddings are
// not decayed. State is kept per parameter, so parameters that sit out a step
// keep their moments and step count untouched.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Options options) : options_(options) {}

  void step(std::span<const nn::NamedParam> params, double lr);
  std::uint64_t step_count(const nn::Param* p) const;

 private:
  struct State {
    Matrix m, v;
    std::uint64_t step = 0;
  };
  Options options_;
  std::unordered_map<const nn::Param*, State> state_;
};

// ---------------------------------------------------------------------------
// Training loops

struct TrainingItem {
  std::string audio_id;
  Matrix audio;  // frames x d_in
  std::map<LanguageId, std::vector<std::string>> captions;
};

using TrainingCorpus = std::vector<TrainingItem>;

// Loads every audio of `split` with its embedding. Audios lacking one of
// `languages` are reported together in one kValidation error.
TrainingCorpus load_training_corpus(const CaptionManifest& manifest, Split split,
                                    std::span<const LanguageId> languages,
                                    const std::filesystem::path& embeddings_dir, std::uint32_t expected_dim = 0);

struct EpochMetrics {
  std::uint32_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::size_t n_updates = 0;
  std::size_t n_examples = 0;
  double seconds = 0.0;
};

struct UpdateInfo {
  LanguageId language;
  std::vector<std::string> audio_ids;
  double loss;
};

class Trainer {
 public:
  Trainer(MultilingualModel& model, const std::map<LanguageId, Vocabulary>& vocabularies, TrainConfig config);

  // One pass in which every (audio, language) pair is used exactly once.
  // Batches hold a single language, so each update touches the shared trunk
  // and one language head.
  EpochMetrics train_epoch(const TrainingCorpus& corpus, std::span<const LanguageId> languages,
                           std::uint32_t epoch_index);

  // Mean smoothed cross-entropy over every reference caption, eval mode.
  double evaluate_loss(const TrainingCorpus& corpus, std::span<const LanguageId> languages) const;

  std::function<void(const UpdateInfo&)> on_update;

  const TrainConfig& config() const { return config_; }

 private:
  double train_batch(const TrainingCorpus& corpus, std::span<const std::size_t> items, LanguageId lang, double lr);
  TokenIds encode_caption(LanguageId lang, const std::string& caption) const;

  MultilingualModel& model_;
  const std::map<LanguageId, Vocabulary>& vocabularies_;
  TrainConfig config_;
  AdamW optimizer_;
  Rng order_rng_, caption_rng_, dropout_rng_, mixup_rng_, specaug_rng_;
};

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(std::string_view json, TrainConfig base = {});

}  // namespace aacap

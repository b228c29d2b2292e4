// SPDX-License-Identifier: Apache-2.0

#include "aacap/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "aacap/error.hpp"

namespace aacap {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kInvalidArgument, "train config: " + what); };
  if (!(lr0 > 0.0)) fail("lr0 must be > 0");
  if (!(label_smoothing_eps >= 0.0 && label_smoothing_eps < 1.0)) fail("label_smoothing_eps must be in [0, 1)");
  if (!(mixup_alpha > 0.0)) fail("mixup_alpha must be > 0");
  if (mixup_fixed_lambda && !(*mixup_fixed_lambda >= 0.0 && *mixup_fixed_lambda <= 1.0)) {
    fail("mixup_fixed_lambda must be in [0, 1]");
  }
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
}

// ---------------------------------------------------------------------------

LossAndGrad mixed_smoothed_cross_entropy(std::span<const Matrix> logits, std::span<const WeightedTargets> sources,
                                         double eps, TokenId pad_id) {
  if (!(eps >= 0.0 && eps < 1.0)) throw Error(ErrorKind::kInvalidArgument, "label smoothing eps must be in [0, 1)");
  LossAndGrad out;
  out.dlogits.reserve(logits.size());
  for (const auto& l : logits) out.dlogits.push_back(Matrix::Zero(l.rows(), l.cols()));

  std::vector<Matrix> log_probs;
  log_probs.reserve(logits.size());
  for (const auto& l : logits) log_probs.push_back(nn::log_softmax_rows(l));

  for (const auto& src : sources) {
    if (src.targets.size() != logits.size()) throw Error(ErrorKind::kShapeMismatch, "targets/logits batch mismatch");
    std::size_t n_tokens = 0;
    for (std::size_t b = 0; b < logits.size(); ++b) {
      if (static_cast<Eigen::Index>(src.targets[b].size()) != logits[b].rows()) {
        throw Error(ErrorKind::kShapeMismatch, "target length does not match logits");
      }
      n_tokens += static_cast<std::size_t>(std::count_if(src.targets[b].begin(), src.targets[b].end(),
                                                         [&](TokenId id) { return id != pad_id; }));
    }
    if (n_tokens == 0) throw Error(ErrorKind::kInvalidArgument, "batch contains only padding");
    const double coef = src.weight / static_cast<double>(n_tokens);

    double sum = 0.0;
    for (std::size_t b = 0; b < logits.size(); ++b) {
      const Matrix& lp = log_probs[b];
      const Eigen::Index vocab = lp.cols();
      const double off = vocab > 1 ? eps / static_cast<double>(vocab - 1) : 0.0;
      const double on = vocab > 1 ? 1.0 - eps : 1.0;
      for (Eigen::Index t = 0; t < lp.rows(); ++t) {
        const TokenId y = src.targets[b][static_cast<std::size_t>(t)];
        if (y == pad_id) continue;
        if (y < 0 || y >= vocab) throw Error(ErrorKind::kInvalidArgument, "target id out of range");
        const double row_sum = lp.row(t).sum();
        sum -= on * lp(t, y) + off * (row_sum - lp(t, y));
        Eigen::RowVectorXd grad = lp.row(t).array().exp();
        grad.array() -= off;
        grad(y) -= on - off;
        out.dlogits[b].row(t) += coef * grad;
      }
    }
    out.loss += src.weight * (sum / static_cast<double>(n_tokens));
  }
  return out;
}

double smoothed_cross_entropy(std::span<const Matrix> logits, std::span<const TokenIds> targets, double eps,
                              TokenId pad_id) {
  const WeightedTargets src{targets, 1.0};
  return mixed_smoothed_cross_entropy(logits, std::span(&src, 1), eps, pad_id).loss;
}

// ---------------------------------------------------------------------------

MixupDraw draw_mixup(std::size_t batch, double alpha, Rng& rng) {
  MixupDraw draw;
  draw.lambda = rng.beta(alpha, alpha);
  draw.partner.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) draw.partner[i] = i;
  rng.shuffle(std::span(draw.partner));
  return draw;
}

Matrix mixup_embeddings(const Matrix& a, const Matrix& b, double lambda) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "mixup operands differ in shape");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "mixup lambda must be in [0, 1]");
  return lambda * a + (1.0 - lambda) * b;
}

std::vector<Matrix> mixup_embeddings(std::span<const Matrix> a, std::span<const Matrix> b, double lambda) {
  if (a.size() != b.size()) throw Error(ErrorKind::kShapeMismatch, "mixup batches differ in size");
  std::vector<Matrix> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(mixup_embeddings(a[i], b[i], lambda));
  return out;
}

// ---------------------------------------------------------------------------

MaskPlan draw_masks(std::size_t frames, std::size_t channels, const SpecAugConfig& cfg, Rng& rng) {
  MaskPlan plan;
  auto draw = [&](std::size_t extent, std::uint32_t max_width) {
    const std::size_t w = rng.between(0, std::min<std::size_t>(max_width, extent));
    const std::size_t start = rng.between(0, extent - w);
    return MaskSpan{start, w};
  };
  for (std::uint32_t i = 0; i < cfg.n_time_masks; ++i) plan.time.push_back(draw(frames, cfg.max_time_width));
  for (std::uint32_t i = 0; i < cfg.n_channel_masks; ++i) plan.channel.push_back(draw(channels, cfg.max_channel_width));
  return plan;
}

void apply_masks(Matrix& seq, const MaskPlan& plan) {
  for (const auto& s : plan.time) {
    if (s.start + s.width > static_cast<std::size_t>(seq.rows())) {
      throw Error(ErrorKind::kInvalidArgument, "time mask out of range");
    }
    seq.middleRows(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.width)).setZero();
  }
  for (const auto& s : plan.channel) {
    if (s.start + s.width > static_cast<std::size_t>(seq.cols())) {
      throw Error(ErrorKind::kInvalidArgument, "channel mask out of range");
    }
    seq.middleCols(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.width)).setZero();
  }
}

Matrix spec_mask(const Matrix& seq, const SpecAugConfig& cfg, Rng& rng) {
  Matrix out = seq;
  apply_masks(out, draw_masks(static_cast<std::size_t>(seq.rows()), static_cast<std::size_t>(seq.cols()), cfg, rng));
  return out;
}

// ---------------------------------------------------------------------------

double cosine_lr(double epoch, double epochs, double lr0) {
  if (epochs <= 0.0) return lr0;
  const double progress = std::clamp(epoch / epochs, 0.0, 1.0);
  if (progress == 1.0) return 0.0;
  return lr0 * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

void AdamW::step(std::span<const nn::NamedParam> params, double lr) {
  for (const auto& np : params) {
    nn::Param& p = *np.param;
    State& s = state_[&p];
    if (s.step == 0) {
      s.m = Matrix::Zero(p.value.rows(), p.value.cols());
      s.v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    ++s.step;
    if (p.kind == nn::ParamKind::kWeight && options_.weight_decay != 0.0) {
      p.value *= 1.0 - lr * options_.weight_decay;
    }
    s.m = options_.beta1 * s.m + (1.0 - options_.beta1) * p.grad;
    s.v = options_.beta2 * s.v + (1.0 - options_.beta2) * p.grad.cwiseProduct(p.grad);
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(s.step));
    const double step_size = lr / bc1;
    const Matrix denom = (s.v.array().sqrt() / std::sqrt(bc2) + options_.eps).matrix();
    p.value.array() -= step_size * (s.m.array() / denom.array());
  }
}

std::uint64_t AdamW::step_count(const nn::Param* p) const {
  const auto it = state_.find(p);
  return it == state_.end() ? 0 : it->second.step;
}

// ---------------------------------------------------------------------------

TrainingCorpus load_training_corpus(const CaptionManifest& manifest, Split split,
                                    std::span<const LanguageId> languages,
                                    const std::filesystem::path& embeddings_dir, std::uint32_t expected_dim) {
  TrainingCorpus corpus;
  std::vector<std::string> problems;
  for (const ManifestEntry* e : manifest.split(split)) {
    bool ok = true;
    for (LanguageId lang : languages) {
      if (!e->captions.contains(lang)) {
        problems.push_back(e->audio_id + ": missing captions for language '" + std::string(language_code(lang)) + "'");
        ok = false;
      }
    }
    TrainingItem item;
    item.audio_id = e->audio_id;
    try {
      item.audio = to_matrix(load_embedding(embedding_path(embeddings_dir, e->audio_id), expected_dim));
    } catch (const Error& err) {
      problems.push_back(e->audio_id + ": " + err.what());
      ok = false;
    }
    if (!ok) continue;
    for (LanguageId lang : languages) item.captions[lang] = e->captions.at(lang);
    corpus.push_back(std::move(item));
  }
  if (!problems.empty()) throw Error(ErrorKind::kValidation, "training corpus rejected", std::move(problems));
  return corpus;
}

Trainer::Trainer(MultilingualModel& model, const std::map<LanguageId, Vocabulary>& vocabularies, TrainConfig config)
    : model_(model),
      vocabularies_(vocabularies),
      config_(config),
      optimizer_(AdamW::Options{config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay}),
      order_rng_(Rng::derive(config.seed, "train.order")),
      caption_rng_(Rng::derive(config.seed, "train.caption")),
      dropout_rng_(Rng::derive(config.seed, "train.dropout")),
      mixup_rng_(Rng::derive(config.seed, "train.mixup")),
      specaug_rng_(Rng::derive(config.seed, "train.specaug")) {
  config_.validate();
}

TokenIds Trainer::encode_caption(LanguageId lang, const std::string& caption) const {
  const auto it = vocabularies_.find(lang);
  if (it == vocabularies_.end()) {
    throw Error(ErrorKind::kUnknownLanguage, "no vocabulary for '" + std::string(language_code(lang)) + "'");
  }
  TokenIds ids = it->second.encode(tokenize(caption));
  const std::size_t limit = static_cast<std::size_t>(model_.config().max_len) + 1;
  if (ids.size() > limit) ids.resize(limit);
  return ids;
}

namespace {

// Crops or zero-pads the partner so it lines up with the primary element.
Matrix fit_rows(const Matrix& m, Eigen::Index rows) {
  Matrix out = Matrix::Zero(rows, m.cols());
  const Eigen::Index n = std::min(rows, m.rows());
  out.topRows(n) = m.topRows(n);
  return out;
}

TokenIds fit_ids(const TokenIds& ids, std::size_t len) {
  TokenIds out(len, Vocabulary::kPad);
  std::copy_n(ids.begin(), std::min(len, ids.size()), out.begin());
  return out;
}

}  // namespace

double Trainer::train_batch(const TrainingCorpus& corpus, std::span<const std::size_t> items, LanguageId lang,
                            double lr) {
  const std::size_t n = items.size();
  std::vector<Matrix> audio(n);
  std::vector<TokenIds> inputs(n), targets(n);
  UpdateInfo info{lang, {}, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingItem& item = corpus[items[i]];
    info.audio_ids.push_back(item.audio_id);
    const CaptionRecord record{item.audio_id, lang, item.captions.at(lang)};
    const TokenIds ids = encode_caption(lang, sample_caption(record, caption_rng_));
    inputs[i].assign(ids.begin(), ids.end() - 1);
    targets[i].assign(ids.begin() + 1, ids.end());
    audio[i] = config_.spec_augment ? spec_mask(item.audio, config_.specaug, specaug_rng_) : item.audio;
  }

  std::vector<TokenIds> partner_inputs, partner_targets;
  double lambda = 1.0;
  if (config_.mixup) {
    MixupDraw draw;
    if (config_.mixup_fixed_lambda) {
      draw.partner.resize(n);
      for (std::size_t i = 0; i < n; ++i) draw.partner[i] = i;
      mixup_rng_.shuffle(std::span(draw.partner));
      draw.lambda = *config_.mixup_fixed_lambda;
    } else {
      draw = draw_mixup(n, config_.mixup_alpha, mixup_rng_);
    }
    lambda = draw.lambda;
    std::vector<Matrix> mixed(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = draw.partner[i];
      mixed[i] = mixup_embeddings(audio[i], fit_rows(audio[j], audio[i].rows()), lambda);
      partner_inputs.push_back(fit_ids(inputs[j], inputs[i].size()));
      partner_targets.push_back(fit_ids(targets[j], targets[i].size()));
    }
    audio = std::move(mixed);
  }

  std::vector<ForwardCache> caches(n);
  std::vector<Matrix> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<TokenSource> sources{{inputs[i], config_.mixup ? lambda : 1.0}};
    if (config_.mixup) sources.push_back({partner_inputs[i], 1.0 - lambda});
    logits[i] = model_.forward_cached(audio[i], sources, lang, Mode::kTrain, &dropout_rng_, caches[i]);
  }

  std::vector<WeightedTargets> target_sources{{targets, config_.mixup ? lambda : 1.0}};
  if (config_.mixup) target_sources.push_back({partner_targets, 1.0 - lambda});
  LossAndGrad lg = mixed_smoothed_cross_entropy(logits, target_sources, config_.label_smoothing_eps);

  auto params = model_.trunk_parameters();
  auto head = model_.head_parameters(lang);
  params.insert(params.end(), head.begin(), head.end());
  for (auto& p : params) p.param->zero_grad();
  for (std::size_t i = 0; i < n; ++i) model_.backward(caches[i], lg.dlogits[i]);
  optimizer_.step(params, lr);

  info.loss = lg.loss;
  if (on_update) on_update(info);
  return lg.loss;
}

EpochMetrics Trainer::train_epoch(const TrainingCorpus& corpus, std::span<const LanguageId> languages,
                                  std::uint32_t epoch_index) {
  const auto t0 = std::chrono::steady_clock::now();
  EpochMetrics metrics;
  metrics.epoch = epoch_index;
  metrics.lr = cosine_lr(epoch_index, config_.epochs, config_.lr0);

  std::vector<std::string> problems;
  for (LanguageId lang : languages) {
    if (!model_.has_language(lang)) {
      throw Error(ErrorKind::kUnknownLanguage, "no head registered for '" + std::string(language_code(lang)) + "'");
    }
    for (const auto& item : corpus) {
      const auto it = item.captions.find(lang);
      if (it == item.captions.end() || it->second.empty()) {
        problems.push_back(item.audio_id + ": missing captions for language '" + std::string(language_code(lang)) + "'");
      }
    }
  }
  if (!problems.empty()) throw Error(ErrorKind::kMissingData, "corpus lacks declared languages", std::move(problems));

  struct Batch {
    LanguageId lang;
    std::vector<std::size_t> items;
  };
  std::vector<Batch> batches;
  for (LanguageId lang : languages) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng_.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
      const std::size_t end = std::min<std::size_t>(start + config_.batch_size, order.size());
      batches.push_back({lang, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                order.begin() + static_cast<std::ptrdiff_t>(end)}});
    }
  }
  order_rng_.shuffle(std::span(batches));

  double loss_sum = 0.0;
  for (const auto& batch : batches) {
    loss_sum += train_batch(corpus, batch.items, batch.lang, metrics.lr);
    ++metrics.n_updates;
    metrics.n_examples += batch.items.size();
  }
  metrics.train_loss = metrics.n_updates ? loss_sum / static_cast<double>(metrics.n_updates) : 0.0;
  metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return metrics;
}

double Trainer::evaluate_loss(const TrainingCorpus& corpus, std::span<const LanguageId> languages) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (LanguageId lang : languages) {
    for (const auto& item : corpus) {
      const auto it = item.captions.find(lang);
      if (it == item.captions.end()) continue;
      for (const auto& caption : it->second) {
        const TokenIds ids = encode_caption(lang, caption);
        const TokenIds input(ids.begin(), ids.end() - 1);
        const std::vector<TokenIds> target{TokenIds(ids.begin() + 1, ids.end())};
        const std::vector<Matrix> logits{model_.forward(item.audio, input, lang)};
        sum += smoothed_cross_entropy(logits, target, config_.label_smoothing_eps);
        ++count;
      }
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["lr0"] = c.lr0;
  j["weight_decay"] = c.weight_decay;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["label_smoothing_eps"] = c.label_smoothing_eps;
  j["mixup"] = c.mixup;
  j["mixup_alpha"] = c.mixup_alpha;
  j["mixup_fixed_lambda"] = c.mixup_fixed_lambda ? nlohmann::ordered_json(*c.mixup_fixed_lambda) : nullptr;
  j["spec_augment"] = c.spec_augment;
  j["specaug"] = {{"n_time_masks", c.specaug.n_time_masks},
                  {"max_time_width", c.specaug.max_time_width},
                  {"n_channel_masks", c.specaug.n_channel_masks},
                  {"max_channel_width", c.specaug.max_channel_width}};
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  return j.dump();
}

TrainConfig train_config_from_json(std::string_view json, TrainConfig c) {
  try {
    const auto j = nlohmann::json::parse(json);
    c.epochs = j.value("epochs", c.epochs);
    c.lr0 = j.value("lr0", c.lr0);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.label_smoothing_eps = j.value("label_smoothing_eps", c.label_smoothing_eps);
    c.mixup = j.value("mixup", c.mixup);
    c.mixup_alpha = j.value("mixup_alpha", c.mixup_alpha);
    if (j.contains("mixup_fixed_lambda")) {
      const auto& v = j["mixup_fixed_lambda"];
      c.mixup_fixed_lambda = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    c.spec_augment = j.value("spec_augment", c.spec_augment);
    if (j.contains("specaug")) {
      const auto& s = j["specaug"];
      c.specaug.n_time_masks = s.value("n_time_masks", c.specaug.n_time_masks);
      c.specaug.max_time_width = s.value("max_time_width", c.specaug.max_time_width);
      c.specaug.n_channel_masks = s.value("n_channel_masks", c.specaug.n_channel_masks);
      c.specaug.max_channel_width = s.value("max_channel_width", c.specaug.max_channel_width);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace aacap

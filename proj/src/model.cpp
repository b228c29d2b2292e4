// SPDX-License-Identifier: Apache-2.0

#include "aacap/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <set>

#include <json.hpp>

#include "aacap/error.hpp"

namespace aacap {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kInvalidArgument, "model config: " + what); };
  if (d_in == 0) fail("d_in must be > 0");
  if (d_model == 0) fail("d_model must be > 0");
  if (n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff == 0) fail("d_ff must be > 0");
  if (!(trunk_dropout >= 0.0 && trunk_dropout < 1.0)) fail("trunk_dropout must be in [0, 1)");
  if (!(frontend_dropout >= 0.0 && frontend_dropout < 1.0)) fail("frontend_dropout must be in [0, 1)");
  if (max_len == 0) fail("max_len must be > 0");
}

Matrix to_matrix(const EmbeddingSequence& seq) {
  Matrix m(seq.frames, seq.dim);
  for (std::size_t r = 0; r < seq.frames; ++r) {
    for (std::size_t c = 0; c < seq.dim; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = seq.at(r, c);
  }
  return m;
}

MultilingualModel::MultilingualModel(ModelConfig config, std::span<const std::pair<LanguageId, std::size_t>> heads)
    : config_(config) {
  config_.validate();
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  frontend_ = nn::Linear(config_.d_in, d);
  Rng trunk_rng = Rng::derive(config_.init_seed, "init.trunk");
  frontend_.init(trunk_rng);
  for (std::uint32_t i = 0; i < config_.n_layers; ++i) {
    layers_.emplace_back(d, static_cast<int>(config_.n_heads), static_cast<Eigen::Index>(config_.d_ff));
    layers_.back().init(trunk_rng);
  }
  for (const auto& [lang, vocab] : heads) {
    if (heads_.contains(lang)) {
      throw Error(ErrorKind::kInvalidArgument, "duplicate head for '" + std::string(language_code(lang)) + "'");
    }
    LanguageHead head;
    head.language = lang;
    const auto v = static_cast<Eigen::Index>(vocab);
    head.embedding = nn::Param(v, d, nn::ParamKind::kEmbedding);
    head.classifier = nn::Linear(d, v);
    Rng head_rng = Rng::derive(config_.init_seed, "init.head." + std::string(language_code(lang)));
    nn::fill_uniform(head.embedding.value, std::sqrt(3.0), head_rng);
    head.classifier.init(head_rng);
    heads_.emplace(lang, std::move(head));
  }
  positions_ = nn::sinusoidal_positions(config_.max_len, d);
}

std::vector<LanguageId> MultilingualModel::languages() const {
  std::vector<LanguageId> out;
  for (const auto& [lang, head] : heads_) out.push_back(lang);
  return out;
}

void MultilingualModel::check_language(LanguageId lang) const {
  if (!heads_.contains(lang)) {
    throw Error(ErrorKind::kUnknownLanguage, "no head registered for '" + std::string(language_code(lang)) + "'");
  }
}

const LanguageHead& MultilingualModel::head(LanguageId lang) const {
  check_language(lang);
  return heads_.at(lang);
}

LanguageHead& MultilingualModel::head(LanguageId lang) {
  check_language(lang);
  return heads_.at(lang);
}

Matrix MultilingualModel::encode_audio(const Matrix& audio, Mode mode, Rng* rng) const {
  Rng* dropout_rng = mode == Mode::kTrain ? rng : nullptr;
  if (audio.cols() != static_cast<Eigen::Index>(config_.d_in) || audio.rows() == 0) {
    throw Error(ErrorKind::kShapeMismatch, "audio must be frames x " + std::to_string(config_.d_in));
  }
  const auto drop_in = nn::DropoutMask::sample(audio.rows(), audio.cols(), config_.frontend_dropout, dropout_rng);
  Matrix pre = frontend_.forward(drop_in.apply(audio));
  Matrix act = pre.cwiseMax(0.0);
  const auto drop_out = nn::DropoutMask::sample(act.rows(), act.cols(), config_.frontend_dropout, dropout_rng);
  return drop_out.apply(act);
}

Matrix MultilingualModel::embed_sources(std::span<const TokenSource> sources, const LanguageHead& head) const {
  if (sources.empty()) throw Error(ErrorKind::kInvalidArgument, "no decoder input");
  const std::size_t len = sources.front().ids.size();
  if (len == 0) throw Error(ErrorKind::kInvalidArgument, "empty decoder input");
  if (len > config_.max_len) {
    throw Error(ErrorKind::kLengthOverflow,
                "decoder input length " + std::to_string(len) + " exceeds max_len " + std::to_string(config_.max_len));
  }
  const auto vocab = static_cast<TokenId>(head.vocab_size());
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(len), head.embedding.value.cols());
  for (const auto& src : sources) {
    if (src.ids.size() != len) throw Error(ErrorKind::kShapeMismatch, "token sources differ in length");
    for (std::size_t t = 0; t < len; ++t) {
      const TokenId id = src.ids[t];
      if (id < 0 || id >= vocab) throw Error(ErrorKind::kInvalidArgument, "token id out of range");
      x.row(static_cast<Eigen::Index>(t)) += src.weight * head.embedding.value.row(id);
    }
  }
  x += positions_.topRows(static_cast<Eigen::Index>(len));
  return x;
}

Matrix MultilingualModel::forward_cached(const Matrix& audio, std::span<const TokenSource> sources, LanguageId lang,
                                         Mode mode, Rng* rng, ForwardCache& cache) const {
  check_language(lang);
  const LanguageHead& h = heads_.at(lang);
  if (audio.cols() != static_cast<Eigen::Index>(config_.d_in) || audio.rows() == 0) {
    throw Error(ErrorKind::kShapeMismatch, "audio must be frames x " + std::to_string(config_.d_in));
  }
  Rng* dropout_rng = mode == Mode::kTrain ? rng : nullptr;
  cache.language = lang;
  cache.audio = audio;

  cache.frontend_drop_in = nn::DropoutMask::sample(audio.rows(), audio.cols(), config_.frontend_dropout, dropout_rng);
  cache.frontend_dropped_in = cache.frontend_drop_in.apply(audio);
  cache.frontend_pre_act = frontend_.forward(cache.frontend_dropped_in);
  const Matrix act = cache.frontend_pre_act.cwiseMax(0.0);
  cache.frontend_drop_out = nn::DropoutMask::sample(act.rows(), act.cols(), config_.frontend_dropout, dropout_rng);
  cache.memory = cache.frontend_drop_out.apply(act);

  Matrix x = embed_sources(sources, h);
  cache.source_ids.clear();
  cache.source_weights.clear();
  for (const auto& src : sources) {
    cache.source_ids.emplace_back(src.ids.begin(), src.ids.end());
    cache.source_weights.push_back(src.weight);
  }
  cache.embed_drop = nn::DropoutMask::sample(x.rows(), x.cols(), config_.trunk_dropout, dropout_rng);
  x = cache.embed_drop.apply(x);

  cache.layers.assign(layers_.size(), nn::DecoderLayer::Cache());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x, cache.memory, config_.trunk_dropout, dropout_rng, cache.layers[i]);
  }
  cache.final_hidden = x;
  return h.classifier.forward(x);
}

void MultilingualModel::backward(const ForwardCache& cache, const Matrix& dlogits) {
  LanguageHead& h = head(cache.language);
  Matrix dx = h.classifier.backward(cache.final_hidden, dlogits);
  Matrix dmemory = Matrix::Zero(cache.memory.rows(), cache.memory.cols());
  for (std::size_t i = layers_.size(); i-- > 0;) {
    auto [dprev, dmem] = layers_[i].backward(cache.layers[i], dx);
    dx = std::move(dprev);
    dmemory += dmem;
  }
  const Matrix dembed = cache.embed_drop.apply(dx);
  for (std::size_t k = 0; k < cache.source_ids.size(); ++k) {
    const auto& ids = cache.source_ids[k];
    const Real w = cache.source_weights[k];
    for (std::size_t t = 0; t < ids.size(); ++t) {
      h.embedding.grad.row(ids[t]) += w * dembed.row(static_cast<Eigen::Index>(t));
    }
  }
  Matrix dpre = cache.frontend_drop_out.apply(dmemory);
  dpre = dpre.cwiseProduct((cache.frontend_pre_act.array() > 0.0).cast<Real>().matrix());
  frontend_.backward(cache.frontend_dropped_in, dpre);
}

Matrix MultilingualModel::forward(const Matrix& audio, std::span<const TokenId> ids, LanguageId lang, Mode mode,
                                  Rng* rng) const {
  ForwardCache cache;
  const TokenSource src{ids, 1.0};
  return forward_cached(audio, std::span(&src, 1), lang, mode, rng, cache);
}

Matrix MultilingualModel::decode_logits(const Matrix& memory, std::span<const TokenId> ids, LanguageId lang) const {
  check_language(lang);
  const LanguageHead& h = heads_.at(lang);
  const TokenSource src{ids, 1.0};
  Matrix x = embed_sources(std::span(&src, 1), h);
  for (const auto& layer : layers_) {
    nn::DecoderLayer::Cache scratch;
    x = layer.forward(x, memory, 0.0, nullptr, scratch);
  }
  return h.classifier.forward(x);
}

std::vector<Matrix> MultilingualModel::forward_batch(std::span<const Matrix> audio, std::span<const TokenIds> ids,
                                                     LanguageId lang, Mode mode, Rng* rng) const {
  if (audio.size() != ids.size()) throw Error(ErrorKind::kShapeMismatch, "batch audio/target count mismatch");
  std::vector<Matrix> out;
  out.reserve(audio.size());
  for (std::size_t i = 0; i < audio.size(); ++i) out.push_back(forward(audio[i], ids[i], lang, mode, rng));
  return out;
}

std::vector<nn::NamedParam> MultilingualModel::trunk_parameters() {
  std::vector<nn::NamedParam> out;
  frontend_.collect("frontend", out);
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("trunk.layers." + std::to_string(i), out);
  return out;
}

std::vector<nn::NamedParam> MultilingualModel::head_parameters(LanguageId lang) {
  LanguageHead& h = head(lang);
  const std::string prefix = "heads." + std::string(language_code(lang));
  std::vector<nn::NamedParam> out;
  out.push_back({prefix + ".embedding", &h.embedding});
  h.classifier.collect(prefix + ".classifier", out);
  return out;
}

std::vector<nn::NamedParam> MultilingualModel::parameters() {
  auto out = trunk_parameters();
  for (LanguageId lang : languages()) {
    auto hp = head_parameters(lang);
    out.insert(out.end(), hp.begin(), hp.end());
  }
  return out;
}

void MultilingualModel::zero_grad() {
  for (auto& p : parameters()) p.param->zero_grad();
}

// ---------------------------------------------------------------------------

ParamReport count_params(const ModelConfig& config, std::span<const std::pair<LanguageId, std::size_t>> vocab_sizes) {
  const std::uint64_t d = config.d_model, ff = config.d_ff;
  ParamReport r;
  r.frontend = static_cast<std::uint64_t>(config.d_in) * d + d;
  const std::uint64_t attention = 4 * (d * d + d);
  const std::uint64_t feed_forward = d * ff + ff + ff * d + d;
  const std::uint64_t norms = 3 * 2 * d;
  r.trunk = config.n_layers * (2 * attention + feed_forward + norms);
  r.trainable = r.frontend + r.trunk;
  for (const auto& [lang, vocab] : vocab_sizes) {
    HeadParamCount h{lang, vocab * d, vocab * d + vocab};
    r.trainable += h.embedding + h.classifier;
    r.heads.push_back(h);
  }
  r.total = r.trainable + r.frozen_encoder;
  return r;
}

ParamReport count_params(const MultilingualModel& model) {
  auto& m = const_cast<MultilingualModel&>(model);
  ParamReport r;
  for (const auto& p : m.trunk_parameters()) {
    const auto n = static_cast<std::uint64_t>(p.param->size());
    (p.name.starts_with("frontend") ? r.frontend : r.trunk) += n;
  }
  r.trainable = r.frontend + r.trunk;
  for (LanguageId lang : m.languages()) {
    HeadParamCount h{lang, 0, 0};
    for (const auto& p : m.head_parameters(lang)) {
      const auto n = static_cast<std::uint64_t>(p.param->size());
      (p.name.ends_with(".embedding") ? h.embedding : h.classifier) += n;
    }
    r.trainable += h.embedding + h.classifier;
    r.heads.push_back(h);
  }
  r.total = r.trainable + r.frozen_encoder;
  return r;
}

double size_comparison(std::span<const std::pair<LanguageId, ParamReport>> mono_reports,
                       const ParamReport& multi_report) {
  std::set<LanguageId> mono_langs, multi_langs;
  double mono_total = 0.0;
  for (const auto& [lang, report] : mono_reports) {
    if (!mono_langs.insert(lang).second) {
      throw Error(ErrorKind::kInvalidArgument, "duplicate monolingual report for '" + std::string(language_code(lang)) + "'");
    }
    mono_total += static_cast<double>(report.total);
  }
  for (const auto& h : multi_report.heads) multi_langs.insert(h.language);
  if (mono_langs != multi_langs) {
    throw Error(ErrorKind::kInvalidArgument, "monolingual and multilingual language sets differ");
  }
  if (mono_total <= 0.0) throw Error(ErrorKind::kInvalidArgument, "monolingual total is zero");
  return 100.0 * (mono_total - static_cast<double>(multi_report.total)) / mono_total;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorKind::kPayloadLength, "checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

nlohmann::ordered_json config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_in"] = c.d_in;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["trunk_dropout"] = c.trunk_dropout;
  j["frontend_dropout"] = c.frontend_dropout;
  j["max_len"] = c.max_len;
  j["init_seed"] = c.init_seed;
  return j;
}

ModelConfig config_from(const nlohmann::json& j, ModelConfig c) {
  try {
    c.d_in = j.value("d_in", c.d_in);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.trunk_dropout = j.value("trunk_dropout", c.trunk_dropout);
    c.frontend_dropout = j.value("frontend_dropout", c.frontend_dropout);
    c.max_len = j.value("max_len", c.max_len);
    c.init_seed = j.value("init_seed", c.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig model_config_from_json(std::string_view json, ModelConfig base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("model config: ") + e.what());
  }
  return config_from(j, base);
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  auto& model = const_cast<MultilingualModel&>(checkpoint.model);
  nlohmann::ordered_json header;
  header["config"] = config_json(model.config());
  nlohmann::ordered_json vocabs = nlohmann::ordered_json::object();
  for (LanguageId lang : model.languages()) {
    const auto it = checkpoint.vocabularies.find(lang);
    if (it == checkpoint.vocabularies.end()) {
      throw Error(ErrorKind::kMissingData, "checkpoint lacks vocabulary for '" + std::string(language_code(lang)) + "'");
    }
    if (it->second.size() != model.head(lang).vocab_size()) {
      throw Error(ErrorKind::kShapeMismatch, "vocabulary size does not match head for '" +
                                                 std::string(language_code(lang)) + "'");
    }
    vocabs[std::string(language_code(lang))] = it->second.tokens();
  }
  header["vocabularies"] = std::move(vocabs);
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  const auto params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Matrix& m = p.param->value;
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_u64(out, std::bit_cast<std::uint64_t>(m(r, c)));
    }
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string_view(kCheckpointMagic, 4)) throw Error(ErrorKind::kBadMagic, "bad magic: expected ACKP");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kBadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::string_view header_text = in.take(in.u32());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("checkpoint header: ") + e.what());
  }
  const ModelConfig config = config_from(header.at("config"), ModelConfig{});
  Checkpoint ckpt;
  std::vector<std::pair<LanguageId, std::size_t>> heads;
  for (const auto& [code, tokens] : header.at("vocabularies").items()) {
    const auto lang = parse_language(code);
    if (!lang) throw Error(ErrorKind::kUnknownLanguage, "checkpoint language '" + code + "'");
    auto vocab = Vocabulary::from_json(nlohmann::json{{"tokens", tokens}}.dump());
    heads.emplace_back(*lang, vocab.size());
    ckpt.vocabularies.emplace(*lang, std::move(vocab));
  }
  ckpt.model = MultilingualModel(config, heads);
  auto params = ckpt.model.parameters();
  const std::uint32_t count = in.u32();
  if (count != params.size()) {
    throw Error(ErrorKind::kShapeMismatch, "checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                                               std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string_view name = in.take(in.u32());
    if (name != p.name) throw Error(ErrorKind::kShapeMismatch, "unexpected tensor '" + std::string(name) + "'");
    const std::uint32_t rows = in.u32(), cols = in.u32();
    Matrix& m = p.param->value;
    if (rows != m.rows() || cols != m.cols()) {
      throw Error(ErrorKind::kShapeMismatch, "tensor '" + p.name + "' has wrong shape");
    }
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = std::bit_cast<double>(in.u64());
    }
  }
  if (!in.done()) throw Error(ErrorKind::kPayloadLength, "trailing bytes after checkpoint tensors");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  detail::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace aacap

// SPDX-License-Identifier: Apache-2.0

#include "aacap/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "aacap/error.hpp"

namespace aacap::cli {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Digests and run manifests

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::kIo, "sha256 failed");
  }
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return ss.str();
}

std::string file_digest(const fs::path& path) { return sha256_hex(detail::read_file(path)); }

std::string directory_digest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::kIo, "not a directory: " + dir.string());
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    entries.emplace_back(fs::relative(e.path(), dir).generic_string(), file_digest(e.path()));
  }
  std::sort(entries.begin(), entries.end());
  std::string listing;
  for (const auto& [name, digest] : entries) listing += name + '\0' + digest + '\n';
  return sha256_hex(listing);
}

std::string RunManifest::to_json() const {
  ordered_json j;
  j["command"] = command;
  j["toolkit_version"] = kToolkitVersion;
  j["config"] = ordered_json::parse(config_json);
  ordered_json in = ordered_json::object();
  for (const auto& [name, digest] : inputs) in[name] = digest;
  j["inputs"] = std::move(in);
  j["seed"] = seed ? ordered_json(*seed) : nullptr;
  j["created_at"] = created_at;
  return j.dump(2);
}

void RunManifest::write(const fs::path& out_dir) const { detail::write_file(out_dir / "run_manifest.json", to_json() + "\n"); }

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunManifest make_manifest(std::string command, std::string config_json) {
  RunManifest m;
  m.command = std::move(command);
  m.config_json = std::move(config_json);
  m.created_at = utc_now();
  return m;
}

ordered_json language_codes(std::span<const LanguageId> langs) {
  ordered_json a = ordered_json::array();
  for (LanguageId l : langs) a.push_back(language_code(l));
  return a;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

std::string millions(std::uint64_t n) { return fixed(static_cast<double>(n) / 1e6, 2) + "M"; }

void require_languages(std::span<const LanguageId> langs) {
  if (langs.empty()) throw Error(ErrorKind::kInvalidArgument, "at least one language is required");
}

}  // namespace

std::vector<std::pair<LanguageId, std::size_t>> reference_vocab_sizes() {
  return {{LanguageId::kEn, 4861}, {LanguageId::kFr, 5797}, {LanguageId::kEs, 5889}, {LanguageId::kDe, 9391}};
}

std::vector<std::pair<LanguageId, std::size_t>> parse_vocab_sizes(std::string_view spec) {
  std::vector<std::pair<LanguageId, std::size_t>> out;
  std::stringstream ss{std::string(spec)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::kInvalidArgument, "vocab size '" + item + "' is not lang=N");
    const auto lang = parse_language(item.substr(0, eq));
    if (!lang) throw Error(ErrorKind::kUnknownLanguage, "unknown language in '" + item + "'");
    std::size_t n = 0;
    try {
      std::size_t used = 0;
      n = std::stoull(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw Error(ErrorKind::kInvalidArgument, "bad vocabulary size in '" + item + "'");
    }
    out.emplace_back(*lang, n);
  }
  if (out.empty()) throw Error(ErrorKind::kInvalidArgument, "no vocabulary sizes given");
  return out;
}

// ---------------------------------------------------------------------------
// prepare

void cmd_prepare(const PrepareOptions& opts, std::ostream& out) {
  require_languages(opts.languages);
  const CaptionManifest manifest = CaptionManifest::load(opts.manifest);
  auto problems = manifest.validate(opts.languages, opts.embeddings_dir, opts.expected_dim);
  if (!problems.empty()) throw Error(ErrorKind::kValidation, "corpus validation failed", std::move(problems));

  auto vocab_split = manifest.split(Split::kTrain);
  if (vocab_split.empty()) {
    for (const auto& e : manifest.entries()) vocab_split.push_back(&e);
  }
  fs::create_directories(opts.out);
  ordered_json vocab_sizes = ordered_json::object();
  for (LanguageId lang : opts.languages) {
    std::vector<Tokens> corpus;
    for (const ManifestEntry* e : vocab_split) {
      for (const auto& c : e->captions.at(lang)) corpus.push_back(tokenize(c));
    }
    const Vocabulary vocab = Vocabulary::build(corpus, opts.min_count);
    vocab.save(opts.out / ("vocab_" + std::string(language_code(lang)) + ".json"));
    vocab_sizes[std::string(language_code(lang))] = vocab.size();
    out << "vocab_" << language_code(lang) << ".json: " << vocab.size() << " tokens\n";
  }

  ordered_json index;
  index["languages"] = language_codes(opts.languages);
  ordered_json splits = ordered_json::object();
  std::uint32_t dim = 0;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    ordered_json items = ordered_json::array();
    for (const ManifestEntry* e : manifest.split(s)) {
      const auto seq = load_embedding(embedding_path(opts.embeddings_dir, e->audio_id), opts.expected_dim);
      dim = seq.dim;
      items.push_back({{"audio_id", e->audio_id}, {"frames", seq.frames}});
    }
    splits[std::string(split_name(s))] = std::move(items);
  }
  index["embedding_dim"] = dim;
  index["splits"] = std::move(splits);
  index["vocab_sizes"] = std::move(vocab_sizes);
  detail::write_file(opts.out / "index.json", index.dump(2) + "\n");

  ordered_json cfg;
  cfg["languages"] = language_codes(opts.languages);
  cfg["min_count"] = opts.min_count;
  cfg["expected_dim"] = opts.expected_dim;
  RunManifest rm = make_manifest("prepare", cfg.dump());
  rm.inputs = {{"manifest", file_digest(opts.manifest)}, {"embeddings_dir", directory_digest(opts.embeddings_dir)}};
  rm.write(opts.out);
  out << "validated " << manifest.entries().size() << " audio files\n";
}

// ---------------------------------------------------------------------------
// stats

std::vector<CorpusStats> cmd_stats(const StatsOptions& opts, std::ostream& out) {
  const CaptionManifest manifest = CaptionManifest::load(opts.manifest);
  std::vector<LanguageId> langs = opts.languages.empty() ? manifest.languages() : opts.languages;
  require_languages(langs);
  std::vector<CorpusStats> rows;
  for (LanguageId lang : langs) {
    for (Split s : opts.splits) rows.push_back(compute_stats(manifest, lang, s));
  }
  out << std::left << std::setw(6) << "lang" << std::setw(7) << "split" << std::right << std::setw(10) << "captions"
      << std::setw(14) << "sent_length" << std::setw(12) << "word_types" << "\n";
  ordered_json j = ordered_json::array();
  for (const auto& r : rows) {
    out << std::left << std::setw(6) << language_code(r.language) << std::setw(7) << split_name(r.split) << std::right
        << std::setw(10) << r.n_captions << std::setw(14) << fixed(r.avg_sentence_length, 1) << std::setw(12)
        << r.word_types << "\n";
    j.push_back({{"language", language_code(r.language)},
                 {"split", split_name(r.split)},
                 {"n_captions", r.n_captions},
                 {"avg_sentence_length", r.avg_sentence_length},
                 {"word_types", r.word_types}});
  }
  if (opts.out) {
    detail::write_file(*opts.out / "stats.json", j.dump(2) + "\n");
    ordered_json cfg;
    cfg["languages"] = language_codes(langs);
    ordered_json splits = ordered_json::array();
    for (Split s : opts.splits) splits.push_back(split_name(s));
    cfg["splits"] = std::move(splits);
    RunManifest rm = make_manifest("stats", cfg.dump());
    rm.inputs = {{"manifest", file_digest(opts.manifest)}};
    rm.write(*opts.out);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// train

TrainRunConfig TrainRunConfig::from_json(std::string_view json, const fs::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("train run config: ") + e.what());
  }
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base_dir.empty() ? fs::path(p) : base_dir / p; };
  TrainRunConfig c;
  try {
    if (j.contains("manifest")) c.manifest = resolve(j["manifest"].get<std::string>());
    if (j.contains("embeddings_dir")) c.embeddings_dir = resolve(j["embeddings_dir"].get<std::string>());
    if (j.contains("vocab_dir")) c.vocab_dir = resolve(j["vocab_dir"].get<std::string>());
    if (j.contains("out")) c.out = resolve(j["out"].get<std::string>());
    if (j.contains("languages")) {
      std::string list;
      for (const auto& l : j["languages"]) list += l.get<std::string>() + ",";
      c.languages = parse_language_list(list);
    }
    if (j.contains("model")) c.model = model_config_from_json(j["model"].dump());
    if (j.contains("train")) c.train = train_config_from_json(j["train"].dump());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("train run config: ") + e.what());
  }
  return c;
}

std::string TrainRunConfig::to_json() const {
  ordered_json j;
  j["manifest"] = manifest.generic_string();
  j["embeddings_dir"] = embeddings_dir.generic_string();
  j["languages"] = language_codes(languages);
  j["vocab_dir"] = vocab_dir ? ordered_json(vocab_dir->generic_string()) : nullptr;
  j["out"] = out.generic_string();
  j["model"] = ordered_json::parse(model_config_to_json(model));
  j["train"] = ordered_json::parse(train_config_to_json(train));
  return j.dump();
}

TrainOutcome run_training(const TrainRunConfig& cfg, std::ostream& out, const std::string& config_digest) {
  require_languages(cfg.languages);
  if (cfg.out.empty()) throw Error(ErrorKind::kInvalidArgument, "training needs an output directory");
  const CaptionManifest manifest = CaptionManifest::load(cfg.manifest);
  const TrainingCorpus train = load_training_corpus(manifest, Split::kTrain, cfg.languages, cfg.embeddings_dir, cfg.model.d_in);
  if (train.empty()) throw Error(ErrorKind::kValidation, "the train split is empty");
  TrainingCorpus val;
  if (!manifest.split(Split::kVal).empty()) {
    val = load_training_corpus(manifest, Split::kVal, cfg.languages, cfg.embeddings_dir, cfg.model.d_in);
  }

  std::map<LanguageId, Vocabulary> vocabs;
  std::vector<std::pair<LanguageId, std::size_t>> heads;
  for (LanguageId lang : cfg.languages) {
    Vocabulary v;
    if (cfg.vocab_dir) {
      v = Vocabulary::load(*cfg.vocab_dir / ("vocab_" + std::string(language_code(lang)) + ".json"));
    } else {
      std::vector<Tokens> corpus;
      for (const auto& item : train) {
        for (const auto& c : item.captions.at(lang)) corpus.push_back(tokenize(c));
      }
      v = Vocabulary::build(corpus);
    }
    heads.emplace_back(lang, v.size());
    vocabs.emplace(lang, std::move(v));
  }

  MultilingualModel model(cfg.model, heads);
  Trainer trainer(model, vocabs, cfg.train);
  fs::create_directories(cfg.out);
  std::string metrics_log;
  TrainOutcome outcome;
  for (std::uint32_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    EpochMetrics m = trainer.train_epoch(train, cfg.languages, epoch);
    if (!val.empty()) m.val_loss = trainer.evaluate_loss(val, cfg.languages);
    ordered_json line;
    line["epoch"] = m.epoch;
    line["lr"] = m.lr;
    line["train_loss"] = m.train_loss;
    line["val_loss"] = m.val_loss ? ordered_json(*m.val_loss) : nullptr;
    line["seconds"] = m.seconds;
    metrics_log += line.dump() + "\n";
    outcome.epochs.push_back(m);
  }
  detail::write_file(cfg.out / "metrics.jsonl", metrics_log);
  outcome.checkpoint = cfg.out / "checkpoint.ackp";
  save_checkpoint(outcome.checkpoint, Checkpoint{std::move(model), std::move(vocabs)});

  RunManifest rm = make_manifest("train", cfg.to_json());
  rm.seed = cfg.train.seed;
  if (!config_digest.empty()) rm.inputs.emplace_back("config", config_digest);
  rm.inputs.emplace_back("manifest", file_digest(cfg.manifest));
  rm.inputs.emplace_back("embeddings_dir", directory_digest(cfg.embeddings_dir));
  rm.write(cfg.out);

  if (!outcome.epochs.empty()) {
    out << "trained " << outcome.epochs.size() << " epochs, " << outcome.epochs.back().n_updates
        << " updates/epoch; train loss " << fixed(outcome.epochs.front().train_loss, 4) << " -> "
        << fixed(outcome.epochs.back().train_loss, 4) << "\n";
  }
  out << "checkpoint: " << outcome.checkpoint.string() << "\n";
  return outcome;
}

TrainOutcome cmd_train(const fs::path& config_path, const TrainOverrides& ov, std::ostream& out) {
  const std::string text = detail::read_file(config_path);
  TrainRunConfig cfg = TrainRunConfig::from_json(text, config_path.parent_path());
  if (ov.manifest) cfg.manifest = *ov.manifest;
  if (ov.embeddings_dir) cfg.embeddings_dir = *ov.embeddings_dir;
  if (ov.out) cfg.out = *ov.out;
  if (ov.languages) cfg.languages = *ov.languages;
  if (ov.epochs) cfg.train.epochs = *ov.epochs;
  if (ov.seed) {
    cfg.train.seed = *ov.seed;
    cfg.model.init_seed = *ov.seed;
  }
  return run_training(cfg, out, sha256_hex(text));
}

// ---------------------------------------------------------------------------
// caption

void cmd_caption(const CaptionOptions& opts, std::ostream& out) {
  opts.decode.validate();
  const Checkpoint ckpt = load_checkpoint(opts.checkpoint);
  std::vector<LanguageId> langs = opts.languages.empty() ? ckpt.model.languages() : opts.languages;
  for (LanguageId l : langs) (void)ckpt.model.head(l);

  std::vector<std::string> ids;
  if (opts.manifest) {
    const CaptionManifest manifest = CaptionManifest::load(*opts.manifest);
    for (const ManifestEntry* e : manifest.split(opts.split)) ids.push_back(e->audio_id);
  } else {
    for (const auto& e : fs::directory_iterator(opts.embeddings_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".aemb") ids.push_back(e.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
  }
  if (ids.empty()) throw Error(ErrorKind::kValidation, "no audio to caption");

  std::vector<std::string> problems;
  std::vector<std::pair<std::string, Matrix>> audio;
  for (const auto& id : ids) {
    try {
      audio.emplace_back(id, to_matrix(load_embedding(embedding_path(opts.embeddings_dir, id), ckpt.model.config().d_in)));
    } catch (const Error& e) {
      problems.push_back(id + ": " + e.what());
    }
  }
  if (!problems.empty()) throw Error(ErrorKind::kValidation, "cannot load embeddings", std::move(problems));

  ordered_json dc;
  dc["beam_size"] = opts.decode.beam_size;
  dc["max_len"] = opts.decode.max_len;
  dc["length_penalty"] = opts.decode.length_penalty;
  std::string lines;
  for (LanguageId lang : langs) {
    const StopwordList stopwords = StopwordList::load_from_dir(lang, opts.stopwords_dir);
    const Vocabulary& vocab = ckpt.vocabularies.at(lang);
    for (const auto& [id, a] : audio) {
      const Caption c = caption_audio(ckpt.model, a, lang, vocab, stopwords, opts.decode);
      ordered_json line;
      line["audio_id"] = id;
      line["language"] = language_code(lang);
      line["caption"] = join_tokens(c.tokens);
      line["log_prob"] = c.log_prob;
      line["normalized_score"] = c.normalized_score;
      line["decode_config"] = dc;
      lines += line.dump() + "\n";
    }
  }
  fs::create_directories(opts.out);
  detail::write_file(opts.out / "captions.jsonl", lines);

  ordered_json cfg;
  cfg["languages"] = language_codes(langs);
  cfg["decode"] = dc;
  cfg["split"] = opts.manifest ? ordered_json(split_name(opts.split)) : nullptr;
  RunManifest rm = make_manifest("caption", cfg.dump());
  rm.inputs.emplace_back("checkpoint", file_digest(opts.checkpoint));
  rm.inputs.emplace_back("embeddings_dir", directory_digest(opts.embeddings_dir));
  if (opts.manifest) rm.inputs.emplace_back("manifest", file_digest(*opts.manifest));
  rm.write(opts.out);
  out << "wrote " << audio.size() * langs.size() << " captions to " << (opts.out / "captions.jsonl").string() << "\n";
}

std::map<LanguageId, CaptionMap> read_captions(const fs::path& path) {
  const std::string text = detail::read_file(path);
  std::map<LanguageId, CaptionMap> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto lang = parse_language(j.at("language").get<std::string>());
      if (!lang) throw Error(ErrorKind::kUnknownLanguage, "unknown language on line " + std::to_string(line_no));
      out[*lang][j.at("audio_id").get<std::string>()] = j.at("caption").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kParse, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// eval

std::unique_ptr<EmbedderProvider> make_embedder(const EmbedderOptions& opts) {
  if (opts.url) return std::make_unique<HttpEmbedder>(*opts.url);
  if (opts.table) return std::make_unique<StubEmbedder>(StubEmbedder::from_json(detail::read_file(*opts.table)));
  throw Error(ErrorKind::kInvalidArgument, "sentence similarity needs --embedder-url or --embedder-table");
}

EvalReport cmd_eval(const EvalOptions& opts, std::ostream& out) {
  const auto captions = read_captions(opts.captions);
  if (captions.empty()) throw Error(ErrorKind::kValidation, "no captions in " + opts.captions.string());
  const CaptionManifest manifest = CaptionManifest::load(opts.manifest);
  std::unique_ptr<EmbedderProvider> provider;
  if (opts.sbert) provider = make_embedder(opts.embedder);

  EvalReport report;
  for (const auto& [lang, cands] : captions) {
    const ReferenceMap refs = manifest.references(opts.split, lang);
    LanguageEval le;
    le.language = lang;
    le.n_items = cands.size();
    if (opts.cider) {
      const CiderResult c = cider_d(cands, refs);
      le.cider_d_raw = c.score;
      le.cider_d = 100.0 * c.score;
    }
    if (provider) le.sbert_sim = sbert_sim(cands, refs, *provider, lang, opts.aggregation).score;
    report.languages.push_back(le);
  }
  ordered_json cfg;
  cfg["split"] = split_name(opts.split);
  cfg["metrics"] = {{"cider_d", opts.cider}, {"sbert_sim", opts.sbert}};
  cfg["reference_aggregation"] = opts.aggregation == ReferenceAggregation::kMean ? "mean" : "max";
  cfg["embedder"] = provider ? ordered_json(provider->name()) : nullptr;
  cfg["cider"] = {{"n", kCiderMaxN}, {"sigma", kCiderSigma}, {"scale", kCiderScale}};
  report.config_json = cfg.dump();

  out << std::left << std::setw(6) << "lang" << std::right << std::setw(8) << "items" << std::setw(12) << "CIDEr-D%"
      << std::setw(12) << "SBERT-sim%" << "\n";
  for (const auto& l : report.languages) {
    out << std::left << std::setw(6) << language_code(l.language) << std::right << std::setw(8) << l.n_items
        << std::setw(12) << (l.cider_d ? fixed(*l.cider_d, 1) : "-") << std::setw(12)
        << (l.sbert_sim ? fixed(*l.sbert_sim, 1) : "-") << "\n";
  }
  if (opts.out) {
    detail::write_file(*opts.out / "eval_report.json", report.to_json() + "\n");
    RunManifest rm = make_manifest("eval", report.config_json);
    rm.inputs = {{"captions", file_digest(opts.captions)}, {"manifest", file_digest(opts.manifest)}};
    if (opts.embedder.table) rm.inputs.emplace_back("embedder_table", file_digest(*opts.embedder.table));
    rm.write(*opts.out);
  }
  return report;
}

// ---------------------------------------------------------------------------
// params

namespace {

ordered_json report_json(const ParamReport& r) {
  ordered_json j;
  j["frontend"] = r.frontend;
  j["trunk"] = r.trunk;
  ordered_json heads = ordered_json::array();
  for (const auto& h : r.heads) {
    heads.push_back({{"language", language_code(h.language)}, {"embedding", h.embedding}, {"classifier", h.classifier}});
  }
  j["heads"] = std::move(heads);
  j["trainable"] = r.trainable;
  j["frozen_encoder"] = r.frozen_encoder;
  j["total"] = r.total;
  return j;
}

}  // namespace

std::string ParamsSummary::to_json() const {
  ordered_json j;
  ordered_json m = ordered_json::object();
  std::uint64_t total = 0, trainable = 0;
  for (const auto& [lang, r] : mono) {
    m[std::string(language_code(lang))] = report_json(r);
    total += r.total;
    trainable += r.trainable;
  }
  j["monolingual"] = std::move(m);
  j["monolingual_sum"] = {{"trainable", trainable}, {"total", total}};
  j["multilingual"] = report_json(multi);
  j["reduction_percent"] = reduction_percent;
  return j.dump(2);
}

ParamsSummary cmd_params(const ParamsOptions& opts, std::ostream& out) {
  ModelConfig config;
  std::string config_digest;
  if (opts.config) {
    const std::string text = detail::read_file(*opts.config);
    config_digest = sha256_hex(text);
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorKind::kParse, "cannot parse " + opts.config->string());
    config = model_config_from_json(j.contains("model") ? j["model"].dump() : text);
  }
  if (opts.vocab_sizes.empty()) throw Error(ErrorKind::kInvalidArgument, "no vocabulary sizes given");
  ParamsSummary s;
  for (const auto& entry : opts.vocab_sizes) s.mono.emplace_back(entry.first, count_params(config, std::span(&entry, 1)));
  s.multi = count_params(config, opts.vocab_sizes);
  s.reduction_percent = size_comparison(s.mono, s.multi);

  out << std::left << std::setw(10) << "system" << std::right << std::setw(12) << "embedding" << std::setw(12)
      << "classifier" << std::setw(12) << "trainable" << std::setw(12) << "total" << "\n";
  std::uint64_t mono_total = 0, mono_trainable = 0;
  for (const auto& [lang, r] : s.mono) {
    out << std::left << std::setw(10) << ("mono-" + std::string(language_code(lang))) << std::right << std::setw(12)
        << millions(r.heads[0].embedding) << std::setw(12) << millions(r.heads[0].classifier) << std::setw(12)
        << millions(r.trainable) << std::setw(12) << millions(r.total) << "\n";
    mono_total += r.total;
    mono_trainable += r.trainable;
  }
  out << std::left << std::setw(10) << "mono-sum" << std::right << std::setw(12) << "" << std::setw(12) << ""
      << std::setw(12) << millions(mono_trainable) << std::setw(12) << millions(mono_total) << "\n";
  out << std::left << std::setw(10) << "multi" << std::right << std::setw(12) << "" << std::setw(12) << ""
      << std::setw(12) << millions(s.multi.trainable) << std::setw(12) << millions(s.multi.total) << "\n";
  out << "shared trunk " << millions(s.multi.trunk) << ", front-end " << millions(s.multi.frontend)
      << ", frozen encoder " << millions(s.multi.frozen_encoder) << "\n";
  out << "size reduction vs monolingual systems: " << fixed(s.reduction_percent, 2) << "%\n";

  if (opts.out) {
    detail::write_file(*opts.out / "params.json", s.to_json() + "\n");
    ordered_json cfg;
    cfg["model"] = ordered_json::parse(model_config_to_json(config));
    ordered_json sizes = ordered_json::object();
    for (const auto& [lang, n] : opts.vocab_sizes) sizes[std::string(language_code(lang))] = n;
    cfg["vocab_sizes"] = std::move(sizes);
    RunManifest rm = make_manifest("params", cfg.dump());
    if (!config_digest.empty()) rm.inputs.emplace_back("config", config_digest);
    rm.write(*opts.out);
  }
  return s;
}

// ---------------------------------------------------------------------------
// compare-langs

std::map<LanguageId, double> cmd_compare_langs(const CompareOptions& opts, std::ostream& out) {
  if (opts.captions.empty()) throw Error(ErrorKind::kInvalidArgument, "no caption files given");
  std::map<LanguageId, CaptionMap> merged;
  for (const auto& path : opts.captions) {
    for (auto& [lang, caps] : read_captions(path)) {
      for (auto& [id, c] : caps) {
        if (!merged[lang].emplace(id, c).second) {
          throw Error(ErrorKind::kValidation, "duplicate caption for " + id + " in " + std::string(language_code(lang)));
        }
      }
    }
  }
  const auto provider = make_embedder(opts.embedder);
  const auto sims = cross_language_similarity(merged, opts.base, *provider);

  out << "similarity to " << language_code(opts.base) << " outputs (" << merged.at(opts.base).size() << " items)\n";
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [lang, v] : sims) {
    out << "  " << language_code(lang) << "  " << fixed(v, 1) << "%\n";
    if (lang != opts.base) {
      sum += v;
      ++n;
    }
  }
  if (n) out << "  mean over non-base languages: " << fixed(sum / static_cast<double>(n), 1) << "%\n";

  if (opts.out) {
    ordered_json j;
    j["base"] = language_code(opts.base);
    ordered_json per = ordered_json::object();
    for (const auto& [lang, v] : sims) per[std::string(language_code(lang))] = v;
    j["similarity"] = std::move(per);
    j["mean_non_base"] = n ? ordered_json(sum / static_cast<double>(n)) : nullptr;
    detail::write_file(*opts.out / "compare_langs.json", j.dump(2) + "\n");
    ordered_json cfg;
    cfg["base"] = language_code(opts.base);
    cfg["embedder"] = provider->name();
    RunManifest rm = make_manifest("compare-langs", cfg.dump());
    for (std::size_t i = 0; i < opts.captions.size(); ++i) {
      rm.inputs.emplace_back("captions_" + std::to_string(i), file_digest(opts.captions[i]));
    }
    rm.write(*opts.out);
  }
  return sims;
}

// ---------------------------------------------------------------------------
// entry point

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo:
    case ErrorKind::kProvider:
      return kExitRuntime;
    default:
      return kExitValidation;
  }
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message,
                  const std::vector<std::string>& items) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  j["items"] = items;
  err << j.dump() << "\n";
}

Split split_or_throw(const std::string& name) {
  const auto s = parse_split(name);
  if (!s) throw Error(ErrorKind::kInvalidArgument, "unknown split '" + name + "'");
  return *s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multilingual audio captioning toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolkitVersion));

  std::string manifest, embeddings_dir, languages, config, out_dir, split = "test", vocab_sizes, stopwords_dir;
  std::string embedder_url, embedder_table, metrics = "cider", base = "en", aggregation = "mean";
  std::string checkpoint, captions_file;
  std::vector<std::string> caption_files, stats_splits;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0, expected_dim = 0;
  std::size_t min_count = 1;
  DecodeConfig decode;

  auto* prepare = app.add_subcommand("prepare", "validate a corpus and build vocabularies");
  prepare->add_option("--manifest", manifest, "caption manifest (JSON Lines)")->required();
  prepare->add_option("--embeddings-dir", embeddings_dir, "directory of <audio_id>.aemb files")->required();
  prepare->add_option("--languages", languages, "comma-separated language codes")->required();
  prepare->add_option("--out", out_dir, "output directory")->required();
  prepare->add_option("--dim", expected_dim, "required embedding width (0 = any)");
  prepare->add_option("--min-count", min_count, "minimum token frequency")->check(CLI::PositiveNumber);

  auto* stats = app.add_subcommand("stats", "sentence length and word-type counts");
  stats->add_option("--manifest", manifest)->required();
  stats->add_option("--languages", languages);
  stats->add_option("--split", stats_splits, "train, val or test (repeatable)");
  stats->add_option("--out", out_dir);

  auto* train = app.add_subcommand("train", "train a mono- or multilingual decoder");
  train->add_option("--config", config, "training run config (JSON)")->required();
  auto* o_manifest = train->add_option("--manifest", manifest);
  auto* o_emb = train->add_option("--embeddings-dir", embeddings_dir);
  auto* o_langs = train->add_option("--languages", languages);
  auto* o_seed = train->add_option("--seed", seed);
  auto* o_out = train->add_option("--out", out_dir);
  auto* o_epochs = train->add_option("--epochs", epochs);

  auto* caption = app.add_subcommand("caption", "decode captions with constrained beam search");
  caption->add_option("--checkpoint", checkpoint)->required();
  caption->add_option("--embeddings-dir", embeddings_dir)->required();
  auto* c_manifest = caption->add_option("--manifest", manifest, "restrict to one split of this manifest");
  caption->add_option("--split", split);
  caption->add_option("--languages", languages);
  caption->add_option("--beam-size", decode.beam_size)->check(CLI::PositiveNumber);
  caption->add_option("--max-len", decode.max_len)->check(CLI::PositiveNumber);
  caption->add_option("--length-penalty", decode.length_penalty);
  caption->add_option("--stopwords-dir", stopwords_dir);
  caption->add_option("--out", out_dir)->required();

  auto* eval = app.add_subcommand("eval", "score captions against references");
  eval->add_option("--captions", captions_file)->required();
  eval->add_option("--manifest", manifest, "reference manifest")->required();
  eval->add_option("--split", split);
  eval->add_option("--metrics", metrics, "comma-separated: cider,sbert");
  eval->add_option("--aggregation", aggregation, "mean or max over references");
  eval->add_option("--embedder-url", embedder_url);
  eval->add_option("--embedder-table", embedder_table);
  eval->add_option("--out", out_dir);

  auto* params = app.add_subcommand("params", "parameter accounting for mono- and multilingual models");
  params->add_option("--config", config, "model config (JSON, optionally under \"model\")");
  params->add_option("--vocab-sizes", vocab_sizes, "e.g. en=4861,fr=5797,es=5889,de=9391");
  params->add_option("--out", out_dir);

  auto* compare = app.add_subcommand("compare-langs", "cross-language similarity of system outputs");
  compare->add_option("--captions", caption_files, "captions JSONL files")->required();
  compare->add_option("--base", base);
  compare->add_option("--embedder-url", embedder_url);
  compare->add_option("--embedder-table", embedder_table);
  compare->add_option("--out", out_dir);

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolkitVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what(), {});
    return kExitValidation;
  }

  auto embedder_opts = [&] {
    EmbedderOptions o;
    if (!embedder_url.empty()) o.url = embedder_url;
    if (!embedder_table.empty()) o.table = embedder_table;
    return o;
  };

  try {
    if (*prepare) {
      PrepareOptions o;
      o.manifest = manifest;
      o.embeddings_dir = embeddings_dir;
      o.languages = parse_language_list(languages);
      o.out = out_dir;
      o.expected_dim = expected_dim;
      o.min_count = min_count;
      cmd_prepare(o, out);
    } else if (*stats) {
      StatsOptions o;
      o.manifest = manifest;
      o.languages = parse_language_list(languages);
      if (!stats_splits.empty()) {
        o.splits.clear();
        for (const auto& s : stats_splits) o.splits.push_back(split_or_throw(s));
      }
      if (!out_dir.empty()) o.out = out_dir;
      cmd_stats(o, out);
    } else if (*train) {
      TrainOverrides ov;
      if (o_manifest->count()) ov.manifest = manifest;
      if (o_emb->count()) ov.embeddings_dir = embeddings_dir;
      if (o_langs->count()) ov.languages = parse_language_list(languages);
      if (o_seed->count()) ov.seed = seed;
      if (o_out->count()) ov.out = out_dir;
      if (o_epochs->count()) ov.epochs = epochs;
      cmd_train(config, ov, out);
    } else if (*caption) {
      CaptionOptions o;
      o.checkpoint = checkpoint;
      o.embeddings_dir = embeddings_dir;
      if (c_manifest->count()) o.manifest = manifest;
      o.split = split_or_throw(split);
      o.languages = parse_language_list(languages);
      o.decode = decode;
      o.stopwords_dir = stopwords_dir.empty() ? default_stopword_dir() : fs::path(stopwords_dir);
      o.out = out_dir;
      cmd_caption(o, out);
    } else if (*eval) {
      EvalOptions o;
      o.captions = captions_file;
      o.manifest = manifest;
      o.split = split_or_throw(split);
      o.cider = false;
      for (const auto& m : CLI::detail::split(metrics, ',')) {
        if (m == "cider") o.cider = true;
        else if (m == "sbert") o.sbert = true;
        else if (!m.empty()) throw Error(ErrorKind::kInvalidArgument, "unknown metric '" + m + "'");
      }
      if (aggregation == "max") o.aggregation = ReferenceAggregation::kMax;
      else if (aggregation != "mean") throw Error(ErrorKind::kInvalidArgument, "aggregation must be mean or max");
      o.embedder = embedder_opts();
      if (!out_dir.empty()) o.out = out_dir;
      cmd_eval(o, out);
    } else if (*params) {
      ParamsOptions o;
      if (!config.empty()) o.config = config;
      if (!vocab_sizes.empty()) o.vocab_sizes = parse_vocab_sizes(vocab_sizes);
      if (!out_dir.empty()) o.out = out_dir;
      cmd_params(o, out);
    } else if (*compare) {
      CompareOptions o;
      for (const auto& f : caption_files) o.captions.emplace_back(f);
      const auto b = parse_language(base);
      if (!b) throw Error(ErrorKind::kUnknownLanguage, "unknown base language '" + base + "'");
      o.base = *b;
      o.embedder = embedder_opts();
      if (!out_dir.empty()) o.out = out_dir;
      cmd_compare_langs(o, out);
    }
  } catch (const Error& e) {
    report_error(err, to_string(e.kind()), e.what(), e.items());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    report_error(err, "runtime", e.what(), {});
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace aacap::cli

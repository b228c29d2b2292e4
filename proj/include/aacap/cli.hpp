// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aacap/corpus.hpp"
#include "aacap/decoding.hpp"
#include "aacap/evaluation.hpp"
#include "aacap/model.hpp"
#include "aacap/text.hpp"
#include "aacap/training.hpp"

namespace aacap::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

inline constexpr std::string_view kToolkitVersion = "0.1.0";

std::string sha256_hex(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);
// Digest over the sorted (relative name, content digest) pairs of a directory.
std::string directory_digest(const std::filesystem::path& dir);

// Provenance written next to every command's output. Only `created_at`
// varies between identical runs.
struct RunManifest {
  std::string command;
  std::string config_json = "{}";
  std::vector<std::pair<std::string, std::string>> inputs;  // name -> sha256
  std::optional<std::uint64_t> seed;
  std::string created_at;

  std::string to_json() const;
  void write(const std::filesystem::path& out_dir) const;
};

// Train-split vocabulary sizes of the AudioCaps caption sets (en, fr, es, de).
std::vector<std::pair<LanguageId, std::size_t>> reference_vocab_sizes();
// "en=4861,fr=5797"
std::vector<std::pair<LanguageId, std::size_t>> parse_vocab_sizes(std::string_view spec);

struct PrepareOptions {
  std::filesystem::path manifest;
  std::filesystem::path embeddings_dir;
  std::vector<LanguageId> languages;
  std::filesystem::path out;
  std::uint32_t expected_dim = 0;
  std::size_t min_count = 1;
};
void cmd_prepare(const PrepareOptions& opts, std::ostream& out);

struct StatsOptions {
  std::filesystem::path manifest;
  std::vector<LanguageId> languages;
  std::vector<Split> splits = {Split::kTrain, Split::kTest};
  std::optional<std::filesystem::path> out;
};
std::vector<CorpusStats> cmd_stats(const StatsOptions& opts, std::ostream& out);

// Training run description, read from JSON:
//   {"manifest", "embeddings_dir", "languages": [...], "vocab_dir"?, "out",
//    "model": {ModelConfig}, "train": {TrainConfig}}
struct TrainRunConfig {
  std::filesystem::path manifest;
  std::filesystem::path embeddings_dir;
  std::vector<LanguageId> languages;
  std::optional<std::filesystem::path> vocab_dir;
  std::filesystem::path out;
  ModelConfig model;
  TrainConfig train;

  static TrainRunConfig from_json(std::string_view json, const std::filesystem::path& base_dir = {});
  std::string to_json() const;
};

struct TrainOverrides {
  std::optional<std::filesystem::path> manifest, embeddings_dir, out;
  std::optional<std::vector<LanguageId>> languages;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> epochs;
};

struct TrainOutcome {
  std::vector<EpochMetrics> epochs;
  std::filesystem::path checkpoint;
};
TrainOutcome cmd_train(const std::filesystem::path& config_path, const TrainOverrides& overrides, std::ostream& out);
TrainOutcome run_training(const TrainRunConfig& cfg, std::ostream& out, const std::string& config_digest = {});

struct CaptionOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path embeddings_dir;
  std::optional<std::filesystem::path> manifest;
  Split split = Split::kTest;
  std::vector<LanguageId> languages;  // empty: every head of the checkpoint
  DecodeConfig decode;
  std::filesystem::path stopwords_dir;
  std::filesystem::path out;
};
void cmd_caption(const CaptionOptions& opts, std::ostream& out);

struct EmbedderOptions {
  std::optional<std::string> url;
  std::optional<std::filesystem::path> table;
  bool available() const { return url || table; }
};
std::unique_ptr<EmbedderProvider> make_embedder(const EmbedderOptions& opts);

struct EvalOptions {
  std::filesystem::path captions;
  std::filesystem::path manifest;
  Split split = Split::kTest;
  bool cider = true;
  bool sbert = false;
  ReferenceAggregation aggregation = ReferenceAggregation::kMean;
  EmbedderOptions embedder;
  std::optional<std::filesystem::path> out;
};
EvalReport cmd_eval(const EvalOptions& opts, std::ostream& out);

struct ParamsOptions {
  std::optional<std::filesystem::path> config;
  std::vector<std::pair<LanguageId, std::size_t>> vocab_sizes = reference_vocab_sizes();
  std::optional<std::filesystem::path> out;
};

struct ParamsSummary {
  std::vector<std::pair<LanguageId, ParamReport>> mono;
  ParamReport multi;
  double reduction_percent = 0.0;
  std::string to_json() const;
};
ParamsSummary cmd_params(const ParamsOptions& opts, std::ostream& out);

struct CompareOptions {
  std::vector<std::filesystem::path> captions;
  LanguageId base = LanguageId::kEn;
  EmbedderOptions embedder;
  std::optional<std::filesystem::path> out;
};
std::map<LanguageId, double> cmd_compare_langs(const CompareOptions& opts, std::ostream& out);

// Captions JSONL written by cmd_caption, grouped by language.
std::map<LanguageId, CaptionMap> read_captions(const std::filesystem::path& path);

// Full command line entry point. Returns the process exit code; failures are
// reported on `err` as one JSON object.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aacap::cli

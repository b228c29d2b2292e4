// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aacap/random.hpp"
#include "aacap/text.hpp"

namespace aacap {

// Precomputed audio-encoder output: `frames` rows of `dim` channels.
struct EmbeddingSequence {
  static constexpr std::uint32_t kDefaultDim = 768;

  std::string audio_id;
  std::uint32_t frames = 0;
  std::uint32_t dim = 0;
  std::vector<float> data;  // row-major, frames * dim

  float at(std::size_t frame, std::size_t channel) const { return data[frame * dim + channel]; }
  float& at(std::size_t frame, std::size_t channel) { return data[frame * dim + channel]; }

  friend bool operator==(const EmbeddingSequence&, const EmbeddingSequence&) = default;
};

// AEMB container: "AEMB", u32 version (1), u32 dim, u32 frames, then
// frames*dim little-endian float32, row-major by frame.
inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

std::string encode_embedding(const EmbeddingSequence& seq);
// `expected_dim` of 0 accepts any width.
EmbeddingSequence decode_embedding(std::string_view bytes, std::string audio_id = {}, std::uint32_t expected_dim = 0);
void save_embedding(const std::filesystem::path& path, const EmbeddingSequence& seq);
EmbeddingSequence load_embedding(const std::filesystem::path& path, std::uint32_t expected_dim = 0);
// <dir>/<audio_id>.aemb
std::filesystem::path embedding_path(const std::filesystem::path& dir, std::string_view audio_id);

enum class Split { kTrain, kVal, kTest };

std::string_view split_name(Split split);
std::optional<Split> parse_split(std::string_view name);

struct CaptionRecord {
  std::string audio_id;
  LanguageId language = LanguageId::kEn;
  std::vector<std::string> captions;
};

struct ManifestEntry {
  std::string audio_id;
  Split split = Split::kTrain;
  std::map<LanguageId, std::vector<std::string>> captions;
};

// JSON Lines, one object per audio:
//   {"audio_id": ..., "split": "train", "captions": {"en": [...], "fr": [...]}}
class CaptionManifest {
 public:
  CaptionManifest() = default;
  explicit CaptionManifest(std::vector<ManifestEntry> entries);

  static CaptionManifest parse(std::string_view jsonl);
  static CaptionManifest load(const std::filesystem::path& path);
  std::string to_jsonl() const;

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::vector<const ManifestEntry*> split(Split split) const;
  bool has_language(LanguageId lang) const;
  std::vector<LanguageId> languages() const;

  // Records of a split that carry captions in `lang`.
  std::vector<CaptionRecord> records(Split split, LanguageId lang) const;
  // audio_id -> all reference captions, for evaluation.
  std::map<std::string, std::vector<std::string>> references(Split split, LanguageId lang) const;

  // Lists every problem: audios without an embedding file, unreadable or
  // malformed embeddings, and audios missing a declared language. Empty when
  // the manifest is consistent.
  std::vector<std::string> validate(std::span<const LanguageId> languages,
                                    const std::filesystem::path& embeddings_dir,
                                    std::uint32_t expected_dim = 0) const;

 private:
  std::vector<ManifestEntry> entries_;
};

// Uniform draw over the record's captions.
const std::string& sample_caption(const CaptionRecord& record, Rng& rng);

struct CorpusStats {
  LanguageId language = LanguageId::kEn;
  Split split = Split::kTrain;
  std::size_t n_captions = 0;
  double avg_sentence_length = 0.0;
  std::size_t word_types = 0;
};

// Mean token count per caption and number of distinct tokens over all
// captions of (lang, split). Throws when no audio in the manifest has `lang`.
CorpusStats compute_stats(const CaptionManifest& manifest, LanguageId lang, Split split);

}  // namespace aacap

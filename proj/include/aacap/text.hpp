// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace aacap {

// The four caption languages. The ordinal is stable and indexes heads.
enum class LanguageId : std::uint8_t { kEn = 0, kFr = 1, kEs = 2, kDe = 3 };

inline constexpr std::array<LanguageId, 4> kAllLanguages = {LanguageId::kEn, LanguageId::kFr,
                                                            LanguageId::kEs, LanguageId::kDe};

std::string_view language_code(LanguageId lang);
std::optional<LanguageId> parse_language(std::string_view code);
// Comma-separated list such as "en,fr,es,de". Throws on unknown codes or duplicates.
std::vector<LanguageId> parse_language_list(std::string_view list);

using TokenId = std::int32_t;
using Tokens = std::vector<std::string>;
using TokenIds = std::vector<TokenId>;

// Lowercased word tokens. Punctuation is dropped, apostrophes split words
// ("l'eau" -> "l", "eau"), and a hyphen survives only between two word
// characters ("rain-soaked").
Tokens tokenize(std::string_view text);

std::string join_tokens(std::span<const std::string> tokens);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kNumSpecials = 4;

  // Specials only.
  Vocabulary();

  // `tokens` excludes the specials; ids start at kNumSpecials.
  static Vocabulary from_tokens(std::span<const std::string> tokens);

  // Every token seen at least `min_count` times, most frequent first, ties
  // in byte order.
  static Vocabulary build(std::span<const Tokens> corpus, std::size_t min_count = 1);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id_or_unk(std::string_view token) const;
  bool is_special(TokenId id) const { return id >= 0 && id < static_cast<TokenId>(kNumSpecials); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // BOS, ids..., EOS. Out-of-vocabulary tokens map to UNK.
  TokenIds encode(std::span<const std::string> caption) const;
  // Strips every special id.
  Tokens decode(std::span<const TokenId> ids) const;

  std::string to_json() const;
  static Vocabulary from_json(std::string_view json);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct StopwordList {
  LanguageId language = LanguageId::kEn;
  std::unordered_set<std::string> words;

  bool contains(std::string_view w) const { return words.contains(std::string(w)); }

  // One word per line, UTF-8. Entries are lowercased; blank lines and lines
  // starting with '#' are skipped. An empty list is rejected.
  static StopwordList parse(LanguageId language, std::string_view contents);
  static StopwordList load(LanguageId language, const std::filesystem::path& path);
  // <dir>/<code>.txt
  static StopwordList load_from_dir(LanguageId language, const std::filesystem::path& dir);
};

// Directory holding the packaged stopword lists, overridable through the
// AACAP_DATA_DIR environment variable.
std::filesystem::path default_stopword_dir();

namespace detail {
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
}  // namespace detail

}  // namespace aacap

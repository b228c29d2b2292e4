// SPDX-License-Identifier: Apache-2.0

#include "aacap/text.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "aacap/error.hpp"

namespace aacap {

namespace detail {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error(ErrorKind::kIo, "short write to " + path.string());
}

}  // namespace detail

std::string_view language_code(LanguageId lang) {
  switch (lang) {
    case LanguageId::kEn: return "en";
    case LanguageId::kFr: return "fr";
    case LanguageId::kEs: return "es";
    case LanguageId::kDe: return "de";
  }
  return "??";
}

std::optional<LanguageId> parse_language(std::string_view code) {
  for (LanguageId lang : kAllLanguages) {
    if (language_code(lang) == code) return lang;
  }
  return std::nullopt;
}

std::vector<LanguageId> parse_language_list(std::string_view list) {
  std::vector<LanguageId> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    const std::string_view code = list.substr(start, comma - start);
    if (!code.empty()) {
      const auto lang = parse_language(code);
      if (!lang) throw Error(ErrorKind::kUnknownLanguage, "unknown language '" + std::string(code) + "'");
      if (std::find(out.begin(), out.end(), *lang) != out.end()) {
        throw Error(ErrorKind::kInvalidArgument, "duplicate language '" + std::string(code) + "'");
      }
      out.push_back(*lang);
    }
    start = comma + 1;
  }
  return out;
}

namespace {

constexpr char32_t kInvalid = 0xFFFFFFFF;

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      out.push_back(kInvalid);
      ++i;
      continue;
    }
    if (i + len > s.size()) {
      out.push_back(kInvalid);
      break;
    }
    bool ok = true;
    for (int k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back(kInvalid);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Simple case folding for Latin, Greek and Cyrillic letters.
char32_t to_lower(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  if (c < 0x80) return c;
  if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
  if (c >= 0x100 && c <= 0x17F) {
    if (c == 0x130) return U'i';
    if (c == 0x178) return 0xFF;
    const bool odd_upper = (c >= 0x139 && c <= 0x148) || (c >= 0x179 && c <= 0x17E);
    const bool even_upper = (c <= 0x12F) || (c >= 0x132 && c <= 0x137) || (c >= 0x14A && c <= 0x177);
    if (odd_upper && (c % 2 == 1)) return c + 1;
    if (even_upper && (c % 2 == 0)) return c + 1;
    return c;
  }
  if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 32;
  if (c >= 0x410 && c <= 0x42F) return c + 32;
  if (c >= 0x400 && c <= 0x40F) return c + 80;
  if (c == 0x1E9E) return 0xDF;
  return c;
}

enum class CharClass { kWord, kHyphen, kSeparator };

CharClass classify(char32_t c) {
  if (c == kInvalid) return CharClass::kSeparator;
  if (c < 0x80) {
    if ((c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || (c >= U'0' && c <= U'9')) {
      return CharClass::kWord;
    }
    return c == U'-' ? CharClass::kHyphen : CharClass::kSeparator;
  }
  if (c == 0x2010 || c == 0x2011) return CharClass::kHyphen;
  if (c <= 0xBF) {
    return (c == 0xAA || c == 0xB5 || c == 0xBA) ? CharClass::kWord : CharClass::kSeparator;
  }
  if (c == 0xD7 || c == 0xF7) return CharClass::kSeparator;
  if (c == 0x02BC) return CharClass::kSeparator;  // modifier apostrophe
  if (c >= 0x2000 && c <= 0x206F) return CharClass::kSeparator;
  if (c >= 0x3000 && c <= 0x303F) return CharClass::kSeparator;
  if (c >= 0xFE10 && c <= 0xFE6F) return CharClass::kSeparator;
  if (c >= 0xFF01 && c <= 0xFF0F) return CharClass::kSeparator;
  return CharClass::kWord;
}

}  // namespace

Tokens tokenize(std::string_view text) {
  const std::vector<char32_t> cps = decode_utf8(text);
  Tokens out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  };
  for (std::size_t i = 0; i < cps.size(); ++i) {
    switch (classify(cps[i])) {
      case CharClass::kWord:
        append_utf8(current, to_lower(cps[i]));
        break;
      case CharClass::kHyphen:
        if (!current.empty() && i + 1 < cps.size() && classify(cps[i + 1]) == CharClass::kWord) {
          current.push_back('-');
        } else {
          flush();
        }
        break;
      case CharClass::kSeparator:
        flush();
        break;
    }
  }
  flush();
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const std::array<std::string, 4> kSpecialTokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocabulary::Vocabulary() {
  for (std::size_t i = 0; i < kSpecialTokens.size(); ++i) {
    tokens_.push_back(kSpecialTokens[i]);
    index_.emplace(kSpecialTokens[i], static_cast<TokenId>(i));
  }
}

Vocabulary Vocabulary::from_tokens(std::span<const std::string> tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (t.empty()) throw Error(ErrorKind::kValidation, "empty token in vocabulary");
    const auto id = static_cast<TokenId>(v.tokens_.size());
    if (!v.index_.emplace(t, id).second) {
      throw Error(ErrorKind::kValidation, "duplicate token '" + t + "' in vocabulary");
    }
    v.tokens_.push_back(t);
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const Tokens> corpus, std::size_t min_count) {
  if (min_count < 1) throw Error(ErrorKind::kInvalidArgument, "min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& caption : corpus) {
    for (const auto& tok : caption) {
      if (tok.empty()) continue;
      if (std::find(kSpecialTokens.begin(), kSpecialTokens.end(), tok) != kSpecialTokens.end()) continue;
      ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  // std::map iteration is already byte-ordered, so a stable sort on count
  // yields the lexicographic tie-break.
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> ordered;
  ordered.reserve(kept.size());
  for (auto& [tok, n] : kept) ordered.push_back(tok);
  return from_tokens(ordered);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::kInvalidArgument, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(std::string_view token) const { return find(token).value_or(kUnk); }

TokenIds Vocabulary::encode(std::span<const std::string> caption) const {
  TokenIds ids;
  ids.reserve(caption.size() + 2);
  ids.push_back(kBos);
  for (const auto& t : caption) {
    const auto id = find(t);
    ids.push_back(id && !is_special(*id) ? *id : kUnk);
  }
  ids.push_back(kEos);
  return ids;
}

Tokens Vocabulary::decode(std::span<const TokenId> ids) const {
  Tokens out;
  for (TokenId id : ids) {
    if (is_special(id)) continue;
    out.push_back(token(id));
  }
  return out;
}

std::string Vocabulary::to_json() const {
  nlohmann::ordered_json j;
  j["tokens"] = tokens_;
  j["specials"] = {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"unk", kUnk}};
  return j.dump(1);
}

Vocabulary Vocabulary::from_json(std::string_view json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("vocabulary json: ") + e.what());
  }
  if (!j.contains("tokens") || !j["tokens"].is_array()) {
    throw Error(ErrorKind::kParse, "vocabulary json: missing 'tokens' array");
  }
  const auto tokens = j["tokens"].get<std::vector<std::string>>();
  if (tokens.size() < kNumSpecials) throw Error(ErrorKind::kValidation, "vocabulary lacks special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (tokens[i] != kSpecialTokens[i]) {
      throw Error(ErrorKind::kValidation, "special token " + std::to_string(i) + " must be " + kSpecialTokens[i]);
    }
  }
  if (j.contains("specials")) {
    const auto& s = j["specials"];
    if (s.value("pad", -1) != kPad || s.value("bos", -1) != kBos || s.value("eos", -1) != kEos ||
        s.value("unk", -1) != kUnk) {
      throw Error(ErrorKind::kValidation, "special ids must be pad=0 bos=1 eos=2 unk=3");
    }
  }
  return from_tokens(std::span(tokens).subspan(kNumSpecials));
}

void Vocabulary::save(const std::filesystem::path& path) const { detail::write_file(path, to_json() + "\n"); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return from_json(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Stopwords

StopwordList StopwordList::parse(LanguageId language, std::string_view contents) {
  StopwordList list;
  list.language = language;
  std::size_t start = 0;
  while (start < contents.size()) {
    std::size_t end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view line = contents.substr(start, end - start);
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (!line.empty() && line.front() != '#') {
      std::string word;
      for (char32_t c : decode_utf8(line)) append_utf8(word, to_lower(c));
      list.words.insert(std::move(word));
    }
    start = end + 1;
  }
  if (list.words.empty()) {
    throw Error(ErrorKind::kValidation, "empty stopword list for " + std::string(language_code(language)));
  }
  return list;
}

StopwordList StopwordList::load(LanguageId language, const std::filesystem::path& path) {
  return parse(language, detail::read_file(path));
}

StopwordList StopwordList::load_from_dir(LanguageId language, const std::filesystem::path& dir) {
  return load(language, dir / (std::string(language_code(language)) + ".txt"));
}

std::filesystem::path default_stopword_dir() {
  if (const char* env = std::getenv("AACAP_DATA_DIR"); env && *env) {
    return std::filesystem::path(env) / "stopwords";
  }
#ifdef AACAP_DEFAULT_DATA_DIR
  return std::filesystem::path(AACAP_DEFAULT_DATA_DIR) / "stopwords";
#else
  return std::filesystem::path("data") / "stopwords";
#endif
}

}  // namespace aacap

#include "esr/tok/tokenizer.hpp"

#include "esr/errors.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace esr::tok {

std::string_view default_alphabet() {
  static constexpr std::string_view kAlphabet =
      "0123456789abcdefghijklmnopqrstuvwxyz +-*=():,.#@~$%&?";
  return kAlphabet;
}

std::vector<std::string> default_merges() {
  return {"answer:", "sort:", "bal:", "yes", "no", "()", "((", "))", "an", "er", "sw", "ns"};
}

Tokenizer::Tokenizer(Kind kind, std::string alphabet, std::vector<std::string> merges)
    : kind_(kind), alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
  std::fill(std::begin(byte_id_), std::end(byte_id_), -1);
  vocab_ = {"", "", ""};
  for (char c : alphabet_) {
    const auto u = static_cast<unsigned char>(c);
    if (byte_id_[u] >= 0) throw ConfigError("tokenizer: duplicate alphabet byte");
    if (c == '\0') throw ConfigError("tokenizer: NUL is not a valid alphabet byte");
    byte_id_[u] = static_cast<TokenId>(vocab_.size());
    lookup_.emplace(std::string(1, c), byte_id_[u]);
    vocab_.emplace_back(1, c);
  }
  if (kind_ == Kind::CharLevel && !merges_.empty()) {
    throw ConfigError("tokenizer: char-level tokenizer cannot have merges");
  }
  for (const std::string& m : merges_) {
    if (m.size() < 2) throw ConfigError("tokenizer: merge '" + m + "' must span at least two bytes");
    for (char c : m) {
      if (!in_alphabet(c)) throw ConfigError("tokenizer: merge '" + m + "' uses a byte outside the alphabet");
    }
    if (!lookup_.emplace(m, static_cast<TokenId>(vocab_.size())).second) {
      throw ConfigError("tokenizer: duplicate merge '" + m + "'");
    }
    vocab_.push_back(m);
    max_token_bytes_ = std::max(max_token_bytes_, m.size());
  }
}

Tokenizer Tokenizer::char_level(std::string_view alphabet) {
  return Tokenizer(Kind::CharLevel, std::string(alphabet), {});
}

Tokenizer Tokenizer::greedy_merge(std::string_view alphabet, std::vector<std::string> merges) {
  return Tokenizer(Kind::GreedyMerge, std::string(alphabet), std::move(merges));
}

Encoding Tokenizer::encode_with_spans(std::string_view text) const {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!in_alphabet(text[i])) {
      throw AlphabetError("encode: byte " + std::to_string(static_cast<unsigned char>(text[i])) +
                          " at offset " + std::to_string(i) + " is outside the alphabet");
    }
  }
  Encoding out;
  std::size_t at = 0;
  while (at < text.size()) {
    TokenId id = byte_id_[static_cast<unsigned char>(text[at])];
    std::size_t len = 1;
    for (std::size_t l = std::min(max_token_bytes_, text.size() - at); l >= 2; --l) {
      auto it = lookup_.find(std::string(text.substr(at, l)));
      if (it != lookup_.end()) {
        id = it->second;
        len = l;
        break;
      }
    }
    out.spans.push_back({out.ids.size(), at, at + len});
    out.ids.push_back(id);
    at += len;
  }
  return out;
}

const std::string& Tokenizer::text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw VocabError("unknown token id " + std::to_string(id));
  }
  return vocab_[static_cast<std::size_t>(id)];
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += text(id);
  return out;
}

std::vector<TokenSpan> Tokenizer::spans_of(std::span<const TokenId> ids) const {
  std::vector<TokenSpan> spans;
  std::size_t at = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t len = text(ids[i]).size();
    if (is_control(ids[i])) continue;
    spans.push_back({i, at, at + len});
    at += len;
  }
  return spans;
}

std::optional<TokenId> Tokenizer::find(std::string_view surface) const {
  auto it = lookup_.find(std::string(surface));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::string escape_token(std::string_view raw) {
  std::string out;
  for (char c : raw) {
    switch (c) {
      case ' ': out += "\\s"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_token(std::string_view escaped) {
  std::string out;
  for (std::size_t i = 0; i < escaped.size(); ++i) {
    if (escaped[i] != '\\') {
      out += escaped[i];
      continue;
    }
    if (++i == escaped.size()) throw ConfigError("dangling escape in '" + std::string(escaped) + "'");
    switch (escaped[i]) {
      case 's': out += ' '; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case '\\': out += '\\'; break;
      default: out += escaped[i];
    }
  }
  return out;
}

std::string Tokenizer::serialize() const {
  std::ostringstream os;
  os << "esr-tokenizer 1\n";
  os << "kind " << (kind_ == Kind::CharLevel ? "char-level" : "greedy-merge") << "\n";
  os << "alphabet " << escape_token(alphabet_) << "\n";
  for (const std::string& m : merges_) os << "merge " << escape_token(m) << "\n";
  return os.str();
}

Tokenizer Tokenizer::parse(std::string_view definition) {
  std::istringstream in{std::string(definition)};
  std::string line;
  int line_no = 0;
  bool header = false;
  std::optional<Kind> kind;
  std::optional<std::string> alphabet;
  std::vector<std::string> merges;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto space = line.find(' ');
    const std::string key = line.substr(0, space);
    const std::string value = space == std::string::npos ? "" : line.substr(space + 1);
    if (!header) {
      if (key != "esr-tokenizer" || value != "1") {
        throw ConfigParseError("tokenizer: expected header 'esr-tokenizer 1'", line_no);
      }
      header = true;
    } else if (key == "kind") {
      if (value == "char-level") kind = Kind::CharLevel;
      else if (value == "greedy-merge") kind = Kind::GreedyMerge;
      else throw ConfigParseError("tokenizer: unknown kind '" + value + "'", line_no);
    } else if (key == "alphabet") {
      alphabet = unescape_token(value);
    } else if (key == "merge") {
      merges.push_back(unescape_token(value));
    } else {
      throw ConfigParseError("tokenizer: unknown directive '" + key + "'", line_no);
    }
  }
  if (!header) throw ConfigParseError("tokenizer: empty definition", line_no);
  if (!kind || !alphabet) throw ConfigParseError("tokenizer: 'kind' and 'alphabet' are required", line_no);
  return Tokenizer(*kind, *alphabet, std::move(merges));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read tokenizer file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

}  // namespace esr::tok

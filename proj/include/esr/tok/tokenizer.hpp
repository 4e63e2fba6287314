#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace esr::tok {

using TokenId = int;

/// Half-open byte range [begin, end) of one token in the decoded text.
struct TokenSpan {
  std::size_t token_index = 0;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - begin; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct Encoding {
  std::vector<TokenId> ids;
  std::vector<TokenSpan> spans;
};

enum class Kind { CharLevel, GreedyMerge };

/// Character alphabet shared by both default tokenizers. Digits, lowercase letters,
/// space, arithmetic/bracket symbols, and a few symbols used as trap noise.
std::string_view default_alphabet();
/// Multi-byte tokens of the default greedy-merge tokenizer, in id order.
std::vector<std::string> default_merges();

/// Immutable tokenizer over a fixed byte alphabet.
///
/// Ids are dense: BOS, EOS, PAD first, then one id per alphabet byte in the
/// order given, then the merge strings in table order. Control tokens decode
/// to the empty string.
class Tokenizer {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kPad = 2;
  static constexpr TokenId kFirstText = 3;

  static Tokenizer char_level(std::string_view alphabet = default_alphabet());
  static Tokenizer greedy_merge(std::string_view alphabet, std::vector<std::string> merges);
  static Tokenizer default_char() { return char_level(); }
  static Tokenizer default_merge() { return greedy_merge(default_alphabet(), default_merges()); }

  /// Parse the text definition format (see serialize()).
  static Tokenizer parse(std::string_view definition);
  static Tokenizer load(const std::filesystem::path& path);
  std::string serialize() const;

  Kind kind() const { return kind_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::string& alphabet() const { return alphabet_; }
  const std::vector<std::string>& merges() const { return merges_; }

  /// Longest-match-first, left to right. Throws AlphabetError on a byte outside the alphabet.
  Encoding encode_with_spans(std::string_view text) const;
  std::vector<TokenId> encode(std::string_view text) const { return encode_with_spans(text).ids; }
  /// Throws VocabError on an unknown id.
  std::string decode(std::span<const TokenId> ids) const;

  /// Spans of an arbitrary id sequence (not necessarily the greedy encoding of its text).
  /// Control tokens have no text surface and are skipped; token_index refers to `ids`.
  std::vector<TokenSpan> spans_of(std::span<const TokenId> ids) const;

  /// Surface string of a token; empty for control tokens. Throws VocabError.
  const std::string& text(TokenId id) const;
  std::optional<TokenId> find(std::string_view surface) const;
  bool is_control(TokenId id) const { return id >= 0 && id < kFirstText; }
  bool in_alphabet(char c) const { return byte_id_[static_cast<unsigned char>(c)] >= 0; }

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.kind_ == b.kind_ && a.alphabet_ == b.alphabet_ && a.merges_ == b.merges_;
  }

 private:
  Tokenizer(Kind kind, std::string alphabet, std::vector<std::string> merges);

  Kind kind_;
  std::string alphabet_;
  std::vector<std::string> merges_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> lookup_;
  TokenId byte_id_[256];
  std::size_t max_token_bytes_ = 1;
};

/// \s, \t, \n and \\ escapes used by the definition and rule file formats.
std::string escape_token(std::string_view raw);
std::string unescape_token(std::string_view escaped);

}  // namespace esr::tok

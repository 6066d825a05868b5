#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpo/rng.hpp"

namespace mcpo {

/// Shared 64-token vocabulary: digits, lowercase letters, arithmetic
/// operators, structural markers, and filler symbols. One policy serves all
/// domains, so every domain speaks this alphabet.
namespace vocab {

constexpr int kDigitBase = 0;    // '0'..'9' -> 0..9
constexpr int kLetterBase = 10;  // 'a'..'z' -> 10..35
constexpr int kPlus = 36;
constexpr int kMinus = 37;
constexpr int kTimes = 38;
constexpr int kMod = 39;
constexpr int kAnswer = 40;
constexpr int kCall = 41;
constexpr int kSep = 42;
constexpr int kBetter = 43;
constexpr int kEos = 44;
constexpr int kPad = 45;
constexpr int kSymbolBase = 46;  // filler symbols below
constexpr int kSize = 64;

inline constexpr char kSymbols[] = {'(', ')', ',', ':', '=', '.', '?', '!', '/',
                                    '<', '>', '[', ']', '{', '}', '|', '&', '^'};

inline int digit(int d) { return kDigitBase + d; }
inline int letter(char c) { return kLetterBase + (c - 'a'); }
inline int symbol(char c) {
  for (int i = 0; i < 18; ++i)
    if (kSymbols[i] == c) return kSymbolBase + i;
  throw std::invalid_argument("vocab::symbol: unknown symbol");
}

inline bool is_digit(int t) { return t >= kDigitBase && t < kDigitBase + 10; }
inline bool is_letter(int t) { return t >= kLetterBase && t < kLetterBase + 26; }
inline int digit_value(int t) { return t - kDigitBase; }

inline std::string token_name(int t) {
  if (is_digit(t)) return std::string(1, char('0' + digit_value(t)));
  if (is_letter(t)) return std::string(1, char('a' + (t - kLetterBase)));
  switch (t) {
    case kPlus: return "+";
    case kMinus: return "-";
    case kTimes: return "*";
    case kMod: return "%";
    case kAnswer: return "ANSWER";
    case kCall: return "CALL";
    case kSep: return "SEP";
    case kBetter: return "BETTER";
    case kEos: return "EOS";
    case kPad: return "PAD";
  }
  if (t >= kSymbolBase && t < kSize) return std::string(1, kSymbols[t - kSymbolBase]);
  return "?" + std::to_string(t);
}

inline std::string decode(std::span<const int> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += token_name(tokens[i]);
  }
  return out;
}

}  // namespace vocab

struct Prompt {
  std::int64_t prompt_id = 0;
  int domain_id = 0;
  std::vector<int> tokens;  // always ends with SEP
  std::vector<int> target;  // ground-truth answer tokens, never PAD
};

/// Span after the last ANSWER marker, up to (not including) the first EOS
/// that follows it. No marker yields an empty answer.
inline std::vector<int> extract_answer(std::span<const int> tokens) {
  std::ptrdiff_t last = -1;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == vocab::kAnswer) last = std::ptrdiff_t(i);
  if (last < 0) return {};
  std::vector<int> out;
  for (std::size_t i = std::size_t(last) + 1; i < tokens.size(); ++i) {
    if (tokens[i] == vocab::kEos) break;
    out.push_back(tokens[i]);
  }
  return out;
}

namespace detail {

/// Parse a digit-token sequence as a nonnegative integer. Empty sequences,
/// non-digit tokens, or overflow-length runs fail.
inline std::optional<long long> parse_digits(std::span<const int> tokens) {
  if (tokens.empty() || tokens.size() > 12) return std::nullopt;
  long long v = 0;
  for (int t : tokens) {
    if (!vocab::is_digit(t)) return std::nullopt;
    v = v * 10 + vocab::digit_value(t);
  }
  return v;
}

inline std::vector<int> encode_number(long long v) {
  std::string s = std::to_string(v);
  std::vector<int> out;
  for (char c : s) out.push_back(vocab::digit(c - '0'));
  return out;
}

}  // namespace detail

struct DomainSpec {
  int domain_id;  // 1-based, dense
  std::string name;
  Prompt (*generate)(Rng&, std::int64_t prompt_id);
  int (*verify)(std::span<const int> answer, std::span<const int> target);
};

namespace domains {

// --- modmath: compute (a + b) mod m. The modulus is letter-coded so the
// prompt's token multiset identifies it; verification is by numeric value,
// so leading zeros are equivalent.
inline constexpr char kModulusLetters[] = {'c', 'd', 'f', 'h'};
inline constexpr int kModulusValues[] = {2, 3, 5, 7};

inline Prompt modmath_generate(Rng& rng, std::int64_t pid) {
  int a = int(rng.next_below(10));
  int b = int(rng.next_below(10));
  int mi = int(rng.next_below(4));
  Prompt p;
  p.prompt_id = pid;
  p.domain_id = 1;
  p.tokens = {vocab::digit(a), vocab::kPlus, vocab::digit(b), vocab::kMod,
              vocab::letter(kModulusLetters[mi]), vocab::kSep};
  p.target = detail::encode_number((a + b) % kModulusValues[mi]);
  return p;
}

inline int modmath_verify(std::span<const int> answer, std::span<const int> target) {
  auto va = detail::parse_digits(answer);
  auto vt = detail::parse_digits(target);
  return (va && vt && *va == *vt) ? 1 : 0;
}

// --- seqtrans: sort a short letter sequence ascending; exact sequence match.
inline Prompt seqtrans_generate(Rng& rng, std::int64_t pid) {
  std::size_t len = 2 + rng.next_below(2);
  Prompt p;
  p.prompt_id = pid;
  p.domain_id = 2;
  p.tokens = {vocab::kTimes};
  std::vector<int> letters;
  for (std::size_t i = 0; i < len; ++i)
    letters.push_back(vocab::letter(char('a' + rng.next_below(8))));
  for (int t : letters) p.tokens.push_back(t);
  p.tokens.push_back(vocab::kSep);
  std::sort(letters.begin(), letters.end());
  p.target = letters;
  return p;
}

inline int exact_match_verify(std::span<const int> answer, std::span<const int> target) {
  if (answer.size() != target.size()) return 0;
  for (std::size_t i = 0; i < answer.size(); ++i)
    if (answer[i] != target[i]) return 0;
  return 1;
}

// --- choice: four options a..d; the right letter is the one whose ordinal
// equals (a + b) mod 4, so the domain shares its arithmetic core with
// modmath while requiring a letter answer.
inline Prompt choice_generate(Rng& rng, std::int64_t pid) {
  int a = int(rng.next_below(10));
  int b = int(rng.next_below(10));
  Prompt p;
  p.prompt_id = pid;
  p.domain_id = 3;
  p.tokens = {vocab::letter('q'), vocab::digit(a), vocab::kPlus, vocab::digit(b), vocab::kSep};
  p.target = {vocab::letter(char('a' + (a + b) % 4))};
  return p;
}

inline int choice_verify(std::span<const int> answer, std::span<const int> target) {
  return (answer.size() == 1 && target.size() == 1 && answer[0] == target[0]) ? 1 : 0;
}

// --- toolcall: emit CALL <tool> <arg>. Tool name must match exactly; the
// argument is compared by numeric value.
inline constexpr char kToolLetters[] = {'f', 'g', 'h'};

inline Prompt toolcall_generate(Rng& rng, std::int64_t pid) {
  char tool = kToolLetters[rng.next_below(3)];
  int arg = int(rng.next_below(10));
  Prompt p;
  p.prompt_id = pid;
  p.domain_id = 4;
  p.tokens = {vocab::letter('t'), vocab::letter(tool), vocab::digit(arg), vocab::kSep};
  p.target = {vocab::kCall, vocab::letter(tool), vocab::digit(arg)};
  return p;
}

inline int toolcall_verify(std::span<const int> answer, std::span<const int> target) {
  if (answer.size() < 3 || answer[0] != vocab::kCall) return 0;
  if (answer[1] != target[1]) return 0;  // tool name
  auto va = detail::parse_digits(answer.subspan(2));
  auto vt = detail::parse_digits(target.subspan(2));
  return (va && vt && *va == *vt) ? 1 : 0;
}

// --- saferchoice: two candidate strings, exactly one carrying its side's
// hazard token ('!' can only ever appear in candidate 0, '?' in candidate 1).
// The answer names the safer (hazard-free) candidate.
inline Prompt saferchoice_generate(Rng& rng, std::int64_t pid) {
  int unsafe = int(rng.next_below(2));
  int safe = 1 - unsafe;
  Prompt p;
  p.prompt_id = pid;
  p.domain_id = 5;
  auto push_candidate = [&](int side) {
    std::vector<int> body;
    for (int i = 0; i < 2; ++i) body.push_back(vocab::letter(char('i' + rng.next_below(4))));
    if (side == unsafe) {
      int hazard = side == 0 ? vocab::symbol('!') : vocab::symbol('?');
      body.insert(body.begin() + std::ptrdiff_t(rng.next_below(body.size() + 1)), hazard);
    }
    for (int t : body) p.tokens.push_back(t);
  };
  p.tokens.push_back(vocab::symbol('<'));
  push_candidate(0);
  p.tokens.push_back(vocab::symbol('>'));
  push_candidate(1);
  p.tokens.push_back(vocab::kSep);
  p.target = {vocab::kBetter, vocab::digit(safe)};
  return p;
}

}  // namespace domains

inline const std::vector<DomainSpec>& all_domains() {
  static const std::vector<DomainSpec> specs = {
      {1, "modmath", domains::modmath_generate, domains::modmath_verify},
      {2, "seqtrans", domains::seqtrans_generate, domains::exact_match_verify},
      {3, "choice", domains::choice_generate, domains::choice_verify},
      {4, "toolcall", domains::toolcall_generate, domains::toolcall_verify},
      {5, "saferchoice", domains::saferchoice_generate, domains::exact_match_verify},
  };
  return specs;
}

inline const DomainSpec& domain_by_id(int id) {
  for (const DomainSpec& d : all_domains())
    if (d.domain_id == id) return d;
  throw std::invalid_argument("unknown domain_id: " + std::to_string(id));
}

inline const DomainSpec& domain_by_name(const std::string& name) {
  for (const DomainSpec& d : all_domains())
    if (d.name == name) return d;
  throw std::invalid_argument("unknown domain: " + name);
}

inline Prompt sample_prompt(const DomainSpec& spec, Rng& rng, std::int64_t prompt_id) {
  return spec.generate(rng, prompt_id);
}

inline int verify(const DomainSpec& spec, std::span<const int> answer,
                  std::span<const int> target) {
  return spec.verify(answer, target);
}

}  // namespace mcpo

#pragma once

// Word-level vocabulary, split encoding and contiguous-lane LM batching.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnlm/error.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/io.hpp"

namespace knnlm {

using TokenId = std::uint32_t;

inline constexpr TokenId kUnkId = 0;
inline constexpr std::string_view kUnkToken = "<unk>";

/// Splits on ASCII whitespace; no normalization is applied.
inline std::vector<std::string_view> tokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Token <-> id mapping. Id 0 is `<unk>`; ids 1..V-1 are ordered by
/// descending frequency, ties broken lexicographically, so frequency rank
/// of a known word is simply `id - 1`.
class Vocab {
 public:
  Vocab() : tokens_{std::string(kUnkToken)}, freq_{0} {}

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::uint64_t freq(TokenId id) const { return freq_.at(id); }
  std::span<const std::uint64_t> freqs() const { return freq_; }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const {
    return index_.count(std::string(token)) != 0;
  }

  /// 0 = most frequent word. `<unk>` is ranked last.
  std::size_t rank(TokenId id) const {
    return id == kUnkId ? size() - 1 : static_cast<std::size_t>(id) - 1;
  }

  /// `token<TAB>count` per line in id order.
  std::string serialize() const {
    std::string s;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      s += tokens_[i];
      s += '\t';
      s += std::to_string(freq_[i]);
      s += '\n';
    }
    return s;
  }

  Hash content_hash() const { return sha256(serialize()); }

  static Vocab parse(std::string_view text) {
    Vocab v;
    v.tokens_.clear();
    v.freq_.clear();
    std::size_t line_no = 0;
    while (!text.empty()) {
      auto nl = text.find('\n');
      auto line = text.substr(0, nl);
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (line.empty()) continue;
      auto tab = line.rfind('\t');
      if (tab == std::string_view::npos || tab == 0)
        fail_data("vocab line " + std::to_string(line_no) + ": expected token<TAB>count");
      std::uint64_t count = 0;
      auto cnt = line.substr(tab + 1);
      auto [p, ec] = std::from_chars(cnt.data(), cnt.data() + cnt.size(), count);
      if (ec != std::errc{} || p != cnt.data() + cnt.size())
        fail_data("vocab line " + std::to_string(line_no) + ": bad count");
      std::string tok(line.substr(0, tab));
      if (line_no == 0 && tok != kUnkToken) fail_data("vocab line 0 must be <unk>");
      if (line_no > 0) {
        if (tok == kUnkToken || !v.index_.emplace(tok, static_cast<TokenId>(line_no)).second)
          fail_data("vocab: duplicate token " + tok);
      }
      v.tokens_.push_back(std::move(tok));
      v.freq_.push_back(count);
      ++line_no;
    }
    if (v.tokens_.empty()) fail_data("vocab: empty file");
    return v;
  }

  static Vocab load(const std::string& path) { return parse(io::read_file(path)); }
  void save(const std::string& path) const { io::write_file(path, serialize()); }

  friend Vocab build_vocab(std::string_view raw_text, std::uint64_t min_count);

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> freq_;
  std::unordered_map<std::string, TokenId> index_;
};

inline Vocab build_vocab(std::string_view raw_text, std::uint64_t min_count = 1) {
  if (min_count < 1) fail_usage("min_count must be >= 1");
  auto toks = tokenize(raw_text);
  if (toks.empty()) fail_data("empty corpus");

  std::unordered_map<std::string_view, std::uint64_t> counts;
  for (auto t : toks) ++counts[t];

  std::uint64_t unk = 0;
  std::vector<std::pair<std::string_view, std::uint64_t>> kept;
  for (auto& [tok, c] : counts) {
    if (tok == kUnkToken || c < min_count)
      unk += c;
    else
      kept.emplace_back(tok, c);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  Vocab v;
  v.freq_[0] = unk;
  for (auto& [tok, c] : kept) {
    auto id = static_cast<TokenId>(v.tokens_.size());
    v.tokens_.emplace_back(tok);
    v.freq_.push_back(c);
    v.index_.emplace(std::string(tok), id);
  }
  return v;
}

/// One encoded split; `vocab_hash` ties it to the vocabulary used.
struct EncodedSplit {
  std::string name;
  std::vector<TokenId> ids;
  std::size_t source_tokens = 0;
  Hash vocab_hash{};
};

inline EncodedSplit encode(const Vocab& vocab, std::string_view raw_text,
                           std::string name = "train") {
  EncodedSplit s;
  s.name = std::move(name);
  auto toks = tokenize(raw_text);
  s.ids.reserve(toks.size());
  for (auto t : toks) s.ids.push_back(vocab.id(t));
  s.source_tokens = toks.size();
  s.vocab_hash = vocab.content_hash();
  return s;
}

inline std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

struct Batch {
  std::size_t batch = 0;  // B
  std::size_t bptt = 0;   // T
  std::vector<TokenId> inputs;   // B*T, row-major by lane
  std::vector<TokenId> targets;  // B*T
  std::vector<std::size_t> target_positions;  // split offsets of targets
};

/// Splits a token stream into B contiguous lanes (lane b starts at
/// b*floor(len/B)) and walks each lane in windows of T inputs with targets
/// shifted by one. Emits B*T*floor((len-1)/(B*T)) targets; the trailing
/// remainder is dropped and no target position is emitted twice.
class BatchIter {
 public:
  BatchIter(std::span<const TokenId> ids, std::size_t batch, std::size_t bptt)
      : ids_(ids), batch_(batch), bptt_(bptt) {
    if (batch == 0 || bptt == 0) fail_usage("batch and bptt must be >= 1");
    if (ids.size() < batch * (bptt + 1))
      fail_data("split too short for batch=" + std::to_string(batch) +
                " bptt=" + std::to_string(bptt) + " (" +
                std::to_string(ids.size()) + " tokens)");
    chunks_ = (ids.size() - 1) / (batch * bptt);
    stride_ = ids.size() / batch;
  }

  std::size_t size() const { return chunks_; }
  std::size_t batch_size() const { return batch_; }
  std::size_t bptt() const { return bptt_; }
  std::size_t total_targets() const { return chunks_ * batch_ * bptt_; }
  std::size_t lane_start(std::size_t lane) const { return lane * stride_; }

  Batch operator[](std::size_t chunk) const {
    Batch b;
    b.batch = batch_;
    b.bptt = bptt_;
    b.inputs.resize(batch_ * bptt_);
    b.targets.resize(batch_ * bptt_);
    b.target_positions.resize(batch_ * bptt_);
    for (std::size_t lane = 0; lane < batch_; ++lane) {
      std::size_t start = lane * stride_ + chunk * bptt_;
      for (std::size_t t = 0; t < bptt_; ++t) {
        b.inputs[lane * bptt_ + t] = ids_[start + t];
        b.targets[lane * bptt_ + t] = ids_[start + t + 1];
        b.target_positions[lane * bptt_ + t] = start + t + 1;
      }
    }
    return b;
  }

 private:
  std::span<const TokenId> ids_;
  std::size_t batch_;
  std::size_t bptt_;
  std::size_t chunks_ = 0;
  std::size_t stride_ = 0;
};

}  // namespace knnlm

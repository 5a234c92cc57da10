#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nlmkit/errors.hpp"

namespace nlmkit {

using WordId = int32_t;

enum class CorpusMode { Sentence, Stream };

CorpusMode parse_mode(std::string_view s);
std::string_view mode_name(CorpusMode m);

// Token <-> id map with frequency counts. Ids 0 and 1 are the reserved
// unknown and end-of-sentence items; non-reserved ids follow in descending
// count order, ties broken by token order. In practice unk and eos rank among
// the most frequent events of any corpus, so the id space stays usable as a
// frequency order for band analysis and D-Softmax partitions.
class Vocabulary {
 public:
  static constexpr WordId kUnk = 0;
  static constexpr WordId kEos = 1;
  static constexpr std::string_view kUnkSurface = "<unk>";
  static constexpr std::string_view kEosSurface = "</s>";

  Vocabulary() = default;

  WordId size() const { return static_cast<WordId>(tokens_.size()); }
  WordId id_of(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token_of(WordId id) const;
  int64_t count(WordId id) const { return counts_[static_cast<size_t>(id)]; }
  std::span<const int64_t> counts() const { return counts_; }

  uint64_t content_hash() const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  // used by build_vocab and load
  void set_entries(std::vector<std::string> tokens, std::vector<int64_t> counts);

 private:
  std::vector<std::string> tokens_;
  std::vector<int64_t> counts_;
  std::unordered_map<std::string, WordId> index_;
};

// Exactly one of min_count / top_k is active.
struct VocabPolicy {
  int64_t min_count = 0;
  int64_t top_k = 0;
};

// Whitespace tokenization, no normalization; the benchmarks are
// pre-tokenized. Literal "<unk>" / "</s>" strings accrue to the reserved
// items. eos receives one count per input line.
Vocabulary build_vocab(std::span<const std::string> lines, const VocabPolicy& policy);

std::vector<std::string> read_lines(const std::string& path);
std::vector<std::string> split_tokens(std::string_view line);

// Sentence mode appends eos after every line; Stream mode concatenates lines
// with no separator.
std::vector<WordId> encode(std::span<const std::string> lines, const Vocabulary& vocab,
                           CorpusMode mode);

std::vector<std::string> decode(std::span<const WordId> ids, const Vocabulary& vocab,
                                CorpusMode mode);

struct CorpusStats {
  int64_t train_tokens = 0;
  int64_t test_tokens = 0;
  double oov_rate = 0.0;
};

CorpusStats corpus_stats(std::span<const std::string> train_lines,
                         std::span<const std::string> test_lines, const Vocabulary& vocab);

// One training/eval batch: contexts is l x (n-1) with the most recent word
// first in each row, matching the order the embeddings are concatenated in.
struct WindowBatch {
  int n = 2;
  std::vector<WordId> contexts;  // row-major l x (n-1)
  std::vector<WordId> targets;
  int64_t size() const { return static_cast<int64_t>(targets.size()); }
  const WordId* context_row(int64_t i) const { return contexts.data() + i * (n - 1); }
};

// Scoreable positions of an id sequence plus enough structure to build any
// window on demand (used for both sequential batches and shuffled epochs).
// Sentence mode scores every position including eos and left-pads contexts
// with eos at sentence starts; Stream mode scores positions with a full
// window only.
class WindowIndex {
 public:
  WindowIndex(std::span<const WordId> ids, int n, CorpusMode mode);

  int order() const { return n_; }
  int64_t num_targets() const { return static_cast<int64_t>(positions_.size()); }
  std::span<const int64_t> positions() const { return positions_; }

  // ctx_out must hold n-1 ids; most recent word first.
  void fill_context(int64_t pos, WordId* ctx_out) const;
  WordId target_at(int64_t pos) const { return ids_[static_cast<size_t>(pos)]; }

  // Fills a batch from an arbitrary list of positions (e.g. a shuffled epoch).
  void gather(std::span<const int64_t> pos, WindowBatch& out) const;

 private:
  std::span<const WordId> ids_;
  int n_;
  CorpusMode mode_;
  std::vector<int64_t> positions_;
  std::vector<int64_t> sent_start_;  // Sentence mode: start index of the sentence holding t
};

// Sequential batch iterator over a WindowIndex; yields every scoreable
// position exactly once per pass, final batch may be short.
class WindowBatcher {
 public:
  WindowBatcher(const WindowIndex& index, int64_t batch_size);
  bool next(WindowBatch& out);
  void reset() { cursor_ = 0; }

 private:
  const WindowIndex& index_;
  int64_t batch_size_;
  int64_t cursor_ = 0;
};

}  // namespace nlmkit

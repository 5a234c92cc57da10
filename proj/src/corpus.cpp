#include "nlmkit/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "nlmkit/rng.hpp"

namespace nlmkit {

CorpusMode parse_mode(std::string_view s) {
  if (s == "sentence") return CorpusMode::Sentence;
  if (s == "stream") return CorpusMode::Stream;
  throw ConfigError("unknown corpus mode '" + std::string(s) + "' (expected sentence|stream)");
}

std::string_view mode_name(CorpusMode m) {
  return m == CorpusMode::Sentence ? "sentence" : "stream";
}

WordId Vocabulary::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

const std::string& Vocabulary::token_of(WordId id) const {
  return tokens_[static_cast<size_t>(id)];
}

void Vocabulary::set_entries(std::vector<std::string> tokens, std::vector<int64_t> counts) {
  tokens_ = std::move(tokens);
  counts_ = std::move(counts);
  index_.clear();
  index_.reserve(tokens_.size());
  for (size_t i = 0; i < tokens_.size(); ++i) {
    index_.emplace(tokens_[i], static_cast<WordId>(i));
  }
}

uint64_t Vocabulary::content_hash() const {
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < tokens_.size(); ++i) {
    h = fnv1a64(tokens_[i].data(), tokens_[i].size(), h);
    int64_t c = counts_[i];
    h = fnv1a64(&c, sizeof(c), h);
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  for (size_t i = 0; i < tokens_.size(); ++i) {
    out << tokens_[i] << '\t' << counts_[i] << '\n';
  }
  if (!out) throw IoError("failed writing vocabulary file " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path);
  std::vector<std::string> tokens;
  std::vector<int64_t> counts;
  std::string line;
  while (std::getline(in, line)) {
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("malformed vocabulary line: " + line);
    tokens.push_back(line.substr(0, tab));
    counts.push_back(std::stoll(line.substr(tab + 1)));
  }
  if (tokens.size() < 2 || tokens[0] != kUnkSurface || tokens[1] != kEosSurface) {
    throw IoError("vocabulary file " + path + " missing reserved entries");
  }
  Vocabulary v;
  v.set_entries(std::move(tokens), std::move(counts));
  return v;
}

std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

Vocabulary build_vocab(std::span<const std::string> lines, const VocabPolicy& policy) {
  if ((policy.min_count > 0) == (policy.top_k > 0)) {
    throw ConfigError("vocab policy: set exactly one of min_count / top_k");
  }
  std::unordered_map<std::string, int64_t> freq;
  int64_t total_tokens = 0;
  int64_t unk_literal = 0;
  int64_t eos_literal = 0;
  for (const auto& line : lines) {
    for (auto& tok : split_tokens(line)) {
      ++total_tokens;
      if (tok == Vocabulary::kUnkSurface) {
        ++unk_literal;
      } else if (tok == Vocabulary::kEosSurface) {
        ++eos_literal;
      } else {
        ++freq[tok];
      }
    }
  }
  if (total_tokens == 0) throw ConfigError("empty corpus: no tokens in input");

  std::vector<std::pair<std::string, int64_t>> entries(freq.begin(), freq.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  size_t keep = entries.size();
  if (policy.min_count > 0) {
    while (keep > 0 && entries[keep - 1].second < policy.min_count) --keep;
  } else {
    keep = std::min<size_t>(keep, static_cast<size_t>(policy.top_k));
  }

  int64_t dropped = 0;
  for (size_t i = keep; i < entries.size(); ++i) dropped += entries[i].second;

  std::vector<std::string> tokens;
  std::vector<int64_t> counts;
  tokens.reserve(keep + 2);
  counts.reserve(keep + 2);
  tokens.emplace_back(Vocabulary::kUnkSurface);
  counts.push_back(dropped + unk_literal);
  tokens.emplace_back(Vocabulary::kEosSurface);
  counts.push_back(eos_literal + static_cast<int64_t>(lines.size()));
  for (size_t i = 0; i < keep; ++i) {
    tokens.push_back(entries[i].first);
    counts.push_back(entries[i].second);
  }
  Vocabulary v;
  v.set_entries(std::move(tokens), std::move(counts));
  return v;
}

std::vector<WordId> encode(std::span<const std::string> lines, const Vocabulary& vocab,
                           CorpusMode mode) {
  std::vector<WordId> ids;
  for (const auto& line : lines) {
    for (auto& tok : split_tokens(line)) ids.push_back(vocab.id_of(tok));
    if (mode == CorpusMode::Sentence) ids.push_back(Vocabulary::kEos);
  }
  return ids;
}

std::vector<std::string> decode(std::span<const WordId> ids, const Vocabulary& vocab,
                                CorpusMode mode) {
  std::vector<std::string> lines;
  std::string cur;
  auto flush = [&] {
    lines.push_back(cur);
    cur.clear();
  };
  for (WordId id : ids) {
    if (mode == CorpusMode::Sentence && id == Vocabulary::kEos) {
      flush();
      continue;
    }
    if (!cur.empty()) cur += ' ';
    cur += vocab.token_of(id);
  }
  if (!cur.empty() || mode == CorpusMode::Stream) flush();
  return lines;
}

CorpusStats corpus_stats(std::span<const std::string> train_lines,
                         std::span<const std::string> test_lines, const Vocabulary& vocab) {
  CorpusStats s;
  for (const auto& line : train_lines) s.train_tokens += static_cast<int64_t>(split_tokens(line).size());
  int64_t oov = 0;
  for (const auto& line : test_lines) {
    for (auto& tok : split_tokens(line)) {
      ++s.test_tokens;
      if (!vocab.contains(tok)) ++oov;
    }
  }
  s.oov_rate = s.test_tokens == 0 ? 0.0 : static_cast<double>(oov) / static_cast<double>(s.test_tokens);
  return s;
}

WindowIndex::WindowIndex(std::span<const WordId> ids, int n, CorpusMode mode)
    : ids_(ids), n_(n), mode_(mode) {
  if (n < 2) throw ConfigError("window order n must be >= 2, got " + std::to_string(n));
  int64_t len = static_cast<int64_t>(ids.size());
  if (mode == CorpusMode::Sentence) {
    sent_start_.resize(static_cast<size_t>(len));
    int64_t start = 0;
    for (int64_t t = 0; t < len; ++t) {
      sent_start_[static_cast<size_t>(t)] = start;
      positions_.push_back(t);  // every position is scored, eos included
      if (ids[static_cast<size_t>(t)] == Vocabulary::kEos) start = t + 1;
    }
  } else {
    for (int64_t t = n - 1; t < len; ++t) positions_.push_back(t);
  }
}

void WindowIndex::fill_context(int64_t pos, WordId* ctx_out) const {
  int64_t start = mode_ == CorpusMode::Sentence ? sent_start_[static_cast<size_t>(pos)] : 0;
  for (int j = 1; j < n_; ++j) {
    int64_t p = pos - j;
    ctx_out[j - 1] = (mode_ == CorpusMode::Sentence && p < start) ? Vocabulary::kEos
                                                                  : ids_[static_cast<size_t>(p)];
  }
}

void WindowIndex::gather(std::span<const int64_t> pos, WindowBatch& out) const {
  out.n = n_;
  int64_t l = static_cast<int64_t>(pos.size());
  out.targets.resize(static_cast<size_t>(l));
  out.contexts.resize(static_cast<size_t>(l * (n_ - 1)));
  for (int64_t i = 0; i < l; ++i) {
    out.targets[static_cast<size_t>(i)] = target_at(pos[static_cast<size_t>(i)]);
    fill_context(pos[static_cast<size_t>(i)], out.contexts.data() + i * (n_ - 1));
  }
}

WindowBatcher::WindowBatcher(const WindowIndex& index, int64_t batch_size)
    : index_(index), batch_size_(batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
}

bool WindowBatcher::next(WindowBatch& out) {
  int64_t total = index_.num_targets();
  if (cursor_ >= total) return false;
  int64_t l = std::min(batch_size_, total - cursor_);
  index_.gather(index_.positions().subspan(static_cast<size_t>(cursor_), static_cast<size_t>(l)),
                out);
  cursor_ += l;
  return true;
}

}  // namespace nlmkit

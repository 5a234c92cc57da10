#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "nlmkit/corpus.hpp"
#include "nlmkit/rng.hpp"

using namespace nlmkit;

namespace {

std::vector<std::string> lines_of(std::initializer_list<const char*> ls) {
  std::vector<std::string> out;
  for (auto* l : ls) out.emplace_back(l);
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("build_vocab min_count keeps only frequent tokens plus reserved") {
  auto v = build_vocab(lines_of({"a a b c"}), {.min_count = 2});
  CHECK(v.size() == 3);  // <unk>, </s>, a
  CHECK(v.id_of("a") == 2);
  CHECK(v.id_of("b") == Vocabulary::kUnk);
  CHECK(v.count(2) == 2);
  CHECK(v.count(Vocabulary::kUnk) == 2);  // b and c fold into unk
  CHECK(v.count(Vocabulary::kEos) == 1);
  CHECK(v.token_of(Vocabulary::kUnk) == "<unk>");
  CHECK(v.token_of(Vocabulary::kEos) == "</s>");
}

TEST_CASE("build_vocab top_k with count-then-lexicographic ties") {
  auto v = build_vocab(lines_of({"a a b b c"}), {.top_k = 2});
  CHECK(v.size() == 4);
  CHECK(v.id_of("a") == 2);  // tie a/b broken lexicographically
  CHECK(v.id_of("b") == 3);
  CHECK(v.id_of("c") == Vocabulary::kUnk);
}

TEST_CASE("build_vocab orders ids by descending count") {
  auto v = build_vocab(lines_of({"c c c b b a"}), {.min_count = 1});
  CHECK(v.id_of("c") == 2);
  CHECK(v.id_of("b") == 3);
  CHECK(v.id_of("a") == 4);
  for (WordId i = 3; i < v.size(); ++i) CHECK(v.count(i - 1) >= v.count(i));
}

TEST_CASE("build_vocab rejects empty corpus and double policy") {
  CHECK_THROWS_AS(build_vocab(lines_of({"", "  "}), {.min_count = 1}), ConfigError);
  CHECK_THROWS_AS(build_vocab(lines_of({"a"}), VocabPolicy{}), ConfigError);
  CHECK_THROWS_AS(build_vocab(lines_of({"a"}), {.min_count = 1, .top_k = 1}), ConfigError);
}

TEST_CASE("encode appends eos per sentence, stream concatenates") {
  auto v = build_vocab(lines_of({"a b"}), {.min_count = 1});
  auto s = encode(lines_of({"a b"}), v, CorpusMode::Sentence);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == v.id_of("a"));
  CHECK(s[1] == v.id_of("b"));
  CHECK(s[2] == Vocabulary::kEos);

  auto st = encode(lines_of({"a", "b"}), v, CorpusMode::Stream);
  REQUIRE(st.size() == 2);
  CHECK(st[0] == v.id_of("a"));
  CHECK(st[1] == v.id_of("b"));

  auto unk = encode(lines_of({"zzz"}), v, CorpusMode::Stream);
  CHECK(unk[0] == Vocabulary::kUnk);
}

TEST_CASE("decode round trip with unk surface for OOV") {
  auto v = build_vocab(lines_of({"a a b b"}), {.min_count = 2});
  auto lines = lines_of({"a b zzz", "b a"});
  auto ids = encode(lines, v, CorpusMode::Sentence);
  auto back = decode(ids, v, CorpusMode::Sentence);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == "a b <unk>");
  CHECK(back[1] == "b a");
}

TEST_CASE("windows: sentence mode pads with eos and scores eos") {
  auto v = build_vocab(lines_of({"a b"}), {.min_count = 1});
  auto ids = encode(lines_of({"a b"}), v, CorpusMode::Sentence);
  WindowIndex idx(ids, 3, CorpusMode::Sentence);
  REQUIRE(idx.num_targets() == 3);
  WindowBatch batch;
  WindowBatcher batcher(idx, 100);
  REQUIRE(batcher.next(batch));
  REQUIRE(batch.size() == 3);
  const WordId a = v.id_of("a"), b = v.id_of("b"), e = Vocabulary::kEos;
  // contexts stored most-recent-first
  CHECK(batch.targets[0] == a);
  CHECK(batch.context_row(0)[0] == e);
  CHECK(batch.context_row(0)[1] == e);
  CHECK(batch.targets[1] == b);
  CHECK(batch.context_row(1)[0] == a);
  CHECK(batch.context_row(1)[1] == e);
  CHECK(batch.targets[2] == e);
  CHECK(batch.context_row(2)[0] == b);
  CHECK(batch.context_row(2)[1] == a);
  CHECK_FALSE(batcher.next(batch));
}

TEST_CASE("windows: sentence mode never crosses eos into previous sentence") {
  auto v = build_vocab(lines_of({"a b c"}), {.min_count = 1});
  auto ids = encode(lines_of({"a b", "c"}), v, CorpusMode::Sentence);
  WindowIndex idx(ids, 4, CorpusMode::Sentence);
  WindowBatch batch;
  WindowBatcher batcher(idx, 100);
  REQUIRE(batcher.next(batch));
  REQUIRE(batch.size() == 5);
  // target "c" opens a new sentence: its whole context is eos padding
  int64_t c_row = 3;
  CHECK(batch.targets[size_t(c_row)] == v.id_of("c"));
  for (int j = 0; j < 3; ++j) CHECK(batch.context_row(c_row)[j] == Vocabulary::kEos);
}

TEST_CASE("windows: stream mode full windows only, final short batch") {
  auto v = build_vocab(lines_of({"a b c d"}), {.min_count = 1});
  auto ids = encode(lines_of({"a b c d"}), v, CorpusMode::Stream);
  WindowIndex idx(ids, 2, CorpusMode::Stream);
  REQUIRE(idx.num_targets() == 3);
  WindowBatcher batcher(idx, 2);
  WindowBatch batch;
  REQUIRE(batcher.next(batch));
  CHECK(batch.size() == 2);
  CHECK(batch.targets[0] == v.id_of("b"));
  CHECK(batch.context_row(0)[0] == v.id_of("a"));
  CHECK(batch.targets[1] == v.id_of("c"));
  REQUIRE(batcher.next(batch));
  CHECK(batch.size() == 1);
  CHECK(batch.targets[0] == v.id_of("d"));
  CHECK(batch.context_row(0)[0] == v.id_of("c"));
  CHECK_FALSE(batcher.next(batch));

  std::vector<WordId> one{v.id_of("a")};
  WindowIndex empty(one, 2, CorpusMode::Stream);
  CHECK(empty.num_targets() == 0);
}

// Epoch coverage: the multiset of (context, target) pairs equals an
// exhaustive enumeration done directly over the sentences.
TEST_CASE("windows: epoch coverage vs brute-force enumeration") {
  Rng rng(123);
  for (int iter = 0; iter < 10; ++iter) {
    // random corpus of up to ~1000 tokens over a 5-word alphabet
    std::vector<std::string> lines;
    int n_lines = 1 + static_cast<int>(rng.next_below(40));
    for (int i = 0; i < n_lines; ++i) {
      std::string line;
      int len = static_cast<int>(rng.next_below(25));
      for (int j = 0; j < len; ++j) {
        if (!line.empty()) line += ' ';
        line += static_cast<char>('a' + rng.next_below(5));
      }
      lines.push_back(line);
    }
    auto v = build_vocab(lines, {.min_count = 1});
    int n = 2 + static_cast<int>(rng.next_below(3));

    for (CorpusMode mode : {CorpusMode::Sentence, CorpusMode::Stream}) {
      auto ids = encode(lines, v, mode);
      if (ids.empty()) continue;
      WindowIndex idx(ids, n, mode);

      std::multiset<std::vector<WordId>> expected;
      if (mode == CorpusMode::Stream) {
        for (size_t t = static_cast<size_t>(n - 1); t < ids.size(); ++t) {
          std::vector<WordId> row;
          for (int j = 1; j < n; ++j) row.push_back(ids[t - static_cast<size_t>(j)]);
          row.push_back(ids[t]);
          expected.insert(row);
        }
      } else {
        // enumerate per padded sentence
        std::vector<std::vector<WordId>> sentences(1);
        for (WordId id : ids) {
          sentences.back().push_back(id);
          if (id == Vocabulary::kEos) sentences.emplace_back();
        }
        if (sentences.back().empty()) sentences.pop_back();
        for (auto& sent : sentences) {
          std::vector<WordId> padded(static_cast<size_t>(n - 1), Vocabulary::kEos);
          padded.insert(padded.end(), sent.begin(), sent.end());
          for (size_t t = static_cast<size_t>(n - 1); t < padded.size(); ++t) {
            std::vector<WordId> row;
            for (int j = 1; j < n; ++j) row.push_back(padded[t - static_cast<size_t>(j)]);
            row.push_back(padded[t]);
            expected.insert(row);
          }
        }
      }

      std::multiset<std::vector<WordId>> got;
      WindowBatcher batcher(idx, 7);
      WindowBatch batch;
      while (batcher.next(batch)) {
        for (int64_t i = 0; i < batch.size(); ++i) {
          std::vector<WordId> row(batch.context_row(i), batch.context_row(i) + n - 1);
          row.push_back(batch.targets[static_cast<size_t>(i)]);
          got.insert(row);
        }
      }
      CHECK(got == expected);
    }
  }
}

TEST_CASE("vocabulary file round trip is deterministic and byte-identical") {
  auto v = build_vocab(lines_of({"the cat sat", "the cat", "the"}), {.min_count = 1});
  std::string p1 = "vocab_rt_1.txt", p2 = "vocab_rt_2.txt";
  v.save(p1);
  v.save(p2);
  CHECK(slurp(p1) == slurp(p2));
  auto loaded = Vocabulary::load(p1);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.content_hash() == v.content_hash());
  for (WordId i = 0; i < v.size(); ++i) {
    CHECK(loaded.token_of(i) == v.token_of(i));
    CHECK(loaded.count(i) == v.count(i));
  }
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("corpus stats: oov rate over test tokens") {
  auto train = lines_of({"a a b b"});
  auto v = build_vocab(train, {.min_count = 2});
  auto stats = corpus_stats(train, lines_of({"a b x y"}), v);
  CHECK(stats.train_tokens == 4);
  CHECK(stats.test_tokens == 4);
  CHECK(stats.oov_rate == doctest::Approx(0.5));
}

TEST_CASE("mode parsing") {
  CHECK(parse_mode("sentence") == CorpusMode::Sentence);
  CHECK(parse_mode("stream") == CorpusMode::Stream);
  CHECK_THROWS_AS(parse_mode("bogus"), ConfigError);
}

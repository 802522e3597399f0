#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace topiq {

// Lowercase whitespace-plus-punctuation tokenizer: ASCII alphanumerics and
// bytes >= 0x80 are word characters, everything else separates.
std::vector<std::string> tokenize(const std::string& text);

// Special ids in the sequence vocabulary.
constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kClsId = 2;
constexpr int kSepId = 3;
constexpr int kNumSpecials = 4;

struct Vocabulary {
  std::unordered_map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token;
  std::unordered_set<std::string> stopwords;
  int min_count = 1;
  bool has_specials = false;  // true for the sequence vocabulary

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? -1 : it->second;
  }
};

// Frequency-filtered vocabulary for bag-of-words input. Ids in descending
// frequency order, ties lexicographic. Throws DataError when nothing survives.
Vocabulary build_vocabulary(const std::vector<std::string>& corpus, int min_count,
                            const std::unordered_set<std::string>& stopwords);

// Unfiltered vocabulary with PAD/UNK/CLS/SEP up front.
Vocabulary build_sequence_vocabulary(const std::vector<std::string>& corpus);

struct BoWVector {
  std::vector<std::pair<int, int>> counts;  // (id, count), ascending id
  int total = 0;                            // in-vocabulary token count
};

BoWVector to_bow(const std::string& text, const Vocabulary& vocab);

struct SentencePair {
  std::string id;
  std::string text_a;
  std::string text_b;
  double label = 0.0;
};

enum class LabelKind { binary, real };

struct TokenSequence {
  std::vector<int> ids;       // exactly max_len entries
  std::vector<uint8_t> mask;  // 1 = real token (non-PAD)
  int length = 0;             // non-PAD count
  // positions of the two sentences' content tokens inside ids
  int a_start = 0, a_len = 0;
  int b_start = 0, b_len = 0;
};

// [CLS] a [SEP] b [SEP] + padding; the longer side is truncated first.
TokenSequence to_sequence(const SentencePair& pair, const Vocabulary& seq_vocab,
                          int max_len);

// Single sentence to ids (UNK for OOV), truncated to max_len, no specials,
// no padding.
std::vector<int> encode_sentence(const std::string& text, const Vocabulary& seq_vocab,
                                 int max_len);

struct Dataset {
  std::vector<SentencePair> train, dev, test;
  LabelKind label_kind = LabelKind::binary;
};

// Reads train.tsv / dev.tsv / test.tsv from a directory.
Dataset load_dataset(const std::string& dir);
void write_dataset(const Dataset& ds, const std::string& dir);

struct SynthPair {
  SentencePair pair;
  int topic_a = 0;
  int topic_b = 0;
};

struct SynthDataset {
  std::vector<SynthPair> train, dev, test;
  int n_topics = 0;
};

// Topic-separable benchmark corpus: disjoint per-topic word blocks plus a
// shared block, label 1 iff both sentences drew the same latent topic.
SynthDataset synth_generate(int n_topics, int vocab_per_topic, int n_pairs,
                            uint64_t seed);
Dataset strip_topics(const SynthDataset& s);
// write_dataset output plus topics.tsv (id, split, topic_a, topic_b)
void write_synth(const SynthDataset& s, const std::string& dir);

const std::unordered_set<std::string>& default_stopwords();
std::unordered_set<std::string> load_stopwords(const std::string& path);

}  // namespace topiq

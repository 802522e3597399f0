#include "corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace topiq {

namespace {

bool is_word_char(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
         c >= 0x80;
}

const char* kSpecialNames[kNumSpecials] = {"<pad>", "<unk>", "<cls>", "<sep>"};

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_word_char(c)) {
      cur.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a')
                                         : static_cast<char>(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

// (token, count) sorted by descending count, ties lexicographic
std::vector<std::pair<std::string, int64_t>> count_tokens(
    const std::vector<std::string>& corpus) {
  std::unordered_map<std::string, int64_t> freq;
  for (const std::string& text : corpus)
    for (std::string& tok : tokenize(text)) ++freq[std::move(tok)];
  std::vector<std::pair<std::string, int64_t>> counts(freq.begin(), freq.end());
  std::sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return counts;
}

}  // namespace

Vocabulary build_vocabulary(const std::vector<std::string>& corpus, int min_count,
                            const std::unordered_set<std::string>& stopwords) {
  if (corpus.empty()) throw UsageError("build_vocabulary: empty corpus");
  if (min_count < 1) throw UsageError("build_vocabulary: min_count must be >= 1");
  Vocabulary v;
  v.min_count = min_count;
  v.stopwords = stopwords;
  for (auto& [tok, n] : count_tokens(corpus)) {
    if (n < min_count || stopwords.count(tok)) continue;
    v.token_to_id.emplace(tok, v.size());
    v.id_to_token.push_back(tok);
  }
  if (v.size() == 0) throw DataError("build_vocabulary: empty vocabulary after filtering");
  return v;
}

Vocabulary build_sequence_vocabulary(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw UsageError("build_sequence_vocabulary: empty corpus");
  Vocabulary v;
  v.has_specials = true;
  for (const char* s : kSpecialNames) {
    v.token_to_id.emplace(s, v.size());
    v.id_to_token.push_back(s);
  }
  for (auto& [tok, n] : count_tokens(corpus)) {
    (void)n;
    v.token_to_id.emplace(tok, v.size());
    v.id_to_token.push_back(tok);
  }
  return v;
}

BoWVector to_bow(const std::string& text, const Vocabulary& vocab) {
  std::map<int, int> acc;
  int total = 0;
  for (const std::string& tok : tokenize(text)) {
    int id = vocab.id_of(tok);
    if (id < 0) continue;
    ++acc[id];
    ++total;
  }
  BoWVector bow;
  bow.total = total;
  bow.counts.assign(acc.begin(), acc.end());
  return bow;
}

std::vector<int> encode_sentence(const std::string& text, const Vocabulary& seq_vocab,
                                 int max_len) {
  std::vector<int> ids;
  for (const std::string& tok : tokenize(text)) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    int id = seq_vocab.id_of(tok);
    ids.push_back(id < 0 ? kUnkId : id);
  }
  return ids;
}

TokenSequence to_sequence(const SentencePair& pair, const Vocabulary& seq_vocab,
                          int max_len) {
  if (max_len < 4) throw UsageError("to_sequence: max_len must be >= 4");
  std::vector<int> a = encode_sentence(pair.text_a, seq_vocab, max_len);
  std::vector<int> b = encode_sentence(pair.text_b, seq_vocab, max_len);
  // room for CLS and two SEPs; shrink the longer side (b on ties)
  while (3 + static_cast<int>(a.size() + b.size()) > max_len) {
    if (a.size() > b.size())
      a.pop_back();
    else
      b.pop_back();
  }
  TokenSequence seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(kClsId);
  seq.a_start = static_cast<int>(seq.ids.size());
  seq.a_len = static_cast<int>(a.size());
  seq.ids.insert(seq.ids.end(), a.begin(), a.end());
  seq.ids.push_back(kSepId);
  seq.b_start = static_cast<int>(seq.ids.size());
  seq.b_len = static_cast<int>(b.size());
  seq.ids.insert(seq.ids.end(), b.begin(), b.end());
  seq.ids.push_back(kSepId);
  seq.length = static_cast<int>(seq.ids.size());
  seq.ids.resize(max_len, kPadId);
  seq.mask.assign(max_len, 0);
  for (int i = 0; i < seq.length; ++i) seq.mask[i] = 1;
  return seq;
}

namespace {

bool is_binary_token(const std::string& s) { return s == "0" || s == "1"; }

double parse_label(const std::string& s, const std::string& file, size_t line) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError(file + ": line " + std::to_string(line) + ": bad label '" + s + "'");
  }
  if (used != s.size())
    throw DataError(file + ": line " + std::to_string(line) + ": bad label '" + s + "'");
  if (v < 0.0 || v > 5.0)
    throw DataError(file + ": line " + std::to_string(line) + ": label " + s +
                    " outside [0,5]");
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  size_t start = 0;
  while (true) {
    size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

std::vector<SentencePair> load_split(const std::string& path, LabelKind& kind_out) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  size_t lineno = 0;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id\ttext_a\ttext_b\tlabel")
    throw DataError(path + ": bad header '" + line + "'");
  std::vector<SentencePair> pairs;
  std::vector<std::string> raw_labels;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f = split_tabs(line);
    if (f.size() != 4)
      throw DataError(path + ": line " + std::to_string(lineno) + ": expected 4 fields, got " +
                      std::to_string(f.size()));
    SentencePair p;
    p.id = f[0];
    p.text_a = f[1];
    p.text_b = f[2];
    p.label = parse_label(f[3], path, lineno);
    raw_labels.push_back(f[3]);
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw DataError(path + ": no data rows");
  bool all_binary = true;
  for (const std::string& s : raw_labels)
    if (!is_binary_token(s)) {
      all_binary = false;
      break;
    }
  kind_out = all_binary ? LabelKind::binary : LabelKind::real;
  return pairs;
}

std::string label_str(double v, LabelKind kind) {
  char buf[32];
  if (kind == LabelKind::binary)
    std::snprintf(buf, sizeof(buf), "%d", static_cast<int>(v));
  else
    std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_split(const std::vector<SentencePair>& pairs, LabelKind kind,
                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "id\ttext_a\ttext_b\tlabel\n";
  for (const SentencePair& p : pairs)
    out << p.id << '\t' << p.text_a << '\t' << p.text_b << '\t'
        << label_str(p.label, kind) << '\n';
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  LabelKind kt, kd, ks;
  ds.train = load_split(dir + "/train.tsv", kt);
  ds.dev = load_split(dir + "/dev.tsv", kd);
  ds.test = load_split(dir + "/test.tsv", ks);
  if (kt != kd || kt != ks)
    throw DataError(dir + ": mixed label kinds across train/dev/test");
  ds.label_kind = kt;
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_split(ds.train, ds.label_kind, dir + "/train.tsv");
  write_split(ds.dev, ds.label_kind, dir + "/dev.tsv");
  write_split(ds.test, ds.label_kind, dir + "/test.tsv");
}

namespace {

std::string synth_sentence(int topic, int vocab_per_topic, Rng& rng) {
  int len = 5 + rng.uniform_int(4);  // 5..8 words
  std::string s;
  for (int i = 0; i < len; ++i) {
    if (!s.empty()) s.push_back(' ');
    if (rng.uniform() < 0.8) {
      s += "t" + std::to_string(topic) + "w" +
           std::to_string(rng.uniform_int(vocab_per_topic));
    } else {
      s += "shw" + std::to_string(rng.uniform_int(vocab_per_topic));
    }
  }
  return s;
}

}  // namespace

SynthDataset synth_generate(int n_topics, int vocab_per_topic, int n_pairs,
                            uint64_t seed) {
  if (n_topics < 2) throw UsageError("synth_generate: n_topics must be >= 2");
  if (vocab_per_topic < 1 || n_pairs < 1)
    throw UsageError("synth_generate: vocab_per_topic and n_pairs must be >= 1");
  Rng rng(seed);
  int n_pos = n_pairs / 2;
  int n_neg = n_pairs - n_pos;
  std::vector<SynthPair> pos, neg;
  pos.reserve(n_pos);
  neg.reserve(n_neg);
  for (int i = 0; i < n_pairs; ++i) {
    bool want_pos = static_cast<int>(pos.size()) < n_pos &&
                    (i % 2 == 0 || static_cast<int>(neg.size()) >= n_neg);
    SynthPair sp;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "s%06d", i);
    sp.pair.id = idbuf;
    sp.topic_a = rng.uniform_int(n_topics);
    if (want_pos) {
      sp.topic_b = sp.topic_a;
    } else {
      sp.topic_b = (sp.topic_a + 1 + rng.uniform_int(n_topics - 1)) % n_topics;
    }
    sp.pair.text_a = synth_sentence(sp.topic_a, vocab_per_topic, rng);
    sp.pair.text_b = synth_sentence(sp.topic_b, vocab_per_topic, rng);
    sp.pair.label = sp.topic_a == sp.topic_b ? 1.0 : 0.0;
    (want_pos ? pos : neg).push_back(std::move(sp));
  }

  // 80/10/10 per class keeps every split balanced
  auto slice = [](const std::vector<SynthPair>& v, SynthDataset& out) {
    int n = static_cast<int>(v.size());
    int n_tr = n * 8 / 10;
    int n_dev = n / 10;
    for (int i = 0; i < n; ++i) {
      if (i < n_tr)
        out.train.push_back(v[i]);
      else if (i < n_tr + n_dev)
        out.dev.push_back(v[i]);
      else
        out.test.push_back(v[i]);
    }
  };
  SynthDataset ds;
  ds.n_topics = n_topics;
  slice(pos, ds);
  slice(neg, ds);
  auto by_id = [](const SynthPair& a, const SynthPair& b) { return a.pair.id < b.pair.id; };
  std::sort(ds.train.begin(), ds.train.end(), by_id);
  std::sort(ds.dev.begin(), ds.dev.end(), by_id);
  std::sort(ds.test.begin(), ds.test.end(), by_id);
  return ds;
}

Dataset strip_topics(const SynthDataset& s) {
  Dataset ds;
  ds.label_kind = LabelKind::binary;
  for (const SynthPair& p : s.train) ds.train.push_back(p.pair);
  for (const SynthPair& p : s.dev) ds.dev.push_back(p.pair);
  for (const SynthPair& p : s.test) ds.test.push_back(p.pair);
  return ds;
}

void write_synth(const SynthDataset& s, const std::string& dir) {
  write_dataset(strip_topics(s), dir);
  std::ofstream out(dir + "/topics.tsv", std::ios::binary);
  if (!out) throw DataError("cannot write " + dir + "/topics.tsv");
  out << "id\tsplit\ttopic_a\ttopic_b\n";
  auto dump = [&out](const std::vector<SynthPair>& v, const char* split) {
    for (const SynthPair& p : v)
      out << p.pair.id << '\t' << split << '\t' << p.topic_a << '\t' << p.topic_b << '\n';
  };
  dump(s.train, "train");
  dump(s.dev, "dev");
  dump(s.test, "test");
}

const std::unordered_set<std::string>& default_stopwords() {
  static const std::unordered_set<std::string> kSet = {
      "a",       "about",   "above",   "after",    "again",   "all",     "am",
      "an",      "and",     "any",     "are",      "aren",    "as",      "at",
      "be",      "because", "been",    "before",   "being",   "below",   "between",
      "both",    "but",     "by",      "can",      "couldn",  "d",       "did",
      "didn",    "do",      "does",    "doesn",    "doing",   "don",     "down",
      "during",  "each",    "few",     "for",      "from",    "further", "had",
      "hadn",    "has",     "hasn",    "have",     "haven",   "having",  "he",
      "her",     "here",    "hers",    "him",      "his",     "how",     "i",
      "if",      "in",      "into",    "is",       "isn",     "it",      "its",
      "just",    "ll",      "m",       "me",       "more",    "most",    "my",
      "no",      "nor",     "not",     "now",      "o",       "of",      "off",
      "on",      "once",    "only",    "or",       "other",   "our",     "ours",
      "out",     "over",    "own",     "re",       "s",       "same",    "she",
      "should",  "shouldn", "so",      "some",     "such",    "t",       "than",
      "that",    "the",     "their",   "theirs",   "them",    "then",    "there",
      "these",   "they",    "this",    "those",    "through", "to",      "too",
      "under",   "until",   "up",      "ve",       "very",    "was",     "wasn",
      "we",      "were",    "weren",   "what",     "when",    "where",   "which",
      "while",   "who",     "whom",    "why",      "will",    "with",    "won",
      "wouldn",  "you",     "your",    "yours"};
  return kSet;
}

std::unordered_set<std::string> load_stopwords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open stopword list " + path);
  std::unordered_set<std::string> set;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    for (std::string& tok : tokenize(line)) set.insert(std::move(tok));
  }
  return set;
}

}  // namespace topiq

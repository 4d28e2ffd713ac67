#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtsum/tensor.hpp"

namespace mtsum {

// ids 0..3 are reserved; hashed word pieces start at 4
enum ReservedToken : std::uint32_t { kClsId = 0, kPadId = 1, kUnkId = 2, kEosId = 3, kNumReserved = 4 };

constexpr std::size_t kDefaultMaxTokens = 128;

struct TokenSeq {
  std::vector<std::uint32_t> ids;
  bool truncated = false;
};

struct Sentence {
  std::string text;
  TokenSeq tokens;
};

struct Document {
  std::string id;
  std::vector<Sentence> sentences;
  std::vector<Sentence> reference;
  std::vector<int> labels;  // empty = unlabeled; else one 0/1 per sentence

  bool has_labels() const { return !labels.empty(); }
};

enum class SplitTag { unsplit, train, val, test };

struct Corpus {
  std::vector<Document> documents;
  SplitTag split_tag = SplitTag::unsplit;

  std::size_t size() const { return documents.size(); }
};

// Rule-based segmenter: split after [.!?]+ (plus trailing quotes/brackets)
// when followed by whitespace and an uppercase letter or digit. A fixed
// abbreviation list and single-letter initials are protected.
std::vector<Sentence> segment_sentences(const std::string& text);

// lower-cased alphanumeric runs; punctuation and whitespace separate
std::vector<std::string> word_pieces(const std::string& text);

std::uint64_t fnv1a64(const std::string& s);

// hashed-vocabulary tokenizer; ids = 4 + fnv1a64(piece) % (vocab_size - 4),
// hard truncation at max_len with the flag set
TokenSeq tokenize(const std::string& text, std::size_t vocab_size, std::size_t max_len = kDefaultMaxTokens);

// tokenize all sentences and references in place
void tokenize_corpus(Corpus& corpus, std::size_t vocab_size, std::size_t max_len = kDefaultMaxTokens);

// JSON-lines corpus: one object per line with fields
//   id: string, sentences: [string] (or text: string), reference: [string],
//   labels: [0/1] optional
Corpus load_jsonl(const std::string& path);
void save_jsonl(const Corpus& corpus, const std::string& path);

// rows are documents, columns the hashed vocabulary;
// entry = tf * (ln((1+N)/(1+df)) + 1), rows L2-normalized when nonzero
Tensor<double> tfidf_matrix(const Corpus& corpus, std::size_t vocab_size);

// Lloyd's k-means on TF-IDF rows (max 50 iterations, tol 1e-6), then a
// seeded round-robin draw across clusters until n_select documents are
// picked. Output keeps the original corpus order.
Corpus kmeans_sample(const Corpus& corpus, std::size_t k_clusters, std::size_t n_select, std::uint64_t seed,
                     std::size_t tfidf_vocab = 2048);

struct SplitResult {
  Corpus train;
  Corpus val;
  Corpus test;
};

SplitResult split(const Corpus& corpus, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                  std::uint64_t seed);

// one document id per line
void write_manifest(const Corpus& corpus, const std::string& path);

// Synthetic marker-token corpus: each document has n_sentences sentences of
// which n_relevant are built from a marker vocabulary and copied verbatim
// into the reference; the rest draw from a disjoint filler vocabulary.
Corpus make_synthetic_marker_corpus(std::size_t n_docs, std::uint64_t seed, std::size_t n_sentences = 10,
                                    std::size_t n_relevant = 3, std::size_t words_per_sentence = 8);

}  // namespace mtsum

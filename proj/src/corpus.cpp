#include "mtsum/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "mtsum/rng.hpp"

namespace mtsum {

namespace {

const std::unordered_set<std::string>& abbreviations() {
  static const std::unordered_set<std::string> abbr = {
      "mr",   "mrs", "ms",  "dr",  "prof", "sr",   "jr",  "st",  "no",  "vs",  "etc", "fig",
      "eq",   "al",  "inc", "ltd", "co",   "corp", "dept", "univ", "approx", "e.g", "i.e", "cf",
      "resp", "vol", "pp",  "ed",  "eds",  "ca",   "jan", "feb", "mar", "apr", "jun", "jul",
      "aug",  "sep", "sept", "oct", "nov", "dec"};
  return abbr;
}

std::string lower_ascii(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// word (possibly with internal dots, e.g. "e.g") immediately before position i
std::string word_before(const std::string& text, std::size_t i) {
  std::size_t end = i;
  std::size_t start = end;
  while (start > 0) {
    const unsigned char c = static_cast<unsigned char>(text[start - 1]);
    if (std::isalnum(c) || c == '.') {
      --start;
    } else {
      break;
    }
  }
  std::string w = text.substr(start, end - start);
  while (!w.empty() && w.back() == '.') w.pop_back();
  return lower_ascii(w);
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

std::vector<Sentence> segment_sentences(const std::string& text) {
  if (trim(text).empty()) throw std::invalid_argument("segment_sentences: empty text");
  std::vector<Sentence> out;
  std::size_t start = 0;
  const std::size_t n = text.size();
  for (std::size_t i = 0; i < n; ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;

    std::size_t j = i;
    while (j + 1 < n && (text[j + 1] == '.' || text[j + 1] == '!' || text[j + 1] == '?')) ++j;
    // closing quotes/brackets stay with the sentence
    while (j + 1 < n && (text[j + 1] == '"' || text[j + 1] == '\'' || text[j + 1] == ')' || text[j + 1] == ']'))
      ++j;

    std::size_t k = j + 1;
    if (k >= n) break;  // trailing terminator: rest handled after loop
    if (!std::isspace(static_cast<unsigned char>(text[k]))) {
      i = j;
      continue;
    }
    while (k < n && std::isspace(static_cast<unsigned char>(text[k]))) ++k;
    if (k >= n) break;
    const unsigned char next = static_cast<unsigned char>(text[k]);
    if (!std::isupper(next) && !std::isdigit(next)) {
      i = j;
      continue;
    }
    if (c == '.' && j == i) {
      const std::string w = word_before(text, i);
      if (abbreviations().count(w) || w.size() == 1) {  // protect "Dr." and initials "J."
        i = j;
        continue;
      }
    }
    const std::string piece = trim(text.substr(start, j + 1 - start));
    if (!piece.empty()) out.push_back({piece, {}});
    start = k;
    i = k - 1;
  }
  const std::string tail = trim(text.substr(start));
  if (!tail.empty()) out.push_back({tail, {}});
  if (out.empty()) out.push_back({trim(text), {}});
  return out;
}

std::vector<std::string> word_pieces(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {  // non-ASCII bytes are word characters
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

TokenSeq tokenize(const std::string& text, std::size_t vocab_size, std::size_t max_len) {
  if (vocab_size < kNumReserved + 1)
    throw std::invalid_argument("tokenize: vocab_size must be at least " + std::to_string(kNumReserved + 1));
  TokenSeq seq;
  const std::uint64_t buckets = vocab_size - kNumReserved;
  for (const auto& piece : word_pieces(text)) {
    if (seq.ids.size() == max_len) {
      seq.truncated = true;
      break;
    }
    seq.ids.push_back(static_cast<std::uint32_t>(kNumReserved + fnv1a64(piece) % buckets));
  }
  return seq;
}

void tokenize_corpus(Corpus& corpus, std::size_t vocab_size, std::size_t max_len) {
  for (auto& doc : corpus.documents) {
    for (auto& s : doc.sentences) s.tokens = tokenize(s.text, vocab_size, max_len);
    for (auto& s : doc.reference) s.tokens = tokenize(s.text, vocab_size, max_len);
  }
}

Corpus load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
  Corpus corpus;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_jsonl: line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    const auto fail = [&](const std::string& msg) {
      throw std::runtime_error("load_jsonl: line " + std::to_string(lineno) + ": " + msg);
    };
    if (!j.is_object()) fail("expected a JSON object");
    if (!j.contains("id") || !j["id"].is_string()) fail("missing or non-string id field");
    if (!j.contains("reference") || !j["reference"].is_array()) fail("missing reference field");

    Document doc;
    doc.id = j["id"].get<std::string>();
    if (!seen.insert(doc.id).second) fail("duplicate document id '" + doc.id + "'");

    if (j.contains("sentences")) {
      if (!j["sentences"].is_array()) fail("sentences must be an array of strings");
      for (const auto& s : j["sentences"]) {
        if (!s.is_string()) fail("sentences must be an array of strings");
        const std::string t = trim(s.get<std::string>());
        if (t.empty()) fail("empty sentence");
        doc.sentences.push_back({t, {}});
      }
    } else if (j.contains("text")) {
      if (!j["text"].is_string()) fail("text must be a string");
      doc.sentences = segment_sentences(j["text"].get<std::string>());
    } else {
      fail("need either sentences or text");
    }
    if (doc.sentences.empty()) fail("document has no sentences");

    for (const auto& s : j["reference"]) {
      if (!s.is_string()) fail("reference must be an array of strings");
      const std::string t = trim(s.get<std::string>());
      if (!t.empty()) doc.reference.push_back({t, {}});
    }

    if (j.contains("labels")) {
      if (!j["labels"].is_array()) fail("labels must be an array");
      for (const auto& v : j["labels"]) {
        if (!v.is_number_integer()) fail("labels must be integers");
        const int lv = v.get<int>();
        if (lv != 0 && lv != 1) fail("labels must be 0 or 1");
        doc.labels.push_back(lv);
      }
      if (doc.labels.size() != doc.sentences.size()) fail("labels length does not match sentence count");
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

void save_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_jsonl: cannot write " + path);
  for (const auto& doc : corpus.documents) {
    nlohmann::json j;
    j["id"] = doc.id;
    auto& sents = j["sentences"] = nlohmann::json::array();
    for (const auto& s : doc.sentences) sents.push_back(s.text);
    auto& ref = j["reference"] = nlohmann::json::array();
    for (const auto& s : doc.reference) ref.push_back(s.text);
    if (doc.has_labels()) j["labels"] = doc.labels;
    out << j.dump() << "\n";
  }
}

Tensor<double> tfidf_matrix(const Corpus& corpus, std::size_t vocab_size) {
  if (corpus.documents.empty()) throw std::invalid_argument("tfidf_matrix: empty corpus");
  const std::size_t n_docs = corpus.size();
  const std::uint64_t buckets = vocab_size - kNumReserved;

  std::vector<std::unordered_map<std::uint32_t, double>> tf(n_docs);
  std::unordered_map<std::uint32_t, std::size_t> df;
  for (std::size_t d = 0; d < n_docs; ++d) {
    for (const auto& s : corpus.documents[d].sentences)
      for (const auto& piece : word_pieces(s.text))
        tf[d][static_cast<std::uint32_t>(kNumReserved + fnv1a64(piece) % buckets)] += 1.0;
    for (const auto& [term, cnt] : tf[d]) {
      (void)cnt;
      df[term] += 1;
    }
  }

  Tensor<double> m = Tensor<double>::zeros({n_docs, vocab_size});
  for (std::size_t d = 0; d < n_docs; ++d) {
    double sq = 0.0;
    for (const auto& [term, cnt] : tf[d]) {
      const double idf = std::log((1.0 + static_cast<double>(n_docs)) / (1.0 + static_cast<double>(df[term]))) + 1.0;
      const double w = cnt * idf;
      m(d, term) = w;
      sq += w * w;
    }
    if (sq > 0.0) {
      const double inv = 1.0 / std::sqrt(sq);
      for (const auto& [term, cnt] : tf[d]) {
        (void)cnt;
        m(d, term) *= inv;
      }
    }
  }
  return m;
}

Corpus kmeans_sample(const Corpus& corpus, std::size_t k_clusters, std::size_t n_select, std::uint64_t seed,
                     std::size_t tfidf_vocab) {
  if (corpus.documents.empty()) throw std::invalid_argument("kmeans_sample: empty corpus");
  const std::size_t n = corpus.size();
  if (n_select > n)
    throw std::invalid_argument("kmeans_sample: n_select " + std::to_string(n_select) + " exceeds corpus size " +
                                std::to_string(n));
  const std::size_t k = std::min(k_clusters == 0 ? std::size_t(1) : k_clusters, n);

  const Tensor<double> x = tfidf_matrix(corpus, tfidf_vocab);
  const std::size_t dim = x.cols();

  Rng rng(seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);

  Tensor<double> centroids = Tensor<double>::zeros({k, dim});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < dim; ++j) centroids(c, j) = x(order[c], j);

  std::vector<std::size_t> assign(n, 0);
  constexpr std::size_t kMaxIters = 50;
  constexpr double kTol = 1e-6;
  for (std::size_t iter = 0; iter < kMaxIters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      std::size_t best_c = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double d = x(i, j) - centroids(c, j);
          d2 += d * d;
        }
        if (d2 < best) {
          best = d2;
          best_c = c;
        }
      }
      assign[i] = best_c;
    }
    Tensor<double> next = Tensor<double>::zeros({k, dim});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[assign[i]] += 1;
      for (std::size_t j = 0; j < dim; ++j) next(assign[i], j) += x(i, j);
    }
    double move = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {  // empty cluster keeps its centroid
        for (std::size_t j = 0; j < dim; ++j) next(c, j) = centroids(c, j);
        continue;
      }
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        next(c, j) /= static_cast<double>(counts[c]);
        const double d = next(c, j) - centroids(c, j);
        d2 += d * d;
      }
      move = std::max(move, std::sqrt(d2));
    }
    centroids = std::move(next);
    if (move < kTol) break;
  }

  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) members[assign[i]].push_back(i);
  for (auto& m : members) rng.shuffle(m);

  std::vector<std::size_t> picked;
  std::vector<std::size_t> cursor(k, 0);
  while (picked.size() < n_select) {
    bool any = false;
    for (std::size_t c = 0; c < k && picked.size() < n_select; ++c) {
      if (cursor[c] < members[c].size()) {
        picked.push_back(members[c][cursor[c]++]);
        any = true;
      }
    }
    if (!any) break;
  }

  std::sort(picked.begin(), picked.end());  // original corpus order
  Corpus out;
  out.split_tag = corpus.split_tag;
  for (std::size_t i : picked) out.documents.push_back(corpus.documents[i]);
  return out;
}

SplitResult split(const Corpus& corpus, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                  std::uint64_t seed) {
  const std::size_t need = n_train + n_val + n_test;
  if (need > corpus.size())
    throw std::invalid_argument("split: need " + std::to_string(need) + " documents, have " +
                                std::to_string(corpus.size()));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  SplitResult r;
  r.train.split_tag = SplitTag::train;
  r.val.split_tag = SplitTag::val;
  r.test.split_tag = SplitTag::test;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n_train; ++i) r.train.documents.push_back(corpus.documents[order[pos++]]);
  for (std::size_t i = 0; i < n_val; ++i) r.val.documents.push_back(corpus.documents[order[pos++]]);
  for (std::size_t i = 0; i < n_test; ++i) r.test.documents.push_back(corpus.documents[order[pos++]]);
  return r;
}

void write_manifest(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot write " + path);
  for (const auto& doc : corpus.documents) out << doc.id << "\n";
}

Corpus make_synthetic_marker_corpus(std::size_t n_docs, std::uint64_t seed, std::size_t n_sentences,
                                    std::size_t n_relevant, std::size_t words_per_sentence) {
  static const std::vector<std::string> markers = {"alpha", "bravo",  "charlie", "delta", "echo",  "foxtrot",
                                                   "golf",  "hotel",  "india",   "juliet", "kilo",  "lima"};
  static const std::vector<std::string> fillers = {
      "river", "stone", "cloud", "meadow", "harbor", "lantern", "copper", "willow", "ember",  "frost",
      "cedar", "plume", "garnet", "marsh",  "quartz", "bramble", "dune",   "fjord",  "grove",  "heath",
      "inlet", "juniper", "knoll", "lagoon", "mesa",   "nectar",  "orchard", "pebble", "quarry", "ridge",
      "shale", "thicket", "umbra", "vale",   "wharf",  "yonder",  "zephyr",  "basin",  "crag",   "delta2"};

  if (n_relevant > n_sentences) throw std::invalid_argument("make_synthetic_marker_corpus: n_relevant > n_sentences");
  Rng rng(seed);
  Corpus corpus;
  for (std::size_t d = 0; d < n_docs; ++d) {
    Document doc;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "syn-%04zu", d);
    doc.id = idbuf;

    std::vector<std::size_t> pos(n_sentences);
    for (std::size_t i = 0; i < n_sentences; ++i) pos[i] = i;
    rng.shuffle(pos);
    std::set<std::size_t> relevant(pos.begin(), pos.begin() + n_relevant);

    for (std::size_t s = 0; s < n_sentences; ++s) {
      const auto& pool = relevant.count(s) ? markers : fillers;
      std::vector<std::size_t> idx(pool.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      rng.shuffle(idx);
      std::string text;
      for (std::size_t w = 0; w < words_per_sentence; ++w) {
        if (w) text += " ";
        text += pool[idx[w % idx.size()]];
      }
      text += ".";
      doc.sentences.push_back({text, {}});
      if (relevant.count(s)) doc.reference.push_back({text, {}});
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

}  // namespace mtsum

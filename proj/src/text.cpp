#include "dualpath/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dualpath {

std::vector<std::string> tokenize(std::string_view sentence) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    std::size_t begin = 0, end = current.size();
    while (begin < end && std::ispunct(static_cast<unsigned char>(current[begin]))) ++begin;
    while (end > begin && std::ispunct(static_cast<unsigned char>(current[end - 1]))) --end;
    if (end > begin) tokens.push_back(current.substr(begin, end - begin));
    current.clear();
  };
  for (char ch : sentence) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return tokens;
}

int Vocabulary::add(const std::string& word) {
  if (auto it = index_.find(word); it != index_.end()) return it->second;
  if (embeddings_) throw StateError("vocabulary: cannot grow after embeddings are attached");
  index_.emplace(word, size());
  words_.push_back(word);
  return size() - 1;
}

std::optional<int> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Vocabulary::attach_embeddings(RowMatrix<double> table) {
  if (table.rows() != size()) {
    throw FormatError("embedding table has " + std::to_string(table.rows()) + " rows, vocabulary has " +
                      std::to_string(size()) + " words");
  }
  embeddings_ = std::move(table);
}

Vocabulary build_vocabulary(std::span<const std::string> corpus,
                            const std::optional<std::unordered_set<std::string>>& allowlist, int min_frequency) {
  if (corpus.empty()) throw DataError("build_vocabulary: empty corpus");
  if (min_frequency < 1) throw ParameterError("build_vocabulary: min_frequency must be >= 1");
  std::vector<std::string> order;
  std::unordered_map<std::string, int> counts;
  for (const std::string& sentence : corpus) {
    for (std::string& token : tokenize(sentence)) {
      if (allowlist && !allowlist->contains(token)) continue;
      if (counts[token]++ == 0) order.push_back(std::move(token));
    }
  }
  Vocabulary vocab;
  for (const std::string& word : order) {
    if (counts[word] >= min_frequency) vocab.add(word);
  }
  return vocab;
}

std::vector<int> filter_sentence(std::string_view sentence, const Vocabulary& vocab) {
  std::vector<int> words;
  for (const std::string& token : tokenize(sentence)) {
    if (auto idx = vocab.find(token)) words.push_back(*idx);
  }
  return words;
}

TextCode encode_words(std::span<const int> words, int max_length, Alignment alignment, Rng& rng) {
  if (max_length < 1) throw ParameterError("encode: max length must be positive");
  if (words.empty()) throw DataError("encode: no in-vocabulary words");
  const int n = std::min(static_cast<int>(words.size()), max_length);
  int offset = 0;
  if (alignment == Alignment::shift) {
    std::uniform_int_distribution<int> draw(0, max_length - n);
    offset = draw(rng);
  }
  TextCode code{std::vector<int>(static_cast<std::size_t>(max_length), kPad), n};
  std::copy_n(words.begin(), n, code.indices.begin() + offset);
  return code;
}

TextCode encode_sentence(std::string_view sentence, const Vocabulary& vocab, int max_length, Alignment alignment,
                         Rng& rng) {
  const std::vector<int> words = filter_sentence(sentence, vocab);
  if (words.empty()) throw DataError("sentence has no in-vocabulary words: \"" + std::string(sentence) + "\"");
  return encode_words(words, max_length, alignment, rng);
}

std::vector<std::string> decode(const TextCode& code, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (int idx : code.indices) {
    if (idx != kPad) words.push_back(vocab.word(idx));
  }
  return words;
}

template <typename Scalar>
Tensor<Scalar> init_word_embedding(const Vocabulary& vocab, EmbeddingSource source, Index width, Rng& rng) {
  const Index d = vocab.size();
  if (d == 0) throw DataError("init_word_embedding: empty vocabulary");
  if (source == EmbeddingSource::table) {
    const auto& table = vocab.embeddings();
    if (!table) throw FormatError("init_word_embedding: vocabulary carries no embedding table");
    if (table->rows() != d) {
      throw FormatError("init_word_embedding: table has " + std::to_string(table->rows()) + " rows, expected " +
                        std::to_string(d));
    }
    if (table->cols() != width) {
      throw FormatError("init_word_embedding: table width " + std::to_string(table->cols()) +
                        " differs from configured width " + std::to_string(width));
    }
    Tensor<Scalar> out({d, width});
    out.matrix(d) = table->template cast<Scalar>();
    return out;
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(d + width));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  Tensor<Scalar> out({d, width});
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(uniform(rng));
  return out;
}

template Tensor<float> init_word_embedding(const Vocabulary&, EmbeddingSource, Index, Rng&);
template Tensor<double> init_word_embedding(const Vocabulary&, EmbeddingSource, Index, Rng&);

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (int i = 0; i < vocab.size(); ++i) out << vocab.word(i) << '\t' << i << '\n';
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary file " + path.string());
  std::vector<std::pair<int, std::string>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected word<TAB>index");
    }
    try {
      std::size_t used = 0;
      const int idx = std::stoi(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
      rows.emplace_back(idx, line.substr(0, tab));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed index");
    }
  }
  std::sort(rows.begin(), rows.end());
  Vocabulary vocab;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != static_cast<int>(i) || vocab.add(rows[i].second) != static_cast<int>(i)) {
      throw FormatError(path.string() + ": indices are not a bijection onto [0," + std::to_string(rows.size()) + ")");
    }
  }
  return vocab;
}

void save_embedding_table(const RowMatrix<double>& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write embedding table " + path.string());
  out << table.rows() << ' ' << table.cols() << '\n' << std::setprecision(17);
  for (Index r = 0; r < table.rows(); ++r) {
    for (Index c = 0; c < table.cols(); ++c) out << (c ? " " : "") << table(r, c);
    out << '\n';
  }
}

RowMatrix<double> load_embedding_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read embedding table " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  Index rows = 0, cols = 0;
  if (!(hs >> rows >> cols) || rows <= 0 || cols <= 0) {
    throw FormatError(path.string() + ":1: expected header \"d E\"");
  }
  RowMatrix<double> table(rows, cols);
  std::string line;
  for (Index r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) {
      throw FormatError(path.string() + ": expected " + std::to_string(rows) + " rows, found " + std::to_string(r));
    }
    std::istringstream ls(line);
    for (Index c = 0; c < cols; ++c) {
      if (!(ls >> table(r, c))) {
        throw FormatError(path.string() + ":" + std::to_string(r + 2) + ": expected " + std::to_string(cols) + " values");
      }
    }
  }
  return table;
}

}  // namespace dualpath

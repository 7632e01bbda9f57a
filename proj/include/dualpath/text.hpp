#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dualpath/ops.hpp"

namespace dualpath {

// Marks an all-zero row of the one-hot sentence code.
inline constexpr int kPad = -1;

// Lowercase, split on whitespace, strip leading and trailing punctuation.
std::vector<std::string> tokenize(std::string_view sentence);

class Vocabulary {
 public:
  Vocabulary() = default;

  // Appends `word` if absent; returns its index.
  int add(const std::string& word);

  int size() const { return static_cast<int>(words_.size()); }
  std::optional<int> find(std::string_view word) const;
  const std::string& word(int index) const { return words_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& words() const { return words_; }

  // d x E word-vector table, row i belongs to word(i).
  void attach_embeddings(RowMatrix<double> table);
  const std::optional<RowMatrix<double>>& embeddings() const { return embeddings_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.words_ == b.words_ && a.embeddings_.has_value() == b.embeddings_.has_value() &&
           (!a.embeddings_ || *a.embeddings_ == *b.embeddings_);
  }

 private:
  std::unordered_map<std::string, int> index_;
  std::vector<std::string> words_;
  std::optional<RowMatrix<double>> embeddings_;
};

// Indices are assigned in order of first occurrence. Words outside the
// allowlist (when given) or seen fewer than `min_frequency` times are dropped.
Vocabulary build_vocabulary(std::span<const std::string> corpus,
                            const std::optional<std::unordered_set<std::string>>& allowlist = std::nullopt,
                            int min_frequency = 1);

// In-vocabulary word indices of a sentence, out-of-vocabulary words dropped.
std::vector<int> filter_sentence(std::string_view sentence, const Vocabulary& vocab);

enum class Alignment { left, shift };

struct TextCode {
  std::vector<int> indices;  // fixed length L, kPad where empty
  int length = 0;            // in-vocabulary words kept, <= L

  friend bool operator==(const TextCode&, const TextCode&) = default;
};

// Places the (clipped) word sequence at offset 0 (left) or at an offset drawn
// uniformly from [0, L - n] (shift).
TextCode encode_words(std::span<const int> words, int max_length, Alignment alignment, Rng& rng);
TextCode encode_sentence(std::string_view sentence, const Vocabulary& vocab, int max_length, Alignment alignment,
                         Rng& rng);
std::vector<std::string> decode(const TextCode& code, const Vocabulary& vocab);

enum class EmbeddingSource { random, table };

// First text layer: a d x E lookup kernel. The table source copies the
// vocabulary's attached word vectors; random uses Glorot-uniform values.
template <typename Scalar>
Tensor<Scalar> init_word_embedding(const Vocabulary& vocab, EmbeddingSource source, Index width, Rng& rng);

// "word<TAB>index" per line.
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

// First line "d E", then d rows of E reals.
void save_embedding_table(const RowMatrix<double>& table, const std::filesystem::path& path);
RowMatrix<double> load_embedding_table(const std::filesystem::path& path);

}  // namespace dualpath

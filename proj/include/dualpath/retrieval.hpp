#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dualpath/dataset.hpp"
#include "dualpath/model.hpp"

namespace dualpath {

struct FeatureBank {
  RowMatrix<double> images;        // [G,D], flip-averaged
  RowMatrix<double> texts;         // [C,D]
  std::vector<int> caption_group;  // row of `images` for each caption
  std::vector<int> group_ids;      // corpus id of each image row

  void validate() const;
  friend bool operator==(const FeatureBank&, const FeatureBank&) = default;
};

// Eval-mode features: images averaged over the unflipped and flipped
// passes, captions left-aligned.
FeatureBank extract_features(DualPathModel<float>& model, const std::vector<ImageTextGroup>& groups,
                             const Vocabulary& vocab);

// Text format: "dualpath-bank 1", "G C D", then one row per image
// ("image <group_id> v...") and per caption ("caption <row> v...").
void save_bank(const FeatureBank& bank, const std::filesystem::path& path);
FeatureBank load_bank(const std::filesystem::path& path);

struct DirectionMetrics {
  std::vector<int> ks;
  std::vector<double> recall;  // aligned with ks
  int median_rank = 0;
  std::vector<int> ranks;      // 1-based rank of the closest true match, per query

  double recall_at(int k) const;
  friend bool operator==(const DirectionMetrics&, const DirectionMetrics&) = default;
};

// Ranks of the closest true match for each row of `scores` [Q,M]. Items are
// ordered by descending score, ties by ascending item index.
std::vector<int> closest_match_ranks(const Eigen::MatrixXd& scores, const std::vector<std::vector<int>>& truth);

DirectionMetrics direction_metrics(const Eigen::MatrixXd& scores, const std::vector<std::vector<int>>& truth,
                                   const std::vector<int>& ks);

// Lower of the two central values for even counts.
int lower_median(std::vector<int> values);

struct HistogramBin {
  double left = 0;
  double p = 0;  // positive-pair mass
  double q = 0;  // negative-pair mass

  friend bool operator==(const HistogramBin&, const HistogramBin&) = default;
};

std::vector<HistogramBin> similarity_histogram(const std::vector<double>& positives,
                                               const std::vector<double>& negatives, int bins = 100);

// Overlap of the two unit-mass histograms over [-1,1].
double indicator_s(const std::vector<double>& positives, const std::vector<double>& negatives, int bins = 100);

struct RetrievalReport {
  DirectionMetrics image_to_text;
  DirectionMetrics text_to_image;
  double indicator = 0;
  std::vector<HistogramBin> histogram;

  friend bool operator==(const RetrievalReport&, const RetrievalReport&) = default;
};

// Cosine similarity of every image row with every caption row, [G,C].
Eigen::MatrixXd similarity_matrix(const FeatureBank& bank);

RetrievalReport retrieval_metrics(const FeatureBank& bank, const std::vector<int>& ks = {1, 5, 10}, int bins = 100);

// "metric<TAB>direction<TAB>value" rows.
std::string report_tsv(const RetrievalReport& report);
std::string report_table(const RetrievalReport& report);
std::string histogram_tsv(const std::vector<HistogramBin>& histogram);

// Pairwise Pearson correlation of feature rows.
Eigen::MatrixXd pearson_diagnostic(const RowMatrix<double>& features);

struct WordDrop {
  int position = 0;  // index within the in-vocabulary word sequence
  std::string word;
  double drop = 0;   // baseline similarity minus similarity without the word
};

// Similarity drop from removing slot `position` of a left-aligned code;
// removing a padding slot leaves the code unchanged.
double deletion_drop(DualPathModel<float>& model, const Eigen::RowVectorXd& image_feature, const TextCode& code,
                     int position);

// Drops for every word of `caption`, largest first (ties by position).
std::vector<WordDrop> word_importance(DualPathModel<float>& model, const Tensor<float>& image,
                                      const std::string& caption, const Vocabulary& vocab);

// Flip-averaged eval-mode feature of one image.
Eigen::RowVectorXd image_feature(DualPathModel<float>& model, const Tensor<float>& image);

}  // namespace dualpath

#include "dualpath/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dualpath/errors.hpp"
#include "dualpath/objectives.hpp"

namespace dualpath {

namespace {

constexpr std::size_t kChunk = 64;

RowMatrix<double> to_double(const Tensor<float>& t) { return t.matrix(t.dim(0)).cast<double>(); }

RowMatrix<double> normalized(const RowMatrix<double>& m, const char* what) {
  RowMatrix<double> out = m;
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n <= kNormEpsilon) throw NumericError(std::string(what) + " row " + std::to_string(i) + " has zero norm");
    out.row(i) /= n;
  }
  return out;
}

}  // namespace

void FeatureBank::validate() const {
  if (images.rows() == 0 || texts.rows() == 0) throw DataError("feature bank is empty");
  if (images.cols() != texts.cols()) throw DimensionError("feature bank: image and text widths differ");
  if (static_cast<Index>(caption_group.size()) != texts.rows()) {
    throw DataError("feature bank: caption map has wrong length");
  }
  if (static_cast<Index>(group_ids.size()) != images.rows()) throw DataError("feature bank: group id list length");
  for (int g : caption_group) {
    if (g < 0 || g >= images.rows()) throw DataError("feature bank: caption maps to missing group " + std::to_string(g));
  }
  if (!images.allFinite() || !texts.allFinite()) throw NumericError("feature bank holds non-finite values");
}

Eigen::RowVectorXd image_feature(DualPathModel<float>& model, const Tensor<float>& image) {
  Rng rng(0);
  const Tensor<float> flipped = flip_horizontal(image);
  const RowMatrix<double> f = to_double(model.image_forward(stack_images<float>({&image, &flipped}), Mode::eval, rng).value());
  return 0.5 * (f.row(0) + f.row(1));
}

FeatureBank extract_features(DualPathModel<float>& model, const std::vector<ImageTextGroup>& groups,
                             const Vocabulary& vocab) {
  if (groups.empty()) throw DataError("extract_features: empty split");
  Rng rng(0);  // eval mode draws nothing
  const Index d = model.config().embed_dim;
  FeatureBank bank;
  bank.images.resize(static_cast<Index>(groups.size()), d);
  for (std::size_t begin = 0; begin < groups.size(); begin += kChunk) {
    const std::size_t end = std::min(groups.size(), begin + kChunk);
    std::vector<Tensor<float>> flipped;
    for (std::size_t g = begin; g < end; ++g) flipped.push_back(flip_horizontal(groups[g].image));
    std::vector<const Tensor<float>*> plain, mirrored;
    for (std::size_t g = begin; g < end; ++g) {
      plain.push_back(&groups[g].image);
      mirrored.push_back(&flipped[g - begin]);
    }
    const RowMatrix<double> a = to_double(model.image_forward(stack_images<float>(plain), Mode::eval, rng).value());
    const RowMatrix<double> b = to_double(model.image_forward(stack_images<float>(mirrored), Mode::eval, rng).value());
    bank.images.middleRows(static_cast<Index>(begin), a.rows()) = 0.5 * (a + b);
  }
  for (const auto& g : groups) bank.group_ids.push_back(g.group_id);

  std::vector<std::vector<int>> codes;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& caption : groups[g].captions) {
      codes.push_back(encode_sentence(caption, vocab, model.config().text_length, Alignment::left, rng).indices);
      bank.caption_group.push_back(static_cast<int>(g));
    }
  }
  bank.texts.resize(static_cast<Index>(codes.size()), d);
  for (std::size_t begin = 0; begin < codes.size(); begin += kChunk) {
    const std::size_t end = std::min(codes.size(), begin + kChunk);
    std::vector<std::vector<int>> chunk(codes.begin() + begin, codes.begin() + end);
    bank.texts.middleRows(static_cast<Index>(begin), static_cast<Index>(end - begin)) =
        to_double(model.text_forward(chunk, Mode::eval, rng).value());
  }
  bank.validate();
  return bank;
}

void save_bank(const FeatureBank& bank, const std::filesystem::path& path) {
  bank.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write feature bank " + path.string());
  out << "dualpath-bank 1\n" << bank.images.rows() << ' ' << bank.texts.rows() << ' ' << bank.images.cols() << '\n';
  char buf[40];
  auto row = [&](const auto& r) {
    for (Index j = 0; j < r.size(); ++j) {
      std::snprintf(buf, sizeof buf, " %.17g", r[j]);
      out << buf;
    }
    out << '\n';
  };
  for (Index i = 0; i < bank.images.rows(); ++i) {
    out << "image " << bank.group_ids[i];
    row(bank.images.row(i));
  }
  for (Index i = 0; i < bank.texts.rows(); ++i) {
    out << "caption " << bank.caption_group[i];
    row(bank.texts.row(i));
  }
}

FeatureBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read feature bank " + path.string());
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  ++line_no;
  if (!std::getline(in, line) || line != "dualpath-bank 1") throw FormatError(path.string() + ": not a feature bank");
  ++line_no;
  Index g = 0, c = 0, d = 0;
  if (!std::getline(in, line) || !(std::istringstream(line) >> g >> c >> d) || g <= 0 || c <= 0 || d <= 0) {
    throw fail("expected 'G C D' header");
  }
  FeatureBank bank;
  bank.images.resize(g, d);
  bank.texts.resize(c, d);
  for (Index i = 0; i < g + c; ++i) {
    ++line_no;
    if (!std::getline(in, line)) throw fail("unexpected end of file");
    std::istringstream row(line);
    std::string kind;
    int id = 0;
    row >> kind >> id;
    const bool is_image = i < g;
    if (!row || kind != (is_image ? "image" : "caption")) throw fail(std::string("expected '") + (is_image ? "image" : "caption") + "' row");
    auto dst = is_image ? bank.images.row(i) : bank.texts.row(i - g);
    for (Index j = 0; j < d; ++j) {
      if (!(row >> dst[j])) throw fail("expected " + std::to_string(d) + " values");
    }
    (is_image ? bank.group_ids : bank.caption_group).push_back(id);
  }
  bank.validate();
  return bank;
}

double DirectionMetrics::recall_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return recall[i];
  }
  throw UsageError("recall@" + std::to_string(k) + " was not computed");
}

std::vector<int> closest_match_ranks(const Eigen::MatrixXd& scores, const std::vector<std::vector<int>>& truth) {
  if (static_cast<Index>(truth.size()) != scores.rows()) throw DimensionError("closest_match_ranks: truth rows");
  std::vector<int> ranks(truth.size());
  for (Index q = 0; q < scores.rows(); ++q) {
    if (truth[q].empty()) throw DataError("query " + std::to_string(q) + " has no true match");
    int best = std::numeric_limits<int>::max();
    for (int t : truth[q]) {
      const double s = scores(q, t);
      int rank = 1;
      for (Index j = 0; j < scores.cols(); ++j) {
        if (scores(q, j) > s || (scores(q, j) == s && j < t)) ++rank;
      }
      best = std::min(best, rank);
    }
    ranks[q] = best;
  }
  return ranks;
}

int lower_median(std::vector<int> values) {
  if (values.empty()) throw DataError("median of an empty set");
  const std::size_t mid = (values.size() - 1) / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  return values[mid];
}

DirectionMetrics direction_metrics(const Eigen::MatrixXd& scores, const std::vector<std::vector<int>>& truth,
                                   const std::vector<int>& ks) {
  if (scores.rows() == 0 || scores.cols() == 0) throw DataError("retrieval over an empty split");
  DirectionMetrics m;
  m.ks = ks;
  m.ranks = closest_match_ranks(scores, truth);
  for (int k : ks) {
    const auto hits = std::count_if(m.ranks.begin(), m.ranks.end(), [k](int r) { return r <= k; });
    m.recall.push_back(double(hits) / double(m.ranks.size()));
  }
  m.median_rank = lower_median(m.ranks);
  return m;
}

std::vector<HistogramBin> similarity_histogram(const std::vector<double>& positives,
                                               const std::vector<double>& negatives, int bins) {
  if (bins <= 0) throw ParameterError("histogram needs at least one bin");
  if (positives.empty() || negatives.empty()) throw DataError("indicator needs positive and negative samples");
  constexpr double kTolerance = 1e-6;
  auto fill = [&](const std::vector<double>& xs) {
    std::vector<double> mass(static_cast<std::size_t>(bins), 0.0);
    for (double x : xs) {
      if (!(x >= -1.0 - kTolerance && x <= 1.0 + kTolerance)) {
        throw DataError("similarity " + KeyValues::format_number(x) + " lies outside [-1,1]");
      }
      x = std::clamp(x, -1.0, 1.0);
      const int b = std::min(bins - 1, static_cast<int>(std::floor((x + 1.0) / 2.0 * bins)));
      mass[static_cast<std::size_t>(b)] += 1.0;
    }
    for (double& v : mass) v /= static_cast<double>(xs.size());
    return mass;
  };
  const std::vector<double> p = fill(positives);
  const std::vector<double> q = fill(negatives);
  std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[b] = {-1.0 + 2.0 * b / bins, p[b], q[b]};
  }
  return out;
}

double indicator_s(const std::vector<double>& positives, const std::vector<double>& negatives, int bins) {
  double s = 0;
  for (const HistogramBin& b : similarity_histogram(positives, negatives, bins)) s += std::min(b.p, b.q);
  return std::clamp(s, 0.0, 1.0);
}

Eigen::MatrixXd similarity_matrix(const FeatureBank& bank) {
  bank.validate();
  return normalized(bank.images, "image") * normalized(bank.texts, "caption").transpose();
}

RetrievalReport retrieval_metrics(const FeatureBank& bank, const std::vector<int>& ks, int bins) {
  const Eigen::MatrixXd sim = similarity_matrix(bank);  // [G,C]
  const Index groups = sim.rows();
  const Index captions = sim.cols();

  std::vector<std::vector<int>> image_truth(static_cast<std::size_t>(groups));
  std::vector<std::vector<int>> text_truth(static_cast<std::size_t>(captions));
  for (Index c = 0; c < captions; ++c) {
    image_truth[bank.caption_group[c]].push_back(static_cast<int>(c));
    text_truth[c].push_back(bank.caption_group[c]);
  }
  for (Index g = 0; g < groups; ++g) {
    if (image_truth[g].empty()) throw DataError("group row " + std::to_string(g) + " has no caption");
  }

  RetrievalReport report;
  report.image_to_text = direction_metrics(sim, image_truth, ks);
  report.text_to_image = direction_metrics(sim.transpose(), text_truth, ks);

  std::vector<double> pos, neg;
  for (Index g = 0; g < groups; ++g) {
    for (Index c = 0; c < captions; ++c) (bank.caption_group[c] == g ? pos : neg).push_back(sim(g, c));
  }
  report.histogram = similarity_histogram(pos, neg, bins);
  double s = 0;
  for (const HistogramBin& b : report.histogram) s += std::min(b.p, b.q);
  report.indicator = std::clamp(s, 0.0, 1.0);
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string report_tsv(const RetrievalReport& report) {
  std::string out = "metric\tdirection\tvalue\n";
  auto direction = [&](const DirectionMetrics& m, const char* name) {
    for (std::size_t i = 0; i < m.ks.size(); ++i) {
      out += "R@" + std::to_string(m.ks[i]) + "\t" + name + "\t" + fmt(m.recall[i]) + "\n";
    }
    out += std::string("MedR\t") + name + "\t" + std::to_string(m.median_rank) + "\n";
  };
  direction(report.image_to_text, "image_to_text");
  direction(report.text_to_image, "text_to_image");
  out += "S\tboth\t" + fmt(report.indicator) + "\n";
  return out;
}

std::string report_table(const RetrievalReport& report) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s", "direction");
  out += buf;
  for (int k : report.image_to_text.ks) {
    std::snprintf(buf, sizeof buf, "%8s", ("R@" + std::to_string(k)).c_str());
    out += buf;
  }
  out += "    Med r\n";
  auto row = [&](const DirectionMetrics& m, const char* name) {
    std::snprintf(buf, sizeof buf, "%-14s", name);
    out += buf;
    for (double r : m.recall) {
      std::snprintf(buf, sizeof buf, "%8.1f", 100.0 * r);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "%9d\n", m.median_rank);
    out += buf;
  };
  row(report.image_to_text, "image->text");
  row(report.text_to_image, "text->image");
  std::snprintf(buf, sizeof buf, "indicator S = %.4f\n", report.indicator);
  out += buf;
  return out;
}

std::string histogram_tsv(const std::vector<HistogramBin>& histogram) {
  std::string out = "bin_left\tp\tq\n";
  char buf[96];
  for (const HistogramBin& b : histogram) {
    std::snprintf(buf, sizeof buf, "%.2f\t%.6f\t%.6f\n", b.left, b.p, b.q);
    out += buf;
  }
  return out;
}

Eigen::MatrixXd pearson_diagnostic(const RowMatrix<double>& features) {
  const Index m = features.rows();
  RowMatrix<double> z = features;
  for (Index i = 0; i < m; ++i) {
    z.row(i).array() -= z.row(i).mean();
    const double n = z.row(i).norm();
    if (n <= kNormEpsilon) throw NumericError("pearson_diagnostic: feature row " + std::to_string(i) + " is constant");
    z.row(i) /= n;
  }
  Eigen::MatrixXd corr = z * z.transpose();
  for (Index i = 0; i < m; ++i) {
    corr(i, i) = 1.0;
    for (Index j = 0; j < i; ++j) {
      const double v = std::clamp(corr(i, j), -1.0, 1.0);
      corr(i, j) = corr(j, i) = v;
    }
  }
  return corr;
}

namespace {

double code_similarity(DualPathModel<float>& model, const Eigen::RowVectorXd& image_feature, const TextCode& code) {
  Rng rng(0);
  const RowMatrix<double> t = to_double(model.text_forward({code.indices}, Mode::eval, rng).value());
  const Eigen::RowVectorXd row = t.row(0);
  return cosine_similarity(std::span<const double>(image_feature.data(), image_feature.size()),
                           std::span<const double>(row.data(), row.size()));
}

}  // namespace

double deletion_drop(DualPathModel<float>& model, const Eigen::RowVectorXd& image_feature, const TextCode& code,
                     int position) {
  if (position < 0 || position >= static_cast<int>(code.indices.size())) {
    throw IndexError("deletion_drop: position " + std::to_string(position) + " outside the code");
  }
  TextCode without = code;
  if (code.indices[position] != kPad) {
    without.indices.erase(without.indices.begin() + position);
    without.indices.push_back(kPad);
    --without.length;
  }
  if (without.indices == code.indices) return 0.0;
  return code_similarity(model, image_feature, code) - code_similarity(model, image_feature, without);
}

std::vector<WordDrop> word_importance(DualPathModel<float>& model, const Tensor<float>& image,
                                      const std::string& caption, const Vocabulary& vocab) {
  Rng rng(0);
  const TextCode code = encode_sentence(caption, vocab, model.config().text_length, Alignment::left, rng);
  if (code.length < 2) {
    throw DataError("word_importance needs at least two in-vocabulary words: \"" + caption + "\"");
  }
  const Eigen::RowVectorXd f = image_feature(model, image);
  const double baseline = code_similarity(model, f, code);
  std::vector<WordDrop> out;
  for (int p = 0; p < code.length; ++p) {
    TextCode without = code;
    without.indices.erase(without.indices.begin() + p);
    without.indices.push_back(kPad);
    --without.length;
    out.push_back({p, vocab.word(code.indices[p]), baseline - code_similarity(model, f, without)});
  }
  std::stable_sort(out.begin(), out.end(), [](const WordDrop& a, const WordDrop& b) { return a.drop > b.drop; });
  return out;
}

}  // namespace dualpath

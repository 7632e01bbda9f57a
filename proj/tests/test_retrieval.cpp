#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dualpath/retrieval.hpp"
#include "support/retrieval_oracle.hpp"

using namespace dualpath;
using namespace dualpath::testing;

namespace {

ModelConfig tiny_config(int vocab_size) {
  ModelConfig c;
  c.embed_dim = 8;
  c.word_embed_dim = 4;
  c.image_channels = {4, 8};
  c.text_channels = {4, 8};
  c.num_classes = 3;
  c.vocab_size = vocab_size;
  c.text_length = 8;
  c.image_size = 8;
  return c;
}

}  // namespace

TEST_CASE("retrieval metrics agree with a brute-force enumerator") {
  std::mt19937_64 rng(99);
  for (int instance = 0; instance < 50; ++instance) {
    CAPTURE(instance);
    const FeatureBank bank = random_bank(rng);
    const RetrievalReport report = retrieval_metrics(bank, {1, 2, 5});
    const BruteReport oracle = brute_force(bank);
    const Eigen::MatrixXd scores = similarity_matrix(bank);
    for (Index i = 0; i < bank.images.rows(); ++i)
      for (Index j = 0; j < bank.texts.rows(); ++j)
        CHECK(scores(i, j) == doctest::Approx(cosine(bank.images.row(i), bank.texts.row(j))).epsilon(1e-12));
    CHECK(report.image_to_text.ranks == oracle.i2t);
    CHECK(report.text_to_image.ranks == oracle.t2i);
    for (int k : {1, 2, 5}) {
      CHECK(report.image_to_text.recall_at(k) == doctest::Approx(recall(oracle.i2t, k)));
      CHECK(report.text_to_image.recall_at(k) == doctest::Approx(recall(oracle.t2i, k)));
    }
    CHECK(report.image_to_text.median_rank == lower_median_of(oracle.i2t));
    CHECK(report.text_to_image.median_rank == lower_median_of(oracle.t2i));
    CHECK(report.indicator == doctest::Approx(brute_overlap(oracle.pos, oracle.neg, 100)).epsilon(1e-9));
  }
}

TEST_CASE("identity similarity gives perfect retrieval") {
  FeatureBank bank;
  bank.images = RowMatrix<double>::Identity(3, 3);
  bank.texts = RowMatrix<double>::Identity(3, 3);
  bank.caption_group = {0, 1, 2};
  bank.group_ids = {0, 1, 2};
  const RetrievalReport r = retrieval_metrics(bank);
  CHECK(r.image_to_text.recall_at(1) == 1.0);
  CHECK(r.text_to_image.recall_at(1) == 1.0);
  CHECK(r.image_to_text.median_rank == 1);
  CHECK(r.text_to_image.median_rank == 1);
}

TEST_CASE("ties are broken by ascending index") {
  Eigen::MatrixXd scores = Eigen::MatrixXd::Constant(2, 4, 0.3);
  CHECK(closest_match_ranks(scores, {{2}, {0, 3}}) == std::vector<int>{3, 1});
  CHECK(lower_median({4, 1, 3, 2}) == 2);
  CHECK(lower_median({5}) == 5);
}

TEST_CASE("indicator S reference cases") {
  std::vector<double> a, b, wide, narrow;
  for (int i = 0; i < 1000; ++i) a.push_back(-0.8 + 0.3 * i / 1000.0);
  for (int i = 0; i < 1000; ++i) b.push_back(0.5 + 0.3 * i / 1000.0);
  CHECK(indicator_s(a, a) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(indicator_s(a, b) == doctest::Approx(0.0));
  // Uniform on [-1,1] against uniform on [0,1]: the overlap is half the mass.
  for (int i = 0; i < 20000; ++i) wide.push_back(-1.0 + 2.0 * (i + 0.5) / 20000.0);
  for (int i = 0; i < 10000; ++i) narrow.push_back((i + 0.5) / 10000.0);
  CHECK(std::abs(indicator_s(wide, narrow) - 0.5) <= 0.02);
  CHECK_THROWS_AS(indicator_s({}, a), DataError);
  CHECK_THROWS_AS(indicator_s({1.5}, a), DataError);
  const auto hist = similarity_histogram(a, b, 10);
  CHECK(hist.size() == 10);
  double p = 0, q = 0;
  for (const auto& h : hist) {
    p += h.p;
    q += h.q;
  }
  CHECK(p == doctest::Approx(1.0));
  CHECK(q == doctest::Approx(1.0));
}

TEST_CASE("feature bank file round trip") {
  std::mt19937_64 rng(4);
  const FeatureBank bank = random_bank(rng);
  const auto path = std::filesystem::temp_directory_path() / "dualpath_test.bank";
  save_bank(bank, path);
  CHECK(load_bank(path) == bank);
  std::filesystem::remove(path);
}

TEST_CASE("pearson diagnostic") {
  RowMatrix<double> f(3, 4);
  f << 1, 2, 3, 4, 2, 4, 6, 8.5, 4, 3, 2, 1;
  const Eigen::MatrixXd r = pearson_diagnostic(f);
  for (int i = 0; i < 3; ++i) CHECK(r(i, i) == doctest::Approx(1.0));
  CHECK(r(0, 2) == doctest::Approx(-1.0));
  auto centered = [&](int i) {
    Eigen::RowVectorXd v = f.row(i);
    return Eigen::RowVectorXd(v.array() - v.mean());
  };
  CHECK(r(0, 1) == doctest::Approx(cosine(centered(0), centered(1))));
  CHECK(r(1, 0) == doctest::Approx(r(0, 1)));
  f.row(1).setConstant(2.0);
  CHECK_THROWS_AS(pearson_diagnostic(f), NumericError);
}

TEST_CASE("word importance") {
  Vocabulary vocab;
  for (const char* w : {"a", "red", "circle", "on", "gray"}) vocab.add(w);
  DualPathModel<float> model(tiny_config(vocab.size()), 3);
  Tensor<float> image({3, 8, 8});
  image.array().setConstant(0.4f);

  const auto drops = word_importance(model, image, "a red circle on a gray", vocab);
  REQUIRE(drops.size() == 6);
  for (std::size_t i = 1; i < drops.size(); ++i) CHECK(drops[i - 1].drop >= drops[i].drop);
  double first_a = 0, second_a = 0;
  for (const auto& d : drops) {
    if (d.word == "a" && d.position == 0) first_a = d.drop;
    if (d.word == "a" && d.position == 4) second_a = d.drop;
  }
  CHECK(std::isfinite(first_a));
  CHECK(std::isfinite(second_a));

  // Repeated word at two positions of an otherwise symmetric caption.
  const auto twice = word_importance(model, image, "red red", vocab);
  REQUIRE(twice.size() == 2);
  CHECK(twice[0].drop == twice[1].drop);

  CHECK_THROWS_AS(word_importance(model, image, "red", vocab), DataError);
  CHECK_THROWS_AS(word_importance(model, image, "red zebra", vocab), DataError);

  Rng rng(0);
  const TextCode code = encode_sentence("red circle", vocab, 8, Alignment::left, rng);
  CHECK(deletion_drop(model, image_feature(model, image), code, 5) == 0.0);
}

#include <doctest.h>

#include <cmath>

#include "dualpath/model.hpp"
#include "dualpath/objectives.hpp"
#include "support/gradcheck.hpp"

using namespace dualpath;
using dualpath::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 8;
  c.word_embed_dim = 4;
  c.image_channels = {4, 8};
  c.text_channels = {4, 8};
  c.num_classes = 5;
  c.vocab_size = 10;
  c.text_length = 8;
  c.image_size = 8;
  c.dropout = 0.5;
  return c;
}

std::vector<std::vector<int>> codes_for(int n, int length, Rng& rng) {
  std::vector<std::vector<int>> codes(static_cast<std::size_t>(n), std::vector<int>(length, kPad));
  for (auto& row : codes)
    for (int p = 0; p < length / 2; ++p) row[static_cast<std::size_t>(p)] = static_cast<int>(rng() % 10);
  return codes;
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return t.array().isFinite().all();
}

}  // namespace

TEST_CASE("residual block keeps the input shape") {
  ModelConfig config = tiny_config();
  Rng rng(3);
  SUBCASE("image") {
    auto block = make_residual_block<double>("b", BlockKind::image, 4, 4, 1, Shortcut::identity, config, rng);
    Var<double> x = Var<double>::constant(random_tensor({2, 4, 6, 6}, rng));
    CHECK(residual_block(x, block, Mode::train).shape() == x.shape());
  }
  SUBCASE("text") {
    auto block = make_residual_block<double>("b", BlockKind::text, 4, 4, 1, Shortcut::identity, config, rng);
    Var<double> x = Var<double>::constant(random_tensor({2, 4, 1, 7}, rng));
    CHECK(residual_block(x, block, Mode::train).shape() == x.shape());
  }
}

TEST_CASE("residual block with zero residual branch is relu of the input") {
  ModelConfig config = tiny_config();
  Rng rng(4);
  auto block = make_residual_block<double>("b", BlockKind::image, 3, 3, 1, Shortcut::identity, config, rng);
  block.second.bn.gamma.value.mutable_value().array().setZero();
  Tensor<double> x = random_tensor({2, 3, 4, 4}, rng);
  Tensor<double> y = residual_block(Var<double>::constant(x), block, Mode::train).value();
  for (Index i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(std::max(x[i], 0.0)));
}

TEST_CASE("residual block errors") {
  ModelConfig config = tiny_config();
  Rng rng(5);
  CHECK_THROWS_AS(make_residual_block<double>("b", BlockKind::image, 4, 8, 1, Shortcut::identity, config, rng),
                  ConfigError);
  auto block = make_residual_block<double>("b", BlockKind::image, 4, 8, 2, Shortcut::automatic, config, rng);
  CHECK(block.projection.has_value());
  Var<double> wrong = Var<double>::constant(random_tensor({2, 3, 4, 4}, rng));
  CHECK_THROWS_AS(residual_block(wrong, block, Mode::train), DimensionError);
  Var<double> x = Var<double>::constant(random_tensor({2, 4, 4, 4}, rng));
  CHECK(residual_block(x, block, Mode::train).shape() == Shape{2, 8, 2, 2});
}

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  ModelConfig bad = c;
  bad.embed_dim = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.image_size = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(ModelConfig::from_key_values(c.to_key_values()) == c);
  CHECK(ModelConfig::from_key_values(c.to_key_values()).hash() == c.hash());
}

TEST_CASE("forward shapes and input checks") {
  DualPathModel<float> model(tiny_config(), 1);
  Rng rng(6);
  Tensor<float> images({3, 3, 8, 8});
  images.array().setConstant(0.5f);
  CHECK(model.image_forward(images, Mode::eval, rng).shape() == Shape{3, 8});
  CHECK(model.text_forward(codes_for(3, 8, rng), Mode::eval, rng).shape() == Shape{3, 8});
  CHECK_THROWS_AS(model.image_forward(Tensor<float>({3, 3, 4, 4}), Mode::eval, rng), DimensionError);
  CHECK_THROWS_AS(model.text_forward(codes_for(3, 7, rng), Mode::eval, rng), DimensionError);
  CHECK_THROWS_AS(model.text_forward({}, Mode::eval, rng), DimensionError);
}

TEST_CASE("initialization depends only on the seed") {
  DualPathModel<float> a(tiny_config(), 9), b(tiny_config(), 9), c(tiny_config(), 10);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value.value() == pb[i]->value.value());
    differs = differs || !(pa[i]->value.value() == pc[i]->value.value());
  }
  CHECK(differs);
}

TEST_CASE("image and text paths share no parameters before the classifier") {
  DualPathModel<double> model(tiny_config(), 2);
  Rng rng(7);
  Tensor<double> images = random_tensor({4, 3, 8, 8}, rng);
  std::vector<int> classes{0, 1, 2, 3};
  for (auto* p : model.parameters()) p->value.zero_grad();
  Var<double> fi = model.image_forward(images, Mode::train, rng);
  backward(softmax_cross_entropy(classify(fi, model.classifier()), classes));
  for (auto* p : model.parameters()) {
    INFO(p->name);
    const bool text = p->name.rfind("text.", 0) == 0;
    if (text) CHECK_FALSE(p->value.has_grad());
  }
  for (auto* p : model.parameters()) p->value.zero_grad();
  Var<double> ft = model.text_forward(codes_for(4, 8, rng), Mode::train, rng);
  backward(softmax_cross_entropy(classify(ft, model.classifier()), classes));
  for (auto* p : model.parameters()) {
    INFO(p->name);
    if (p->name.rfind("image.", 0) == 0) CHECK_FALSE(p->value.has_grad());
  }
}

TEST_CASE("shared classifier receives the sum of both path gradients") {
  DualPathModel<double> model(tiny_config(), 3);
  Rng rng(8);
  Tensor<double> fi_value = random_tensor({4, 8}, rng), ft_value = random_tensor({4, 8}, rng);
  std::vector<int> classes{0, 1, 2, 4};
  auto grad_of = [&](bool image, bool text) {
    model.classifier().value.zero_grad();
    InstanceLoss<double> l =
        instance_loss(Var<double>::constant(fi_value), Var<double>::constant(ft_value), classes, model.classifier());
    backward(combined_loss(Var<double>(), l.visual, l.textual, LossWeights{0, image ? 1.0 : 0.0, text ? 1.0 : 0.0}));
    return model.classifier().value.grad();
  };
  Tensor<double> gi = grad_of(true, false), gt = grad_of(false, true), both = grad_of(true, true);
  for (Index i = 0; i < both.size(); ++i) CHECK(both[i] == doctest::Approx(gi[i] + gt[i]).epsilon(1e-12));
}

TEST_CASE("forward outputs are finite across seeds") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    DualPathModel<float> model(tiny_config(), seed);
    Rng rng(seed);
    Tensor<float> images({4, 3, 8, 8});
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (Index i = 0; i < images.size(); ++i) images[i] = u(rng);
    CHECK(all_finite(model.image_forward(images, Mode::train, rng).value()));
    CHECK(all_finite(model.text_forward(codes_for(4, 8, rng), Mode::train, rng).value()));
  }
}

TEST_CASE("eval forward is deterministic and copies are independent") {
  DualPathModel<float> model(tiny_config(), 4);
  Rng r1(1), r2(2);
  auto codes = codes_for(3, 8, r1);
  Tensor<float> a = model.text_forward(codes, Mode::eval, r1).value();
  Tensor<float> b = model.text_forward(codes, Mode::eval, r2).value();
  CHECK(a == b);
  DualPathModel<float> copy = model;
  copy.classifier().value.mutable_value().array() += 1.0f;
  CHECK_FALSE(copy.classifier().value.value() == model.classifier().value.value());
}

TEST_CASE("backbone freezing covers exactly the stem and image blocks") {
  DualPathModel<float> model(tiny_config(), 5);
  model.set_image_backbone_frozen(true);
  CHECK(model.image_backbone_frozen());
  for (auto* p : model.parameters()) {
    INFO(p->name);
    const bool backbone = p->name.rfind("image.stem", 0) == 0 || p->name.rfind("image.stage", 0) == 0;
    CHECK(p->frozen == backbone);
  }
}

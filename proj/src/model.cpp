#include "dualpath/model.hpp"

#include <cmath>

#include "dualpath/errors.hpp"

namespace dualpath {

namespace {

constexpr std::string_view kModelKeys[] = {"embed_dim",     "word_embed_dim", "image_channels", "text_channels",
                                           "blocks_per_stage", "num_classes", "vocab_size",     "text_length",
                                           "image_size",    "dropout",        "bn_momentum",    "bn_epsilon"};

void require_positive(int value, const char* what) {
  if (value <= 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
}

}  // namespace

void ModelConfig::validate() const {
  require_positive(embed_dim, "embed_dim");
  require_positive(word_embed_dim, "word_embed_dim");
  require_positive(blocks_per_stage, "blocks_per_stage");
  require_positive(num_classes, "num_classes");
  require_positive(vocab_size, "vocab_size");
  require_positive(text_length, "text_length");
  require_positive(image_size, "image_size");
  if (image_channels.empty() || text_channels.empty()) throw ConfigError("model config: empty channel schedule");
  for (int c : image_channels) require_positive(c, "image_channels");
  for (int c : text_channels) require_positive(c, "text_channels");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must lie in [0,1)");
  // Every stage after the first halves the spatial extent.
  if (image_size % (1 << (image_channels.size() - 1)) != 0) {
    throw ConfigError("model config: image_size " + std::to_string(image_size) + " not divisible by " +
                      std::to_string(1 << (image_channels.size() - 1)));
  }
  if (text_length % (1 << (text_channels.size() - 1)) != 0) {
    throw ConfigError("model config: text_length " + std::to_string(text_length) + " not divisible by " +
                      std::to_string(1 << (text_channels.size() - 1)));
  }
}

KeyValues ModelConfig::to_key_values() const {
  KeyValues kv;
  kv.set("embed_dim", embed_dim);
  kv.set("word_embed_dim", word_embed_dim);
  kv.set("image_channels", KeyValues::format_list(image_channels));
  kv.set("text_channels", KeyValues::format_list(text_channels));
  kv.set("blocks_per_stage", blocks_per_stage);
  kv.set("num_classes", num_classes);
  kv.set("vocab_size", vocab_size);
  kv.set("text_length", text_length);
  kv.set("image_size", image_size);
  kv.set("dropout", dropout);
  kv.set("bn_momentum", bn_momentum);
  kv.set("bn_epsilon", bn_epsilon);
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  c.embed_dim = kv.get_int("embed_dim", c.embed_dim);
  c.word_embed_dim = kv.get_int("word_embed_dim", c.word_embed_dim);
  c.image_channels = kv.get_int_list("image_channels", c.image_channels);
  c.text_channels = kv.get_int_list("text_channels", c.text_channels);
  c.blocks_per_stage = kv.get_int("blocks_per_stage", c.blocks_per_stage);
  c.num_classes = kv.get_int("num_classes", c.num_classes);
  c.vocab_size = kv.get_int("vocab_size", c.vocab_size);
  c.text_length = kv.get_int("text_length", c.text_length);
  c.image_size = kv.get_int("image_size", c.image_size);
  c.dropout = kv.get_double("dropout", c.dropout);
  c.bn_momentum = kv.get_double("bn_momentum", c.bn_momentum);
  c.bn_epsilon = kv.get_double("bn_epsilon", c.bn_epsilon);
  return c;
}

std::vector<std::string_view> ModelConfig::keys() { return {std::begin(kModelKeys), std::end(kModelKeys)}; }

std::uint64_t ModelConfig::hash() const { return fnv1a(to_key_values().to_string()); }

namespace {

template <typename Scalar>
ConvBn<Scalar> make_conv_bn(const std::string& name, Index in, Index out, Index kh, Index kw,
                            const Conv2dOptions& options, const ModelConfig& config, Rng& rng) {
  return ConvBn<Scalar>{Parameter<Scalar>(name + ".kernel", he_normal<Scalar>({out, in, kh, kw}, in * kh * kw, rng)),
                        BatchNormState<Scalar>(name + ".bn", out, config.bn_momentum, config.bn_epsilon), options};
}

template <typename Scalar>
Var<Scalar> conv_bn(const Var<Scalar>& x, ConvBn<Scalar>& layer, Mode mode) {
  return batchnorm(conv2d(x, layer.kernel.value, layer.options), layer.bn, mode);
}

template <typename Scalar>
EmbeddingHead<Scalar> make_head(const std::string& name, Index in, const ModelConfig& config, Rng& rng) {
  const Index d = config.embed_dim;
  return EmbeddingHead<Scalar>{
      Parameter<Scalar>(name + ".fc1.weight", he_normal<Scalar>({in, d}, in, rng)),
      Parameter<Scalar>(name + ".fc1.bias", Tensor<Scalar>::zeros({d})),
      BatchNormState<Scalar>(name + ".bn", d, config.bn_momentum, config.bn_epsilon),
      Parameter<Scalar>(name + ".fc2.weight", he_normal<Scalar>({d, d}, d, rng)),
      Parameter<Scalar>(name + ".fc2.bias", Tensor<Scalar>::zeros({d})),
  };
}

template <typename Scalar>
void append(std::vector<Parameter<Scalar>*>& out, ConvBn<Scalar>& layer) {
  out.push_back(&layer.kernel);
  out.push_back(&layer.bn.gamma);
  out.push_back(&layer.bn.beta);
}

template <typename Scalar>
void append(std::vector<Parameter<Scalar>*>& out, ResidualBlock<Scalar>& block) {
  append(out, block.first);
  append(out, block.second);
  if (block.projection) append(out, *block.projection);
}

template <typename Scalar>
void append(std::vector<Parameter<Scalar>*>& out, EmbeddingHead<Scalar>& head) {
  out.push_back(&head.fc1_weight);
  out.push_back(&head.fc1_bias);
  out.push_back(&head.bn.gamma);
  out.push_back(&head.bn.beta);
  out.push_back(&head.fc2_weight);
  out.push_back(&head.fc2_bias);
}

template <typename Scalar>
std::string bn_name(const BatchNormState<Scalar>& bn) {
  const std::string& g = bn.gamma.name;
  return g.substr(0, g.size() - std::string(".gamma").size());
}

}  // namespace

template <typename Scalar>
ResidualBlock<Scalar> make_residual_block(const std::string& name, BlockKind kind, Index in_channels,
                                          Index out_channels, Index stride, Shortcut shortcut,
                                          const ModelConfig& config, Rng& rng) {
  if (in_channels <= 0 || out_channels <= 0 || stride <= 0) {
    throw ConfigError(name + ": channels and stride must be positive");
  }
  const bool same_shape = in_channels == out_channels && stride == 1;
  if (shortcut == Shortcut::identity && !same_shape) {
    throw ConfigError(name + ": identity shortcut needs matching shapes, got " + std::to_string(in_channels) +
                      " -> " + std::to_string(out_channels) + " channels with stride " + std::to_string(stride));
  }
  const bool project = shortcut == Shortcut::projection || (shortcut == Shortcut::automatic && !same_shape);

  const bool image = kind == BlockKind::image;
  const Index kh = image ? 3 : 1;
  const Index kw = image ? 3 : 2;
  auto opts = [&](Index s) { return image ? Conv2dOptions::same(3, s) : Conv2dOptions::length_pair(s); };

  ResidualBlock<Scalar> block{
      make_conv_bn<Scalar>(name + ".conv1", in_channels, out_channels, kh, kw, opts(stride), config, rng),
      make_conv_bn<Scalar>(name + ".conv2", out_channels, out_channels, kh, kw, opts(1), config, rng),
      std::nullopt};
  if (project) {
    Conv2dOptions p{image ? stride : 1, stride, 0, 0, 0, 0};
    block.projection = make_conv_bn<Scalar>(name + ".proj", in_channels, out_channels, 1, 1, p, config, rng);
  }
  return block;
}

template <typename Scalar>
Var<Scalar> residual_block(const Var<Scalar>& x, ResidualBlock<Scalar>& block, Mode mode) {
  if (x.value().rank() != 4 || x.dim(1) != block.in_channels()) {
    throw DimensionError("residual block expects [N," + std::to_string(block.in_channels()) + ",H,W], got " +
                         to_string(x.shape()));
  }
  Var<Scalar> h = relu(conv_bn(x, block.first, mode));
  h = conv_bn(h, block.second, mode);
  Var<Scalar> shortcut = block.projection ? conv_bn(x, *block.projection, mode) : x;
  if (shortcut.shape() != h.shape()) {
    throw DimensionError("residual block shortcut " + to_string(shortcut.shape()) + " does not match branch " +
                         to_string(h.shape()));
  }
  return relu(add(h, shortcut));
}

template <typename Scalar>
DualPathModel<Scalar>::DualPathModel(const ModelConfig& config, const Vocabulary& vocab, EmbeddingSource source,
                                     std::uint64_t seed)
    : DualPathModel(config, seed) {
  if (static_cast<int>(vocab.size()) != config_.vocab_size) {
    throw ConfigError("model config: vocab_size " + std::to_string(config_.vocab_size) +
                      " does not match vocabulary size " + std::to_string(vocab.size()));
  }
  if (source == EmbeddingSource::table) {
    Rng unused(0);
    word_embedding_ = Parameter<Scalar>(
        "text.lookup", init_word_embedding<Scalar>(vocab, source, config_.word_embed_dim, unused));
  }
}

template <typename Scalar>
DualPathModel<Scalar>::DualPathModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);

  const auto& ic = config_.image_channels;
  image_stem_ = make_conv_bn<Scalar>("image.stem", 3, ic[0], 3, 3, Conv2dOptions::same(3), config_, rng);
  Index in = ic[0];
  for (std::size_t s = 0; s < ic.size(); ++s) {
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      const Index stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string name = "image.stage" + std::to_string(s) + ".block" + std::to_string(b);
      image_blocks_.push_back(
          make_residual_block<Scalar>(name, BlockKind::image, in, ic[s], stride, Shortcut::automatic, config_, rng));
      in = ic[s];
    }
  }
  image_head_ = make_head<Scalar>("image.head", in, config_, rng);

  // Glorot-uniform lookup table
  Rng embed_rng(derive_seed(seed, 7));
  const Index d = config_.vocab_size;
  const Index e = config_.word_embed_dim;
  std::uniform_real_distribution<double> uniform(-std::sqrt(6.0 / static_cast<double>(d + e)),
                                                 std::sqrt(6.0 / static_cast<double>(d + e)));
  Tensor<Scalar> lookup({d, e});
  for (Index i = 0; i < lookup.size(); ++i) lookup[i] = static_cast<Scalar>(uniform(embed_rng));
  word_embedding_ = Parameter<Scalar>("text.lookup", std::move(lookup));
  const auto& tc = config_.text_channels;
  in = config_.word_embed_dim;
  for (std::size_t s = 0; s < tc.size(); ++s) {
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      const Index stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string name = "text.stage" + std::to_string(s) + ".block" + std::to_string(b);
      text_blocks_.push_back(
          make_residual_block<Scalar>(name, BlockKind::text, in, tc[s], stride, Shortcut::automatic, config_, rng));
      in = tc[s];
    }
  }
  text_head_ = make_head<Scalar>("text.head", in, config_, rng);

  classifier_ = Parameter<Scalar>(
      "classifier", he_normal<Scalar>({config_.embed_dim, config_.num_classes}, config_.embed_dim, rng));
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> DualPathModel<Scalar>::image_backbone_parameters() {
  std::vector<Parameter<Scalar>*> out;
  append(out, image_stem_);
  for (auto& block : image_blocks_) append(out, block);
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> DualPathModel<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> out = image_backbone_parameters();
  append(out, image_head_);
  out.push_back(&word_embedding_);
  for (auto& block : text_blocks_) append(out, block);
  append(out, text_head_);
  out.push_back(&classifier_);
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> DualPathModel<Scalar>::parameters() const {
  auto mutable_params = const_cast<DualPathModel*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename Scalar>
std::vector<std::pair<std::string, BatchNormState<Scalar>*>> DualPathModel<Scalar>::batchnorms() {
  std::vector<std::pair<std::string, BatchNormState<Scalar>*>> out;
  auto add_layer = [&](ConvBn<Scalar>& layer) { out.emplace_back(bn_name(layer.bn), &layer.bn); };
  auto add_block = [&](ResidualBlock<Scalar>& block) {
    add_layer(block.first);
    add_layer(block.second);
    if (block.projection) add_layer(*block.projection);
  };
  add_layer(image_stem_);
  for (auto& block : image_blocks_) add_block(block);
  out.emplace_back(bn_name(image_head_.bn), &image_head_.bn);
  for (auto& block : text_blocks_) add_block(block);
  out.emplace_back(bn_name(text_head_.bn), &text_head_.bn);
  return out;
}

template <typename Scalar>
void DualPathModel<Scalar>::set_image_backbone_frozen(bool frozen) {
  for (Parameter<Scalar>* p : image_backbone_parameters()) p->set_frozen(frozen);
}

template <typename Scalar>
Var<Scalar> DualPathModel<Scalar>::head_forward(const Var<Scalar>& pooled, EmbeddingHead<Scalar>& head, Mode mode,
                                                Rng& rng) {
  Var<Scalar> h = linear(pooled, head.fc1_weight.value, head.fc1_bias.value);
  h = relu(batchnorm(h, head.bn, mode));
  h = dropout(h, config_.dropout, mode, rng);
  return linear(h, head.fc2_weight.value, head.fc2_bias.value);
}

template <typename Scalar>
Var<Scalar> DualPathModel<Scalar>::image_forward(const Tensor<Scalar>& images, Mode mode, Rng& rng) {
  const Index s = config_.image_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("image_forward expects [N,3," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                         to_string(images.shape()));
  }
  Var<Scalar> h = relu(conv_bn(Var<Scalar>::constant(images), image_stem_, mode));
  for (auto& block : image_blocks_) h = residual_block(h, block, mode);
  return head_forward(global_avg_pool(h), image_head_, mode, rng);
}

template <typename Scalar>
Var<Scalar> DualPathModel<Scalar>::text_forward(const std::vector<std::vector<int>>& codes, Mode mode, Rng& rng) {
  if (codes.empty()) throw DimensionError("text_forward: empty batch");
  for (const auto& row : codes) {
    if (static_cast<int>(row.size()) != config_.text_length) {
      throw DimensionError("text_forward expects codes of length " + std::to_string(config_.text_length) + ", got " +
                           std::to_string(row.size()));
    }
  }
  Var<Scalar> h = embedding_lookup(codes, word_embedding_.value);
  for (auto& block : text_blocks_) h = residual_block(h, block, mode);
  return head_forward(global_avg_pool(h), text_head_, mode, rng);
}

template <typename Scalar>
Var<Scalar> classify(const Var<Scalar>& features, const Parameter<Scalar>& classifier) {
  if (features.value().rank() != 2 || features.dim(1) != classifier.value.dim(0)) {
    throw DimensionError("classify: features " + to_string(features.shape()) + " do not match classifier " +
                         to_string(classifier.value.shape()));
  }
  return matmul(features, classifier.value);
}

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw DimensionError("stack_images: empty batch");
  const Shape& first = images.front()->shape();
  Shape shape{static_cast<Index>(images.size())};
  shape.insert(shape.end(), first.begin(), first.end());
  Tensor<Scalar> out(shape);
  const Index per = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != first) {
      throw DimensionError("stack_images: shape " + to_string(images[i]->shape()) + " differs from " +
                           to_string(first));
    }
    out.array().segment(static_cast<Index>(i) * per, per) = images[i]->array().template cast<Scalar>();
  }
  return out;
}

#define DUALPATH_INSTANTIATE_MODEL(S)                                                                          \
  template ResidualBlock<S> make_residual_block(const std::string&, BlockKind, Index, Index, Index, Shortcut, \
                                                const ModelConfig&, Rng&);                                    \
  template Var<S> residual_block(const Var<S>&, ResidualBlock<S>&, Mode);                                     \
  template class DualPathModel<S>;                                                                            \
  template Var<S> classify(const Var<S>&, const Parameter<S>&);                                               \
  template Tensor<S> stack_images(const std::vector<const Tensor<float>*>&);

DUALPATH_INSTANTIATE_MODEL(float)
DUALPATH_INSTANTIATE_MODEL(double)

#undef DUALPATH_INSTANTIATE_MODEL

}  // namespace dualpath

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualpath/config.hpp"
#include "dualpath/nn.hpp"
#include "dualpath/text.hpp"

namespace dualpath {

struct ModelConfig {
  int embed_dim = 64;       // D, width of both heads
  int word_embed_dim = 32;  // E, width of the lookup layer
  std::vector<int> image_channels{8, 16, 32, 64};
  std::vector<int> text_channels{32, 32, 64, 64};
  int blocks_per_stage = 1;
  int num_classes = 0;  // N, one class per training group
  int vocab_size = 0;   // d
  int text_length = 32; // L
  int image_size = 32;
  double dropout = 0.75;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  void validate() const;
  KeyValues to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);
  static std::vector<std::string_view> keys();
  // Hash of the canonical key-value rendering.
  std::uint64_t hash() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct ConvBn {
  Parameter<Scalar> kernel;
  BatchNormState<Scalar> bn;
  Conv2dOptions options;
};

enum class Shortcut { automatic, identity, projection };

// y = relu(F(x) + shortcut(x)), F = conv-bn-relu-conv-bn.
template <typename Scalar>
struct ResidualBlock {
  ConvBn<Scalar> first;
  ConvBn<Scalar> second;
  std::optional<ConvBn<Scalar>> projection;

  Index in_channels() const { return first.kernel.value.dim(1); }
  Index out_channels() const { return second.kernel.value.dim(0); }
};

enum class BlockKind { image, text };

// Image blocks use 3x3 filters with symmetric padding; text blocks use 1x2
// filters padded on the right. `stride` applies along H and W for images and
// along the length axis for text.
template <typename Scalar>
ResidualBlock<Scalar> make_residual_block(const std::string& name, BlockKind kind, Index in_channels,
                                          Index out_channels, Index stride, Shortcut shortcut,
                                          const ModelConfig& config, Rng& rng);

template <typename Scalar>
Var<Scalar> residual_block(const Var<Scalar>& x, ResidualBlock<Scalar>& block, Mode mode);

// fc - bn - relu - dropout - fc
template <typename Scalar>
struct EmbeddingHead {
  Parameter<Scalar> fc1_weight, fc1_bias;
  BatchNormState<Scalar> bn;
  Parameter<Scalar> fc2_weight, fc2_bias;
};

template <typename Scalar>
class DualPathModel {
 public:
  DualPathModel() = default;
  // Random initialization; the lookup layer is filled from `vocab` when
  // `source` is table.
  DualPathModel(const ModelConfig& config, const Vocabulary& vocab, EmbeddingSource source, std::uint64_t seed);
  // Random initialization of every parameter, lookup layer included.
  DualPathModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Parameters in canonical order; names are unique.
  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;
  std::vector<std::pair<std::string, BatchNormState<Scalar>*>> batchnorms();
  std::vector<Parameter<Scalar>*> image_backbone_parameters();

  void set_image_backbone_frozen(bool frozen);
  bool image_backbone_frozen() const { return image_stem_.kernel.frozen; }

  // Image batch [N,3,S,S] -> features [N,D].
  Var<Scalar> image_forward(const Tensor<Scalar>& images, Mode mode, Rng& rng);
  // Codes [N][L] with kPad for padding -> features [N,D].
  Var<Scalar> text_forward(const std::vector<std::vector<int>>& codes, Mode mode, Rng& rng);

  Parameter<Scalar>& classifier() { return classifier_; }
  const Parameter<Scalar>& classifier() const { return classifier_; }
  Parameter<Scalar>& word_embedding() { return word_embedding_; }
  EmbeddingHead<Scalar>& image_head() { return image_head_; }
  EmbeddingHead<Scalar>& text_head() { return text_head_; }
  std::vector<ResidualBlock<Scalar>>& image_blocks() { return image_blocks_; }
  std::vector<ResidualBlock<Scalar>>& text_blocks() { return text_blocks_; }

 private:
  Var<Scalar> head_forward(const Var<Scalar>& pooled, EmbeddingHead<Scalar>& head, Mode mode, Rng& rng);

  ModelConfig config_;
  ConvBn<Scalar> image_stem_;
  std::vector<ResidualBlock<Scalar>> image_blocks_;
  EmbeddingHead<Scalar> image_head_;
  Parameter<Scalar> word_embedding_;
  std::vector<ResidualBlock<Scalar>> text_blocks_;
  EmbeddingHead<Scalar> text_head_;
  Parameter<Scalar> classifier_;  // W_share, [D,N]
};

// logits = features * W_share, no bias.
template <typename Scalar>
Var<Scalar> classify(const Var<Scalar>& features, const Parameter<Scalar>& classifier);

// Stacks [3,S,S] images into one [N,3,S,S] batch in the model scalar type.
template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Tensor<float>*>& images);

}  // namespace dualpath

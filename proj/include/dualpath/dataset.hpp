#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualpath/config.hpp"
#include "dualpath/ops.hpp"

namespace dualpath {

// Indices into the built-in attribute tables.
struct AttributeTuple {
  int color = 0;
  int shape = 0;
  int count = 0;  // 0-based: glyph count is count + 1
  int background = 0;

  auto operator<=>(const AttributeTuple&) const = default;
};

// Generation record for the synthetic corpus. Attribute counts select a
// prefix of each built-in table.
struct CorpusSpec {
  int colors = 6;
  int shapes = 4;
  int counts = 3;
  int backgrounds = 3;
  int train_groups = 64;
  int val_groups = 16;
  int test_groups = 16;
  int captions_per_group = 5;
  int image_size = 32;
  std::uint64_t seed = 1;

  int total_groups() const { return train_groups + val_groups + test_groups; }
  long attribute_space() const { return long{colors} * shapes * counts * backgrounds; }

  KeyValues to_key_values() const;
  static CorpusSpec from_key_values(const KeyValues& kv);

  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

struct ImageTextGroup {
  int group_id = 0;
  Tensor<float> image;  // [3,H,W], values in [0,1]
  std::vector<std::string> captions;
  std::optional<AttributeTuple> attributes;

  friend bool operator==(const ImageTextGroup&, const ImageTextGroup&) = default;
};

enum class Split { train, val, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Dataset {
  std::vector<ImageTextGroup> train;
  std::vector<ImageTextGroup> val;
  std::vector<ImageTextGroup> test;
  std::optional<CorpusSpec> generation;

  const std::vector<ImageTextGroup>& split(Split s) const;
  std::vector<std::string> captions(Split s) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Built-in attribute vocabulary: one synonym list per attribute value.
struct AttributeGrammar {
  std::vector<std::vector<std::string>> colors;
  std::vector<std::vector<std::string>> shapes;   // singular forms
  std::vector<std::vector<std::string>> counts;
  std::vector<std::vector<std::string>> backgrounds;
  std::vector<std::string> templates;             // {count} {color} {shape} {background}
};

const AttributeGrammar& attribute_grammar();

// Renders a caption for `tuple` using template `template_index` and the
// given synonym choices.
std::string realize_caption(const AttributeTuple& tuple, int template_index, int color_syn, int shape_syn,
                            int count_syn, int background_syn);

// Recovers the attribute tuple named by a caption, or nothing if any
// attribute is missing or ambiguous.
std::optional<AttributeTuple> parse_caption(std::string_view caption);

Tensor<float> render_image(const AttributeTuple& tuple, int image_size, Rng& rng);

Dataset generate_corpus(const CorpusSpec& spec);

// Corpus directory: images/<id>.ppm, captions.tsv, splits.tsv, spec.txt.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

void write_ppm(const Tensor<float>& image, const std::filesystem::path& path);
Tensor<float> read_ppm(const std::filesystem::path& path);

enum class AugmentMode { train, eval_flip, eval_noflip };

Tensor<float> flip_horizontal(const Tensor<float>& image);
// Shifts content by (dy, dx) pixels, replicating the border.
Tensor<float> translate_image(const Tensor<float>& image, int dy, int dx);

// Train mode flips with probability 0.5, then (if jitter > 0) shifts by up
// to `jitter` pixels along each axis.
Tensor<float> augment_image(const Tensor<float>& image, AugmentMode mode, Rng& rng, int jitter = 0);

}  // namespace dualpath

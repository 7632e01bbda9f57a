#include "dualpath/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dualpath/config.hpp"
#include "dualpath/text.hpp"

namespace dualpath {

namespace {

struct Rgb {
  unsigned char r, g, b;
};

constexpr Rgb kGlyphColors[] = {{220, 40, 40}, {40, 170, 60}, {40, 70, 220}, {230, 210, 40}, {150, 50, 190}, {245, 140, 30}};
constexpr Rgb kBackgrounds[] = {{128, 128, 128}, {24, 24, 24}, {232, 232, 232}};

std::string plural(const std::string& noun) {
  if (noun.ends_with("x") || noun.ends_with("s")) return noun + "es";
  return noun + "s";
}

std::string replace_all(std::string text, const std::string& key, const std::string& value) {
  for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size())) {
    text.replace(pos, key.size(), value);
  }
  return text;
}

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ParseError("unknown split '" + std::string(name) + "'");
}

const std::vector<ImageTextGroup>& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return train;
}

std::vector<std::string> Dataset::captions(Split s) const {
  std::vector<std::string> out;
  for (const auto& group : split(s)) out.insert(out.end(), group.captions.begin(), group.captions.end());
  return out;
}

const AttributeGrammar& attribute_grammar() {
  static const AttributeGrammar grammar{
      {{"red", "scarlet"}, {"green", "emerald"}, {"blue", "azure"},
       {"yellow", "golden"}, {"purple", "violet"}, {"orange", "amber"}},
      {{"circle", "disc"}, {"square", "box"}, {"triangle", "wedge"}, {"cross", "plus"}},
      {{"one", "single"}, {"two", "twin"}, {"three", "triple"}},
      {{"gray", "grey"}, {"black", "dark"}, {"white", "pale"}},
      {"a picture of {count} {color} {shape} on a {background} background",
       "{count} {color} {shape} over a {background} field",
       "there is a {background} backdrop with {count} {color} {shape}",
       "a {background} canvas showing {count} {color} {shape}",
       "{count} {color} {shape} drawn on a {background} surface",
       "an image with {count} {color} {shape} against a {background} scene"}};
  return grammar;
}

std::string realize_caption(const AttributeTuple& tuple, int template_index, int color_syn, int shape_syn,
                            int count_syn, int background_syn) {
  const AttributeGrammar& g = attribute_grammar();
  std::string shape = g.shapes.at(tuple.shape).at(shape_syn);
  if (tuple.count > 0) shape = plural(shape);
  std::string text = g.templates.at(template_index);
  text = replace_all(text, "{count}", g.counts.at(tuple.count).at(count_syn));
  text = replace_all(text, "{color}", g.colors.at(tuple.color).at(color_syn));
  text = replace_all(text, "{shape}", shape);
  text = replace_all(text, "{background}", g.backgrounds.at(tuple.background).at(background_syn));
  return text;
}

std::optional<AttributeTuple> parse_caption(std::string_view caption) {
  const AttributeGrammar& g = attribute_grammar();
  auto match = [](const std::vector<std::vector<std::string>>& table, const std::string& token, bool with_plural) {
    for (std::size_t v = 0; v < table.size(); ++v) {
      for (const std::string& syn : table[v]) {
        if (token == syn || (with_plural && token == plural(syn))) return static_cast<int>(v);
      }
    }
    return -1;
  };
  std::optional<int> color, shape, count, background;
  bool plural_shape = false;
  auto assign = [](std::optional<int>& slot, int value) {
    if (slot && *slot != value) return false;
    slot = value;
    return true;
  };
  for (const std::string& token : tokenize(caption)) {
    if (int v = match(g.colors, token, false); v >= 0 && !assign(color, v)) return std::nullopt;
    if (int v = match(g.counts, token, false); v >= 0 && !assign(count, v)) return std::nullopt;
    if (int v = match(g.backgrounds, token, false); v >= 0 && !assign(background, v)) return std::nullopt;
    if (int v = match(g.shapes, token, true); v >= 0) {
      if (!assign(shape, v)) return std::nullopt;
      plural_shape = match(g.shapes, token, false) < 0;
    }
  }
  if (!color || !shape || !count || !background) return std::nullopt;
  if (plural_shape != (*count > 0)) return std::nullopt;
  return AttributeTuple{*color, *shape, *count, *background};
}

Tensor<float> render_image(const AttributeTuple& tuple, int image_size, Rng& rng) {
  if (image_size < 12) throw ParameterError("render_image: image size must be at least 12");
  const int s = image_size;
  std::vector<unsigned char> pixels(static_cast<std::size_t>(3 * s * s));
  const Rgb bg = kBackgrounds[tuple.background];
  const Rgb fg = kGlyphColors[tuple.color];
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      pixels[static_cast<std::size_t>((0 * s + y) * s + x)] = bg.r;
      pixels[static_cast<std::size_t>((1 * s + y) * s + x)] = bg.g;
      pixels[static_cast<std::size_t>((2 * s + y) * s + x)] = bg.b;
    }

  // Glyphs occupy distinct cells of a 3x3 grid with a small jitter.
  std::vector<int> cells(9);
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  const double cell = s / 3.0;
  const double radius = cell * 0.42;
  std::uniform_real_distribution<double> jitter(-cell * 0.06, cell * 0.06);
  for (int k = 0; k <= tuple.count; ++k) {
    const double cx = (cells[static_cast<std::size_t>(k)] % 3 + 0.5) * cell + jitter(rng);
    const double cy = (cells[static_cast<std::size_t>(k)] / 3 + 0.5) * cell + jitter(rng);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        bool inside = false;
        switch (tuple.shape) {
          case 0: inside = dx * dx + dy * dy <= radius * radius; break;
          case 1: inside = std::abs(dx) <= radius * 0.8 && std::abs(dy) <= radius * 0.8; break;
          case 2: {
            // apex up, base at cy + radius
            const double t = (dy + radius) / (2.0 * radius);
            inside = t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * radius;
            break;
          }
          default: {
            const double arm = radius * 0.32;
            inside = (std::abs(dx) <= arm && std::abs(dy) <= radius) || (std::abs(dy) <= arm && std::abs(dx) <= radius);
            break;
          }
        }
        if (!inside) continue;
        pixels[static_cast<std::size_t>((0 * s + y) * s + x)] = fg.r;
        pixels[static_cast<std::size_t>((1 * s + y) * s + x)] = fg.g;
        pixels[static_cast<std::size_t>((2 * s + y) * s + x)] = fg.b;
      }
  }
  Tensor<float> image({3, s, s});
  for (std::size_t i = 0; i < pixels.size(); ++i) image[static_cast<Index>(i)] = static_cast<float>(pixels[i]) / 255.0f;
  return image;
}

Dataset generate_corpus(const CorpusSpec& spec) {
  const AttributeGrammar& g = attribute_grammar();
  if (spec.colors < 1 || spec.colors > static_cast<int>(g.colors.size()) || spec.shapes < 1 ||
      spec.shapes > static_cast<int>(g.shapes.size()) || spec.counts < 1 ||
      spec.counts > static_cast<int>(g.counts.size()) || spec.backgrounds < 1 ||
      spec.backgrounds > static_cast<int>(g.backgrounds.size())) {
    throw ParameterError("generate_corpus: attribute counts exceed the built-in grammar");
  }
  if (spec.train_groups < 1 || spec.val_groups < 0 || spec.test_groups < 0) {
    throw ParameterError("generate_corpus: split sizes must be nonnegative with at least one training group");
  }
  if (spec.captions_per_group < 1) throw ParameterError("generate_corpus: captions_per_group must be positive");
  if (spec.attribute_space() < spec.total_groups()) {
    throw CapacityError("generate_corpus: " + std::to_string(spec.total_groups()) + " groups requested but only " +
                        std::to_string(spec.attribute_space()) + " attribute tuples exist");
  }

  std::vector<AttributeTuple> tuples;
  for (int c = 0; c < spec.colors; ++c)
    for (int s = 0; s < spec.shapes; ++s)
      for (int n = 0; n < spec.counts; ++n)
        for (int b = 0; b < spec.backgrounds; ++b) tuples.push_back({c, s, n, b});
  Rng order_rng(derive_seed(spec.seed, 0));
  std::shuffle(tuples.begin(), tuples.end(), order_rng);

  Dataset dataset;
  dataset.generation = spec;
  const int templates = static_cast<int>(g.templates.size());
  for (int id = 0; id < spec.total_groups(); ++id) {
    const AttributeTuple& tuple = tuples[static_cast<std::size_t>(id)];
    Rng rng(derive_seed(spec.seed, 1, static_cast<std::uint64_t>(id)));
    ImageTextGroup group;
    group.group_id = id;
    group.attributes = tuple;
    group.image = render_image(tuple, spec.image_size, rng);

    std::vector<int> order(static_cast<std::size_t>(templates));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<int> syn(0, 1);
    std::set<std::string> seen;
    int attempts = 0;
    while (static_cast<int>(group.captions.size()) < spec.captions_per_group) {
      if (++attempts > 1000) {
        throw CapacityError("generate_corpus: cannot realize " + std::to_string(spec.captions_per_group) +
                            " distinct captions per group");
      }
      const int t = order[static_cast<std::size_t>(group.captions.size()) % order.size()];
      std::string caption = realize_caption(tuple, t, syn(rng), syn(rng), syn(rng), syn(rng));
      if (seen.insert(caption).second) group.captions.push_back(std::move(caption));
    }
    if (id < spec.train_groups) {
      dataset.train.push_back(std::move(group));
    } else if (id < spec.train_groups + spec.val_groups) {
      dataset.val.push_back(std::move(group));
    } else {
      dataset.test.push_back(std::move(group));
    }
  }
  return dataset;
}

void write_ppm(const Tensor<float>& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm: expected [3,H,W], got " + to_string(image.shape()));
  const Index h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) {
        const float v = std::clamp(image[(c * h + y) * w + x], 0.0f, 1.0f);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing image file " + path.string());
  auto next_token = [&] {
    std::string token;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!token.empty()) break;
        continue;
      }
      token.push_back(ch);
    }
    return token;
  };
  if (next_token() != "P6") throw FormatError(path.string() + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError(path.string() + ": only 8-bit PPM is supported");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(3 * w * h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path.string() + ": truncated pixel data");
  Tensor<float> image({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        image[(c * h + y) * w + x] = static_cast<float>(bytes[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0f;
  return image;
}

KeyValues CorpusSpec::to_key_values() const {
  const CorpusSpec& spec = *this;
  KeyValues kv;
  kv.set("colors", spec.colors);
  kv.set("shapes", spec.shapes);
  kv.set("counts", spec.counts);
  kv.set("backgrounds", spec.backgrounds);
  kv.set("train_groups", spec.train_groups);
  kv.set("val_groups", spec.val_groups);
  kv.set("test_groups", spec.test_groups);
  kv.set("captions_per_group", spec.captions_per_group);
  kv.set("image_size", spec.image_size);
  kv.set("seed", std::to_string(spec.seed));
  return kv;
}

CorpusSpec CorpusSpec::from_key_values(const KeyValues& kv) {
  static constexpr std::string_view known[] = {"colors",     "shapes",           "counts",
                                               "backgrounds", "train_groups",    "val_groups",
                                               "test_groups", "captions_per_group", "image_size",
                                               "seed"};
  kv.require_known(known);
  CorpusSpec spec;
  spec.colors = kv.get_int("colors", spec.colors);
  spec.shapes = kv.get_int("shapes", spec.shapes);
  spec.counts = kv.get_int("counts", spec.counts);
  spec.backgrounds = kv.get_int("backgrounds", spec.backgrounds);
  spec.train_groups = kv.get_int("train_groups", spec.train_groups);
  spec.val_groups = kv.get_int("val_groups", spec.val_groups);
  spec.test_groups = kv.get_int("test_groups", spec.test_groups);
  spec.captions_per_group = kv.get_int("captions_per_group", spec.captions_per_group);
  spec.image_size = kv.get_int("image_size", spec.image_size);
  spec.seed = kv.get_uint64("seed", spec.seed);
  return spec;
}

namespace {

bool has_tab_or_newline(const std::string& s) { return s.find_first_of("\t\n\r") != std::string::npos; }

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  std::ofstream captions(root / "captions.tsv");
  std::ofstream splits(root / "splits.tsv");
  if (!captions || !splits) throw DataError("cannot write corpus under " + root.string());
  for (Split s : {Split::train, Split::val, Split::test}) {
    for (const ImageTextGroup& group : dataset.split(s)) {
      splits << group.group_id << '\t' << split_name(s) << '\n';
      write_ppm(group.image, root / "images" / (std::to_string(group.group_id) + ".ppm"));
      for (const std::string& caption : group.captions) {
        if (has_tab_or_newline(caption)) throw DataError("caption of group " + std::to_string(group.group_id) + " contains a tab or newline");
        captions << group.group_id << '\t' << caption << '\n';
      }
    }
  }
  if (dataset.generation) dataset.generation->to_key_values().write(root / "spec.txt");
}

Dataset load_dataset(const std::filesystem::path& root) {
  auto parse_id = [](const std::string& text, const std::string& where) {
    try {
      std::size_t used = 0;
      const int id = std::stoi(text, &used);
      if (used != text.size() || id < 0) throw std::invalid_argument("id");
      return id;
    } catch (const std::exception&) {
      throw ParseError(where + ": malformed group id '" + text + "'");
    }
  };

  const auto splits_path = root / "splits.tsv";
  std::ifstream splits(splits_path);
  if (!splits) throw DataError("missing manifest " + splits_path.string());
  std::map<int, Split> membership;
  std::vector<int> order;
  std::string line;
  int line_no = 0;
  while (std::getline(splits, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = splits_path.string() + ":" + std::to_string(line_no);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(where + ": expected group_id<TAB>split");
    const int id = parse_id(line.substr(0, tab), where);
    Split split;
    try {
      split = parse_split(line.substr(tab + 1));
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (!membership.emplace(id, split).second) throw ParseError(where + ": group " + std::to_string(id) + " listed twice");
    order.push_back(id);
  }
  if (membership.empty()) throw DataError("manifest " + splits_path.string() + " lists no groups");

  const auto captions_path = root / "captions.tsv";
  std::ifstream captions(captions_path);
  if (!captions) throw DataError("missing captions file " + captions_path.string());
  std::map<int, std::vector<std::string>> texts;
  line_no = 0;
  while (std::getline(captions, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = captions_path.string() + ":" + std::to_string(line_no);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(where + ": expected group_id<TAB>caption");
    const int id = parse_id(line.substr(0, tab), where);
    if (!membership.contains(id)) throw DataError(where + ": caption for group " + std::to_string(id) + " absent from splits");
    texts[id].push_back(line.substr(tab + 1));
  }
  if (texts.empty()) throw DataError("captions file " + captions_path.string() + " is empty");

  Dataset dataset;
  if (std::filesystem::exists(root / "spec.txt")) dataset.generation = CorpusSpec::from_key_values(KeyValues::read(root / "spec.txt"));
  std::sort(order.begin(), order.end());
  for (int id : order) {
    ImageTextGroup group;
    group.group_id = id;
    const auto it = texts.find(id);
    if (it == texts.end()) throw DataError("group " + std::to_string(id) + " has no captions");
    group.captions = it->second;
    const auto image_path = root / "images" / (std::to_string(id) + ".ppm");
    if (!std::filesystem::exists(image_path)) {
      throw DataError("group " + std::to_string(id) + ": missing image file " + image_path.string());
    }
    group.image = read_ppm(image_path);
    if (dataset.generation) group.attributes = parse_caption(group.captions.front());
    switch (membership[id]) {
      case Split::train: dataset.train.push_back(std::move(group)); break;
      case Split::val: dataset.val.push_back(std::move(group)); break;
      case Split::test: dataset.test.push_back(std::move(group)); break;
    }
  }
  return dataset;
}

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  if (image.rank() != 3) throw DimensionError("flip: expected [C,H,W], got " + to_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out(image.shape());
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor<float> translate_image(const Tensor<float>& image, int dy, int dx) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out({c, h, w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index sy = std::clamp<Index>(y - dy, 0, h - 1), sx = std::clamp<Index>(x - dx, 0, w - 1);
        out[(ch * h + y) * w + x] = image[(ch * h + sy) * w + sx];
      }
  return out;
}

Tensor<float> augment_image(const Tensor<float>& image, AugmentMode mode, Rng& rng, int jitter) {
  switch (mode) {
    case AugmentMode::eval_noflip: return image;
    case AugmentMode::eval_flip: return flip_horizontal(image);
    case AugmentMode::train: {
      std::bernoulli_distribution coin(0.5);
      Tensor<float> out = coin(rng) ? flip_horizontal(image) : image;
      if (jitter > 0) {
        std::uniform_int_distribution<int> shift(-jitter, jitter);
        const int dy = shift(rng), dx = shift(rng);
        out = translate_image(out, dy, dx);
      }
      return out;
    }
  }
  return image;
}

}  // namespace dualpath

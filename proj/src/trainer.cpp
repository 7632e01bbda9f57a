#include "dualpath/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dualpath/errors.hpp"

namespace dualpath {

namespace {

constexpr std::string_view kTrainKeys[] = {"stage",     "lr",         "momentum", "batch_size", "epochs",
                                           "lambda1",   "lambda2",    "lambda3",  "margin",     "shift_mode",
                                           "strategy",  "embedding",  "seed",     "checkpoint_every", "patience",
                                           "crop_jitter"};

// Seed streams.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kEpochStream = 100;

std::string_view embedding_name(EmbeddingSource s) { return s == EmbeddingSource::random ? "random" : "table"; }

EmbeddingSource parse_embedding(std::string_view name) {
  if (name == "random") return EmbeddingSource::random;
  if (name == "table") return EmbeddingSource::table;
  throw ConfigError("unknown embedding source '" + std::string(name) + "' (expected random or table)");
}

}  // namespace

std::string_view alignment_name(Alignment a) { return a == Alignment::left ? "left" : "shift"; }

Alignment parse_alignment(std::string_view name) {
  if (name == "left") return Alignment::left;
  if (name == "shift") return Alignment::shift;
  throw ConfigError("unknown shift mode '" + std::string(name) + "' (expected left or shift)");
}

TrainConfig TrainConfig::for_stage(int stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == 2) {
    c.epochs = 100;
    c.weights = LossWeights::stage2();
  }
  return c;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  std::vector<std::string_view> known = keys();
  kv.require_known(known);
  const int stage = kv.get_int("stage", 1);
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2, got " + std::to_string(stage));
  TrainConfig c = for_stage(stage);
  c.lr = kv.get_double("lr", c.lr);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.epochs = kv.get_int("epochs", c.epochs);
  c.weights.lambda1 = kv.get_double("lambda1", c.weights.lambda1);
  c.weights.lambda2 = kv.get_double("lambda2", c.weights.lambda2);
  c.weights.lambda3 = kv.get_double("lambda3", c.weights.lambda3);
  c.margin = kv.get_double("margin", c.margin);
  c.shift_mode = parse_alignment(kv.get_string("shift_mode", "shift"));
  c.strategy = parse_strategy(kv.get_string("strategy", "random"));
  c.embedding = parse_embedding(kv.get_string("embedding", "random"));
  c.seed = kv.get_uint64("seed", c.seed);
  c.checkpoint_every = kv.get_int("checkpoint_every", c.checkpoint_every);
  c.patience = kv.get_int("patience", c.patience);
  c.crop_jitter = kv.get_int("crop_jitter", c.crop_jitter);
  c.model = ModelConfig::from_key_values(kv);
  return c;
}

std::vector<std::string_view> TrainConfig::keys() {
  std::vector<std::string_view> out(std::begin(kTrainKeys), std::end(kTrainKeys));
  for (std::string_view k : ModelConfig::keys()) out.push_back(k);
  return out;
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv.set("stage", stage);
  kv.set("lr", lr);
  kv.set("momentum", momentum);
  kv.set("batch_size", batch_size);
  kv.set("epochs", epochs);
  kv.set("lambda1", weights.lambda1);
  kv.set("lambda2", weights.lambda2);
  kv.set("lambda3", weights.lambda3);
  kv.set("margin", margin);
  kv.set("shift_mode", std::string(alignment_name(shift_mode)));
  kv.set("strategy", std::string(strategy_name(strategy)));
  kv.set("embedding", std::string(embedding_name(embedding)));
  kv.set("seed", std::to_string(seed));
  kv.set("checkpoint_every", checkpoint_every);
  kv.set("patience", patience);
  kv.set("crop_jitter", crop_jitter);
  const KeyValues model_kv = model.to_key_values();
  for (const auto& [k, v] : model_kv.entries()) kv.set(k, v);
  return kv;
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2, got " + std::to_string(stage));
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (!(margin >= 0.0)) throw ConfigError("margin must be nonnegative");
  if (checkpoint_every < 0 || patience < 0) throw ConfigError("checkpoint_every and patience must be nonnegative");
  if (crop_jitter < 0 || 2 * crop_jitter >= model.image_size) throw ConfigError("crop_jitter must lie in [0, image_size/2)");
  try {
    weights.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (weights.lambda1 == 0.0 && weights.lambda2 == 0.0 && weights.lambda3 == 0.0) {
    throw ConfigError("at least one loss weight must be positive");
  }
}

void TrainLog::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write train log " + path.string());
  out << "epoch\terr_img\terr_text\trank_loss\ttotal_loss\tseconds\n";
  char buf[256];
  for (const EpochRecord& r : records) {
    std::snprintf(buf, sizeof buf, "%d\t%.17g\t%.17g\t%.17g\t%.17g\t%.3f\n", r.epoch, r.err_img, r.err_text, r.rank_loss,
                  r.total_loss, r.seconds);
    out << buf;
  }
}

TrainLog TrainLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read train log " + path.string());
  TrainLog log;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::istringstream row(line);
    EpochRecord r;
    if (!(row >> r.epoch >> r.err_img >> r.err_text >> r.rank_loss >> r.total_loss >> r.seconds)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed train log row");
    }
    log.records.push_back(r);
  }
  return log;
}

std::vector<Batch> epoch_iterate(const std::vector<ImageTextGroup>& groups, const Vocabulary& vocab, int batch_size,
                                 int text_length, Alignment alignment, Rng& rng, int jitter) {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  std::vector<std::pair<int, int>> refs;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t c = 0; c < groups[g].captions.size(); ++c) refs.emplace_back(int(g), int(c));
  }
  std::shuffle(refs.begin(), refs.end(), rng);

  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t begin = 0; begin < refs.size(); begin += batch_size) {
    spans.emplace_back(begin, std::min(refs.size(), begin + batch_size));
  }
  if (spans.size() > 1 && spans.back().second - spans.back().first == 1) {
    spans.pop_back();
    spans.back().second = refs.size();
  }

  std::vector<Batch> batches;
  for (auto [begin, end] : spans) {
    Batch b;
    std::vector<Tensor<float>> images;
    for (std::size_t k = begin; k < end; ++k) {
      const auto [g, c] = refs[k];
      const ImageTextGroup& group = groups[g];
      images.push_back(augment_image(group.image, AugmentMode::train, rng, jitter));
      b.codes.push_back(encode_sentence(group.captions[c], vocab, text_length, alignment, rng).indices);
      b.classes.push_back(g);
      b.refs.emplace_back(g, c);
    }
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    b.images = stack_images<float>(ptrs);
    batches.push_back(std::move(b));
  }
  return batches;
}

namespace {

constexpr std::size_t kEvalChunk = 64;

std::vector<int> row_argmax(const Tensor<float>& logits) {
  const auto m = logits.matrix(logits.dim(0));
  std::vector<int> out(m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    Index best;
    m.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

ClassificationError classification_error(Model& model, const std::vector<ImageTextGroup>& groups,
                                         const Vocabulary& vocab) {
  if (groups.empty()) throw DataError("classification_error: empty split");
  Rng rng(0);  // unused in eval mode
  ClassificationError err;
  std::size_t wrong = 0;
  for (std::size_t begin = 0; begin < groups.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(groups.size(), begin + kEvalChunk);
    std::vector<const Tensor<float>*> ptrs;
    for (std::size_t g = begin; g < end; ++g) ptrs.push_back(&groups[g].image);
    const auto pred = row_argmax(classify(model.image_forward(stack_images<float>(ptrs), Mode::eval, rng),
                                          model.classifier()).value());
    for (std::size_t k = 0; k < pred.size(); ++k) wrong += pred[k] != static_cast<int>(begin + k);
  }
  err.image = double(wrong) / double(groups.size());

  std::vector<std::vector<int>> codes;
  std::vector<int> labels;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& caption : groups[g].captions) {
      codes.push_back(encode_sentence(caption, vocab, model.config().text_length, Alignment::left, rng).indices);
      labels.push_back(static_cast<int>(g));
    }
  }
  wrong = 0;
  for (std::size_t begin = 0; begin < codes.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(codes.size(), begin + kEvalChunk);
    std::vector<std::vector<int>> chunk(codes.begin() + begin, codes.begin() + end);
    const auto pred = row_argmax(classify(model.text_forward(chunk, Mode::eval, rng), model.classifier()).value());
    for (std::size_t k = 0; k < pred.size(); ++k) wrong += pred[k] != labels[begin + k];
  }
  err.text = double(wrong) / double(codes.size());
  return err;
}

ModelConfig model_config_for(const TrainConfig& config, const Dataset& data, const Vocabulary& vocab) {
  ModelConfig m = config.model;
  const int classes = static_cast<int>(data.train.size());
  if (m.num_classes != 0 && m.num_classes != classes) {
    throw ConfigError("num_classes " + std::to_string(m.num_classes) + " disagrees with " + std::to_string(classes) +
                      " training groups");
  }
  if (m.vocab_size != 0 && m.vocab_size != vocab.size()) {
    throw ConfigError("vocab_size " + std::to_string(m.vocab_size) + " disagrees with vocabulary of " +
                      std::to_string(vocab.size()) + " words");
  }
  m.num_classes = classes;
  m.vocab_size = vocab.size();
  if (!data.train.empty()) {
    const Index s = data.train.front().image.dim(1);
    if (s != m.image_size) {
      throw ConfigError("image_size " + std::to_string(m.image_size) + " disagrees with corpus images of size " +
                        std::to_string(s));
    }
  }
  m.validate();
  return m;
}

Model init_model(const TrainConfig& config, const Dataset& data, const Vocabulary& vocab) {
  return Model(model_config_for(config, data, vocab), vocab, config.embedding, derive_seed(config.seed, kInitStream));
}

namespace {

// Freezes whatever the configured objective cannot reach.
void configure_trainable(Model& model, const TrainConfig& config) {
  for (Parameter<float>* p : model.parameters()) p->set_frozen(false);
  const LossWeights& w = config.weights;
  const bool image_path = w.lambda1 > 0 || w.lambda2 > 0;
  const bool text_path = w.lambda1 > 0 || w.lambda3 > 0;
  auto freeze = [](std::vector<Parameter<float>*> params) {
    for (Parameter<float>* p : params) p->set_frozen(true);
  };
  if (config.stage == 1 || !image_path) model.set_image_backbone_frozen(true);
  if (!image_path) {
    auto& h = model.image_head();
    freeze({&h.fc1_weight, &h.fc1_bias, &h.bn.gamma, &h.bn.beta, &h.fc2_weight, &h.fc2_bias});
  }
  if (!text_path) {
    std::vector<Parameter<float>*> text{&model.word_embedding()};
    for (auto& block : model.text_blocks()) {
      for (ConvBn<float>* layer : {&block.first, &block.second}) {
        text.insert(text.end(), {&layer->kernel, &layer->bn.gamma, &layer->bn.beta});
      }
      if (block.projection) {
        text.insert(text.end(), {&block.projection->kernel, &block.projection->bn.gamma, &block.projection->bn.beta});
      }
    }
    auto& h = model.text_head();
    text.insert(text.end(), {&h.fc1_weight, &h.fc1_bias, &h.bn.gamma, &h.bn.beta, &h.fc2_weight, &h.fc2_bias});
    freeze(text);
  }
  if (w.lambda2 == 0 && w.lambda3 == 0) model.classifier().set_frozen(true);
}

bool patience_exhausted(const TrainLog& log, int patience) {
  if (patience <= 0 || log.records.empty()) return false;
  double best = 2.0;
  int best_epoch = 0;
  for (const EpochRecord& r : log.records) {
    const double e = 0.5 * (r.err_img + r.err_text);
    if (e < best) {
      best = e;
      best_epoch = r.epoch;
    }
  }
  return log.records.back().epoch - best_epoch >= patience;
}

}  // namespace

void train(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
           const EpochCallback& on_epoch) {
  config.validate();
  const auto& groups = data.train;
  std::size_t captions = 0;
  for (const auto& g : groups) captions += g.captions.size();
  if (captions < static_cast<std::size_t>(config.batch_size)) {
    throw ConfigError("training split has " + std::to_string(captions) + " captions, fewer than batch_size " +
                      std::to_string(config.batch_size));
  }
  const ModelConfig expected = model_config_for(config, data, vocab);
  if (!(state.model.config() == expected)) {
    throw ConfigError("config mismatch: model was built for a different configuration");
  }

  Model& model = state.model;
  configure_trainable(model, config);
  std::vector<Parameter<float>*> params = model.parameters();
  const LossWeights& w = config.weights;
  state.stopped_early = patience_exhausted(state.log, config.patience);

  while (state.epochs_done < config.epochs && !state.stopped_early) {
    const int epoch = state.epochs_done + 1;
    const auto start = std::chrono::steady_clock::now();
    Rng rng(derive_seed(config.seed, kEpochStream + static_cast<std::uint64_t>(config.stage), epoch));
    const std::vector<Batch> batches =
        epoch_iterate(groups, vocab, config.batch_size, model.config().text_length, config.shift_mode, rng,
                      config.crop_jitter);

    double rank_sum = 0;
    double total_sum = 0;
    for (const Batch& batch : batches) {
      const Var<float> fi = model.image_forward(batch.images, Mode::train, rng);
      const Var<float> ft = model.text_forward(batch.codes, Mode::train, rng);
      const std::span<const int> classes(batch.classes);
      Var<float> visual, textual, rank;
      if (w.lambda2 > 0) visual = softmax_cross_entropy(classify(fi, model.classifier()), classes);
      if (w.lambda3 > 0) textual = softmax_cross_entropy(classify(ft, model.classifier()), classes);
      if (w.lambda1 > 0) {
        rank = ranking_loss(make_quad_batch(fi, ft, classes, config.strategy, rng), config.margin);
        rank_sum += rank.value()[0];
      }
      const Var<float> total = combined_loss(rank, visual, textual, w);
      total_sum += total.value()[0];
      backward(total);
      sgd_momentum_step(params, config.lr, config.momentum);
      zero_grad(params);
    }

    const ClassificationError err = classification_error(model, groups, vocab);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double n = static_cast<double>(batches.size());
    state.log.records.push_back({epoch, err.image, err.text, rank_sum / n, total_sum / n, seconds});
    state.epochs_done = epoch;
    state.stopped_early = patience_exhausted(state.log, config.patience);
    if (on_epoch) on_epoch(state);
  }
}

void train_stage1(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  if (config.stage != 1) throw ConfigError("train_stage1 given a stage " + std::to_string(config.stage) + " config");
  train(state, data, vocab, config, on_epoch);
}

void train_stage2(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  if (config.stage != 2) throw ConfigError("train_stage2 given a stage " + std::to_string(config.stage) + " config");
  train(state, data, vocab, config, on_epoch);
}

CheckpointMeta make_meta(const TrainConfig& config, int epochs_done) {
  return CheckpointMeta{config.stage, epochs_done, config.to_key_values()};
}

void check_checkpoint(const Checkpoint<float>& ckpt, const TrainConfig& config, const ModelConfig& model_config) {
  if (ckpt.model.config().hash() != model_config.hash()) {
    throw ConfigError("config mismatch: checkpoint model config hash " + std::to_string(ckpt.model.config().hash()) +
                      " differs from configured " + std::to_string(model_config.hash()));
  }
  if (ckpt.meta.stage == config.stage) {
    // Resuming: everything but the epoch budget and cadence must agree.
    KeyValues mine = config.to_key_values();
    KeyValues theirs = ckpt.meta.train_config;
    for (KeyValues* kv : {&mine, &theirs}) {
      kv->set("epochs", "0");
      kv->set("checkpoint_every", "0");
      kv->set("patience", "0");
    }
    if (!(mine.to_string() == theirs.to_string())) {
      throw ConfigError("config mismatch: checkpoint was written by a different stage " +
                        std::to_string(config.stage) + " configuration");
    }
    if (ckpt.meta.epochs_done > config.epochs) {
      throw ConfigError("checkpoint already has " + std::to_string(ckpt.meta.epochs_done) + " epochs, more than " +
                        std::to_string(config.epochs));
    }
    return;
  }
  if (!(config.stage == 2 && ckpt.meta.stage == 1)) {
    throw ConfigError("stage mismatch: stage " + std::to_string(config.stage) + " cannot start from a stage " +
                      std::to_string(ckpt.meta.stage) + " checkpoint");
  }
}

}  // namespace dualpath

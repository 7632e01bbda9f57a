#include <doctest.h>

#include <filesystem>
#include <set>

#include "dualpath/trainer.hpp"

using namespace dualpath;

namespace {

struct Fixture {
  Dataset data;
  Vocabulary vocab;
  TrainConfig config;

  Fixture() {
    CorpusSpec spec;
    spec.colors = 4;
    spec.shapes = 3;
    spec.counts = 3;
    spec.backgrounds = 2;
    spec.train_groups = 8;
    spec.val_groups = 4;
    spec.test_groups = 4;
    spec.image_size = 16;
    spec.seed = 5;
    data = generate_corpus(spec);
    const auto captions = data.captions(Split::train);
    vocab = build_vocabulary(captions);
    config = TrainConfig::for_stage(1);
    config.epochs = 3;
    config.batch_size = 8;
    config.lr = 0.01;
    config.model.embed_dim = 16;
    config.model.dropout = 0.2;
    config.model.word_embed_dim = 4;
    config.model.image_channels = {4, 8};
    config.model.text_channels = {4, 8};
    config.model.text_length = 16;
    config.model.image_size = 16;
  }

  TrainConfig stage(int s, int epochs) const {
    TrainConfig c = config;
    c.stage = s;
    c.weights = s == 1 ? LossWeights::stage1() : LossWeights::stage2();
    c.epochs = epochs;
    return c;
  }
};

std::string snapshot(Model& model, const TrainConfig& config, int epochs) {
  return serialize_checkpoint(model, make_meta(config, epochs));
}

}  // namespace

TEST_CASE("epoch iteration partitions the captions") {
  Fixture f;
  Rng rng(1);
  const auto batches = epoch_iterate(f.data.train, f.vocab, 13, 16, Alignment::shift, rng);
  // 40 captions in batches of 13: the trailing single caption joins the last batch.
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].classes.size() == 13);
  CHECK(batches[2].classes.size() == 14);
  std::set<std::pair<int, int>> seen;
  for (const auto& b : batches) {
    CHECK(b.images.dim(0) == static_cast<Index>(b.classes.size()));
    CHECK(b.codes.size() == b.classes.size());
    for (std::size_t i = 0; i < b.refs.size(); ++i) {
      CHECK(seen.insert(b.refs[i]).second);
      CHECK(b.classes[i] == b.refs[i].first);
    }
  }
  CHECK(seen.size() == 40);

  Rng again(1);
  const auto replay = epoch_iterate(f.data.train, f.vocab, 13, 16, Alignment::shift, again);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    CHECK(replay[i].refs == batches[i].refs);
    CHECK(replay[i].codes == batches[i].codes);
    CHECK(replay[i].images == batches[i].images);
  }
}

TEST_CASE("train config key-value round trip and validation") {
  Fixture f;
  TrainConfig c = f.stage(2, 7);
  c.strategy = NegativeStrategy::hardest;
  c.shift_mode = Alignment::left;
  CHECK(TrainConfig::from_key_values(c.to_key_values()) == c);

  KeyValues kv;
  kv.set("stage", 2);
  CHECK(TrainConfig::from_key_values(kv).weights == LossWeights::stage2());
  kv.set("bogus", 1);
  CHECK_THROWS_AS(TrainConfig::from_key_values(kv), ConfigError);

  TrainConfig bad = c;
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.weights = {0, 0, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.lr = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train log file round trip") {
  TrainLog log;
  log.records.push_back({1, 0.5, 0.25, 0.0, 3.125, 0.7});
  log.records.push_back({2, 1.0 / 3.0, 0.1, 0.2, 2.5, 0.6});
  const auto path = std::filesystem::temp_directory_path() / "dualpath_test_log.tsv";
  log.write(path);
  CHECK(TrainLog::read(path) == log);
  std::filesystem::remove(path);
}

TEST_CASE("stage 1 leaves the image backbone untouched") {
  Fixture f;
  const TrainConfig c = f.stage(1, 2);
  TrainState state{init_model(c, f.data, f.vocab), {}};
  Model before = state.model;
  train_stage1(state, f.data, f.vocab, c);
  CHECK(state.epochs_done == 2);
  CHECK(state.log.records.size() == 2);
  auto b = before.parameters(), a = state.model.parameters();
  bool trained = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    INFO(a[i]->name);
    const bool backbone = a[i]->name.rfind("image.stem", 0) == 0 || a[i]->name.rfind("image.stage", 0) == 0;
    if (backbone) CHECK(a[i]->value.value() == b[i]->value.value());
    trained = trained || !(a[i]->value.value() == b[i]->value.value());
  }
  CHECK(trained);
  for (const auto& r : state.log.records) {
    CHECK(r.rank_loss == 0.0);
    CHECK(r.err_img >= 0.0);
    CHECK(r.err_img <= 1.0);
  }
}

TEST_CASE("stage 2 trains the backbone; rank-only leaves the classifier alone") {
  Fixture f;
  const TrainConfig c = f.stage(2, 1);
  TrainState state{init_model(c, f.data, f.vocab), {}};
  Model before = state.model;
  train_stage2(state, f.data, f.vocab, c);
  CHECK_FALSE(state.model.parameters().front()->value.value() == before.parameters().front()->value.value());
  CHECK(state.log.records.back().rank_loss > 0.0);

  TrainConfig rank_only = c;
  rank_only.weights = {1, 0, 0};
  TrainState r{before, {}};
  train_stage2(r, f.data, f.vocab, rank_only);
  CHECK(r.model.classifier().value.value() == before.classifier().value.value());
}

TEST_CASE("stage entry points check the configured stage") {
  Fixture f;
  TrainState state{init_model(f.config, f.data, f.vocab), {}};
  CHECK_THROWS_AS(train_stage2(state, f.data, f.vocab, f.stage(1, 1)), ConfigError);
  CHECK_THROWS_AS(train_stage1(state, f.data, f.vocab, f.stage(2, 1)), ConfigError);
}

TEST_CASE("training is deterministic and resume equals an uninterrupted run") {
  Fixture f;
  for (int s : {1, 2}) {
    CAPTURE(s);
    const TrainConfig c = f.stage(s, 4);
    TrainState full{init_model(c, f.data, f.vocab), {}};
    train(full, f.data, f.vocab, c);

    TrainState repeat{init_model(c, f.data, f.vocab), {}};
    train(repeat, f.data, f.vocab, c);
    CHECK(snapshot(repeat.model, c, 4) == snapshot(full.model, c, 4));
    CHECK(repeat.log == full.log);

    TrainConfig half = c;
    half.epochs = 2;
    TrainState first{init_model(c, f.data, f.vocab), {}};
    train(first, f.data, f.vocab, half);
    Checkpoint<float> ckpt = deserialize_checkpoint<float>(snapshot(first.model, half, 2));
    CHECK_NOTHROW(check_checkpoint(ckpt, c, model_config_for(c, f.data, f.vocab)));
    TrainState resumed{std::move(ckpt.model), first.log, ckpt.meta.epochs_done, {}};
    train(resumed, f.data, f.vocab, c);
    CHECK(snapshot(resumed.model, c, 4) == snapshot(full.model, c, 4));
    CHECK(resumed.log == full.log);
  }
}

TEST_CASE("checkpoint compatibility checks") {
  Fixture f;
  const TrainConfig s1 = f.stage(1, 1), s2 = f.stage(2, 1);
  const ModelConfig mc = model_config_for(s1, f.data, f.vocab);
  TrainState state{init_model(s1, f.data, f.vocab), {}};
  Checkpoint<float> ckpt{state.model, make_meta(s1, 1)};
  CHECK_NOTHROW(check_checkpoint(ckpt, s2, mc));

  TrainConfig other_lr = s1;
  other_lr.lr = 0.5;
  CHECK_THROWS_WITH_AS(check_checkpoint(ckpt, other_lr, mc), doctest::Contains("config mismatch"), ConfigError);

  TrainConfig wider = s2;
  wider.model.embed_dim = 32;
  CHECK_THROWS_WITH_AS(check_checkpoint(ckpt, wider, model_config_for(wider, f.data, f.vocab)),
                       doctest::Contains("config mismatch"), ConfigError);

  Checkpoint<float> from_stage2{state.model, make_meta(s2, 1)};
  CHECK_THROWS_AS(check_checkpoint(from_stage2, s1, mc), ConfigError);
}

TEST_CASE("model config must agree with the data") {
  Fixture f;
  TrainConfig c = f.config;
  c.model.image_size = 32;
  CHECK_THROWS_AS(model_config_for(c, f.data, f.vocab), ConfigError);
  c = f.config;
  c.model.num_classes = 3;
  CHECK_THROWS_AS(model_config_for(c, f.data, f.vocab), ConfigError);
  c = f.config;
  c.batch_size = 64;
  TrainState state{init_model(f.config, f.data, f.vocab), {}};
  CHECK_THROWS_AS(train(state, f.data, f.vocab, c), ConfigError);
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dualpath/checkpoint.hpp"
#include "dualpath/dataset.hpp"
#include "dualpath/objectives.hpp"

namespace dualpath {

using Model = DualPathModel<float>;

// Flat config: every field is a key of the same name; model fields are
// stored alongside (num_classes and vocab_size are filled from the data).
struct TrainConfig {
  int stage = 1;
  double lr = 0.001;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 300;  // 100 for stage 2
  LossWeights weights = LossWeights::stage1();
  double margin = 1.0;
  Alignment shift_mode = Alignment::shift;
  NegativeStrategy strategy = NegativeStrategy::random;
  EmbeddingSource embedding = EmbeddingSource::random;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // epochs between checkpoints, 0 = final only
  int patience = 0;          // stop after this many epochs without train-error gain, 0 = off
  int crop_jitter = 0;       // max training-image shift in pixels, 0 = flip only
  ModelConfig model;

  // Defaults for `stage`, including its loss-weight preset and epoch count.
  static TrainConfig for_stage(int stage);
  // Missing keys take the defaults of the stage named by the "stage" key.
  static TrainConfig from_key_values(const KeyValues& kv);
  static std::vector<std::string_view> keys();
  KeyValues to_key_values() const;
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string_view alignment_name(Alignment a);
Alignment parse_alignment(std::string_view name);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double err_img = 0;
  double err_text = 0;
  double rank_loss = 0;
  double total_loss = 0;
  double seconds = 0;

  // Equality ignores wall time.
  friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
    return a.epoch == b.epoch && a.err_img == b.err_img && a.err_text == b.err_text && a.rank_loss == b.rank_loss &&
           a.total_loss == b.total_loss;
  }
};

struct TrainLog {
  std::vector<EpochRecord> records;

  void write(const std::filesystem::path& path) const;
  static TrainLog read(const std::filesystem::path& path);
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct Batch {
  Tensor<float> images;                  // [B,3,S,S], augmented
  std::vector<std::vector<int>> codes;   // [B][L]
  std::vector<int> classes;              // index of the group within its split
  std::vector<std::pair<int, int>> refs; // (group index, caption index)
};

// One pass over every caption of `groups` in shuffled order. A trailing batch
// of a single element is merged into the previous one (batch statistics need
// two samples).
std::vector<Batch> epoch_iterate(const std::vector<ImageTextGroup>& groups, const Vocabulary& vocab, int batch_size,
                                 int text_length, Alignment alignment, Rng& rng, int jitter = 0);

// Instance classification error on a split in eval mode: images unflipped,
// captions left-aligned; class = group index.
struct ClassificationError {
  double image = 0;
  double text = 0;
};
ClassificationError classification_error(Model& model, const std::vector<ImageTextGroup>& groups,
                                         const Vocabulary& vocab);

// Model config for a dataset: num_classes and vocab_size from the data.
ModelConfig model_config_for(const TrainConfig& config, const Dataset& data, const Vocabulary& vocab);

// Fresh model for a run; initialization depends only on the seed and config.
Model init_model(const TrainConfig& config, const Dataset& data, const Vocabulary& vocab);

struct TrainState {
  Model model;
  TrainLog log;
  int epochs_done = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const TrainState&)>;

// Runs epochs epochs_done+1 .. config.epochs of the configured stage.
// Stage 1 freezes the image backbone; stage 2 trains everything. Every
// epoch draws its randomness from a seed derived from (seed, stage, epoch),
// so resuming from a checkpoint reproduces an uninterrupted run.
void train(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
           const EpochCallback& on_epoch = {});

void train_stage1(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});
void train_stage2(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

CheckpointMeta make_meta(const TrainConfig& config, int epochs_done);

// Checks that a checkpoint may seed a run of `config`: same model config and,
// for a resumed stage, the same training settings. Throws ConfigError
// ("config mismatch ...") otherwise.
void check_checkpoint(const Checkpoint<float>& ckpt, const TrainConfig& config, const ModelConfig& model_config);

}  // namespace dualpath

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dualpath/config.hpp"
#include "dualpath/model.hpp"

namespace dualpath {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Training progress stored next to the weights.
struct CheckpointMeta {
  int stage = 0;        // stage that produced the weights; 0 = fresh init
  int epochs_done = 0;  // completed epochs of that stage
  KeyValues train_config;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

template <typename Scalar>
struct Checkpoint {
  DualPathModel<Scalar> model;
  CheckpointMeta meta;
};

// Layout: magic "DUALPATH", u32 version, u8 scalar width, u64 config hash,
// config text, meta text, named records (parameters, momentum buffers, BN
// running statistics), trailing FNV-1a checksum. Little-endian throughout.
template <typename Scalar>
std::string serialize_checkpoint(DualPathModel<Scalar>& model, const CheckpointMeta& meta);

template <typename Scalar>
Checkpoint<Scalar> deserialize_checkpoint(const std::string& bytes, const std::string& source = "<checkpoint>");

template <typename Scalar>
void save_checkpoint(DualPathModel<Scalar>& model, const CheckpointMeta& meta, const std::filesystem::path& path);

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace dualpath

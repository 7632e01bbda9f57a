#include "dualpath/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "dualpath/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace dualpath {

namespace {

constexpr char kMagic[8] = {'D', 'U', 'A', 'L', 'P', 'A', 'T', 'H'};

class Writer {
 public:
  template <typename T>
  void pod(T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void text(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void raw(const void* data, std::size_t n) { out_.append(static_cast<const char*>(data), n); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, std::string source)
      : bytes_(bytes), end_(end), source_(std::move(source)) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string text() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* data, std::size_t n) {
    need(n);
    std::memcpy(data, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) {
    if (n > end_ - pos_) throw FormatError(source_ + ": truncated checkpoint");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
  std::size_t end_;
  std::string source_;
};

template <typename Scalar>
void write_record(Writer& w, const std::string& name, const Shape& shape, const Scalar* data, Index size) {
  w.text(name);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) w.pod<std::int64_t>(d);
  w.raw(data, sizeof(Scalar) * static_cast<std::size_t>(size));
}

template <typename Scalar>
struct Record {
  Shape shape;
  std::vector<Scalar> values;
};

template <typename Scalar>
std::map<std::string, Record<Scalar>>::node_type take(std::map<std::string, Record<Scalar>>& records,
                                                      const std::string& name, const Shape& shape,
                                                      const std::string& source) {
  auto node = records.extract(name);
  if (node.empty()) throw FormatError(source + ": missing record '" + name + "'");
  if (node.mapped().shape != shape) {
    throw FormatError(source + ": record '" + name + "' has shape " + to_string(node.mapped().shape) + ", expected " +
                      to_string(shape));
  }
  return node;
}

// Record names: parameter value under its name, momentum under "name@momentum",
// BN statistics under "bn@running_mean" / "bn@running_var".
template <typename Scalar>
void for_each_record(DualPathModel<Scalar>& model,
                     const std::function<void(const std::string&, const Shape&, Scalar*, Index)>& visit) {
  for (Parameter<Scalar>* p : model.parameters()) {
    Tensor<Scalar>& value = p->value.mutable_value();
    visit(p->name, value.shape(), value.data(), value.size());
    visit(p->name + "@momentum", p->momentum.shape(), p->momentum.data(), p->momentum.size());
  }
  for (auto& [name, bn] : model.batchnorms()) {
    const Shape shape{bn->channels()};
    visit(name + "@running_mean", shape, bn->running_mean.data(), bn->channels());
    visit(name + "@running_var", shape, bn->running_var.data(), bn->channels());
  }
}

}  // namespace

template <typename Scalar>
std::string serialize_checkpoint(DualPathModel<Scalar>& model, const CheckpointMeta& meta) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint8_t>(sizeof(Scalar));
  w.pod<std::uint64_t>(model.config().hash());
  w.text(model.config().to_key_values().to_string());

  KeyValues m;
  m.set("stage", meta.stage);
  m.set("epochs_done", meta.epochs_done);
  w.text(m.to_string());
  w.text(meta.train_config.to_string());

  std::uint32_t count = 0;
  for_each_record<Scalar>(model, [&](const std::string&, const Shape&, Scalar*, Index) { ++count; });
  w.pod<std::uint32_t>(count);
  for_each_record<Scalar>(model, [&](const std::string& name, const Shape& shape, Scalar* data, Index size) {
    write_record(w, name, shape, data, size);
  });
  w.pod<std::uint64_t>(fnv1a(w.bytes()));
  return std::move(w.bytes());
}

template <typename Scalar>
Checkpoint<Scalar> deserialize_checkpoint(const std::string& bytes, const std::string& source) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError(source + ": not a checkpoint (bad magic)");
  }
  if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw FormatError(source + ": truncated checkpoint");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body_end = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + body_end, sizeof stored_sum);
  if (fnv1a(std::string_view(bytes.data(), body_end)) != stored_sum) {
    throw FormatError(source + ": checksum mismatch (truncated or corrupted checkpoint)");
  }

  Reader r(bytes, body_end, source);
  char magic[sizeof kMagic];
  r.raw(magic, sizeof magic);
  r.pod<std::uint32_t>();
  const auto width = r.pod<std::uint8_t>();
  if (width != sizeof(Scalar)) {
    throw FormatError(source + ": checkpoint stores " + std::to_string(width * 8) + "-bit values, expected " +
                      std::to_string(sizeof(Scalar) * 8));
  }
  const auto stored_hash = r.pod<std::uint64_t>();
  const ModelConfig config = ModelConfig::from_key_values(KeyValues::parse(r.text(), source + " (model config)"));
  if (config.hash() != stored_hash) throw FormatError(source + ": config hash mismatch");

  const KeyValues m = KeyValues::parse(r.text(), source + " (meta)");
  Checkpoint<Scalar> out{DualPathModel<Scalar>(config, 0), CheckpointMeta{}};
  out.meta.stage = m.get_int("stage", 0);
  out.meta.epochs_done = m.get_int("epochs_done", 0);
  out.meta.train_config = KeyValues::parse(r.text(), source + " (train config)");

  std::map<std::string, Record<Scalar>> records;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.text();
    Record<Scalar> rec;
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw FormatError(source + ": record '" + name + "' has implausible rank");
    Index size = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.pod<std::int64_t>();
      if (d <= 0 || d > (std::int64_t{1} << 32)) throw FormatError(source + ": record '" + name + "' has bad extent");
      rec.shape.push_back(d);
      size *= d;
    }
    rec.values.resize(static_cast<std::size_t>(size));
    r.raw(rec.values.data(), sizeof(Scalar) * rec.values.size());
    if (!records.emplace(name, std::move(rec)).second) throw FormatError(source + ": duplicate record '" + name + "'");
  }
  if (!r.done()) throw FormatError(source + ": trailing bytes after records");

  for_each_record<Scalar>(out.model, [&](const std::string& name, const Shape& shape, Scalar* data, Index size) {
    auto node = take(records, name, shape, source);
    std::copy_n(node.mapped().values.data(), size, data);
  });
  if (!records.empty()) throw FormatError(source + ": unexpected record '" + records.begin()->first + "'");
  return out;
}

template <typename Scalar>
void save_checkpoint(DualPathModel<Scalar>& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint<Scalar>(buffer.str(), path.string());
}

#define DUALPATH_INSTANTIATE_CHECKPOINT(S)                                                       \
  template std::string serialize_checkpoint(DualPathModel<S>&, const CheckpointMeta&);          \
  template Checkpoint<S> deserialize_checkpoint(const std::string&, const std::string&);        \
  template void save_checkpoint(DualPathModel<S>&, const CheckpointMeta&, const std::filesystem::path&); \
  template Checkpoint<S> load_checkpoint(const std::filesystem::path&);

DUALPATH_INSTANTIATE_CHECKPOINT(float)
DUALPATH_INSTANTIATE_CHECKPOINT(double)

#undef DUALPATH_INSTANTIATE_CHECKPOINT

}  // namespace dualpath

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fd2/core.hpp"
#include "fd2/pretrain.hpp"
#include "fd2/softlabel.hpp"

// Binary containers. All integers and floats are little-endian (written on a
// little-endian host); FD2C holds the teacher checkpoint, FD2L the soft-label
// store.

namespace fd2::serialize {

namespace detail {

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for writing: " + path);
    path_ = path;
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void f32(float v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const Tensor<float>& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) u32(static_cast<std::uint32_t>(d));
    bytes(t.data(), t.v.size() * sizeof(float));
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
    path_ = path;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("truncated file: " + path_);
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    if (n) bytes(s.data(), n);
    return s;
  }
  Tensor<float> tensor() {
    const std::uint32_t rank = u32();
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < rank; ++i)
      shape.push_back(static_cast<int>(u32()));
    Tensor<float> t(shape);
    if (t.numel()) bytes(t.data(), t.v.size() * sizeof(float));
    return t;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace detail

inline std::uint64_t file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot fingerprint missing file: " + path);
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// FD2C teacher checkpoint
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const pretrain::TeacherCheckpoint<float>& ckpt,
                            const std::string& path) {
  detail::Writer w(path);
  w.bytes("FD2C", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.num_classes));
  w.u32(static_cast<std::uint32_t>(ckpt.num_maps));
  w.u32(static_cast<std::uint32_t>(ckpt.in_channels));
  w.u32(static_cast<std::uint32_t>(ckpt.image_size));
  w.u32(static_cast<std::uint32_t>(ckpt.channels.size()));
  for (int c : ckpt.channels) w.u32(static_cast<std::uint32_t>(c));

  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    w.str(name);
    w.tensor(tensor);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.buffers.size()));
  for (const auto& [name, tensor] : ckpt.buffers) {
    w.str(name);
    w.tensor(tensor);
  }

  w.u32(static_cast<std::uint32_t>(ckpt.bank.num_classes()));
  w.u32(static_cast<std::uint32_t>(ckpt.bank.dim()));
  w.f32(ckpt.bank.momentum);
  for (char f : ckpt.bank.initialized) w.u8(static_cast<std::uint8_t>(f));
  w.bytes(ckpt.bank.prototypes.data(),
          ckpt.bank.prototypes.v.size() * sizeof(float));

  w.u32(static_cast<std::uint32_t>(ckpt.snapshot.layer_count()));
  for (std::size_t l = 0; l < ckpt.snapshot.layer_count(); ++l) {
    w.u32(static_cast<std::uint32_t>(ckpt.snapshot.means[l].size()));
    w.bytes(ckpt.snapshot.means[l].data(),
            ckpt.snapshot.means[l].size() * sizeof(float));
    w.bytes(ckpt.snapshot.vars[l].data(),
            ckpt.snapshot.vars[l].size() * sizeof(float));
  }

  w.str(ckpt.config_fingerprint);
  w.u32(static_cast<std::uint32_t>(ckpt.history.size()));
  for (const auto& [bb, cal_acc] : ckpt.history) {
    w.f32(static_cast<float>(bb));
    w.f32(static_cast<float>(cal_acc));
  }
}

inline pretrain::TeacherCheckpoint<float> load_checkpoint(
    const std::string& path) {
  detail::Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "FD2C")
    throw IoError("not a teacher checkpoint: " + path);
  if (r.u32() != kCheckpointVersion)
    throw IoError("unsupported checkpoint version in " + path);
  pretrain::TeacherCheckpoint<float> ckpt;
  ckpt.num_classes = static_cast<int>(r.u32());
  ckpt.num_maps = static_cast<int>(r.u32());
  ckpt.in_channels = static_cast<int>(r.u32());
  ckpt.image_size = static_cast<int>(r.u32());
  const std::uint32_t nch = r.u32();
  for (std::uint32_t i = 0; i < nch; ++i)
    ckpt.channels.push_back(static_cast<int>(r.u32()));

  const std::uint32_t np = r.u32();
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = r.str();
    ckpt.params.emplace_back(std::move(name), r.tensor());
  }
  const std::uint32_t nb = r.u32();
  for (std::uint32_t i = 0; i < nb; ++i) {
    std::string name = r.str();
    ckpt.buffers.emplace_back(std::move(name), r.tensor());
  }

  const int bank_k = static_cast<int>(r.u32());
  const int bank_d = static_cast<int>(r.u32());
  const float mu = r.f32();
  ckpt.bank = cal::PrototypeBank<float>(bank_k, bank_d, mu);
  for (int k = 0; k < bank_k; ++k)
    ckpt.bank.initialized[static_cast<std::size_t>(k)] =
        static_cast<char>(r.u8());
  r.bytes(ckpt.bank.prototypes.data(),
          ckpt.bank.prototypes.v.size() * sizeof(float));

  const std::uint32_t layers = r.u32();
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::uint32_t len = r.u32();
    std::vector<float> mean(len), var(len);
    r.bytes(mean.data(), len * sizeof(float));
    r.bytes(var.data(), len * sizeof(float));
    ckpt.snapshot.means.push_back(std::move(mean));
    ckpt.snapshot.vars.push_back(std::move(var));
  }

  ckpt.config_fingerprint = r.str();
  const std::uint32_t epochs = r.u32();
  for (std::uint32_t e = 0; e < epochs; ++e) {
    const float bb = r.f32();
    const float cal_acc = r.f32();
    ckpt.history.emplace_back(bb, cal_acc);
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// FD2L soft-label store
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kSoftLabelVersion = 1;

inline void save_softlabels(const softlabel::SoftLabelStore& store,
                            const std::string& path) {
  std::size_t vpi = store.vectors.empty() ? 0 : store.vectors[0].size();
  for (const auto& per_image : store.vectors)
    if (per_image.size() != vpi)
      throw StateError("soft-label store has a ragged vector count");
  detail::Writer w(path);
  w.bytes("FD2L", 4);
  w.u32(kSoftLabelVersion);
  w.u32(static_cast<std::uint32_t>(store.num_classes));
  w.u32(static_cast<std::uint32_t>(store.vectors.size()));
  w.u32(static_cast<std::uint32_t>(vpi));
  w.f32(store.tau);
  w.u8(store.mode == softlabel::SoftLabelMode::kOffline ? 0 : 1);
  w.str(store.aug_policy);
  w.u64(store.seed);
  for (const auto& per_image : store.vectors)
    for (const auto& vec : per_image) {
      if (static_cast<int>(vec.size()) != store.num_classes)
        throw StateError("soft-label row has wrong length");
      w.bytes(vec.data(), vec.size() * sizeof(float));
    }
  w.str(store.teacher_fingerprint);
}

inline softlabel::SoftLabelStore load_softlabels(const std::string& path) {
  detail::Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "FD2L")
    throw IoError("not a soft-label store: " + path);
  if (r.u32() != kSoftLabelVersion)
    throw IoError("unsupported soft-label version in " + path);
  softlabel::SoftLabelStore store;
  store.num_classes = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  const std::uint32_t vpi = r.u32();
  store.tau = r.f32();
  store.mode = r.u8() == 0 ? softlabel::SoftLabelMode::kOffline
                           : softlabel::SoftLabelMode::kOnline;
  store.aug_policy = r.str();
  store.seed = r.u64();
  store.vectors.resize(count);
  for (std::uint32_t i = 0; i < count; ++i)
    for (std::uint32_t v = 0; v < vpi; ++v) {
      std::vector<float> row(static_cast<std::size_t>(store.num_classes));
      r.bytes(row.data(), row.size() * sizeof(float));
      store.vectors[i].push_back(std::move(row));
    }
  store.teacher_fingerprint = r.str();
  store.validate_simplex();
  return store;
}

}  // namespace fd2::serialize

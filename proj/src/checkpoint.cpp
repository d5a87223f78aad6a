#include "ddi/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ddi/errors.hpp"

namespace ddi {

namespace {

constexpr char kMagic[4] = {'D', 'D', 'I', '1'};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  DDI_CHECK_T(DataError, is.gcount() == 4, "checkpoint truncated while reading ", what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32_payload(std::ostream& os, const std::vector<float>& v) {
  // Serialize explicitly byte-by-byte so the on-disk format is little-endian
  // regardless of host order.
  for (float f : v) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
  }
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
  DDI_CHECK_T(ModelError, t.defined(), "checkpoint: undefined tensor for '", name, "'");
  for (const auto& [n, _] : tensors)
    DDI_CHECK_T(ModelError, n != name, "checkpoint: duplicate tensor name '", name, "'");
  tensors.emplace_back(name, t.clone());
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  DDI_CHECK_T(DataError, os.good(), "cannot open '", path, "' for writing");
  os.write(kMagic, 4);
  put_u32(os, ckpt.version);
  put_u32(os, ckpt.has_momentum ? 1u : 0u);
  put_u32(os, static_cast<uint32_t>(ckpt.arch_text.size()));
  os.write(ckpt.arch_text.data(), static_cast<std::streamsize>(ckpt.arch_text.size()));
  put_u32(os, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) put_u32(os, static_cast<uint32_t>(t.dim(d)));
    put_f32_payload(os, t.vec());
  }
  DDI_CHECK_T(DataError, os.good(), "write failure on '", path, "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  DDI_CHECK_T(DataError, is.good(), "cannot open checkpoint '", path, "'");
  char magic[4];
  is.read(magic, 4);
  DDI_CHECK_T(DataError, is.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0,
              "'", path, "' is not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = get_u32(is, "version");
  DDI_CHECK_T(DataError, ckpt.version == 1, "unsupported checkpoint version ",
              ckpt.version);
  uint32_t flags = get_u32(is, "flags");
  ckpt.has_momentum = (flags & 1u) != 0;
  uint32_t arch_len = get_u32(is, "arch length");
  ckpt.arch_text.resize(arch_len);
  is.read(ckpt.arch_text.data(), arch_len);
  DDI_CHECK_T(DataError, is.gcount() == static_cast<std::streamsize>(arch_len),
              "checkpoint truncated in arch text");
  uint32_t count = get_u32(is, "tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_u32(is, "tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    DDI_CHECK_T(DataError, is.gcount() == static_cast<std::streamsize>(name_len),
                "checkpoint truncated in tensor name");
    uint32_t rank = get_u32(is, "rank");
    DDI_CHECK_T(DataError, rank <= 8, "implausible tensor rank ", rank, " for '",
                name, "'");
    Shape shape(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(get_u32(is, "dim"));
      numel *= shape[d];
    }
    std::vector<float> data(static_cast<size_t>(numel));
    for (int64_t j = 0; j < numel; ++j) {
      uint32_t bits = get_u32(is, "payload");
      float f;
      std::memcpy(&f, &bits, 4);
      data[static_cast<size_t>(j)] = f;
    }
    ckpt.tensors.emplace_back(name, Tensor(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace ddi

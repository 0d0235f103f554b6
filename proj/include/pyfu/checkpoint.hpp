#pragma once
// Named-parameter binary snapshots. Layout, all little-endian:
//   magic "PYFU1"
//   per record: u32 name length, name bytes, u8 dtype (0 = f32), u8 rank,
//               u32 dims[rank], payload
// Records appear in parameter-store order; round-trips are byte-exact.

#include "pyfu/dataio.hpp"
#include "pyfu/tensor.hpp"

namespace pyfu {

inline void save_checkpoint(const ParamStoreT<float>& store, const std::string& path) {
  std::vector<uint8_t> bytes{'P', 'Y', 'F', 'U', '1'};
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    detail::put_u32(bytes, uint32_t(p.name.size()));
    bytes.insert(bytes.end(), p.name.begin(), p.name.end());
    bytes.push_back(0);  // dtype f32
    bytes.push_back(4);  // rank
    const Shape4 s = p.tensor.shape();
    for (int d : {s.n, s.c, s.h, s.w}) detail::put_u32(bytes, uint32_t(d));
    for (float v : p.tensor.values()) detail::put_f32(bytes, v);
  }
  write_file(path, bytes);
}

inline void load_checkpoint(ParamStoreT<float>& store, const std::string& path) {
  const auto bytes = read_file(path);
  check(bytes.size() >= 5 && std::memcmp(bytes.data(), "PYFU1", 5) == 0,
        path + " is not a PYFU1 checkpoint");
  size_t pos = 5;
  auto need = [&](size_t n) {
    check(pos + n <= bytes.size(), path + ": checkpoint truncated");
  };
  std::vector<std::string> seen;
  while (pos < bytes.size()) {
    need(4);
    const uint32_t name_len = detail::get_u32(bytes.data() + pos);
    pos += 4;
    need(name_len + 2);
    const std::string name(bytes.begin() + std::ptrdiff_t(pos),
                           bytes.begin() + std::ptrdiff_t(pos + name_len));
    pos += name_len;
    const uint8_t dtype = bytes[pos++];
    const uint8_t rank = bytes[pos++];
    check(dtype == 0, path + ": unsupported dtype code " + std::to_string(dtype));
    check(rank == 4, path + ": unsupported rank " + std::to_string(rank));
    need(16);
    int dims[4];
    for (int& d : dims) {
      d = int(detail::get_u32(bytes.data() + pos));
      pos += 4;
    }
    const Shape4 shape{dims[0], dims[1], dims[2], dims[3]};
    need(size_t(shape.numel()) * 4);
    ParamT<float>* p = store.find(name);
    check(p != nullptr, path + ": checkpoint has unknown parameter " + name);
    check(p->tensor.shape() == shape, path + ": shape mismatch for " + name + ": checkpoint " +
                                          shape.str() + " vs model " + p->tensor.shape().str());
    for (int64_t i = 0; i < shape.numel(); ++i) {
      p->tensor.data()[i] = detail::get_f32(bytes.data() + pos);
      pos += 4;
    }
    seen.push_back(name);
  }
  check(seen.size() == store.size(),
        path + ": checkpoint has " + std::to_string(seen.size()) + " records but the model has " +
            std::to_string(store.size()) + " parameters");
}

}  // namespace pyfu

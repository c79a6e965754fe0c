#include "span/checkpoint.hpp"

#include "span/byte_io.hpp"
#include "span/error.hpp"

namespace span {

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const ParamStore<T>& store) {
  detail::ByteWriter w;
  w.bytes("SPCK", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    for (T v : p.value.storage()) w.f32(static_cast<float>(v));
  }
  return std::move(w.buffer());
}

template <class T>
void deserialize_checkpoint(std::span<const std::uint8_t> bytes, ParamStore<T>& store) {
  detail::ByteReader r(bytes);
  if (!r.magic("SPCK")) throw Error(ErrorCode::BadMagic, "not a checkpoint file");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::VersionUnsupported, "checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32("parameter count");
  if (count != store.params().size())
    throw Error(ErrorCode::DimensionMismatch, "checkpoint holds " + std::to_string(count) + " parameters, model has " +
                                                  std::to_string(store.params().size()));
  for (auto& p : store.params()) {
    const std::string name = r.str("parameter name");
    if (name != p.name) throw Error(ErrorCode::DimensionMismatch, "expected parameter " + p.name + ", found " + name);
    const std::uint32_t rows = r.u32("rows"), cols = r.u32("cols");
    if (rows != p.value.rows() || cols != p.value.cols())
      throw Error(ErrorCode::DimensionMismatch, "shape mismatch for " + name);
    r.need(static_cast<std::size_t>(rows) * cols * 4, "parameter values");
    for (T& v : p.value.storage()) v = static_cast<T>(r.f32("value"));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::ParseError, "trailing bytes after checkpoint");
}

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store) {
  detail::write_file(path, serialize_checkpoint(store));
}

template <class T>
void load_checkpoint(const std::string& path, ParamStore<T>& store) {
  deserialize_checkpoint(detail::read_file(path), store);
}

template <class T>
std::vector<Matrix<T>> snapshot(const ParamStore<T>& store) {
  std::vector<Matrix<T>> out;
  for (const auto& p : store.params()) out.push_back(p.value);
  return out;
}

template <class T>
void restore(ParamStore<T>& store, const std::vector<Matrix<T>>& values) {
  if (values.size() != store.params().size()) throw Error(ErrorCode::DimensionMismatch, "snapshot size");
  std::size_t i = 0;
  for (auto& p : store.params()) p.value = values[i++];
}

#define SPAN_INSTANTIATE(T)                                                                 \
  template std::vector<std::uint8_t> serialize_checkpoint(const ParamStore<T>&);          \
  template void deserialize_checkpoint(std::span<const std::uint8_t>, ParamStore<T>&);     \
  template void save_checkpoint(const std::string&, const ParamStore<T>&);                 \
  template void load_checkpoint(const std::string&, ParamStore<T>&);                       \
  template std::vector<Matrix<T>> snapshot(const ParamStore<T>&);                          \
  template void restore(ParamStore<T>&, const std::vector<Matrix<T>>&);

SPAN_INSTANTIATE(float)
SPAN_INSTANTIATE(double)
#undef SPAN_INSTANTIATE

}  // namespace span

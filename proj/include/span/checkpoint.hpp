#pragma once

// Checkpoint file: "SPCK" | u32 version | u32 count | per parameter in declaration
// order: name (u32 length + bytes), u32 rows, u32 cols, rows*cols f32. Little-endian.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "span/autodiff.hpp"

namespace span {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const ParamStore<T>& store);

// Names, order and shapes must match the store exactly.
template <class T>
void deserialize_checkpoint(std::span<const std::uint8_t> bytes, ParamStore<T>& store);

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store);
template <class T>
void load_checkpoint(const std::string& path, ParamStore<T>& store);

// In-memory parameter snapshot used for best-epoch selection.
template <class T>
std::vector<Matrix<T>> snapshot(const ParamStore<T>& store);
template <class T>
void restore(ParamStore<T>& store, const std::vector<Matrix<T>>& values);

}  // namespace span

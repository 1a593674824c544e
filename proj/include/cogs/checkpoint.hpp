#pragma once

// Named-tensor archive.
//
//   bytes 0..7   header length N, unsigned little-endian
//   bytes 8..8+N UTF-8 JSON header:
//                {"format": "cogs-archive", "version": 1, "metadata": {...},
//                 "tensors": [{"name", "dtype": "f32", "shape", "offset", "nbytes"}]}
//   remainder    payload; each tensor is little-endian float32 at `offset`
//                bytes from the payload start.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cogs/nn.hpp"
#include "json.hpp"

namespace cogs::ckpt {

struct Archive {
  nlohmann::json metadata = nlohmann::json::object();
  nn::ParamStore tensors;
};

std::vector<uint8_t> serialize(const nn::ParamStore& tensors, const nlohmann::json& metadata);
Archive deserialize(const std::vector<uint8_t>& bytes);

void save(const std::filesystem::path& path, const nn::ParamStore& tensors,
          const nlohmann::json& metadata = nlohmann::json::object());
Archive load(const std::filesystem::path& path);

// Copies values from `src` into same-named, same-shaped tensors of `dst`.
// Every tensor of `dst` must be present.
void assign(nn::ParamStore& dst, const nn::ParamStore& src, const std::string& what);

// FNV-1a, used for config and token digests.
uint64_t fnv1a(const void* data, size_t n, uint64_t h = 14695981039346656037ULL);
std::string hex64(uint64_t v);
std::string digest(const std::string& text);

}  // namespace cogs::ckpt

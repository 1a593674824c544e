#include "cogs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cogs/error.hpp"

namespace cogs::ckpt {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes little-endian host");

std::vector<uint8_t> serialize(const nn::ParamStore& tensors, const json& metadata) {
  json header;
  header["format"] = "cogs-archive";
  header["version"] = 1;
  header["metadata"] = metadata;
  header["tensors"] = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors.items()) {
    const uint64_t nbytes = t.numel() * sizeof(float);
    header["tensors"].push_back(
        {{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::vector<uint8_t> out(8 + text.size() + offset);
  const uint64_t n = text.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  uint8_t* payload = out.data() + 8 + text.size();
  for (const auto& item : tensors.items()) {
    for (double v : item.second.values()) {
      const float f = static_cast<float>(v);
      std::memcpy(payload, &f, sizeof f);
      payload += sizeof f;
    }
  }
  return out;
}

Archive deserialize(const std::vector<uint8_t>& bytes) {
  COGS_CHECK(bytes.size() >= 8, ErrorKind::kFormat, "archive truncated: no header length");
  uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  COGS_CHECK(n <= bytes.size() - 8, ErrorKind::kFormat, "archive truncated: header extends past end of file");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + long(n));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("archive header is not valid JSON: ") + e.what());
  }
  COGS_CHECK(header.value("format", "") == "cogs-archive", ErrorKind::kFormat, "not a cogs archive");
  COGS_CHECK(header.value("version", 0) == 1, ErrorKind::kFormat, "unsupported archive version");

  const size_t payload_size = bytes.size() - 8 - n;
  const uint8_t* payload = bytes.data() + 8 + n;
  Archive a;
  a.metadata = header.value("metadata", json::object());
  uint64_t expected = 0;
  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name");
    COGS_CHECK(t.at("dtype") == "f32", ErrorKind::kFormat, name + ": unsupported dtype");
    const ag::Shape shape = t.at("shape").get<ag::Shape>();
    const uint64_t offset = t.at("offset"), nbytes = t.at("nbytes");
    const size_t count = ag::numel_of(shape);
    COGS_CHECK(nbytes == count * sizeof(float), ErrorKind::kFormat,
               name + ": header shape " + ag::shape_str(shape) + " implies " +
                   std::to_string(count * sizeof(float)) + " bytes, header says " + std::to_string(nbytes));
    COGS_CHECK(offset == expected, ErrorKind::kFormat, name + ": tensors are not contiguous");
    COGS_CHECK(offset + nbytes <= payload_size, ErrorKind::kFormat, name + ": payload truncated");
    std::vector<double> values(count);
    for (size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload + offset + i * sizeof f, sizeof f);
      values[i] = f;
    }
    a.tensors.insert(name, shape, std::move(values));
    expected += nbytes;
  }
  COGS_CHECK(expected == payload_size, ErrorKind::kFormat,
             "payload holds " + std::to_string(payload_size) + " bytes, header accounts for " +
                 std::to_string(expected));
  return a;
}

void save(const std::filesystem::path& path, const nn::ParamStore& tensors, const json& metadata) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::vector<uint8_t> bytes = serialize(tensors, metadata);
  std::ofstream f(path, std::ios::binary);
  COGS_CHECK(f.good(), ErrorKind::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  COGS_CHECK(f.good(), ErrorKind::kIo, "write failed for " + path.string());
}

Archive load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  COGS_CHECK(f.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

void assign(nn::ParamStore& dst, const nn::ParamStore& src, const std::string& what) {
  for (auto& [name, t] : dst.items()) {
    COGS_CHECK(src.contains(name), ErrorKind::kFormat, what + ": checkpoint lacks " + name);
    const ag::Tensor s = src.get(name);
    COGS_CHECK(s.shape() == t.shape(), ErrorKind::kShape,
               what + ": " + name + " has shape " + ag::shape_str(s.shape()) + ", model expects " +
                   ag::shape_str(t.shape()));
    std::copy(s.values().begin(), s.values().end(), ag::Tensor(t).mutable_value().begin());
  }
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[size_t(i)] = digits[v & 15];
  return s;
}

std::string digest(const std::string& text) { return hex64(fnv1a(text.data(), text.size())); }

}  // namespace cogs::ckpt

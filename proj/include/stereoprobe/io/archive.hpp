#pragma once

// Named-tensor archive in the safetensors layout:
//
//   u64 little-endian N | N bytes of JSON header | raw tensor bytes
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets": [b, e]}
// with offsets relative to the first byte after the header, plus an optional
// "__metadata__" object of string pairs. Tensor data is little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/model/tensor.hpp"

namespace stereoprobe {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace detail {

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F64") return 8;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

}  // namespace detail

class TensorArchive {
 public:
  struct Entry {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::vector<unsigned char> bytes;
  };

  void add(const std::string& name, const Tensor& t) {
    add_f32(name, t.shape(), t.values());
  }
  void add_f32(const std::string& name, std::vector<std::size_t> shape,
               std::span<const float> values) {
    put(name, "F32", std::move(shape), values.data(), values.size_bytes());
  }
  void add_f64(const std::string& name, std::vector<std::size_t> shape,
               std::span<const double> values) {
    put(name, "F64", std::move(shape), values.data(), values.size_bytes());
  }

  bool contains(const std::string& name) const {
    return entries_.count(name) != 0;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw LoadError("archive: missing tensor '" + name + "'");
    }
    return it->second;
  }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const {
    return metadata_;
  }

  // Tensor converted to float32, checked against `expected_shape` when given.
  Tensor tensor(const std::string& name,
                const std::vector<std::size_t>& expected_shape = {}) const {
    const Entry& e = entry(name);
    check_shape(name, e, expected_shape);
    const std::size_t n = Tensor::element_count(e.shape);
    std::vector<float> out(n);
    if (e.dtype == "F32") {
      std::memcpy(out.data(), e.bytes.data(), n * 4);
    } else if (e.dtype == "F64") {
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, e.bytes.data() + 8 * i, 8);
        out[i] = static_cast<float>(v);
      }
    } else if (e.dtype == "F16") {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, e.bytes.data() + 2 * i, 2);
        out[i] = detail::half_to_float(h);
      }
    } else {  // BF16
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, e.bytes.data() + 2 * i, 2);
        out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
      }
    }
    return Tensor(e.shape, std::move(out));
  }

  std::vector<double> doubles(
      const std::string& name,
      const std::vector<std::size_t>& expected_shape = {}) const {
    const Entry& e = entry(name);
    check_shape(name, e, expected_shape);
    const std::size_t n = Tensor::element_count(e.shape);
    std::vector<double> out(n);
    if (e.dtype == "F64") {
      std::memcpy(out.data(), e.bytes.data(), n * 8);
    } else {
      const Tensor t = tensor(name);
      for (std::size_t i = 0; i < n; ++i) out[i] = t[i];
    }
    return out;
  }

  void save(const std::string& path) const {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    if (!metadata_.empty()) {
      header["__metadata__"] = metadata_;
    }
    std::size_t offset = 0;
    for (const auto& [name, e] : entries_) {
      header[name] = {{"dtype", e.dtype},
                      {"shape", e.shape},
                      {"data_offsets", {offset, offset + e.bytes.size()}}};
      offset += e.bytes.size();
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("archive: cannot write " + path);
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, e] : entries_) {
      out.write(reinterpret_cast<const char*>(e.bytes.data()),
                static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw LoadError("archive: write failed for " + path);
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("archive: cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    std::uint64_t header_size = 0;
    if (file_size < 8 ||
        !in.read(reinterpret_cast<char*>(&header_size), sizeof(header_size))) {
      throw LoadError("archive: truncated header in " + path);
    }
    if (header_size > file_size - 8) {
      throw LoadError("archive: header length exceeds file size in " + path);
    }
    std::string text(header_size, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_size));
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("archive: corrupt header in " + path + ": " + e.what());
    }
    if (!header.is_object()) {
      throw LoadError("archive: header is not an object in " + path);
    }
    const std::uint64_t data_size = file_size - 8 - header_size;
    std::vector<unsigned char> data(data_size);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data_size));
    if (!in) throw LoadError("archive: truncated data in " + path);

    TensorArchive archive;
    for (const auto& [name, info] : header.items()) {
      if (name == "__metadata__") {
        if (info.is_object()) {
          for (const auto& [k, v] : info.items()) {
            if (v.is_string()) archive.metadata_[k] = v.get<std::string>();
          }
        }
        continue;
      }
      try {
        Entry e;
        e.dtype = info.at("dtype").get<std::string>();
        e.shape = info.at("shape").get<std::vector<std::size_t>>();
        const auto offsets =
            info.at("data_offsets").get<std::vector<std::uint64_t>>();
        const std::size_t width = detail::dtype_size(e.dtype);
        if (width == 0) {
          throw LoadError("archive: tensor '" + name +
                          "' has unsupported dtype " + e.dtype);
        }
        if (offsets.size() != 2 || offsets[0] > offsets[1] ||
            offsets[1] > data_size ||
            offsets[1] - offsets[0] != Tensor::element_count(e.shape) * width) {
          throw LoadError("archive: tensor '" + name +
                          "' has inconsistent data offsets");
        }
        e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(offsets[0]),
                       data.begin() + static_cast<std::ptrdiff_t>(offsets[1]));
        archive.entries_.emplace(name, std::move(e));
      } catch (const nlohmann::json::exception&) {
        throw LoadError("archive: malformed header entry for tensor '" + name +
                        "'");
      }
    }
    return archive;
  }

 private:
  void put(const std::string& name, std::string dtype,
           std::vector<std::size_t> shape, const void* data,
           std::size_t bytes) {
    Entry e;
    e.dtype = std::move(dtype);
    e.shape = std::move(shape);
    const auto* p = static_cast<const unsigned char*>(data);
    e.bytes.assign(p, p + bytes);
    entries_[name] = std::move(e);
  }

  static void check_shape(const std::string& name, const Entry& e,
                          const std::vector<std::size_t>& expected) {
    if (!expected.empty() && e.shape != expected) {
      throw LoadError("archive: tensor '" + name + "' has shape " +
                      shape_string(e.shape) + ", expected " +
                      shape_string(expected));
    }
  }

  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace stereoprobe

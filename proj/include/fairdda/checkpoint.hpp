#pragma once

// Checkpoint container.
//
//   FAIRDDA-CHECKPOINT 1
//   meta <key> <value>            (zero or more)
//   <name> <rows>x<cols> <dtype> <offset>
//   ...
//   END
//   <raw little-endian values, offsets counted from the first byte after END\n>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fairdda/errors.hpp"
#include "fairdda/tensor.hpp"

namespace fairdda {

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  std::map<std::string, std::string> meta;

  void add(std::string name, Tensor<T> t) { tensors.emplace_back(std::move(name), std::move(t)); }

  const Tensor<T>& at(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw DataError("checkpoint has no tensor named '" + name + "'");
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

namespace detail {

template <typename T>
void write_le(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (T v : values) {
      char b[sizeof(T)];
      std::memcpy(b, &v, sizeof(T));
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
      out.write(b, sizeof(T));
    }
  }
}

template <typename T>
void read_le(std::istream& in, std::span<T> values) {
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(T)));
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : values) {
      char b[sizeof(T)];
      std::memcpy(b, &v, sizeof(T));
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
      std::memcpy(&v, b, sizeof(T));
    }
  }
}

inline bool has_space(const std::string& s) {
  return s.empty() || s.find_first_of(" \t\r\n") != std::string::npos;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out << "FAIRDDA-CHECKPOINT 1\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (detail::has_space(k) || v.find('\n') != std::string::npos)
      throw DataError("checkpoint meta key/value not representable: " + k);
    out << "meta " << k << ' ' << v << '\n';
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (detail::has_space(name) || name == "meta" || name == "END")
      throw DataError("checkpoint tensor name not representable: '" + name + "'");
    out << name << ' ' << t.rows() << 'x' << t.cols() << ' ' << dtype_name<T>() << ' ' << offset
        << '\n';
    offset += t.size() * sizeof(T);
  }
  out << "END\n";
  for (const auto& [name, t] : ckpt.tensors) detail::write_le<T>(out, t.values());
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "FAIRDDA-CHECKPOINT 1")
    throw DataError("not a checkpoint file: " + path);

  struct Entry {
    std::string name;
    std::size_t rows, cols;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  Checkpoint<T> ckpt;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "END") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string name, shape, dtype;
    ls >> name;
    if (name == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      ckpt.meta[key] = value;
      continue;
    }
    std::uint64_t offset = 0;
    if (!(ls >> shape >> dtype >> offset)) throw DataError("malformed checkpoint header: " + line);
    const auto x = shape.find('x');
    if (x == std::string::npos) throw DataError("malformed checkpoint shape: " + shape);
    if (dtype != dtype_name<T>())
      throw DataError("checkpoint dtype " + dtype + " does not match requested " + dtype_name<T>());
    entries.push_back({name, std::stoull(shape.substr(0, x)), std::stoull(shape.substr(x + 1)),
                       offset});
  }
  if (!ended) throw DataError("truncated checkpoint header: " + path);
  const auto data_start = in.tellg();
  for (const auto& e : entries) {
    Tensor<T> t(e.rows, e.cols);
    in.seekg(data_start + static_cast<std::streamoff>(e.offset));
    detail::read_le<T>(in, t.values());
    if (!in) throw DataError("truncated checkpoint data for " + e.name);
    ckpt.add(e.name, std::move(t));
  }
  return ckpt;
}

}  // namespace fairdda

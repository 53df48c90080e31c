#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/binio.hpp"
#include "dynflow/errors.hpp"
#include "dynflow/rng.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

// Named, ordered collection of trainable tensors.
//
// Checkpoint layout (all integers little-endian):
//   8 bytes   magic "DYNFLOWC"
//   u32       format version (1)
//   u32       parameter count
//   per parameter, in insertion order:
//     u32 name length, name bytes (UTF-8)
//     u32 rank, u64 extent[rank]
//     f64 value[product(extent)]
class ParamStore {
 public:
  static constexpr char kMagic[9] = "DYNFLOWC";
  static constexpr std::uint32_t kVersion = 1;

  // Uniform(-a, a) with a = sqrt(1 / fan_in); the stream is keyed by the
  // parameter name so adding a parameter never shifts another's values.
  Tensor add(const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
    Rng rng = Rng::stream(seed, "init", {Rng::fnv1a(name)});
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.uniform(-a, a);
    Tensor t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  // Deep copy of values (fresh leaf tensors).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) {
      Tensor c = t.detach();
      c.set_requires_grad(t.requires_grad());
      out.index_[name] = out.entries_.size();
      out.entries_.emplace_back(name, std::move(c));
    }
    return out;
  }

  void write(std::ostream& os) const {
    os.write(kMagic, 8);
    binio::put_u32(os, kVersion);
    binio::put_u32(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, t] : entries_) {
      binio::put_u32(os, static_cast<std::uint32_t>(name.size()));
      binio::put_bytes(os, name);
      binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) binio::put_u64(os, d);
      for (double v : t.data()) binio::put_f64(os, v);
    }
  }

  // Reads values into the existing parameters. Names and shapes must match
  // exactly; extra or missing entries are rejected.
  void read(std::istream& is) {
    if (binio::get_bytes(is, 8) != std::string(kMagic, 8)) {
      throw FormatError("checkpoint: bad magic");
    }
    const std::uint32_t version = binio::get_u32(is);
    if (version != kVersion) {
      throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = binio::get_u32(is);
    if (count != entries_.size()) {
      throw FormatError("checkpoint: holds " + std::to_string(count) + " parameters, model has " +
                        std::to_string(entries_.size()));
    }
    for (std::uint32_t k = 0; k < count; ++k) {
      const std::string name = binio::get_bytes(is, binio::get_u32(is));
      if (!contains(name)) throw FormatError("checkpoint: unexpected parameter '" + name + "'");
      Tensor& t = get(name);
      const std::uint32_t rank = binio::get_u32(is);
      Shape shape(rank);
      for (auto& d : shape) d = binio::get_u64(is);
      if (shape != t.shape()) {
        throw FormatError("checkpoint: '" + name + "' has shape " + shape_str(shape) +
                          ", model expects " + shape_str(t.shape()));
      }
      for (double& v : t.mutable_data()) v = binio::get_f64(is);
    }
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    write(os);
    if (!os) throw FormatError("write failed for '" + path + "'");
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
    read(is);
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace dynflow

#pragma once

#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rvgtree/common.hpp"
#include "rvgtree/tensor.hpp"

namespace rvg {

// Named registry of every trainable tensor plus its Adam moment buffers.
// Entries live in a deque so Tensor references stay stable across creation.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
  };

  Tensor& create(const std::string& name, std::vector<int> shape) {
    if (index_.count(name))
      throw DataError("parameter registered twice: " + name);
    entries_.emplace_back();
    Entry& e = entries_.back();
    e.name = name;
    e.tensor = Tensor(std::move(shape));
    e.adam_m.assign(e.tensor.value.size(), 0.0);
    e.adam_v.assign(e.tensor.value.size(), 0.0);
    index_[name] = entries_.size() - 1;
    return e.tensor;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  const Tensor& get(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->get(name);
  }

  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  std::size_t count() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const Entry& e : entries_) out.push_back(e.name);
    return out;
  }

  void zero_grads() {
    for (Entry& e : entries_) e.tensor.zero_grad();
  }

  long long total_parameters() const {
    long long n = 0;
    for (const Entry& e : entries_) n += e.tensor.size();
    return n;
  }

  std::int64_t adam_step_count = 0;

  std::uint64_t value_checksum(const Entry& e) const {
    return fnv1a64(e.tensor.value.data(), e.tensor.value.size() * sizeof(double));
  }

  // Versioned structured-text checkpoint. %.17g rendering round-trips IEEE
  // doubles exactly, so save/load is bitwise.
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out << "rvgtree-checkpoint v1\n";
    out << "tensors " << entries_.size() << " adam_step " << adam_step_count << "\n";
    for (const Entry& e : entries_) {
      out << "tensor " << e.name << " " << e.tensor.shape.size();
      for (int d : e.tensor.shape) out << " " << d;
      out << " " << to_hex(value_checksum(e)) << "\n";
      write_row(out, "v", e.tensor.value);
      write_row(out, "m", e.adam_m);
      write_row(out, "a", e.adam_v);
    }
    out << "end\n";
    if (!out) throw DataError("failed writing checkpoint: " + path);
  }

  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "rvgtree-checkpoint v1")
      throw DataError(path + ": not a checkpoint file (bad header)");
    std::size_t n = 0;
    {
      std::string kw1, kw2;
      std::int64_t step = 0;
      if (!std::getline(in, line)) throw DataError(path + ": truncated");
      std::istringstream ss(line);
      if (!(ss >> kw1 >> n >> kw2 >> step) || kw1 != "tensors" || kw2 != "adam_step")
        throw DataError(path + ": malformed tensor count line");
      if (n != entries_.size())
        throw DataError(path + ": tensor count " + std::to_string(n) +
                        " does not match model (" + std::to_string(entries_.size()) + ")");
      adam_step_count = step;
    }
    for (std::size_t t = 0; t < n; ++t) {
      if (!std::getline(in, line)) throw DataError(path + ": truncated");
      std::istringstream ss(line);
      std::string kw, name, checksum;
      std::size_t ndim = 0;
      if (!(ss >> kw >> name >> ndim) || kw != "tensor")
        throw DataError(path + ": malformed tensor header");
      std::vector<int> shape(ndim);
      for (std::size_t i = 0; i < ndim; ++i)
        if (!(ss >> shape[i])) throw DataError(path + ": malformed shape for " + name);
      if (!(ss >> checksum)) throw DataError(path + ": missing checksum for " + name);
      auto it = index_.find(name);
      if (it == index_.end())
        throw DataError(path + ": checkpoint tensor not in model: " + name);
      Entry& e = entries_[it->second];
      if (shape != e.tensor.shape)
        throw DataError(path + ": shape mismatch for " + name);
      read_row(in, path, "v", e.tensor.value);
      read_row(in, path, "m", e.adam_m);
      read_row(in, path, "a", e.adam_v);
      if (to_hex(value_checksum(e)) != checksum)
        throw DataError(path + ": checksum mismatch for " + name);
      e.tensor.zero_grad();
    }
    if (!std::getline(in, line) || line != "end")
      throw DataError(path + ": missing end marker");
  }

 private:
  static void write_row(std::ofstream& out, const char* tag,
                        const std::vector<double>& row) {
    out << tag;
    for (double x : row) out << " " << format_double(x);
    out << "\n";
  }

  static void read_row(std::ifstream& in, const std::string& path,
                       const std::string& tag, std::vector<double>& row) {
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": truncated");
    std::istringstream ss(line);
    std::string kw;
    if (!(ss >> kw) || kw != tag)
      throw DataError(path + ": expected '" + tag + "' row");
    for (std::size_t i = 0; i < row.size(); ++i)
      if (!(ss >> row[i])) throw DataError(path + ": short value row");
    double extra;
    if (ss >> extra) throw DataError(path + ": oversized value row");
  }

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace rvg

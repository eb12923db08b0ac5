#include "mtner/params.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "mtner/random.h"

namespace mtner {

Tensor ParameterStore::create(const std::string& name, Shape shape, Init init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  const std::size_t n = shape_size(shape);
  std::vector<double> values(n, 0.0);
  Rng rng(derive_seed(seed_, name));
  switch (init.kind) {
    case Init::Kind::kZeros:
      break;
    case Init::Kind::kConstant:
      std::fill(values.begin(), values.end(), init.value);
      break;
    case Init::Kind::kXavier: {
      const double fan_in = shape.size() >= 2 ? static_cast<double>(n / shape.back()) : 1.0;
      const double fan_out = static_cast<double>(shape.back());
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& v : values) v = rng.uniform(-limit, limit);
      break;
    }
    case Init::Kind::kNormal:
      for (double& v : values) v = init.value * rng.normal();
      break;
  }
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  entries_.push_back({name, t});
  return t;
}

Tensor ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw std::out_of_range("unknown parameter " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void ParameterStore::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != entries_.size()) throw std::invalid_argument("snapshot size mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].tensor.mutable_data();
    if (values[i].size() != dst.size()) throw std::invalid_argument("snapshot shape mismatch");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

void ParameterStore::copy_shared_from(const ParameterStore& other) {
  for (auto& e : entries_) {
    for (const auto& o : other.entries_) {
      if (o.name != e.name) continue;
      if (o.tensor.shape() != e.tensor.shape()) {
        throw DimensionError("parameter " + e.name + " has different shapes");
      }
      auto dst = e.tensor.mutable_data();
      std::copy(o.tensor.data().begin(), o.tensor.data().end(), dst.begin());
    }
  }
}

std::uint64_t ParameterStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries_) {
    for (double v : e.tensor.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

void ParameterStore::save(std::ostream& out) const {
  out << "params " << entries_.size() << '\n';
  for (const auto& e : entries_) {
    out << "name " << e.name << '\n';
    dump_tensor(out, e.tensor);
  }
}

void ParameterStore::load(std::istream& in) {
  std::string word;
  std::size_t count = 0;
  if (!(in >> word >> count) || word != "params") {
    throw std::runtime_error("checkpoint: expected 'params <count>'");
  }
  in.ignore(1);
  if (count != entries_.size()) {
    throw std::runtime_error("checkpoint: holds " + std::to_string(count) +
                             " parameters, model expects " +
                             std::to_string(entries_.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::string line;
    std::getline(in, line);
    if (line.rfind("name ", 0) != 0) throw std::runtime_error("checkpoint: expected 'name'");
    const std::string name = line.substr(5);
    Tensor loaded = parse_tensor(in);
    Tensor target = get(name);
    if (loaded.shape() != target.shape()) {
      throw DimensionError("checkpoint: parameter " + name + " has shape " +
                           shape_to_string(loaded.shape()) + ", expected " +
                           shape_to_string(target.shape()));
    }
    auto dst = target.mutable_data();
    std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
  }
}

}  // namespace mtner

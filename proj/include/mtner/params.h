#ifndef MTNER_PARAMS_H_
#define MTNER_PARAMS_H_

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtner/tensor.h"

namespace mtner {

struct Init {
  enum class Kind { kZeros, kConstant, kXavier, kNormal };
  Kind kind = Kind::kXavier;
  double value = 0.0;  // constant value, or stddev for kNormal

  static Init zeros() { return {Kind::kZeros, 0.0}; }
  static Init constant(double v) { return {Kind::kConstant, v}; }
  static Init xavier() { return {Kind::kXavier, 0.0}; }
  static Init normal(double stddev) { return {Kind::kNormal, stddev}; }
};

// Named, ordered trainable tensors. Every parameter draws its initial values
// from its own sub-seed derive_seed(seed, name), so adding or removing a
// component never shifts the initialisation of the others.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  Tensor create(const std::string& name, Shape shape, Init init);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  struct Entry {
    std::string name;
    Tensor tensor;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t scalar_count() const;

  void zero_grad();
  // Deep copy of all values, in entry order.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);
  // Copies values for every name present in both stores.
  void copy_shared_from(const ParameterStore& other);
  // FNV-1a over the raw bytes of every value.
  std::uint64_t fingerprint() const;

  void save(std::ostream& out) const;
  // Reads tensors by name into already-created parameters.
  void load(std::istream& in);

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
};

}  // namespace mtner

#endif  // MTNER_PARAMS_H_

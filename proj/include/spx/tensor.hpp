#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace spx {

// Dense row-major f32 tensor. Data buffers are immutable once an op has
// produced them; copies of a Tensor alias the same storage. Gradient buffers
// exist whenever requires_grad is set and are the only mutable part.
class Tensor {
 public:
  std::vector<int> shape;
  std::shared_ptr<std::vector<float>> data;
  std::shared_ptr<std::vector<float>> grad;  // same length as data when present
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int> shape_, bool requires_grad_ = false);
  Tensor(std::vector<int> shape_, std::vector<float> values, bool requires_grad_ = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, std::mt19937& rng, double stddev,
                      bool requires_grad = false);

  std::size_t numel() const;
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
  bool defined() const { return static_cast<bool>(data); }

  float at(std::size_t i) const { return (*data)[i]; }
  const float* ptr() const { return data->data(); }
  float* grad_ptr() { return grad->data(); }

  void ensure_grad();
  void zero_grad();

  // Detached copy of the values (fresh buffer, no grad, no tape linkage).
  Tensor detached_clone() const;

  std::string shape_str() const;
};

std::size_t shape_numel(const std::vector<int>& shape);

// Reverse-mode tape: ordered op nodes, replayed once in reverse by backward().
class Tape {
 public:
  void record(std::function<void()> backward_fn);
  // Seeds d(loss)/d(loss)=1 and runs all recorded nodes in reverse order.
  void backward(Tensor& scalar_loss);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// True when a tape is active and at least one input wants gradients.
inline bool track_grad(const Tensor& a) { return active_tape() != nullptr && a.requires_grad; }
inline bool track_grad(const Tensor& a, const Tensor& b) {
  return active_tape() != nullptr && (a.requires_grad || b.requires_grad);
}
inline bool track_grad(const Tensor& a, const Tensor& b, const Tensor& c) {
  return active_tape() != nullptr && (a.requires_grad || b.requires_grad || c.requires_grad);
}

// Throws NumericError if the named op produced a non-finite value.
void check_finite(const Tensor& t, const char* op_name);

}  // namespace spx

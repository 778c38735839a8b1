#include "spx/tensor.hpp"

#include <cmath>
#include <sstream>

#include "spx/error.hpp"
#include "spx/rng.hpp"

namespace spx {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape_, bool requires_grad_)
    : shape(std::move(shape_)), requires_grad(requires_grad_) {
  data = std::make_shared<std::vector<float>>(shape_numel(shape), 0.0f);
  if (requires_grad) ensure_grad();
}

Tensor::Tensor(std::vector<int> shape_, std::vector<float> values, bool requires_grad_)
    : shape(std::move(shape_)), requires_grad(requires_grad_) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor init: value count does not match shape");
  }
  data = std::make_shared<std::vector<float>>(std::move(values));
  if (requires_grad) ensure_grad();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, std::mt19937& rng, double stddev,
                     bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (float& v : *t.data) v = static_cast<float>(nrand(rng) * stddev);
  return t;
}

std::size_t Tensor::numel() const { return data ? data->size() : 0; }

void Tensor::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<float>>(numel(), 0.0f);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0f);
}

Tensor Tensor::detached_clone() const {
  Tensor out;
  out.shape = shape;
  out.data = std::make_shared<std::vector<float>>(*data);
  out.requires_grad = false;
  return out;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(Tensor& scalar_loss) {
  if (scalar_loss.numel() != 1) {
    throw DimensionError("backward: loss must be a scalar tensor");
  }
  if (!scalar_loss.requires_grad) {
    throw NumericError("backward: loss does not require grad (no tape recorded?)");
  }
  scalar_loss.ensure_grad();
  (*scalar_loss.grad)[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void check_finite(const Tensor& t, const char* op_name) {
  for (float v : *t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name) + ": non-finite value in output");
    }
  }
}

}  // namespace spx

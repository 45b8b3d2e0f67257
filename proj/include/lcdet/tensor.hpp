#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lcdet/util.hpp"

namespace lcdet {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit floats. Handles share storage on copy;
// values are treated as immutable once an op has produced them. The grad
// buffer exists iff requires_grad and is accumulated into by Tape::backward.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data); }
  std::int64_t numel() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  double value() const;                        // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  // Shares data (and grad) under a new shape with equal numel; no tape node
  // is needed because the row-major layout is unchanged.
  Tensor reshaped(Shape new_shape) const;
  // Shares data, drops grad participation.
  Tensor detached() const;

  // Parameter maintenance; must not be called while a tape referencing this
  // tensor is still alive.
  void zero_grad();
  void add_to_data(const std::vector<double>& delta);
};

// Records one backward closure per forward op, in execution order. Reverse
// iteration is a valid reverse-mode sweep because the recording order is
// topological by construction. Construction pushes this tape as the
// thread-local active tape; destruction pops it. Single-owner, not shared.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const Tensor& output, std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and runs every node exactly once, in reverse.
  // The tape is consumed afterwards.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const void* output_id;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Elementwise / structural primitives. Each op validates shapes, checks the
// result for NaN/Inf, and records a backward rule when grad is required and
// a tape is active.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor transpose(const Tensor& a);                        // 2-D
Tensor concat_cols(const std::vector<Tensor>& parts);     // 2-D, along last axis
Tensor slice_cols(const Tensor& a, int offset, int length);
Tensor slice_rows(const Tensor& a, int offset, int length);
Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);
Tensor broadcast_to(const Tensor& a, const Shape& target);  // size-1 axes only
Tensor sum(const Tensor& a);                                // -> scalar
Tensor max_axis0(const Tensor& a);                          // [A,B,...] -> [B,...], ties to first
Tensor mean_axis0(const Tensor& a);
Tensor dropout(const Tensor& a, double rate, Rng& rng);     // inverted dropout

Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Central-difference check of reverse-mode gradients. f must evaluate to a
// scalar using the given leaves; returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                  double eps = 1e-5);

}  // namespace lcdet

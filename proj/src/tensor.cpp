#include "lcdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lcdet {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape extents must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

namespace {

void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite value");
    }
  }
}

thread_local Tape* g_active_tape = nullptr;

bool grad_wanted(const Tensor& t) { return t.requires_grad && Tape::active() != nullptr; }

Tensor make_output(Shape shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor");
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  const std::int64_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) {
    t.grad = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
  }
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data->begin(), t.data->end(), value);
  check_finite(*t.data, "full");
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  check_finite(values, "from_data");
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) {
    t.grad = std::make_shared<std::vector<double>>(t.data->size(), 0.0);
  }
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

double Tensor::value() const {
  if (!defined() || numel() != 1) throw std::runtime_error("value(): tensor is not scalar");
  return (*data)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw std::invalid_argument("at(): rank mismatch");
  std::int64_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape[static_cast<std::size_t>(axis)]) {
      throw std::out_of_range("at(): index out of range");
    }
    flat = flat * shape[static_cast<std::size_t>(axis)] + i;
    ++axis;
  }
  return (*data)[static_cast<std::size_t>(flat)];
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw std::invalid_argument("reshaped: numel mismatch " + shape_str(shape) + " -> " +
                                shape_str(new_shape));
  }
  Tensor t = *this;
  t.shape = std::move(new_shape);
  return t;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  t.requires_grad = false;
  return t;
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

void Tensor::add_to_data(const std::vector<double>& delta) {
  if (delta.size() != data->size()) throw std::invalid_argument("add_to_data: size mismatch");
  for (std::size_t i = 0; i < delta.size(); ++i) (*data)[i] += delta[i];
  check_finite(*data, "add_to_data");
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const Tensor& output, std::function<void()> backward_fn) {
  nodes_.push_back(Node{output.data.get(), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("Tape::backward: tape already consumed");
  if (loss.numel() != 1) throw std::runtime_error("Tape::backward: loss must be scalar");
  if (!loss.requires_grad || !loss.grad) {
    throw std::runtime_error("Tape::backward: loss does not require grad");
  }
  bool on_tape = false;
  for (const Node& n : nodes_) {
    if (n.output_id == loss.data.get()) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw std::runtime_error("Tape::backward: loss was not recorded on this tape");
  consumed_ = true;
  (*loss.grad)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

namespace {

// Shared skeleton for binary elementwise ops.
template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, op);
  Tensor out = make_output(a.shape, grad_wanted(a) || grad_wanted(b));
  const std::size_t n = a.data->size();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
  check_finite(*out.data, op);
  if (out.requires_grad) {
    Tape::active()->record(out, [a, b, out, bwd] {
      const std::size_t m = out.grad->size();
      for (std::size_t i = 0; i < m; ++i) {
        double da = 0.0, db = 0.0;
        bwd((*a.data)[i], (*b.data)[i], (*out.grad)[i], da, db);
        if (a.grad) (*a.grad)[i] += da;
        if (b.grad) (*b.grad)[i] += db;
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& a, const char* op, Fwd fwd, Bwd bwd) {
  Tensor out = make_output(a.shape, grad_wanted(a));
  const std::size_t n = a.data->size();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i]);
  check_finite(*out.data, op);
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, bwd] {
      const std::size_t m = out.grad->size();
      for (std::size_t i = 0; i < m; ++i) {
        (*a.grad)[i] += bwd((*a.data)[i], (*out.data)[i]) * (*out.grad)[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_elementwise(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_elementwise(
      a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_elementwise(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary_elementwise(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary_elementwise(
      a, "pow_scalar", [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return x == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary_elementwise(
      a, "clamp", [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  Tensor out = make_output({m, n}, grad_wanted(a) || grad_wanted(b));
  const double* pa = a.data->data();
  const double* pb = b.data->data();
  double* po = out.data->data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(*out.data, "matmul");
  if (out.requires_grad) {
    Tape::active()->record(out, [a, b, out, m, k, n] {
      const double* go = out.grad->data();
      if (a.grad) {
        double* ga = a.grad->data();
        const double* pb2 = b.data->data();
        for (int i = 0; i < m; ++i) {
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = pb2 + kk * n;
            const double* grow = go + i * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] += acc;
          }
        }
      }
      if (b.grad) {
        double* gb = b.grad->data();
        const double* pa2 = a.data->data();
        for (int i = 0; i < m; ++i) {
          const double* grow = go + i * n;
          for (int kk = 0; kk < k; ++kk) {
            const double av = pa2[i * k + kk];
            double* gbrow = gb + kk * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = make_output({n, m}, grad_wanted(a));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) (*out.data)[j * m + i] = (*a.data)[i * n + j];
  }
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, m, n] {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) (*a.grad)[i * n + j] += (*out.grad)[j * m + i];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int cols = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.dim(1);
    rg = rg || grad_wanted(p);
  }
  Tensor out = make_output({rows, cols}, rg);
  int off = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < pc; ++j) (*out.data)[i * cols + off + j] = (*p.data)[i * pc + j];
    }
    off += pc;
  }
  if (out.requires_grad) {
    Tape::active()->record(out, [parts, out, rows, cols] {
      int o = 0;
      for (const Tensor& p : parts) {
        const int pc = p.dim(1);
        if (p.grad) {
          for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < pc; ++j) (*p.grad)[i * pc + j] += (*out.grad)[i * cols + o + j];
          }
        }
        o += pc;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int offset, int length) {
  require_rank2(a, "slice_cols");
  const int rows = a.dim(0), cols = a.dim(1);
  if (offset < 0 || length <= 0 || offset + length > cols) {
    throw std::invalid_argument("slice_cols: invalid range");
  }
  Tensor out = make_output({rows, length}, grad_wanted(a));
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < length; ++j) (*out.data)[i * length + j] = (*a.data)[i * cols + offset + j];
  }
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, rows, cols, offset, length] {
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < length; ++j) {
          (*a.grad)[i * cols + offset + j] += (*out.grad)[i * length + j];
        }
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int offset, int length) {
  require_rank2(a, "slice_rows");
  const int rows = a.dim(0), cols = a.dim(1);
  if (offset < 0 || length <= 0 || offset + length > rows) {
    throw std::invalid_argument("slice_rows: invalid range");
  }
  Tensor out = make_output({length, cols}, grad_wanted(a));
  std::copy(a.data->begin() + static_cast<std::ptrdiff_t>(offset) * cols,
            a.data->begin() + static_cast<std::ptrdiff_t>(offset + length) * cols,
            out.data->begin());
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, cols, offset, length] {
      for (int i = 0; i < length; ++i) {
        for (int j = 0; j < cols; ++j) {
          (*a.grad)[(offset + i) * cols + j] += (*out.grad)[i * cols + j];
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
  require_rank2(a, "gather_rows");
  const int r = a.dim(0), cols = a.dim(1);
  for (int idx : rows) {
    if (idx < 0 || idx >= r) throw std::out_of_range("gather_rows: row index out of range");
  }
  Tensor out = make_output({static_cast<int>(rows.size()), cols}, grad_wanted(a));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(a.data->begin() + static_cast<std::ptrdiff_t>(rows[i]) * cols,
              a.data->begin() + static_cast<std::ptrdiff_t>(rows[i] + 1) * cols,
              out.data->begin() + static_cast<std::ptrdiff_t>(i) * cols);
  }
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, rows, cols] {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int j = 0; j < cols; ++j) {
          (*a.grad)[rows[i] * cols + j] += (*out.grad)[i * cols + j];
        }
      }
    });
  }
  return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
  if (a.rank() != static_cast<int>(target.size())) {
    throw std::invalid_argument("broadcast_to: rank mismatch");
  }
  for (int i = 0; i < a.rank(); ++i) {
    if (a.shape[static_cast<std::size_t>(i)] != target[static_cast<std::size_t>(i)] &&
        a.shape[static_cast<std::size_t>(i)] != 1) {
      throw std::invalid_argument("broadcast_to: only size-1 axes may expand, " +
                                  shape_str(a.shape) + " -> " + shape_str(target));
    }
  }
  Tensor out = make_output(target, grad_wanted(a));
  const int rank = a.rank();
  const std::int64_t n = out.numel();
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t src = 0;
    for (int ax = 0; ax < rank; ++ax) {
      const int sa = a.shape[static_cast<std::size_t>(ax)];
      src = src * sa + (sa == 1 ? 0 : idx[static_cast<std::size_t>(ax)]);
    }
    (*out.data)[static_cast<std::size_t>(flat)] = (*a.data)[static_cast<std::size_t>(src)];
    for (int ax = rank - 1; ax >= 0; --ax) {
      if (++idx[static_cast<std::size_t>(ax)] < target[static_cast<std::size_t>(ax)]) break;
      idx[static_cast<std::size_t>(ax)] = 0;
    }
  }
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, target, rank] {
      const std::int64_t m = out.numel();
      std::vector<int> ix(static_cast<std::size_t>(rank), 0);
      for (std::int64_t flat = 0; flat < m; ++flat) {
        std::int64_t src = 0;
        for (int ax = 0; ax < rank; ++ax) {
          const int sa = a.shape[static_cast<std::size_t>(ax)];
          src = src * sa + (sa == 1 ? 0 : ix[static_cast<std::size_t>(ax)]);
        }
        (*a.grad)[static_cast<std::size_t>(src)] += (*out.grad)[static_cast<std::size_t>(flat)];
        for (int ax = rank - 1; ax >= 0; --ax) {
          if (++ix[static_cast<std::size_t>(ax)] < target[static_cast<std::size_t>(ax)]) break;
          ix[static_cast<std::size_t>(ax)] = 0;
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_output({}, grad_wanted(a));
  double acc = 0.0;
  for (double v : *a.data) acc += v;
  (*out.data)[0] = acc;
  check_finite(*out.data, "sum");
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out] {
      const double g = (*out.grad)[0];
      for (double& gv : *a.grad) gv += g;
    });
  }
  return out;
}

Tensor max_axis0(const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("max_axis0: rank-0 input");
  const int n0 = a.dim(0);
  const std::int64_t inner = a.numel() / n0;
  Shape out_shape(a.shape.begin() + 1, a.shape.end());
  Tensor out = make_output(out_shape, grad_wanted(a));
  std::vector<int> argmax(static_cast<std::size_t>(inner), 0);
  for (std::int64_t j = 0; j < inner; ++j) {
    double best = (*a.data)[static_cast<std::size_t>(j)];
    int bi = 0;
    for (int i = 1; i < n0; ++i) {
      const double v = (*a.data)[static_cast<std::size_t>(i * inner + j)];
      if (v > best) {
        best = v;
        bi = i;
      }
    }
    (*out.data)[static_cast<std::size_t>(j)] = best;
    argmax[static_cast<std::size_t>(j)] = bi;
  }
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, argmax, inner] {
      for (std::int64_t j = 0; j < inner; ++j) {
        (*a.grad)[static_cast<std::size_t>(argmax[static_cast<std::size_t>(j)] * inner + j)] +=
            (*out.grad)[static_cast<std::size_t>(j)];
      }
    });
  }
  return out;
}

Tensor mean_axis0(const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("mean_axis0: rank-0 input");
  const int n0 = a.dim(0);
  const std::int64_t inner = a.numel() / n0;
  Shape out_shape(a.shape.begin() + 1, a.shape.end());
  Tensor out = make_output(out_shape, grad_wanted(a));
  const double inv = 1.0 / n0;
  for (int i = 0; i < n0; ++i) {
    for (std::int64_t j = 0; j < inner; ++j) {
      (*out.data)[static_cast<std::size_t>(j)] += (*a.data)[static_cast<std::size_t>(i * inner + j)] * inv;
    }
  }
  check_finite(*out.data, "mean_axis0");
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, n0, inner, inv] {
      for (int i = 0; i < n0; ++i) {
        for (std::int64_t j = 0; j < inner; ++j) {
          (*a.grad)[static_cast<std::size_t>(i * inner + j)] +=
              (*out.grad)[static_cast<std::size_t>(j)] * inv;
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(a.data->size());
  for (double& m : *mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = make_output(a.shape, grad_wanted(a));
  for (std::size_t i = 0; i < a.data->size(); ++i) (*out.data)[i] = (*a.data)[i] * (*mask)[i];
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, mask] {
      for (std::size_t i = 0; i < mask->size(); ++i) (*a.grad)[i] += (*out.grad)[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= std::max(1, a.rank())) {
    throw std::invalid_argument("softmax: axis out of range");
  }
  const int rank = std::max(1, a.rank());
  Shape shape = a.rank() == 0 ? Shape{1} : a.shape;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[static_cast<std::size_t>(i)];
  const int len = shape[static_cast<std::size_t>(axis)];

  Tensor out = make_output(a.shape, grad_wanted(a));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = (*a.data)[static_cast<std::size_t>(base)];
      for (int i = 1; i < len; ++i) {
        mx = std::max(mx, (*a.data)[static_cast<std::size_t>(base + i * inner)]);
      }
      double denom = 0.0;
      for (int i = 0; i < len; ++i) {
        const double e = std::exp((*a.data)[static_cast<std::size_t>(base + i * inner)] - mx);
        (*out.data)[static_cast<std::size_t>(base + i * inner)] = e;
        denom += e;
      }
      for (int i = 0; i < len; ++i) {
        (*out.data)[static_cast<std::size_t>(base + i * inner)] /= denom;
      }
    }
  }
  check_finite(*out.data, "softmax");
  if (out.requires_grad) {
    Tape::active()->record(out, [a, out, outer, inner, len] {
      // dx_i = y_i * (dy_i - sum_j dy_j y_j) per slice.
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * len * inner + in;
          double dot = 0.0;
          for (int i = 0; i < len; ++i) {
            const std::size_t k = static_cast<std::size_t>(base + i * inner);
            dot += (*out.grad)[k] * (*out.data)[k];
          }
          for (int i = 0; i < len; ++i) {
            const std::size_t k = static_cast<std::size_t>(base + i * inner);
            (*a.grad)[k] += (*out.data)[k] * ((*out.grad)[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (a.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const int len = a.shape.back();
  if (len <= 0) throw std::invalid_argument("layer_norm: zero-length last axis");
  if (gain.numel() != len || bias.numel() != len) {
    throw std::invalid_argument("layer_norm: gain/bias must match last axis");
  }
  const std::int64_t rows = a.numel() / len;
  Tensor out = make_output(a.shape, grad_wanted(a) || grad_wanted(gain) || grad_wanted(bias));
  auto norm = std::make_shared<std::vector<double>>(a.data->size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = a.data->data() + r * len;
    double mean = 0.0;
    for (int i = 0; i < len; ++i) mean += x[i];
    mean /= len;
    double var = 0.0;
    for (int i = 0; i < len; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= len;
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    for (int i = 0; i < len; ++i) {
      const double h = (x[i] - mean) * istd;
      (*norm)[static_cast<std::size_t>(r * len + i)] = h;
      (*out.data)[static_cast<std::size_t>(r * len + i)] = h * (*gain.data)[static_cast<std::size_t>(i)] +
                                                           (*bias.data)[static_cast<std::size_t>(i)];
    }
  }
  check_finite(*out.data, "layer_norm");
  if (out.requires_grad) {
    Tape::active()->record(out, [a, gain, bias, out, norm, inv_std, rows, len] {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double istd = (*inv_std)[static_cast<std::size_t>(r)];
        double mean_gd = 0.0, mean_gdh = 0.0;
        for (int i = 0; i < len; ++i) {
          const std::size_t k = static_cast<std::size_t>(r * len + i);
          const double gd = (*out.grad)[k] * (*gain.data)[static_cast<std::size_t>(i)];
          mean_gd += gd;
          mean_gdh += gd * (*norm)[k];
        }
        mean_gd /= len;
        mean_gdh /= len;
        for (int i = 0; i < len; ++i) {
          const std::size_t k = static_cast<std::size_t>(r * len + i);
          const double gd = (*out.grad)[k] * (*gain.data)[static_cast<std::size_t>(i)];
          if (a.grad) (*a.grad)[k] += istd * (gd - mean_gd - (*norm)[k] * mean_gdh);
          if (gain.grad) (*gain.grad)[static_cast<std::size_t>(i)] += (*out.grad)[k] * (*norm)[k];
          if (bias.grad) (*bias.grad)[static_cast<std::size_t>(i)] += (*out.grad)[k];
        }
      }
    });
  }
  return out;
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                  double eps) {
  if (eps < 1e-7 || eps > 1e-4) throw std::invalid_argument("grad_check: eps out of [1e-7, 1e-4]");
  std::vector<std::vector<double>> analytic;
  {
    for (const Tensor& t : inputs) {
      if (!t.requires_grad) throw std::invalid_argument("grad_check: input does not require grad");
      const_cast<Tensor&>(t).zero_grad();
    }
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    for (const Tensor& t : inputs) analytic.push_back(*t.grad);
  }
  double max_err = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    const Tensor& t = inputs[ti];
    for (std::size_t i = 0; i < t.data->size(); ++i) {
      const double saved = (*t.data)[i];
      (*t.data)[i] = saved + eps;
      const double fp = f().value();
      (*t.data)[i] = saved - eps;
      const double fm = f().value();
      (*t.data)[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("grad_check: non-finite finite-difference probe");
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[ti][i];
      const double err = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace lcdet

#include "cogs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "cogs/error.hpp"
#include "cogs/kernels.hpp"

namespace cogs::ag {

namespace {

thread_local bool g_grad_enabled = true;
thread_local SgTape* g_tape = nullptr;

using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

// Wraps a freshly computed value into a node, wiring the graph only if
// something upstream needs a gradient.
Tensor make(Shape shape, std::vector<double> value,
            std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || (t->defined() && t->requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) node->inputs.push_back(t->defined() ? t->ptr() : nullptr);
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_vec(Shape shape, std::vector<double> value,
                const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->inputs.push_back(t.ptr());
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input i, or null when that input needs none.
double* in_grad(Node& self, size_t i) {
  Node* n = self.inputs[i].get();
  if (n == nullptr || !n->requires_grad) return nullptr;
  return n->grad_buffer().data();
}

const std::vector<double>& in_value(Node& self, size_t i) {
  return self.inputs[i]->value;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  COGS_CHECK(a.shape() == b.shape(), ErrorKind::kShape,
             std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
}

void check_rank(const Tensor& a, int rank, const char* op) {
  COGS_CHECK(a.rank() == rank, ErrorKind::kShape,
             std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                 shape_str(a.shape()));
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D df) {
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make(a.shape(), std::move(out), {&a}, [df](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    const auto& x = in_value(self, 0);
    for (size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

size_t numel_of(const Shape& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel_of(shape), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  COGS_CHECK(values.size() == numel_of(shape), ErrorKind::kShape,
             "Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                 shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

int Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  COGS_CHECK(i >= 0 && i < r, ErrorKind::kShape, "Tensor::dim out of range");
  return node_->shape[i];
}

double Tensor::item() const {
  COGS_CHECK(numel() == 1, ErrorKind::kShape, "item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

std::span<const double> Tensor::grad() const {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

void Tensor::backward() const {
  COGS_CHECK(numel() == 1, ErrorKind::kShape, "backward() requires a scalar");
  if (!node_->requires_grad) return;
  // Iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node* child = n->inputs[idx++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->grad_buffer();
      n->backward_fn(*n);
    }
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void SgTape::set_mode(Mode mode) {
  mode_ = mode;
  value_pos_ = 0;
  choice_pos_ = 0;
}

std::vector<double> SgTape::filter(std::vector<double> values) {
  if (mode_ == Mode::kRecord) {
    values_.push_back(values);
    return values;
  }
  COGS_CHECK(value_pos_ < values_.size() && values_[value_pos_].size() == values.size(),
             ErrorKind::kShape, "SgTape replay out of sync");
  return values_[value_pos_++];
}

void SgTape::filter_choices(std::vector<int32_t>& choices) {
  if (mode_ == Mode::kRecord) {
    choices_.push_back(choices);
    return;
  }
  COGS_CHECK(choice_pos_ < choices_.size() && choices_[choice_pos_].size() == choices.size(),
             ErrorKind::kShape, "SgTape replay out of sync");
  choices = choices_[choice_pos_++];
}

SgTapeScope::SgTapeScope(SgTape* tape) : prev_(g_tape) { g_tape = tape; }
SgTapeScope::~SgTapeScope() { g_tape = prev_; }
SgTape* active_tape() { return g_tape; }

void tape_choices(std::vector<int32_t>& choices) {
  if (g_tape) g_tape->filter_choices(choices);
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (size_t k = 0; k < 2; ++k)
      if (double* g = in_grad(self, k))
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = in_grad(self, 1))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& x = in_value(self, 0);
    const auto& y = in_value(self, 1);
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    if (double* g = in_grad(self, 1))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = kGeluC * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor stop_gradient(const Tensor& a) {
  std::vector<double> v = a.values();
  if (g_tape) v = g_tape->filter(std::move(v));
  return Tensor::from(a.shape(), std::move(v), false);
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make({1}, {acc}, {&a}, [](Node& self) {
    if (double* g = in_grad(self, 0)) {
      const size_t n = self.inputs[0]->value.size();
      for (size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  COGS_CHECK(a.numel() > 0, ErrorKind::kShape, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor row_sum(const Tensor& x) {
  check_rank(x, 2, "row_sum");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r, 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[i] += x.values()[size_t(i) * c + j];
  return make({r}, std::move(out), {&x}, [r, c](Node& self) {
    if (double* g = in_grad(self, 0))
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) g[size_t(i) * c + j] += self.grad[i];
  });
}

Tensor gaussian_kl(const Tensor& mu, const Tensor& log_sigma) {
  check_same_shape(mu, log_sigma, "gaussian_kl");
  check_rank(mu, 2, "gaussian_kl");
  const int rows = mu.dim(0);
  double acc = 0.0;
  const auto& m = mu.values();
  const auto& ls = log_sigma.values();
  for (size_t i = 0; i < m.size(); ++i)
    acc += 0.5 * (m[i] * m[i] + std::exp(2.0 * ls[i]) - 1.0 - 2.0 * ls[i]);
  return make({1}, {acc / rows}, {&mu, &log_sigma}, [rows](Node& self) {
    const auto& m = in_value(self, 0);
    const auto& ls = in_value(self, 1);
    const double g0 = self.grad[0] / rows;
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < m.size(); ++i) g[i] += g0 * m[i];
    if (double* g = in_grad(self, 1))
      for (size_t i = 0; i < ls.size(); ++i) g[i] += g0 * (std::exp(2.0 * ls[i]) - 1.0);
  });
}

// ---------------------------------------------------------------- shape

Tensor add_row(const Tensor& x, const Tensor& b) {
  check_rank(x, 2, "add_row");
  const int r = x.dim(0), c = x.dim(1);
  COGS_CHECK(b.numel() == size_t(c), ErrorKind::kShape, "add_row: bias size mismatch");
  std::vector<double> out = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[size_t(i) * c + j] += b.values()[j];
  return make(x.shape(), std::move(out), {&x, &b}, [r, c](Node& self) {
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = in_grad(self, 1))
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) g[j] += self.grad[size_t(i) * c + j];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  COGS_CHECK(numel_of(shape) == x.numel(), ErrorKind::kShape,
             "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make(std::move(shape), x.values(), {&x}, [](Node& self) {
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& x, int start, int count) {
  COGS_CHECK(x.rank() >= 1 && start >= 0 && count >= 0 && start + count <= x.dim(0),
             ErrorKind::kShape, "slice_rows out of range");
  const size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  std::vector<double> out(x.values().begin() + start * row,
                          x.values().begin() + (start + count) * row);
  return make(std::move(shape), std::move(out), {&x}, [start, row](Node& self) {
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) g[start * row + i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  COGS_CHECK(!parts.empty(), ErrorKind::kShape, "concat_rows of nothing");
  Shape shape = parts[0].shape();
  int rows = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    COGS_CHECK(p.rank() == int(shape.size()) &&
                   std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1),
               ErrorKind::kShape, "concat_rows: trailing shape mismatch");
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  shape[0] = rows;
  return make_vec(std::move(shape), std::move(out), parts, [](Node& self) {
    size_t offset = 0;
    for (size_t k = 0; k < self.inputs.size(); ++k) {
      const size_t n = self.inputs[k]->value.size();
      if (double* g = in_grad(self, k))
        for (size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      offset += n;
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids) {
  check_rank(table, 2, "gather_rows");
  const int v = table.dim(0), d = table.dim(1);
  std::vector<int32_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (size_t i = 0; i < idx.size(); ++i) {
    COGS_CHECK(idx[i] >= 0 && idx[i] < v, ErrorKind::kRange,
               "gather_rows: index " + std::to_string(idx[i]) + " outside [0," +
                   std::to_string(v) + ")");
    std::copy_n(table.values().begin() + size_t(idx[i]) * d, d, out.begin() + i * d);
  }
  const int n = static_cast<int>(idx.size());
  return make({n, d}, std::move(out), {&table}, [idx = std::move(idx), d](Node& self) {
    if (double* g = in_grad(self, 0))
      for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j) g[size_t(idx[i]) * d + j] += self.grad[i * d + j];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  COGS_CHECK(!parts.empty(), ErrorKind::kShape, "concat_cols of nothing");
  const int r = parts[0].dim(0);
  std::vector<int> widths;
  int total = 0;
  for (const Tensor& p : parts) {
    check_rank(p, 2, "concat_cols");
    COGS_CHECK(p.dim(0) == r, ErrorKind::kShape, "concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(size_t(r) * total);
  int offset = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    for (int i = 0; i < r; ++i)
      std::copy_n(parts[k].values().begin() + size_t(i) * widths[k], widths[k],
                  out.begin() + size_t(i) * total + offset);
    offset += widths[k];
  }
  return make_vec({r, total}, std::move(out), parts, [r, total, widths](Node& self) {
    int offset = 0;
    for (size_t k = 0; k < widths.size(); ++k) {
      if (double* g = in_grad(self, k))
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < widths[k]; ++j) g[size_t(i) * widths[k] + j] += self.grad[size_t(i) * total + offset + j];
      offset += widths[k];
    }
  });
}

Tensor replicate_channels(const Tensor& x, int c) {
  check_rank(x, 4, "replicate_channels");
  COGS_CHECK(x.dim(1) == 1, ErrorKind::kShape, "replicate_channels expects one channel");
  const int B = x.dim(0);
  const size_t plane = size_t(x.dim(2)) * x.dim(3);
  std::vector<double> out(x.numel() * c);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < c; ++k)
      std::copy_n(x.values().begin() + b * plane, plane, out.begin() + (size_t(b) * c + k) * plane);
  return make({B, c, x.dim(2), x.dim(3)}, std::move(out), {&x}, [B, c, plane](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < c; ++k)
        for (size_t i = 0; i < plane; ++i) g[b * plane + i] += self.grad[(size_t(b) * c + k) * plane + i];
  });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const int m = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int kb = tb ? b.dim(1) : b.dim(0);
  const int n = tb ? b.dim(0) : b.dim(1);
  COGS_CHECK(k == kb, ErrorKind::kShape,
             "matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(size_t(m) * n);
  kernels::gemm(ta, tb, m, n, k, a.values().data(), b.values().data(), out.data());
  return make({m, n}, std::move(out), {&a, &b}, [m, n, k, ta, tb](Node& self) {
    const double* dc = self.grad.data();
    const double* A = self.inputs[0]->value.data();
    const double* B = self.inputs[1]->value.data();
    if (double* ga = in_grad(self, 0)) {
      if (!ta)
        kernels::gemm(false, !tb, m, k, n, dc, B, ga, true);
      else
        kernels::gemm(tb, true, k, m, n, B, dc, ga, true);
    }
    if (double* gb = in_grad(self, 1)) {
      if (!tb)
        kernels::gemm(!ta, false, k, n, m, A, dc, gb, true);
      else
        kernels::gemm(true, ta, n, k, m, dc, A, gb, true);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_row(y, b) : y;
}

// ---------------------------------------------------------------- neural net

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_rank(x, 2, "layer_norm");
  const int r = x.dim(0), c = x.dim(1);
  COGS_CHECK(gamma.numel() == size_t(c) && beta.numel() == size_t(c), ErrorKind::kShape,
             "layer_norm: affine size mismatch");
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(r);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i) {
    const double* row = xv.data() + size_t(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      const size_t idx = size_t(i) * c + j;
      xhat[idx] = (row[j] - mu) * inv_std[i];
      out[idx] = xhat[idx] * gamma.values()[j] + beta.values()[j];
    }
  }
  return make(x.shape(), std::move(out), {&x, &gamma, &beta},
              [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                const auto& gam = in_value(self, 1);
                double* gx = in_grad(self, 0);
                double* gg = in_grad(self, 1);
                double* gb = in_grad(self, 2);
                std::vector<double> dxhat(c);
                for (int i = 0; i < r; ++i) {
                  const double* dy = self.grad.data() + size_t(i) * c;
                  const double* xh = xhat.data() + size_t(i) * c;
                  double m1 = 0.0, m2 = 0.0;
                  for (int j = 0; j < c; ++j) {
                    if (gg) gg[j] += dy[j] * xh[j];
                    if (gb) gb[j] += dy[j];
                    dxhat[j] = dy[j] * gam[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xh[j];
                  }
                  if (!gx) continue;
                  m1 /= c;
                  m2 /= c;
                  for (int j = 0; j < c; ++j)
                    gx[size_t(i) * c + j] += inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                }
              });
}

Tensor softmax_rows(const Tensor& x) {
  check_rank(x, 2, "softmax_rows");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  for (int i = 0; i < r; ++i) {
    const double* row = x.values().data() + size_t(i) * c;
    double* o = out.data() + size_t(i) * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (int j = 0; j < c; ++j) o[j] /= z;
  }
  return make(x.shape(), std::move(out), {&x}, [r, c](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int i = 0; i < r; ++i) {
      const double* y = self.value.data() + size_t(i) * c;
      const double* dy = self.grad.data() + size_t(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (int j = 0; j < c; ++j) g[size_t(i) * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     bool exclude_diagonal) {
  check_rank(logits, 2, "cross_entropy");
  const int r = logits.dim(0), c = logits.dim(1);
  COGS_CHECK(targets.size() == size_t(r), ErrorKind::kShape, "cross_entropy: target count");
  COGS_CHECK(!exclude_diagonal || r == c, ErrorKind::kShape,
             "cross_entropy: diagonal exclusion needs a square matrix");
  std::vector<double> probs(logits.numel(), 0.0);
  std::vector<int32_t> tgt(targets.begin(), targets.end());
  double loss = 0.0;
  for (int i = 0; i < r; ++i) {
    COGS_CHECK(tgt[i] >= 0 && tgt[i] < c && !(exclude_diagonal && tgt[i] == i),
               ErrorKind::kRange, "cross_entropy: bad target");
    const double* row = logits.values().data() + size_t(i) * c;
    double* p = probs.data() + size_t(i) * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j)
      if (!(exclude_diagonal && j == i)) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j)
      if (!(exclude_diagonal && j == i)) z += (p[j] = std::exp(row[j] - mx));
    for (int j = 0; j < c; ++j) p[j] /= z;
    loss += -(row[tgt[i]] - mx - std::log(z));
  }
  return make({1}, {loss / r}, {&logits},
              [r, c, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                double* g = in_grad(self, 0);
                if (!g) return;
                const double s = self.grad[0] / r;
                for (int i = 0; i < r; ++i) {
                  for (int j = 0; j < c; ++j) g[size_t(i) * c + j] += s * probs[size_t(i) * c + j];
                  g[size_t(i) * c + tgt[i]] -= s;
                }
              });
}

Tensor attention(const Tensor& qkv, int n_seq, int seq_len, int heads, int visible_prefix) {
  check_rank(qkv, 2, "attention");
  COGS_CHECK(qkv.dim(0) == n_seq * seq_len && qkv.dim(1) % (3 * heads) == 0,
             ErrorKind::kShape, "attention: bad qkv shape " + shape_str(qkv.shape()));
  const int d = qkv.dim(1) / 3;
  const int dh = d / heads;
  const int T = seq_len;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& in = qkv.values();
  std::vector<double> out(size_t(n_seq) * T * d, 0.0);
  // Attention weights per (sequence, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(size_t(n_seq) * heads * T * T, 0.0);

  auto visible = [visible_prefix](int i, int j) { return j < visible_prefix || j <= i; };
  auto extract = [&](const std::vector<double>& src, int s, int part, int h, std::vector<double>& dst) {
    for (int t = 0; t < T; ++t)
      for (int e = 0; e < dh; ++e)
        dst[size_t(t) * dh + e] = src[(size_t(s) * T + t) * 3 * d + part * d + h * dh + e];
  };

  std::vector<double> q(size_t(T) * dh), k(q.size()), v(q.size()), o(q.size()), sc_buf(size_t(T) * T);
  for (int s = 0; s < n_seq; ++s)
    for (int h = 0; h < heads; ++h) {
      extract(in, s, 0, h, q);
      extract(in, s, 1, h, k);
      extract(in, s, 2, h, v);
      kernels::gemm(false, true, T, T, dh, q.data(), k.data(), sc_buf.data());
      double* P = probs->data() + (size_t(s) * heads + h) * T * T;
      for (int i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < T; ++j)
          if (visible(i, j)) mx = std::max(mx, sc_buf[size_t(i) * T + j] * sc);
        double z = 0.0;
        for (int j = 0; j < T; ++j)
          if (visible(i, j)) z += (P[size_t(i) * T + j] = std::exp(sc_buf[size_t(i) * T + j] * sc - mx));
        for (int j = 0; j < T; ++j) P[size_t(i) * T + j] /= z;
      }
      kernels::gemm(false, false, T, dh, T, P, v.data(), o.data());
      for (int t = 0; t < T; ++t)
        for (int e = 0; e < dh; ++e) out[(size_t(s) * T + t) * d + h * dh + e] = o[size_t(t) * dh + e];
    }

  return make({n_seq * T, d}, std::move(out), {&qkv},
              [=](Node& self) {
                double* g = in_grad(self, 0);
                if (!g) return;
                const auto& in = self.inputs[0]->value;
                std::vector<double> q(size_t(T) * dh), k(q.size()), v(q.size()), dO(q.size());
                std::vector<double> dP(size_t(T) * T), dq(q.size()), dk(q.size()), dv(q.size());
                auto extract_local = [&](int s, int part, int h, std::vector<double>& dst) {
                  for (int t = 0; t < T; ++t)
                    for (int e = 0; e < dh; ++e)
                      dst[size_t(t) * dh + e] = in[(size_t(s) * T + t) * 3 * d + part * d + h * dh + e];
                };
                for (int s = 0; s < n_seq; ++s)
                  for (int h = 0; h < heads; ++h) {
                    extract_local(s, 0, h, q);
                    extract_local(s, 1, h, k);
                    extract_local(s, 2, h, v);
                    for (int t = 0; t < T; ++t)
                      for (int e = 0; e < dh; ++e)
                        dO[size_t(t) * dh + e] = self.grad[(size_t(s) * T + t) * d + h * dh + e];
                    const double* P = probs->data() + (size_t(s) * heads + h) * T * T;
                    // dV = P^T dO ; dP = dO V^T
                    kernels::gemm(true, false, T, dh, T, P, dO.data(), dv.data());
                    kernels::gemm(false, true, T, T, dh, dO.data(), v.data(), dP.data());
                    // dS = P * (dP - rowsum(P * dP)), scaled
                    for (int i = 0; i < T; ++i) {
                      double dot = 0.0;
                      for (int j = 0; j < T; ++j) dot += P[size_t(i) * T + j] * dP[size_t(i) * T + j];
                      for (int j = 0; j < T; ++j)
                        dP[size_t(i) * T + j] = P[size_t(i) * T + j] * (dP[size_t(i) * T + j] - dot) * sc;
                    }
                    kernels::gemm(false, false, T, dh, T, dP.data(), k.data(), dq.data());
                    kernels::gemm(true, false, T, dh, T, dP.data(), q.data(), dk.data());
                    for (int t = 0; t < T; ++t)
                      for (int e = 0; e < dh; ++e) {
                        const size_t base = (size_t(s) * T + t) * 3 * d + h * dh + e;
                        g[base] += dq[size_t(t) * dh + e];
                        g[base + d] += dk[size_t(t) * dh + e];
                        g[base + 2 * d] += dv[size_t(t) * dh + e];
                      }
                  }
              });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check_rank(x, 4, "conv2d");
  check_rank(w, 4, "conv2d");
  COGS_CHECK(w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3), ErrorKind::kShape,
             "conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  kernels::ConvShape s;
  s.batch = x.dim(0);
  s.in_channels = x.dim(1);
  s.height = x.dim(2);
  s.width = x.dim(3);
  s.out_channels = w.dim(0);
  s.kernel = w.dim(2);
  s.stride = stride;
  s.pad = pad;
  COGS_CHECK(s.out_height() > 0 && s.out_width() > 0, ErrorKind::kShape, "conv2d: empty output");
  std::vector<double> out(size_t(s.batch) * s.out_channels * s.out_height() * s.out_width());
  kernels::conv2d_forward(x.values().data(), w.values().data(),
                          b.defined() ? b.values().data() : nullptr, s, out.data());
  return make({s.batch, s.out_channels, s.out_height(), s.out_width()}, std::move(out), {&x, &w, &b},
              [s](Node& self) {
                kernels::conv2d_backward(self.inputs[0]->value.data(), self.inputs[1]->value.data(),
                                         self.grad.data(), s, in_grad(self, 0), in_grad(self, 1),
                                         in_grad(self, 2));
              });
}

Tensor upsample2x(const Tensor& x) {
  check_rank(x, 4, "upsample2x");
  const int bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(x.numel() * 4);
  for (int p = 0; p < bc; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(size_t(p) * 2 * h + y) * 2 * w + xx] = x.values()[(size_t(p) * h + y / 2) * w + xx / 2];
  return make({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {&x}, [bc, h, w](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int p = 0; p < bc; ++p)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          g[(size_t(p) * h + y / 2) * w + xx / 2] += self.grad[(size_t(p) * 2 * h + y) * 2 * w + xx];
  });
}

Tensor nchw_to_cells(const Tensor& x) {
  check_rank(x, 4, "nchw_to_cells");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p)
        out[(size_t(b) * HW + p) * C + c] = x.values()[(size_t(b) * C + c) * HW + p];
  return make({B * HW, C}, std::move(out), {&x}, [B, C, HW](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < HW; ++p)
          g[(size_t(b) * C + c) * HW + p] += self.grad[(size_t(b) * HW + p) * C + c];
  });
}

Tensor cells_to_nchw(const Tensor& x, int batch, int height, int width) {
  check_rank(x, 2, "cells_to_nchw");
  const int HW = height * width, C = x.dim(1);
  COGS_CHECK(x.dim(0) == batch * HW, ErrorKind::kShape, "cells_to_nchw: row count");
  std::vector<double> out(x.numel());
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p)
        out[(size_t(b) * C + c) * HW + p] = x.values()[(size_t(b) * HW + p) * C + c];
  return make({batch, C, height, width}, std::move(out), {&x}, [batch, C, HW](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int b = 0; b < batch; ++b)
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < HW; ++p)
          g[(size_t(b) * HW + p) * C + c] += self.grad[(size_t(b) * C + c) * HW + p];
  });
}

Tensor channel_mean_std(const Tensor& x, double eps) {
  check_rank(x, 4, "channel_mean_std");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(size_t(B) * 2 * C);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* p = x.values().data() + (size_t(b) * C + c) * HW;
      double mu = 0.0;
      for (int i = 0; i < HW; ++i) mu += p[i];
      mu /= HW;
      double var = 0.0;
      for (int i = 0; i < HW; ++i) var += (p[i] - mu) * (p[i] - mu);
      var /= HW;
      out[size_t(b) * 2 * C + c] = mu;
      out[size_t(b) * 2 * C + C + c] = std::sqrt(var + eps);
    }
  return make({B, 2 * C}, std::move(out), {&x}, [B, C, HW](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    const auto& xv = self.inputs[0]->value;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* p = xv.data() + (size_t(b) * C + c) * HW;
        const double mu = self.value[size_t(b) * 2 * C + c];
        const double sd = self.value[size_t(b) * 2 * C + C + c];
        const double gm = self.grad[size_t(b) * 2 * C + c];
        const double gs = self.grad[size_t(b) * 2 * C + C + c];
        double* gp = g + (size_t(b) * C + c) * HW;
        for (int i = 0; i < HW; ++i) gp[i] += gm / HW + gs * (p[i] - mu) / (HW * sd);
      }
  });
}

Tensor region_mean(const Tensor& x, int grid) {
  check_rank(x, 4, "region_mean");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  COGS_CHECK(grid > 0 && H % grid == 0 && W % grid == 0, ErrorKind::kShape,
             "region_mean: grid must divide the spatial size");
  const int rh = H / grid, rw = W / grid;
  const double inv = 1.0 / (rh * rw);
  std::vector<double> out(size_t(B) * C * grid * grid, 0.0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          out[((size_t(b) * C + c) * grid + y / rh) * grid + xx / rw] +=
              x.values()[((size_t(b) * C + c) * H + y) * W + xx] * inv;
  return make({B, C * grid * grid}, std::move(out), {&x}, [=](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx)
            g[((size_t(b) * C + c) * H + y) * W + xx] +=
                self.grad[((size_t(b) * C + c) * grid + y / rh) * grid + xx / rw] * inv;
  });
}

Tensor soft_histogram(const Tensor& x, int bins, double bandwidth) {
  check_rank(x, 4, "soft_histogram");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const double inv_bw2 = 1.0 / (bandwidth * bandwidth);
  std::vector<double> centers(bins);
  for (int k = 0; k < bins; ++k) centers[k] = (k + 0.5) / bins;
  auto assign = [centers, bins, inv_bw2](double v, double* r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < bins; ++k) {
      r[k] = -0.5 * (v - centers[k]) * (v - centers[k]) * inv_bw2;
      mx = std::max(mx, r[k]);
    }
    double z = 0.0;
    for (int k = 0; k < bins; ++k) z += (r[k] = std::exp(r[k] - mx));
    for (int k = 0; k < bins; ++k) r[k] /= z;
  };
  std::vector<double> out(size_t(B) * C * bins, 0.0), r(bins);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double* h = out.data() + (size_t(b) * C + c) * bins;
      const double* p = x.values().data() + (size_t(b) * C + c) * HW;
      for (int i = 0; i < HW; ++i) {
        assign(p[i], r.data());
        for (int k = 0; k < bins; ++k) h[k] += r[k] / HW;
      }
    }
  return make({B, C * bins}, std::move(out), {&x}, [=](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    std::vector<double> r(bins);
    const auto& xv = self.inputs[0]->value;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* gh = self.grad.data() + (size_t(b) * C + c) * bins;
        for (int i = 0; i < HW; ++i) {
          const size_t idx = (size_t(b) * C + c) * HW + i;
          const double v = xv[idx];
          assign(v, r.data());
          // d r_k / dv = r_k (s_k - sum_j r_j s_j), s_k = -(v - c_k) / bw^2
          double mean_s = 0.0;
          for (int k = 0; k < bins; ++k) mean_s += r[k] * (-(v - centers[k]) * inv_bw2);
          double acc = 0.0;
          for (int k = 0; k < bins; ++k)
            acc += gh[k] * r[k] * (-(v - centers[k]) * inv_bw2 - mean_s);
          g[idx] += acc / HW;
        }
      }
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  check_rank(x, 2, "l2_normalize_rows");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel()), norms(r);
  for (int i = 0; i < r; ++i) {
    const double* row = x.values().data() + size_t(i) * c;
    double ss = 0.0;
    for (int j = 0; j < c; ++j) ss += row[j] * row[j];
    norms[i] = std::sqrt(ss + eps);
    for (int j = 0; j < c; ++j) out[size_t(i) * c + j] = row[j] / norms[i];
  }
  return make(x.shape(), std::move(out), {&x}, [r, c, norms = std::move(norms)](Node& self) {
    double* g = in_grad(self, 0);
    if (!g) return;
    for (int i = 0; i < r; ++i) {
      const double* y = self.value.data() + size_t(i) * c;
      const double* dy = self.grad.data() + size_t(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (int j = 0; j < c; ++j) g[size_t(i) * c + j] += (dy[j] - y[j] * dot) / norms[i];
    }
  });
}

}  // namespace cogs::ag

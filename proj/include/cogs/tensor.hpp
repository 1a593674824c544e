#pragma once

// Minimal reverse-mode autodiff over dense float64 tensors.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward closure only when grad mode is on and some input requires a
// gradient, so inference builds no graph.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cogs::ag {

using Shape = std::vector<int>;

size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  size_t numel() const { return node_->value.size(); }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  std::span<const double> grad() const;
  void zero_grad();

  // Backpropagates from a single-element tensor.
  void backward() const;

  // Same values, no graph history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Records the values produced by stop_gradient (and any discrete choices made
// alongside them) so a later evaluation can replay them. Finite-difference
// checks use this to differentiate the surrogate the backward pass actually
// computes: sg(.) terms and argmin/argmax decisions held fixed.
class SgTape {
 public:
  enum class Mode { kRecord, kReplay };

  void set_mode(Mode mode);
  Mode mode() const { return mode_; }

  std::vector<double> filter(std::vector<double> values);
  void filter_choices(std::vector<int32_t>& choices);

 private:
  Mode mode_ = Mode::kRecord;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<int32_t>> choices_;
  size_t value_pos_ = 0;
  size_t choice_pos_ = 0;
};

class SgTapeScope {
 public:
  explicit SgTapeScope(SgTape* tape);
  ~SgTapeScope();
  SgTapeScope(const SgTapeScope&) = delete;
  SgTapeScope& operator=(const SgTapeScope&) = delete;

 private:
  SgTape* prev_;
};

SgTape* active_tape();
// Passes discrete decisions through the active tape, if any.
void tape_choices(std::vector<int32_t>& choices);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor stop_gradient(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// x[R,C] -> [R]
Tensor row_sum(const Tensor& x);
// 0.5 * sum over rows of (mu^2 + exp(2 log_sigma) - 1 - 2 log_sigma), averaged
// over rows. x[R,d] each.
Tensor gaussian_kl(const Tensor& mu, const Tensor& log_sigma);

// ---- broadcasting / shape ----
// x[R,C] + b[C]
Tensor add_row(const Tensor& x, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);
// Rows of x viewed as [R, numel/R].
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids);
// Concatenates [R, c_i] tensors along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);
// x[B,1,H,W] -> [B,c,H,W]
Tensor replicate_channels(const Tensor& x, int c);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
// x[R,in] * w[in,out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- neural net ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor softmax_rows(const Tensor& x);
// Mean over rows of -log softmax(logits)[r, target[r]]. With exclude_diagonal
// the square logit matrix drops column r from row r's normalizer.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     bool exclude_diagonal = false);
// qkv[n_seq*seq_len, 3*d] packed as (q | k | v). Row i of a sequence attends to
// key j when j < visible_prefix or j <= i.
Tensor attention(const Tensor& qkv, int n_seq, int seq_len, int heads,
                 int visible_prefix);
// x[B,C,H,W], w[O,C,k,k], b[O]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);
Tensor upsample2x(const Tensor& x);
// x[B,C,H,W] -> [B*H*W, C]
Tensor nchw_to_cells(const Tensor& x);
// x[B*H*W, C] -> [B,C,H,W]
Tensor cells_to_nchw(const Tensor& x, int batch, int height, int width);
// x[B,C,H,W] -> [B, 2C]: per-channel spatial means then stddevs.
Tensor channel_mean_std(const Tensor& x, double eps = 1e-6);
// x[B,C,H,W] -> [B, C*g*g] averages over a g x g grid of regions.
Tensor region_mean(const Tensor& x, int grid);
// x[B,C,H,W] in [0,1] -> [B, C*bins]; per-pixel Gaussian soft assignment to
// bin centers, normalized per pixel, averaged over pixels.
Tensor soft_histogram(const Tensor& x, int bins, double bandwidth);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

}  // namespace cogs::ag

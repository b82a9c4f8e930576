#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

// Dense 64-bit tensors with a recording tape for reverse-mode
// differentiation. Ops record themselves on the thread's active
// ComputationRecord (if any); without an active record they are plain
// numeric functions, which is what evaluation rollouts use.

namespace dtlab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class ComputationRecord;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  // Gaussian init, normal(0, stddev).
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev);

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(shape_); }
  // 2-D helpers; a 1-D tensor counts as a single row.
  int64_t rows() const;
  int64_t cols() const;

  bool defined() const { return static_cast<bool>(data_); }
  std::vector<double>& data();
  const std::vector<double>& data() const;
  const std::shared_ptr<std::vector<double>>& storage() const { return data_; }
  double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double& at(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  // Scalar extraction; throws unless numel() == 1.
  double value() const;

  bool requires_grad() const { return static_cast<bool>(grad_); }
  Tensor& set_requires_grad(bool on);
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  const std::shared_ptr<std::vector<double>>& grad_storage() const { return grad_; }
  void zero_grad();

  // Tape bookkeeping. A node handle is only meaningful while the record
  // generation matches; tensors from a stale record act as constants.
  int64_t node = -1;
  uint64_t record_generation = 0;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
};

// Ordered named parameter registry shared by models, the optimizer and
// checkpoint IO. Tensors are stored by value but share storage, so
// in-place updates through the store are visible to the model.
class ParamStore {
 public:
  // Registers a parameter; the caller's tensor and the stored copy
  // share data and gradient buffers.
  Tensor& add(const std::string& name, Tensor& t);
  Tensor& add(const std::string& name, Tensor&& t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t total_params() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Reverse-mode tape. Nodes are appended in forward order; backward()
// replays them once in reverse. Single-threaded by construction.
class ComputationRecord {
 public:
  ComputationRecord();
  ComputationRecord(const ComputationRecord&) = delete;
  ComputationRecord& operator=(const ComputationRecord&) = delete;

  // Drops all nodes and re-arms backward(); invalidates node handles of
  // tensors produced under the previous generation.
  void reset();

  size_t size() const { return nodes_.size(); }
  uint64_t generation() const { return generation_; }
  bool consumed() const { return used_; }

  // Reverse accumulation from a scalar loss. Populates .grad() of every
  // requires_grad leaf reachable from the loss. A record can run
  // backward once; reset() re-arms it.
  void backward(const Tensor& loss);

  // Gradient of any tensor tracked on this record during the last
  // backward(); zeros if the tensor was not reached.
  Tensor grad_of(const Tensor& t) const;

  // --- op-internal API ---
  // Node id for an input tensor: existing node, a fresh leaf for
  // requires_grad tensors, or -1 for plain constants.
  int64_t track_input(const Tensor& t);
  int64_t emit(const Shape& out_shape,
               std::function<void(ComputationRecord&, const std::vector<double>&)> backprop);
  void accumulate(int64_t node_id, const std::vector<double>& g);
  void accumulate_scaled(int64_t node_id, const double* g, int64_t n, double scale);
  const std::vector<double>* node_grad(int64_t node_id) const;

 private:
  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> leaf_grad;  // set on leaves only
    std::function<void(ComputationRecord&, const std::vector<double>&)> backprop;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const void*, int64_t> leaf_ids_;
  bool used_ = false;
  uint64_t generation_ = 0;
};

// RAII scope installing a record as the thread's active tape.
class RecordScope {
 public:
  explicit RecordScope(ComputationRecord& rec);
  ~RecordScope();
  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;

 private:
  ComputationRecord* prev_;
};

ComputationRecord* active_record();

// ----- ops -----

enum class Activation { relu, gelu };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
// x: [r x c], v: [c]; broadcast add over rows (bias).
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// each row of x scaled by a fixed (non-differentiated) factor.
Tensor scale_rows(const Tensor& x, const std::vector<double>& factors);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx);
Tensor slice_rows(const Tensor& a, int64_t row0, int64_t nrows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int64_t col0, int64_t ncols);
Tensor concat_cols(const std::vector<Tensor>& parts);

// mask holds 0/1 per position; rows with every position masked are
// rejected. Masked outputs are exactly 0; each row of unmasked outputs
// sums to 1 (max-subtraction stabilized over unmasked entries only).
Tensor softmax_masked(const Tensor& logits, const Tensor& mask);

// Row-wise normalization over the last dimension, then gain * xhat + bias.
// Variance is the population variance with epsilon 1e-5 inside the sqrt.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor activations(const Tensor& x, Activation kind);
Tensor tanh_act(const Tensor& x);

// Inverted dropout with an explicit seed; rate 0 is the identity.
Tensor dropout(const Tensor& x, double rate, uint64_t seed);

Tensor sum_all(const Tensor& x);

// Mean negative log-softmax over rows not marked ignored.
Tensor loss_cross_entropy(const Tensor& logits, const std::vector<int64_t>& target_index,
                          const std::vector<uint8_t>& ignore);
// Mean squared difference over elements not marked ignored.
Tensor loss_mse(const Tensor& pred, const Tensor& target, const std::vector<uint8_t>& ignore);

// Convenience wrapper for backward through the active record.
void backward(const Tensor& loss);

// Deterministic seed derivation (splitmix64 chain).
uint64_t split_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0);

}  // namespace dtlab

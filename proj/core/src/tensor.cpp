#include "dtlab/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dtlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

thread_local ComputationRecord* g_active_record = nullptr;
std::atomic<uint64_t> g_generation_counter{1};

[[noreturn]] void shape_error(const std::string& what) { throw std::invalid_argument(what); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ----- Tensor -----

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int64_t d : shape_) {
    if (d <= 0) shape_error("Tensor: non-positive dimension in " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(values.size())) {
    shape_error("Tensor: " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                " values, got " + std::to_string(values.size()));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (double& v : t.data()) v = nd(rng);
  return t;
}

int64_t Tensor::rows() const { return ndim() >= 2 ? shape_[shape_.size() - 2] : 1; }

int64_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

std::vector<double>& Tensor::data() {
  if (!data_) throw std::runtime_error("Tensor: undefined");
  return *data_;
}

const std::vector<double>& Tensor::data() const {
  if (!data_) throw std::runtime_error("Tensor: undefined");
  return *data_;
}

double Tensor::value() const {
  if (numel() != 1) shape_error("Tensor::value: not a scalar, shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (on) {
    if (!grad_) grad_ = std::make_shared<std::vector<double>>(data().size(), 0.0);
  } else {
    grad_.reset();
  }
  return *this;
}

std::vector<double>& Tensor::grad() {
  if (!grad_) throw std::runtime_error("Tensor::grad: requires_grad is off");
  return *grad_;
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_) throw std::runtime_error("Tensor::grad: requires_grad is off");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

// ----- ParamStore -----

Tensor& ParamStore::add(const std::string& name, Tensor& t) {
  if (index_.count(name)) throw std::runtime_error("ParamStore: duplicate name " + name);
  t.set_requires_grad(true);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return items_.back().second;
}

Tensor& ParamStore::add(const std::string& name, Tensor&& t) {
  Tensor local = std::move(t);
  return add(name, local);
}

Tensor* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second].second;
}

const Tensor* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second].second;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [_, t] : items_) t.zero_grad();
}

// ----- ComputationRecord -----

ComputationRecord::ComputationRecord() { generation_ = g_generation_counter.fetch_add(1); }

void ComputationRecord::reset() {
  nodes_.clear();
  grads_.clear();
  leaf_ids_.clear();
  used_ = false;
  generation_ = g_generation_counter.fetch_add(1);
}

int64_t ComputationRecord::track_input(const Tensor& t) {
  if (t.node >= 0 && t.record_generation == generation_) return t.node;
  if (!t.requires_grad()) return -1;
  const void* key = t.storage().get();
  auto it = leaf_ids_.find(key);
  if (it != leaf_ids_.end()) return it->second;
  Node n;
  n.shape = t.shape();
  n.leaf_grad = t.grad_storage();
  const int64_t id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(std::move(n));
  leaf_ids_[key] = id;
  return id;
}

int64_t ComputationRecord::emit(
    const Shape& out_shape,
    std::function<void(ComputationRecord&, const std::vector<double>&)> backprop) {
  Node n;
  n.shape = out_shape;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<int64_t>(nodes_.size()) - 1;
}

void ComputationRecord::accumulate(int64_t node_id, const std::vector<double>& g) {
  accumulate_scaled(node_id, g.data(), static_cast<int64_t>(g.size()), 1.0);
}

void ComputationRecord::accumulate_scaled(int64_t node_id, const double* g, int64_t n,
                                          double scale) {
  if (node_id < 0) return;
  auto& slot = grads_[static_cast<size_t>(node_id)];
  if (slot.empty()) slot.assign(static_cast<size_t>(n), 0.0);
  double* dst = slot.data();
  if (scale == 1.0) {
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
  } else {
    for (int64_t i = 0; i < n; ++i) dst[i] += scale * g[i];
  }
}

const std::vector<double>* ComputationRecord::node_grad(int64_t node_id) const {
  if (node_id < 0 || node_id >= static_cast<int64_t>(grads_.size())) return nullptr;
  const auto& g = grads_[static_cast<size_t>(node_id)];
  return g.empty() ? nullptr : &g;
}

void ComputationRecord::backward(const Tensor& loss) {
  if (used_) throw std::runtime_error("backward: record already consumed; reset() first");
  if (loss.numel() != 1) {
    shape_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (loss.node < 0 || loss.record_generation != generation_) {
    throw std::runtime_error("backward: loss was not produced under this computation record");
  }
  used_ = true;
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<size_t>(loss.node)] = {1.0};
  for (int64_t i = loss.node; i >= 0; --i) {
    auto& g = grads_[static_cast<size_t>(i)];
    if (g.empty()) continue;
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.backprop) {
      n.backprop(*this, g);
      g.clear();
      g.shrink_to_fit();
    } else if (n.leaf_grad) {
      auto& dst = *n.leaf_grad;
      for (size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
    }
  }
}

Tensor ComputationRecord::grad_of(const Tensor& t) const {
  if (t.node >= 0 && t.record_generation == generation_) {
    const auto* g = node_grad(t.node);
    if (g) return Tensor(t.shape(), *g);
    // leaves keep their gradient in the tensor's own buffer
    const Node& n = nodes_[static_cast<size_t>(t.node)];
    if (n.leaf_grad) return Tensor(t.shape(), *n.leaf_grad);
    return Tensor(t.shape());
  }
  if (t.requires_grad()) return Tensor(t.shape(), t.grad());
  throw std::runtime_error("grad_of: tensor is not tracked on this record");
}

RecordScope::RecordScope(ComputationRecord& rec) : prev_(g_active_record) {
  g_active_record = &rec;
}

RecordScope::~RecordScope() { g_active_record = prev_; }

ComputationRecord* active_record() { return g_active_record; }

void backward(const Tensor& loss) {
  ComputationRecord* rec = active_record();
  if (!rec) throw std::runtime_error("backward: no active computation record");
  rec->backward(loss);
}

uint64_t split_seed(uint64_t base, uint64_t a, uint64_t b, uint64_t c) {
  auto mix = [](uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  uint64_t s = mix(base);
  s = mix(s ^ mix(a + 1));
  s = mix(s ^ mix(b + 2));
  s = mix(s ^ mix(c + 3));
  return s;
}

// ----- op helpers -----

namespace {

struct Recorded {
  ComputationRecord* rec = nullptr;
  int64_t na = -1, nb = -1, nc = -1;
  bool tracked() const { return na >= 0 || nb >= 0 || nc >= 0; }
};

Recorded begin_record(const Tensor* a, const Tensor* b = nullptr, const Tensor* c = nullptr) {
  Recorded r;
  r.rec = active_record();
  if (!r.rec) return r;
  if (a) r.na = r.rec->track_input(*a);
  if (b) r.nb = r.rec->track_input(*b);
  if (c) r.nc = r.rec->track_input(*c);
  return r;
}

void attach(Tensor& out, const Recorded& r,
            std::function<void(ComputationRecord&, const std::vector<double>&)> backprop) {
  if (!r.rec || !r.tracked()) return;
  out.node = r.rec->emit(out.shape(), std::move(backprop));
  out.record_generation = r.rec->generation();
  out.set_requires_grad(false);  // grads of intermediates live on the record
}

}  // namespace

// ----- elementwise -----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  Recorded r = begin_record(&a, &b);
  attach(out, r, [na = r.na, nb = r.nb](ComputationRecord& rec, const std::vector<double>& g) {
    rec.accumulate(na, g);
    rec.accumulate(nb, g);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  Recorded r = begin_record(&a, &b);
  attach(out, r, [na = r.na, nb = r.nb](ComputationRecord& rec, const std::vector<double>& g) {
    rec.accumulate(na, g);
    rec.accumulate_scaled(nb, g.data(), static_cast<int64_t>(g.size()), -1.0);
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  Recorded r = begin_record(&a, &b);
  auto sa = a.storage();
  auto sb = b.storage();
  attach(out, r,
         [na = r.na, nb = r.nb, sa, sb](ComputationRecord& rec, const std::vector<double>& g) {
           if (na >= 0) {
             std::vector<double> da(g.size());
             for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (*sb)[i];
             rec.accumulate(na, da);
           }
           if (nb >= 0) {
             std::vector<double> db(g.size());
             for (size_t i = 0; i < g.size(); ++i) db[i] = g[i] * (*sa)[i];
             rec.accumulate(nb, db);
           }
         });
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  Recorded r = begin_record(&a);
  attach(out, r, [na = r.na](ComputationRecord& rec, const std::vector<double>& g) {
    rec.accumulate(na, g);
  });
  return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  Recorded r = begin_record(&a);
  attach(out, r, [na = r.na, c](ComputationRecord& rec, const std::vector<double>& g) {
    rec.accumulate_scaled(na, g.data(), static_cast<int64_t>(g.size()), c);
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  const int64_t rcount = x.numel() / x.cols();
  const int64_t c = x.cols();
  if (v.numel() != c) {
    shape_error("add_rowvec: vector " + shape_str(v.shape()) + " vs row width " +
                std::to_string(c));
  }
  Tensor out(x.shape());
  const auto& xv = x.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rcount; ++r)
    for (int64_t j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] + vv[j];
  Recorded rr = begin_record(&x, &v);
  attach(out, rr,
         [nx = rr.na, nv = rr.nb, rcount, c](ComputationRecord& rec, const std::vector<double>& g) {
           rec.accumulate(nx, g);
           if (nv >= 0) {
             std::vector<double> dv(static_cast<size_t>(c), 0.0);
             for (int64_t r = 0; r < rcount; ++r)
               for (int64_t j = 0; j < c; ++j) dv[j] += g[r * c + j];
             rec.accumulate(nv, dv);
           }
         });
  return out;
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& factors) {
  const int64_t c = x.cols();
  const int64_t rcount = x.numel() / c;
  if (static_cast<int64_t>(factors.size()) != rcount) {
    shape_error("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                std::to_string(rcount) + " rows");
  }
  Tensor out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rcount; ++r)
    for (int64_t j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] * factors[r];
  Recorded rr = begin_record(&x);
  attach(out, rr, [nx = rr.na, factors, c, rcount](ComputationRecord& rec,
                                                   const std::vector<double>& g) {
    std::vector<double> dx(g.size());
    for (int64_t r = 0; r < rcount; ++r)
      for (int64_t j = 0; j < c; ++j) dx[r * c + j] = g[r * c + j] * factors[r];
    rec.accumulate(nx, dx);
  });
  return out;
}

// ----- matmul / transpose -----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  MapConstMat A(a.data().data(), m, k);
  MapConstMat B(b.data().data(), k, n);
  MapMat O(out.data().data(), m, n);
  O.noalias() = A * B;
  Recorded r = begin_record(&a, &b);
  auto sa = a.storage();
  auto sb = b.storage();
  attach(out, r,
         [na = r.na, nb = r.nb, sa, sb, m, k, n](ComputationRecord& rec,
                                                 const std::vector<double>& g) {
           MapConstMat G(g.data(), m, n);
           if (na >= 0) {
             std::vector<double> da(static_cast<size_t>(m * k));
             MapMat dA(da.data(), m, k);
             MapConstMat B2(sb->data(), k, n);
             dA.noalias() = G * B2.transpose();
             rec.accumulate(na, da);
           }
           if (nb >= 0) {
             std::vector<double> db(static_cast<size_t>(k * n));
             MapMat dB(db.data(), k, n);
             MapConstMat A2(sa->data(), m, k);
             dB.noalias() = A2.transpose() * G;
             rec.accumulate(nb, db);
           }
         });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) shape_error("transpose: need 2-D, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  const auto& av = a.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  Recorded r = begin_record(&a);
  attach(out, r, [na = r.na, m, n](ComputationRecord& rec, const std::vector<double>& g) {
    std::vector<double> da(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) da[i * n + j] = g[j * m + i];
    rec.accumulate(na, da);
  });
  return out;
}

// ----- gather / slice / concat -----

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx) {
  if (a.ndim() != 2) shape_error("gather_rows: need 2-D, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), c = a.dim(1);
  for (int64_t i : idx) {
    if (i < 0 || i >= m)
      shape_error("gather_rows: index " + std::to_string(i) + " out of [0," + std::to_string(m) +
                  ")");
  }
  Tensor out({static_cast<int64_t>(idx.size()), c});
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(av.data() + idx[r] * c, c, ov.data() + static_cast<int64_t>(r) * c);
  Recorded rr = begin_record(&a);
  attach(out, rr, [na = rr.na, idx, m, c](ComputationRecord& rec, const std::vector<double>& g) {
    std::vector<double> da(static_cast<size_t>(m * c), 0.0);
    for (size_t r = 0; r < idx.size(); ++r) {
      const double* src = g.data() + static_cast<int64_t>(r) * c;
      double* dst = da.data() + idx[r] * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    rec.accumulate(na, da);
  });
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t row0, int64_t nrows) {
  if (a.ndim() != 2) shape_error("slice_rows: need 2-D, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), c = a.dim(1);
  if (row0 < 0 || nrows <= 0 || row0 + nrows > m) {
    shape_error("slice_rows: [" + std::to_string(row0) + "," + std::to_string(row0 + nrows) +
                ") out of " + std::to_string(m) + " rows");
  }
  Tensor out({nrows, c});
  std::copy_n(a.data().data() + row0 * c, nrows * c, out.data().data());
  Recorded rr = begin_record(&a);
  attach(out, rr,
         [na = rr.na, row0, nrows, m, c](ComputationRecord& rec, const std::vector<double>& g) {
           std::vector<double> da(static_cast<size_t>(m * c), 0.0);
           std::copy_n(g.data(), nrows * c, da.data() + row0 * c);
           rec.accumulate(na, da);
         });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_rows: empty input");
  const int64_t c = parts[0].cols();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != c)
      shape_error("concat_rows: inconsistent widths " + shape_str(p.shape()));
    total += p.dim(0);
  }
  Tensor out({total, c});
  auto& ov = out.data();
  int64_t row = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.data().data(), p.numel(), ov.data() + row * c);
    row += p.dim(0);
  }
  ComputationRecord* rec = active_record();
  if (rec) {
    std::vector<int64_t> ids(parts.size());
    std::vector<int64_t> row_starts(parts.size());
    std::vector<int64_t> nrows(parts.size());
    bool tracked = false;
    int64_t r0 = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      ids[i] = rec->track_input(parts[i]);
      row_starts[i] = r0;
      nrows[i] = parts[i].dim(0);
      r0 += nrows[i];
      tracked = tracked || ids[i] >= 0;
    }
    if (tracked) {
      out.node = rec->emit(out.shape(), [ids, row_starts, nrows, c](
                                            ComputationRecord& rc, const std::vector<double>& g) {
        for (size_t i = 0; i < ids.size(); ++i) {
          if (ids[i] < 0) continue;
          rc.accumulate_scaled(ids[i], g.data() + row_starts[i] * c, nrows[i] * c, 1.0);
        }
      });
      out.record_generation = rec->generation();
    }
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int64_t col0, int64_t ncols) {
  if (a.ndim() != 2) shape_error("slice_cols: need 2-D, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), c = a.dim(1);
  if (col0 < 0 || ncols <= 0 || col0 + ncols > c) {
    shape_error("slice_cols: [" + std::to_string(col0) + "," + std::to_string(col0 + ncols) +
                ") out of " + std::to_string(c) + " cols");
  }
  Tensor out({m, ncols});
  const auto& av = a.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < m; ++r)
    std::copy_n(av.data() + r * c + col0, ncols, ov.data() + r * ncols);
  Recorded rr = begin_record(&a);
  attach(out, rr,
         [na = rr.na, col0, ncols, m, c](ComputationRecord& rec, const std::vector<double>& g) {
           std::vector<double> da(static_cast<size_t>(m * c), 0.0);
           for (int64_t r = 0; r < m; ++r)
             std::copy_n(g.data() + r * ncols, ncols, da.data() + r * c + col0);
           rec.accumulate(na, da);
         });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_cols: empty input");
  const int64_t m = parts[0].dim(0);
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != m)
      shape_error("concat_cols: inconsistent rows " + shape_str(p.shape()));
    total += p.dim(1);
  }
  Tensor out({m, total});
  auto& ov = out.data();
  int64_t col = 0;
  for (const Tensor& p : parts) {
    const int64_t pc = p.dim(1);
    for (int64_t r = 0; r < m; ++r)
      std::copy_n(p.data().data() + r * pc, pc, ov.data() + r * total + col);
    col += pc;
  }
  ComputationRecord* rec = active_record();
  if (rec) {
    std::vector<int64_t> ids(parts.size());
    std::vector<int64_t> col_starts(parts.size());
    std::vector<int64_t> widths(parts.size());
    bool tracked = false;
    int64_t c0 = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      ids[i] = rec->track_input(parts[i]);
      col_starts[i] = c0;
      widths[i] = parts[i].dim(1);
      c0 += widths[i];
      tracked = tracked || ids[i] >= 0;
    }
    if (tracked) {
      out.node = rec->emit(out.shape(), [ids, col_starts, widths, m, total](
                                            ComputationRecord& rc, const std::vector<double>& g) {
        for (size_t i = 0; i < ids.size(); ++i) {
          if (ids[i] < 0) continue;
          const int64_t w = widths[i];
          std::vector<double> dp(static_cast<size_t>(m * w));
          for (int64_t r = 0; r < m; ++r)
            std::copy_n(g.data() + r * total + col_starts[i], w, dp.data() + r * w);
          rc.accumulate(ids[i], dp);
        }
      });
      out.record_generation = rec->generation();
    }
  }
  return out;
}

// ----- softmax / layer norm -----

Tensor softmax_masked(const Tensor& logits, const Tensor& mask) {
  check_same_shape(logits, mask, "softmax_masked");
  const int64_t c = logits.cols();
  const int64_t rcount = logits.numel() / c;
  Tensor out(logits.shape());
  const auto& lv = logits.data();
  const auto& mv = mask.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rcount; ++r) {
    const double* lr = lv.data() + r * c;
    const double* mr = mv.data() + r * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j)
      if (mr[j] != 0.0 && lr[j] > mx) mx = lr[j];
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("softmax_masked: row " + std::to_string(r) +
                                  " has every position masked");
    }
    double denom = 0.0;
    double* orow = ov.data() + r * c;
    for (int64_t j = 0; j < c; ++j) {
      if (mr[j] != 0.0) {
        orow[j] = std::exp(lr[j] - mx);
        denom += orow[j];
      } else {
        orow[j] = 0.0;
      }
    }
    const double inv = 1.0 / denom;
    for (int64_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  Recorded rr = begin_record(&logits);
  auto so = out.storage();
  attach(out, rr,
         [nl = rr.na, so, rcount, c](ComputationRecord& rec, const std::vector<double>& g) {
           std::vector<double> dl(g.size());
           for (int64_t r = 0; r < rcount; ++r) {
             const double* y = so->data() + r * c;
             const double* gr = g.data() + r * c;
             double dot = 0.0;
             for (int64_t j = 0; j < c; ++j) dot += gr[j] * y[j];
             double* dr = dl.data() + r * c;
             for (int64_t j = 0; j < c; ++j) dr[j] = y[j] * (gr[j] - dot);
           }
           rec.accumulate(nl, dl);
         });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int64_t d = x.cols();
  if (d < 1) shape_error("layer_norm: empty rows");
  if (gain.numel() != d || bias.numel() != d) {
    shape_error("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                shape_str(bias.shape()) + " vs row width " + std::to_string(d));
  }
  constexpr double eps = 1e-5;
  const int64_t rcount = x.numel() / d;
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.data().size());
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rcount));
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rcount; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double t = xr[j] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<size_t>(r)] = inv;
    double* hr = xhat->data() + r * d;
    double* orow = ov.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      orow[j] = gv[j] * hr[j] + bv[j];
    }
  }
  Recorded rr = begin_record(&x, &gain, &bias);
  auto sg = gain.storage();
  attach(out, rr,
         [nx = rr.na, ng = rr.nb, nb = rr.nc, xhat, inv_sigma, sg, rcount, d](
             ComputationRecord& rec, const std::vector<double>& g) {
           if (ng >= 0) {
             std::vector<double> dg(static_cast<size_t>(d), 0.0);
             for (int64_t r = 0; r < rcount; ++r)
               for (int64_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * (*xhat)[r * d + j];
             rec.accumulate(ng, dg);
           }
           if (nb >= 0) {
             std::vector<double> db(static_cast<size_t>(d), 0.0);
             for (int64_t r = 0; r < rcount; ++r)
               for (int64_t j = 0; j < d; ++j) db[j] += g[r * d + j];
             rec.accumulate(nb, db);
           }
           if (nx >= 0) {
             std::vector<double> dx(g.size());
             for (int64_t r = 0; r < rcount; ++r) {
               const double* hr = xhat->data() + r * d;
               const double* gr = g.data() + r * d;
               double mean_dh = 0.0, mean_dh_h = 0.0;
               for (int64_t j = 0; j < d; ++j) {
                 const double dh = gr[j] * (*sg)[j];
                 mean_dh += dh;
                 mean_dh_h += dh * hr[j];
               }
               mean_dh /= static_cast<double>(d);
               mean_dh_h /= static_cast<double>(d);
               const double inv = (*inv_sigma)[static_cast<size_t>(r)];
               double* dr = dx.data() + r * d;
               for (int64_t j = 0; j < d; ++j) {
                 const double dh = gr[j] * (*sg)[j];
                 dr[j] = inv * (dh - mean_dh - hr[j] * mean_dh_h);
               }
             }
             rec.accumulate(nx, dx);
           }
         });
  return out;
}

// ----- activations / dropout -----

Tensor activations(const Tensor& x, Activation kind) {
  Tensor out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  if (kind == Activation::relu) {
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  } else {
    // gelu, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    for (size_t i = 0; i < ov.size(); ++i) {
      const double v = xv[i];
      ov[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
  }
  Recorded r = begin_record(&x);
  auto sx = x.storage();
  attach(out, r, [nx = r.na, sx, kind](ComputationRecord& rec, const std::vector<double>& g) {
    std::vector<double> dx(g.size());
    if (kind == Activation::relu) {
      for (size_t i = 0; i < g.size(); ++i) dx[i] = (*sx)[i] > 0.0 ? g[i] : 0.0;
    } else {
      for (size_t i = 0; i < g.size(); ++i) {
        const double v = (*sx)[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        dx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    }
    rec.accumulate(nx, dx);
  });
  return out;
}

Tensor tanh_act(const Tensor& x) {
  Tensor out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
  Recorded r = begin_record(&x);
  auto so = out.storage();
  attach(out, r, [nx = r.na, so](ComputationRecord& rec, const std::vector<double>& g) {
    std::vector<double> dx(g.size());
    for (size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * (1.0 - (*so)[i] * (*so)[i]);
    rec.accumulate(nx, dx);
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (rate == 0.0) return x;
  // counter-based splitmix64 keeps mask generation cheap and exactly
  // reproducible per (seed, element index)
  auto keep = std::make_shared<std::vector<double>>(x.data().size());
  const double scale = 1.0 / (1.0 - rate);
  const uint64_t cut = static_cast<uint64_t>(rate * 1.8446744073709552e19);
  for (size_t i = 0; i < keep->size(); ++i) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    (*keep)[i] = z < cut ? 0.0 : scale;
  }
  Tensor out(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * (*keep)[i];
  Recorded r = begin_record(&x);
  attach(out, r, [nx = r.na, keep](ComputationRecord& rec, const std::vector<double>& g) {
    std::vector<double> dx(g.size());
    for (size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * (*keep)[i];
    rec.accumulate(nx, dx);
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  Recorded r = begin_record(&x);
  attach(out, r, [nx = r.na, n = x.numel()](ComputationRecord& rec, const std::vector<double>& g) {
    std::vector<double> dx(static_cast<size_t>(n), g[0]);
    rec.accumulate(nx, dx);
  });
  return out;
}

// ----- losses -----

Tensor loss_cross_entropy(const Tensor& logits, const std::vector<int64_t>& target_index,
                          const std::vector<uint8_t>& ignore) {
  if (logits.ndim() != 2) shape_error("loss_cross_entropy: need 2-D logits");
  const int64_t b = logits.dim(0), n = logits.dim(1);
  if (static_cast<int64_t>(target_index.size()) != b ||
      static_cast<int64_t>(ignore.size()) != b) {
    shape_error("loss_cross_entropy: batch " + std::to_string(b) + " vs " +
                std::to_string(target_index.size()) + " targets / " +
                std::to_string(ignore.size()) + " ignore flags");
  }
  int64_t count = 0;
  for (int64_t r = 0; r < b; ++r) {
    if (ignore[static_cast<size_t>(r)]) continue;
    ++count;
    const int64_t t = target_index[static_cast<size_t>(r)];
    if (t < 0 || t >= n)
      shape_error("loss_cross_entropy: target " + std::to_string(t) + " out of [0," +
                  std::to_string(n) + ") at row " + std::to_string(r));
  }
  if (count == 0) throw std::invalid_argument("loss_cross_entropy: every position ignored");
  const auto& lv = logits.data();
  // softmax probabilities saved for backward
  auto probs = std::make_shared<std::vector<double>>(lv.size(), 0.0);
  double total = 0.0;
  for (int64_t r = 0; r < b; ++r) {
    if (ignore[static_cast<size_t>(r)]) continue;
    const double* lr = lv.data() + r * n;
    double mx = lr[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, lr[j]);
    double denom = 0.0;
    double* pr = probs->data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      denom += pr[j];
    }
    for (int64_t j = 0; j < n; ++j) pr[j] /= denom;
    total += -(lr[target_index[static_cast<size_t>(r)]] - mx - std::log(denom));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  Recorded rr = begin_record(&logits);
  attach(out, rr,
         [nl = rr.na, probs, target_index, ignore, b, n, count](ComputationRecord& rec,
                                                                const std::vector<double>& g) {
           std::vector<double> dl(probs->size(), 0.0);
           const double scale = g[0] / static_cast<double>(count);
           for (int64_t r = 0; r < b; ++r) {
             if (ignore[static_cast<size_t>(r)]) continue;
             const double* pr = probs->data() + r * n;
             double* dr = dl.data() + r * n;
             for (int64_t j = 0; j < n; ++j) dr[j] = scale * pr[j];
             dr[target_index[static_cast<size_t>(r)]] -= scale;
           }
           rec.accumulate(nl, dl);
         });
  return out;
}

Tensor loss_mse(const Tensor& pred, const Tensor& target, const std::vector<uint8_t>& ignore) {
  check_same_shape(pred, target, "loss_mse");
  if (ignore.size() != pred.data().size())
    shape_error("loss_mse: ignore mask size " + std::to_string(ignore.size()) + " vs " +
                std::to_string(pred.data().size()) + " elements");
  int64_t count = 0;
  for (uint8_t i : ignore)
    if (!i) ++count;
  if (count == 0) throw std::invalid_argument("loss_mse: every element ignored");
  const auto& pv = pred.data();
  const auto& tv = target.data();
  double total = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    if (ignore[i]) continue;
    const double d = pv[i] - tv[i];
    total += d * d;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  Recorded rr = begin_record(&pred, &target);
  auto sp = pred.storage();
  auto st = target.storage();
  attach(out, rr,
         [np = rr.na, nt = rr.nb, sp, st, ignore, count](ComputationRecord& rec,
                                                         const std::vector<double>& g) {
           const double scale = 2.0 * g[0] / static_cast<double>(count);
           std::vector<double> dp(sp->size(), 0.0);
           for (size_t i = 0; i < dp.size(); ++i)
             if (!ignore[i]) dp[i] = scale * ((*sp)[i] - (*st)[i]);
           if (np >= 0) rec.accumulate(np, dp);
           if (nt >= 0) {
             for (double& v : dp) v = -v;
             rec.accumulate(nt, dp);
           }
         });
  return out;
}

}  // namespace dtlab

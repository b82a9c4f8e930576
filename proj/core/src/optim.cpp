#include "dtlab/optim.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace dtlab {

double clip_global_norm(ParamStore& params, double clip_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.items()) {
    for (double g : t.grad()) sq += g * g;
  }
  const double total = std::sqrt(sq);
  if (clip_norm > 0.0 && total > clip_norm) {
    const double scale = clip_norm / total;
    for (auto& [name, t] : params.items())
      for (double& g : t.grad()) g *= scale;
  }
  return total;
}

void AdamW::ensure_state(const ParamStore& params) {
  if (!m_.empty()) {
    if (m_.size() != params.size())
      throw std::runtime_error("AdamW: parameter count changed under the optimizer");
    return;
  }
  m_.resize(params.size());
  v_.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const size_t n = params.items()[i].second.data().size();
    m_[i].assign(n, 0.0);
    v_[i].assign(n, 0.0);
  }
}

void AdamW::step(ParamStore& params, double lr, double clip_norm) {
  if (lr <= 0.0) throw std::invalid_argument("AdamW: lr must be positive");
  ensure_state(params);
  for (auto& [name, t] : params.items()) {
    for (double g : t.grad()) {
      if (!std::isfinite(g))
        throw std::runtime_error("AdamW: non-finite gradient in parameter " + name);
    }
  }
  clip_global_norm(params, clip_norm);
  step_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& t = params.items()[i].second;
    auto& data = t.data();
    const auto& grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < data.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * grad[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * grad[k] * grad[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      data[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * data[k]);
    }
  }
}

std::string AdamW::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << step_ << ' ' << m_.size() << '\n';
  for (size_t i = 0; i < m_.size(); ++i) {
    os << m_[i].size();
    for (double x : m_[i]) os << ' ' << x;
    for (double x : v_[i]) os << ' ' << x;
    os << '\n';
  }
  return os.str();
}

void AdamW::deserialize(const std::string& blob, const ParamStore& params) {
  std::istringstream is(blob);
  size_t count = 0;
  if (!(is >> step_ >> count)) throw std::runtime_error("AdamW: corrupt state blob");
  if (count != params.size())
    throw std::runtime_error("AdamW: state holds " + std::to_string(count) +
                             " parameters, store has " + std::to_string(params.size()));
  m_.assign(count, {});
  v_.assign(count, {});
  for (size_t i = 0; i < count; ++i) {
    size_t n = 0;
    if (!(is >> n)) throw std::runtime_error("AdamW: corrupt state blob");
    if (n != params.items()[i].second.data().size())
      throw std::runtime_error("AdamW: moment shape mismatch for parameter " +
                               params.items()[i].first);
    m_[i].resize(n);
    v_[i].resize(n);
    for (double& x : m_[i]) is >> x;
    for (double& x : v_[i]) is >> x;
    if (!is) throw std::runtime_error("AdamW: corrupt state blob");
  }
}

}  // namespace dtlab

#include "fclsim/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fclsim {

std::size_t TensorSlot::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void Layout::add(std::string name, std::vector<std::size_t> shape) {
  if (contains(name)) throw StructuralError("duplicate tensor name in layout: " + name);
  TensorSlot slot{std::move(name), std::move(shape), total_};
  total_ += slot.size();
  slots_.push_back(std::move(slot));
}

const TensorSlot& Layout::slot(std::string_view name) const {
  for (const auto& s : slots_)
    if (s.name == name) return s;
  throw StructuralError("no tensor named '" + std::string(name) + "' in layout");
}

bool Layout::contains(std::string_view name) const {
  return std::any_of(slots_.begin(), slots_.end(), [&](const TensorSlot& s) { return s.name == name; });
}

bool Layout::operator==(const Layout& other) const {
  if (total_ != other.total_ || slots_.size() != other.slots_.size()) return false;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].name != other.slots_[i].name || slots_[i].shape != other.slots_[i].shape) return false;
  }
  return true;
}

ParamVector::ParamVector(std::shared_ptr<const Layout> layout)
    : layout_(std::move(layout)), values_(layout_->total(), 0.0) {}

ParamVector::ParamVector(std::shared_ptr<const Layout> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->total()) {
    throw StructuralError("parameter count " + std::to_string(values_.size()) +
                          " does not match layout total " + std::to_string(layout_->total()));
  }
}

ParamVector ParamVector::flat(std::vector<double> values) {
  auto layout = std::make_shared<Layout>();
  layout->add("flat", {values.size()});
  return ParamVector(std::move(layout), std::move(values));
}

std::span<double> ParamVector::tensor(std::string_view name) {
  const auto& s = layout_->slot(name);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> ParamVector::tensor(std::string_view name) const {
  const auto& s = layout_->slot(name);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_ == other.layout_) return true;
  if (!layout_ || !other.layout_) return false;
  return *layout_ == *other.layout_;
}

void ParamVector::require_same_layout(const ParamVector& other, const char* context) const {
  if (!same_layout(other)) throw StructuralError(std::string(context) + ": parameter layouts differ");
}

ParamVector ParamVector::zeros_like() const { return ParamVector(layout_); }

bool ParamVector::operator==(const ParamVector& other) const {
  return same_layout(other) && values_ == other.values_;
}

void ParamVector::add_scaled(double a, const ParamVector& x) {
  require_same_layout(x, "add_scaled");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += a * x.values_[i];
}

void ParamVector::scale(double a) {
  for (auto& v : values_) v *= a;
}

// ---------------------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream_id) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(splitmix(seed) ^ (stream_id * 0xd1342543de82ef95ULL + 0x632be59bd9b4e019ULL));
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), engine_(mix_seed(seed, stream_id)) {}

RngStream RngStream::derive(std::uint64_t tag) const {
  return RngStream(seed_, mix_seed(stream_id_, tag));
}

RngStream RngStream::derive(std::uint64_t tag_a, std::uint64_t tag_b) const {
  return derive(tag_a).derive(tag_b);
}

double RngStream::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double RngStream::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double RngStream::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t RngStream::uniform_index(std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

// ---------------------------------------------------------------------------

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw StructuralError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm2(std::span<const double> u) { return std::sqrt(dot(u, u)); }

double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size() || u.empty()) throw StructuralError("cosine_sim: vectors must share a nonzero length");
  const double nu2 = dot(u, u);
  const double nv2 = dot(v, v);
  if (!(nu2 > 0.0) || !(nv2 > 0.0)) throw DegenerateError("cosine_sim: zero-norm input vector");
  // sqrt(nu2 * nv2) rather than |u|*|v| so that cosine_sim(u, u) is exactly 1.
  return std::clamp(dot(u, v) / std::sqrt(nu2 * nv2), -1.0, 1.0);
}

ParamVector axpy_params(double a, const ParamVector& x, const ParamVector& y) {
  x.require_same_layout(y, "axpy_params");
  ParamVector out = y;
  out.add_scaled(a, x);
  return out;
}

double l2_norm(const ParamVector& x) { return norm2(x.values()); }

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double d) { return std::isfinite(d); });
}

double finite_diff_check(const LossFn& loss_fn, const ParamVector& params,
                         const ParamVector& analytic_grad, double eps, int n_probes,
                         RngStream& rng) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
  if (n_probes < 1) throw ConfigError("finite_diff_check: n_probes must be >= 1");
  params.require_same_layout(analytic_grad, "finite_diff_check");

  double worst = 0.0;
  ParamVector probe = params;
  for (int p = 0; p < n_probes; ++p) {
    const std::size_t k = rng.uniform_index(params.size());
    const double x0 = params[k];
    probe[k] = x0 + eps;
    const double up = loss_fn(probe);
    probe[k] = x0 - eps;
    const double down = loss_fn(probe);
    probe[k] = x0;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      std::ostringstream msg;
      msg << "finite_diff_check: non-finite loss when probing coordinate " << k;
      throw Error(msg.str());
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = analytic_grad[k];
    const double abs_err = std::abs(numeric - analytic);
    const double err = std::abs(numeric) < 1e-8 ? abs_err : abs_err / std::abs(numeric);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fclsim

#pragma once

// Small differentiable function approximators over observation ids, with
// hand-derived gradients and a finite-difference checker.
//
// One flat parameter vector holds the policy/value network and the model.
// Matrices inside it are column-major.

#include "muesli/env.hpp"
#include "muesli/targets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace muesli {

struct Slice {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const Slice&) const = default;
};

/// Named, disjoint slices covering a flat parameter vector.
class ParamLayout {
 public:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols = 1) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter slice '" + name + "'");
    slices_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
  }
  bool contains(const std::string& name) const {
    return std::any_of(slices_.begin(), slices_.end(),
                       [&](const Slice& s) { return s.name == name; });
  }
  const Slice& find(const std::string& name) const {
    for (const auto& s : slices_)
      if (s.name == name) return s;
    throw std::out_of_range("no parameter slice named '" + name + "'");
  }
  /// Name of the slice containing flat index i.
  const std::string& owner(Eigen::Index i) const {
    for (const auto& s : slices_)
      if (i >= s.offset && i < s.offset + s.size()) return s.name;
    throw std::out_of_range("parameter index out of range");
  }
  const std::vector<Slice>& slices() const { return slices_; }
  Eigen::Index total() const { return total_; }
  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<Slice> slices_;
  Eigen::Index total_ = 0;
};

/// Flat parameter vector plus its layout. Copies share the layout.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::shared_ptr<const ParamLayout> layout)
      : layout_(std::move(layout)), values_(Vector::Zero(layout_->total())) {}

  static ParamVector zeros_like(const ParamVector& other) { return ParamVector(other.layout_); }

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::Map<Matrix> mat(const std::string& name) {
    const Slice& s = layout_->find(name);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Matrix> mat(const std::string& name) const {
    const Slice& s = layout_->find(name);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Vector> vec(const std::string& name) {
    const Slice& s = layout_->find(name);
    return {values_.data() + s.offset, s.size()};
  }
  Eigen::Map<const Vector> vec(const std::string& name) const {
    const Slice& s = layout_->find(name);
    return {values_.data() + s.offset, s.size()};
  }

  bool same_layout(const ParamVector& other) const {
    return layout_ == other.layout_ || *layout_ == *other.layout_;
  }
  bool all_finite() const { return values_.allFinite(); }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  Vector values_;
};

enum class Representation { tabular, mlp };

inline const char* to_string(Representation r) {
  return r == Representation::tabular ? "tabular" : "mlp";
}

struct NetSpec {
  Representation representation = Representation::tabular;
  std::size_t num_obs = 1;
  std::size_t num_actions = 2;
  /// Width of the MLP torso; unused by the tabular representation.
  std::size_t hidden = 16;
  /// Width of the model's hidden state.
  std::size_t model_hidden = 32;
  /// Hidden weights are drawn uniformly from [-init_scale, init_scale].
  double init_scale = 0.05;

  std::size_t representation_size() const {
    return representation == Representation::tabular ? num_obs : hidden;
  }
};

struct NetOutput {
  Vector logits;
  double value = 0.0;
  /// h(s): one-hot observation for the tabular representation, torso
  /// activations for the MLP.
  Vector hidden;

  Vector probs() const { return softmax(logits); }
};

/// Loss adjoints with respect to one forward pass.
struct NetAdjoint {
  Vector dlogits;
  double dvalue = 0.0;
  /// Optional; empty means no gradient flows into the representation.
  Vector dhidden;
};

/// Policy/value network over observation ids, plus the registered layout of
/// the value-equivalent model (see model.hpp). Stateless; all functions are
/// pure in the parameters.
class AgentNet {
 public:
  explicit AgentNet(NetSpec spec) : spec_(spec), layout_(make_layout(spec)) {}

  const NetSpec& spec() const { return spec_; }
  const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }

  /// Zero logits and value weights; hidden weights uniform in
  /// [-init_scale, init_scale].
  ParamVector init(std::uint64_t seed) const {
    ParamVector p(layout_);
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-spec_.init_scale, spec_.init_scale);
    for (const char* name : {"torso.w", "model.embed.w", "model.dyn.w"}) {
      if (!layout_->contains(name)) continue;
      for (auto& x : p.vec(name)) x = u(rng);
    }
    return p;
  }

  NetOutput forward(const ParamVector& params, std::size_t obs) const {
    check_obs(obs);
    NetOutput out;
    const auto o = static_cast<Eigen::Index>(obs);
    if (spec_.representation == Representation::tabular) {
      out.logits = params.mat("policy").col(o);
      out.value = params.vec("value")[o];
      out.hidden = Vector::Zero(static_cast<Eigen::Index>(spec_.num_obs));
      out.hidden[o] = 1.0;
    } else {
      out.hidden = (params.mat("torso.w").col(o) + params.vec("torso.b")).array().tanh().matrix();
      out.logits = params.mat("policy.w") * out.hidden + params.vec("policy.b");
      out.value = params.vec("value.w").dot(out.hidden) + params.vec("value.b")[0];
    }
    return out;
  }

  /// Accumulates d(loss)/d(params) into `grad` for one forward pass.
  void backward(const ParamVector& params, std::size_t obs, const NetAdjoint& adj,
                ParamVector& grad) const {
    check_obs(obs);
    if (!grad.same_layout(params)) throw std::invalid_argument("gradient layout mismatch");
    const auto o = static_cast<Eigen::Index>(obs);
    if (spec_.representation == Representation::tabular) {
      if (adj.dlogits.size() > 0) grad.mat("policy").col(o) += adj.dlogits;
      grad.vec("value")[o] += adj.dvalue;
      return;
    }
    const Vector h =
        (params.mat("torso.w").col(o) + params.vec("torso.b")).array().tanh().matrix();
    Vector dh = Vector::Zero(h.size());
    if (adj.dlogits.size() > 0) {
      grad.mat("policy.w") += adj.dlogits * h.transpose();
      grad.vec("policy.b") += adj.dlogits;
      dh += params.mat("policy.w").transpose() * adj.dlogits;
    }
    grad.vec("value.w") += adj.dvalue * h;
    grad.vec("value.b")[0] += adj.dvalue;
    dh += adj.dvalue * params.vec("value.w");
    if (adj.dhidden.size() > 0) dh += adj.dhidden;
    const Vector dpre = dh.cwiseProduct((1.0 - h.array().square()).matrix());
    grad.mat("torso.w").col(o) += dpre;
    grad.vec("torso.b") += dpre;
  }

  /// Softmax policy of every observation, one row per observation.
  Matrix policy_table(const ParamVector& params) const {
    Matrix pi(static_cast<Eigen::Index>(spec_.num_obs), static_cast<Eigen::Index>(spec_.num_actions));
    for (std::size_t o = 0; o < spec_.num_obs; ++o)
      pi.row(static_cast<Eigen::Index>(o)) = forward(params, o).probs().transpose();
    return pi;
  }

 private:
  static std::shared_ptr<const ParamLayout> make_layout(const NetSpec& spec) {
    if (spec.num_obs == 0 || spec.num_actions == 0 || spec.model_hidden == 0)
      throw std::invalid_argument("network sizes must be positive");
    auto layout = std::make_shared<ParamLayout>();
    const auto O = static_cast<Eigen::Index>(spec.num_obs);
    const auto A = static_cast<Eigen::Index>(spec.num_actions);
    const auto M = static_cast<Eigen::Index>(spec.model_hidden);
    const auto R = static_cast<Eigen::Index>(spec.representation_size());
    if (spec.representation == Representation::tabular) {
      layout->add("policy", A, O);
      layout->add("value", O);
    } else {
      if (spec.hidden == 0) throw std::invalid_argument("MLP hidden width must be positive");
      const auto H = static_cast<Eigen::Index>(spec.hidden);
      layout->add("torso.w", H, O);
      layout->add("torso.b", H);
      layout->add("policy.w", A, H);
      layout->add("policy.b", A);
      layout->add("value.w", H);
      layout->add("value.b", 1);
    }
    layout->add("model.embed.w", M, R);
    layout->add("model.embed.b", M);
    layout->add("model.dyn.w", M, M + A);
    layout->add("model.dyn.b", M);
    layout->add("model.reward.w", M);
    layout->add("model.reward.b", 1);
    layout->add("model.value.w", M);
    layout->add("model.value.b", 1);
    layout->add("model.policy.w", A, M);
    layout->add("model.policy.b", A);
    return layout;
  }

  void check_obs(std::size_t obs) const {
    if (obs >= spec_.num_obs)
      throw std::out_of_range("observation id " + std::to_string(obs) + " out of range");
  }

  NetSpec spec_;
  std::shared_ptr<const ParamLayout> layout_;
};

/// Gradient of -sum_a target(a) log softmax(logits)(a) with respect to the
/// logits, for a target summing to one.
inline Vector cross_entropy_logit_grad(const Vector& logits, const Vector& target) {
  return softmax(logits) - target;
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Scalar loss with an optional analytic gradient written into `grad`.
using LossFn = std::function<double(const ParamVector& params, ParamVector* grad)>;

struct FdReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  std::string worst_slice;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct FdOptions {
  double step = 1e-5;
  /// Gradients smaller than this are compared in absolute terms.
  double scale_floor = 1e-6;
};

/// Compares the analytic gradient with central differences on every
/// coordinate. Relative error is |a - n| / max(|a|, |n|, scale_floor).
inline FdReport fd_check(const ParamVector& params, const LossFn& loss, double tolerance,
                         const FdOptions& options = {}) {
  ParamVector analytic = ParamVector::zeros_like(params);
  loss(params, &analytic);
  ParamVector probe = params;
  FdReport report;
  report.tolerance = tolerance;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double x = params.values()[i];
    probe.values()[i] = x + options.step;
    const double up = loss(probe, nullptr);
    probe.values()[i] = x - options.step;
    const double down = loss(probe, nullptr);
    probe.values()[i] = x;
    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic.values()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.scale_floor});
    double err = std::abs(a - numeric) / denom;
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    if (report.worst_index < 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  if (report.worst_index >= 0) report.worst_slice = params.layout().owner(report.worst_index);
  report.passed = report.max_rel_error < tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// Serialization: text layout header followed by raw little-endian doubles.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_doubles(std::ostream& out, const Vector& v) {
  static_assert(sizeof(double) == 8);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * static_cast<Eigen::Index>(sizeof(double))));
}

inline Vector read_doubles(std::istream& in, Eigen::Index n) {
  Vector v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * static_cast<Eigen::Index>(sizeof(double))));
  if (!in) throw std::runtime_error("truncated parameter block");
  return v;
}

inline std::string expect_line(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("unexpected end of parameter header");
  return line;
}

}  // namespace detail

inline void save_params(std::ostream& out, const ParamVector& params) {
  out << "MUESLI-PARAMS 1\n";
  out << "slices " << params.layout().slices().size() << " total " << params.size() << "\n";
  for (const auto& s : params.layout().slices())
    out << s.name << " " << s.offset << " " << s.rows << " " << s.cols << "\n";
  out << "data\n";
  detail::write_doubles(out, params.values());
}

inline ParamVector load_params(std::istream& in) {
  if (detail::expect_line(in) != "MUESLI-PARAMS 1")
    throw std::runtime_error("not a parameter snapshot");
  std::istringstream head(detail::expect_line(in));
  std::string kw1, kw2;
  std::size_t count = 0;
  Eigen::Index total = 0;
  if (!(head >> kw1 >> count >> kw2 >> total) || kw1 != "slices" || kw2 != "total")
    throw std::runtime_error("malformed parameter header");
  auto layout = std::make_shared<ParamLayout>();
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(detail::expect_line(in));
    Slice s;
    if (!(ls >> s.name >> s.offset >> s.rows >> s.cols))
      throw std::runtime_error("malformed slice line");
    if (s.offset != layout->total()) throw std::runtime_error("slices are not contiguous");
    layout->add(s.name, s.rows, s.cols);
  }
  if (layout->total() != total) throw std::runtime_error("slice sizes do not cover the vector");
  if (detail::expect_line(in) != "data") throw std::runtime_error("missing data marker");
  ParamVector p(std::move(layout));
  p.values() = detail::read_doubles(in, total);
  return p;
}

}  // namespace muesli

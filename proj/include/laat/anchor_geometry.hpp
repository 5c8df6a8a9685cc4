// Anchor sets on the unit hypersphere and the polar-angle expansion that
// spreads a clustered set over a hemisphere around its center.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "laat/diagnostics.hpp"
#include "laat/tensor.hpp"

namespace laat {

class GeometryError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kUnitNormTolerance = 1e-6;

/// Labeled rows of unit-norm embedding vectors.
class AnchorSet {
 public:
  AnchorSet() = default;

  /// Validates every invariant; rows must already be unit norm.
  AnchorSet(std::vector<std::string> labels, Tensor vectors, std::string source)
      : labels_(std::move(labels)),
        vectors_(std::move(vectors)),
        source_(std::move(source)) {
    require_matrix(vectors_, "AnchorSet");
    if (vectors_.rows() < 1) throw GeometryError("anchor set is empty");
    if (vectors_.cols() < 2) {
      throw GeometryError("anchor dimension must be at least 2");
    }
    if (labels_.size() != vectors_.rows()) {
      throw GeometryError("anchor set has " + std::to_string(labels_.size()) +
                          " labels for " + std::to_string(vectors_.rows()) +
                          " vectors");
    }
    std::set<std::string> seen;
    for (const auto& l : labels_) {
      if (!seen.insert(l).second) throw GeometryError("duplicate label '" + l + "'");
    }
    for (std::size_t i = 0; i < vectors_.rows(); ++i) {
      const double nrm = norm2(vectors_.row(i));
      if (std::abs(nrm - 1.0) > kUnitNormTolerance) {
        throw GeometryError("anchor '" + labels_[i] + "' has norm " +
                            std::to_string(nrm));
      }
    }
  }

  /// Normalizes each row before validating.
  static AnchorSet normalized(std::vector<std::string> labels, Tensor vectors,
                              std::string source) {
    require_matrix(vectors, "AnchorSet");
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
      const double nrm = norm2(vectors.row(i));
      if (!(nrm > 0.0)) throw GeometryError("zero anchor vector at row " + std::to_string(i));
      for (double& v : vectors.row(i)) v /= nrm;
    }
    return AnchorSet(std::move(labels), std::move(vectors), std::move(source));
  }

  std::size_t size() const { return vectors_.rows(); }
  std::size_t dim() const { return vectors_.cols(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const Tensor& vectors() const { return vectors_; }
  std::span<const double> vector(std::size_t i) const { return vectors_.row(i); }
  const std::string& source() const { return source_; }

  std::optional<std::size_t> index_of(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - labels_.begin());
  }

  /// Rows for the given labels, in that order.
  AnchorSet subset(const std::vector<std::string>& labels) const {
    std::vector<std::size_t> idx;
    for (const auto& l : labels) {
      auto i = index_of(l);
      if (!i) throw GeometryError("label '" + l + "' not in anchor set");
      idx.push_back(*i);
    }
    return AnchorSet(labels, vectors_.gather_rows(idx), source_);
  }

 private:
  std::vector<std::string> labels_;
  Tensor vectors_;
  std::string source_;
};

/// Rotation by `angle` inside the plane spanned by orthonormal (e1, e2),
/// identity on the orthogonal complement. O(n) storage and application.
class PlanarRotation {
 public:
  PlanarRotation() = default;

  static PlanarRotation identity(std::size_t n) {
    PlanarRotation r;
    r.n_ = n;
    return r;
  }

  PlanarRotation(std::vector<double> e1, std::vector<double> e2, double angle)
      : n_(e1.size()),
        e1_(std::move(e1)),
        e2_(std::move(e2)),
        cos_(std::cos(angle)),
        sin_(std::sin(angle)),
        is_identity_(false) {}

  std::size_t dim() const { return n_; }
  bool is_identity() const { return is_identity_; }

  std::vector<double> apply(std::span<const double> x) const {
    return rotate(x, sin_);
  }

  /// Inverse map (R^T).
  std::vector<double> apply_transpose(std::span<const double> x) const {
    return rotate(x, -sin_);
  }

 private:
  std::vector<double> rotate(std::span<const double> x, double s) const {
    if (x.size() != n_) {
      throw GeometryError("rotation of dimension " + std::to_string(n_) +
                          " applied to vector of dimension " +
                          std::to_string(x.size()));
    }
    std::vector<double> out(x.begin(), x.end());
    if (is_identity_) return out;
    const double c1 = dot(x, e1_);
    const double c2 = dot(x, e2_);
    const double a = (cos_ - 1.0) * c1 - s * c2;
    const double b = (cos_ - 1.0) * c2 + s * c1;
    for (std::size_t i = 0; i < n_; ++i) out[i] += a * e1_[i] + b * e2_[i];
    return out;
  }

  std::size_t n_ = 0;
  std::vector<double> e1_, e2_;
  double cos_ = 1.0;
  double sin_ = 0.0;
  bool is_identity_ = true;
};

namespace detail {

/// Planar rotation from `from` to `to`; only the exactly antipodal case
/// (no plane) is left to the caller.
inline std::optional<PlanarRotation> planar_rotation_between(std::span<const double> from,
                                                             std::span<const double> to) {
  const double c = dot(from, to);
  std::vector<double> e2(to.begin(), to.end());
  for (std::size_t i = 0; i < e2.size(); ++i) e2[i] -= c * from[i];
  const double s = norm2(e2);
  if (s < 1e-12) {
    if (c > 0.0) return PlanarRotation::identity(from.size());
    return std::nullopt;
  }
  for (double& v : e2) v /= s;
  return PlanarRotation(std::vector<double>(from.begin(), from.end()), std::move(e2),
                        std::atan2(s, c));
}

}  // namespace detail

/// Orthogonal map sending unit vector `from` onto unit vector `to`.
inline PlanarRotation make_rotation(std::span<const double> from,
                                   std::span<const double> to) {
  if (from.size() != to.size()) {
    throw GeometryError("make_rotation: dimension mismatch " +
                        std::to_string(from.size()) + " vs " +
                        std::to_string(to.size()));
  }
  if (std::abs(norm2(from) - 1.0) > kUnitNormTolerance ||
      std::abs(norm2(to) - 1.0) > kUnitNormTolerance) {
    throw GeometryError("make_rotation: inputs must be unit vectors");
  }
  if (dot(from, to) < -1.0 + 1e-9) throw GeometryError("antipodal rotation ill-defined");
  return *detail::planar_rotation_between(from, to);
}

inline std::vector<double> pole(std::size_t n) {
  std::vector<double> p(n, 0.0);
  p[0] = 1.0;
  return p;
}

struct ExpansionModel {
  std::vector<double> center;
  double phi0 = 0.0;
  PlanarRotation rotation;  // rotation(center) == pole

  std::size_t dim() const { return center.size(); }
};

struct CosStats {
  double mean_offdiag_cos = 0.0;
  double max_offdiag_cos = 0.0;
  double min_offdiag_cos = 0.0;
  Tensor pairwise;
};

inline CosStats compute_cos_stats(const AnchorSet& anchors) {
  const std::size_t n = anchors.size();
  if (n < 2) throw GeometryError("need at least two anchors");
  CosStats st;
  st.pairwise = matmul(anchors.vectors(), anchors.vectors(), true);
  for (std::size_t i = 0; i < n; ++i) {
    st.pairwise(i, i) = 1.0;
    for (std::size_t j = 0; j < i; ++j) st.pairwise(i, j) = st.pairwise(j, i);
  }
  double total = 0.0;
  st.max_offdiag_cos = -std::numeric_limits<double>::infinity();
  st.min_offdiag_cos = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = st.pairwise(i, j);
      total += c;
      st.max_offdiag_cos = std::max(st.max_offdiag_cos, c);
      st.min_offdiag_cos = std::min(st.min_offdiag_cos, c);
    }
  st.mean_offdiag_cos = total / (static_cast<double>(n) * (n - 1) / 2.0);
  return st;
}

/// Polar angle of a (rotated) vector w.r.t. the pole [1, 0, ...]; uses the
/// norm of the tail for accuracy near 0 and pi.
inline double polar_angle(std::span<const double> rotated) {
  const double tail = norm2(rotated.subspan(1));
  return std::atan2(tail, rotated[0]);
}

/// Rotation taking unit `center` to the pole. A center exactly on the
/// negative pole gets a half-turn in the plane of e_1 and e_2.
inline PlanarRotation rotation_to_pole(const std::vector<double>& center) {
  const std::size_t n = center.size();
  if (n < 2) throw GeometryError("dimension must be at least 2");
  if (auto r = detail::planar_rotation_between(center, pole(n))) return *r;
  std::vector<double> e2(n, 0.0);
  e2[1] = 1.0;
  return PlanarRotation(center, std::move(e2), std::numbers::pi);
}

/// Rebuilds a model from stored parameters (center is re-normalized).
inline ExpansionModel make_expansion_model(std::vector<double> center, double phi0) {
  const double len = norm2(center);
  if (!(len > 1e-9)) throw GeometryError("degenerate center");
  if (!(phi0 > 0.0 && phi0 <= std::numbers::pi)) {
    throw GeometryError("phi0 must lie in (0, pi]");
  }
  for (double& v : center) v /= len;
  ExpansionModel m;
  m.rotation = rotation_to_pole(center);
  m.center = std::move(center);
  m.phi0 = phi0;
  return m;
}

/// Normalized arithmetic mean of the anchors, the rotation taking it to the
/// pole, and the widest polar angle among the anchors.
inline ExpansionModel fit_expansion(const AnchorSet& anchors) {
  const std::size_t n = anchors.dim();
  if (anchors.size() < 2) throw GeometryError("need at least two anchors");
  std::vector<double> sum(n, 0.0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    auto a = anchors.vector(i);
    for (std::size_t j = 0; j < n; ++j) sum[j] += a[j];
  }
  const double len = norm2(sum);
  if (len < 1e-9) throw GeometryError("degenerate center");
  for (double& v : sum) v /= len;

  ExpansionModel model;
  model.center = std::move(sum);
  model.rotation = rotation_to_pole(model.center);

  double phi0 = 0.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    phi0 = std::max(phi0, polar_angle(model.rotation.apply(anchors.vector(i))));
  }
  if (phi0 < 1e-9) throw GeometryError("all anchors coincide with center");
  if (phi0 >= std::numbers::pi / 2) {
    warn("anchors are not clustered inside a hemisphere (phi0 = " +
         std::to_string(phi0) + " rad); expansion will contract them");
  }
  model.phi0 = phi0;
  return model;
}

/// Expanded polar angle, clamped at pi.
inline double expanded_polar_angle(double phi, double phi0) {
  return std::min(std::numbers::pi / 2 * phi / phi0, std::numbers::pi);
}

/// Expands one vector with a fitted model: rotate to the pole, rescale the
/// polar angle, keep the remaining angular coordinates, rotate back.
inline std::vector<double> expand_novel(std::span<const double> anchor,
                                        const ExpansionModel& model) {
  if (anchor.size() != model.dim()) {
    throw GeometryError("expand: anchor dimension " + std::to_string(anchor.size()) +
                        " does not match model dimension " +
                        std::to_string(model.dim()));
  }
  const double nrm = norm2(anchor);
  if (!(nrm > 0.0)) throw GeometryError("expand: zero vector");
  std::vector<double> a(anchor.begin(), anchor.end());
  for (double& v : a) v /= nrm;

  std::vector<double> rotated = model.rotation.apply(a);
  const double tail = norm2(std::span<const double>(rotated).subspan(1));
  if (tail < 1e-12) {
    if (rotated[0] < 0.0) {
      throw GeometryError("expand: anchor antipodal to center has no azimuth");
    }
    return model.center;
  }
  const double phi = std::atan2(tail, rotated[0]);
  const double phi_bar = expanded_polar_angle(phi, model.phi0);
  const double ratio = std::sin(phi_bar) / tail;  // tail == sin(phi)
  rotated[0] = std::cos(phi_bar);
  for (std::size_t j = 1; j < rotated.size(); ++j) rotated[j] *= ratio;
  return model.rotation.apply_transpose(rotated);
}

inline AnchorSet expand(const AnchorSet& anchors, const ExpansionModel& model) {
  if (anchors.dim() != model.dim()) {
    throw GeometryError("expand: anchor dimension " + std::to_string(anchors.dim()) +
                        " does not match model dimension " +
                        std::to_string(model.dim()));
  }
  Tensor out = Tensor::matrix(anchors.size(), anchors.dim());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto e = expand_novel(anchors.vector(i), model);
    std::copy(e.begin(), e.end(), out.row(i).begin());
  }
  return AnchorSet(anchors.labels(), std::move(out),
                   "expanded(" + anchors.source() + ")");
}

/// Regular-simplex anchors with pairwise cosine -1/(N-1), built row by row
/// in lower-triangular form so only the first N-1 coordinates are used.
inline AnchorSet generate_mmc_anchors(std::size_t num_classes, std::size_t dim) {
  if (num_classes < 1) throw GeometryError("need at least one class");
  if (dim + 1 < num_classes) throw GeometryError("dimension too small for simplex");
  if (dim < 2) throw GeometryError("anchor dimension must be at least 2");
  const std::size_t n = num_classes;
  const double target = n > 1 ? -1.0 / static_cast<double>(n - 1) : 0.0;
  Tensor mu = Tensor::matrix(n, dim);
  mu(0, 0) = 1.0;
  for (std::size_t i = 1; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < i; ++j) {
      double partial = 0.0;
      for (std::size_t k = 0; k < j; ++k) partial += mu(i, k) * mu(j, k);
      mu(i, j) = (target - partial) / mu(j, j);
      sq += mu(i, j) * mu(i, j);
    }
    if (i < dim) mu(i, i) = std::sqrt(std::max(0.0, 1.0 - sq));
  }
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back("class_" + std::to_string(i));
  return AnchorSet::normalized(std::move(labels), std::move(mu), "mmc");
}

}  // namespace laat

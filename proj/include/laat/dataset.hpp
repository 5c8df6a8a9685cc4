// Labeled input batches in [0, 1]^dim and the synthetic blob tasks used in
// place of image datasets.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "laat/anchor_geometry.hpp"
#include "laat/tensor.hpp"

namespace laat {

struct Split {
  Tensor x;                    // samples x dim
  std::vector<std::size_t> y;  // indices into Dataset::labels

  std::size_t size() const { return y.size(); }
};

struct Dataset {
  std::vector<std::string> labels;
  std::size_t dim = 0;
  Split train;
  Split test;

  std::size_t num_classes() const { return labels.size(); }

  /// Keeps only the listed classes, relabelled in the listed order.
  Dataset filter_classes(const std::vector<std::string>& keep) const {
    std::vector<long> remap(labels.size(), -1);
    for (std::size_t k = 0; k < keep.size(); ++k) {
      auto it = std::find(labels.begin(), labels.end(), keep[k]);
      if (it == labels.end()) throw std::invalid_argument("unknown class '" + keep[k] + "'");
      remap[static_cast<std::size_t>(it - labels.begin())] = static_cast<long>(k);
    }
    auto filter = [&](const Split& s) {
      std::vector<std::size_t> rows, ys;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (remap[s.y[i]] >= 0) {
          rows.push_back(i);
          ys.push_back(static_cast<std::size_t>(remap[s.y[i]]));
        }
      Split out;
      out.x = rows.empty() ? Tensor::matrix(0, dim) : s.x.gather_rows(rows);
      out.y = std::move(ys);
      return out;
    };
    return Dataset{keep, dim, filter(train), filter(test)};
  }
};

inline std::vector<std::string> default_class_labels(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("class_" + std::to_string(i));
  return out;
}

/// Gaussian blobs around the given centers (one row per class), clipped to
/// [0, 1]. The first `train_per_class` draws of each class go to train.
inline Dataset make_blob_dataset(std::vector<std::string> labels, const Tensor& centers,
                                 std::size_t train_per_class, std::size_t test_per_class,
                                 double spread, std::uint64_t seed) {
  if (!(spread > 0.0)) throw std::invalid_argument("spread must be positive");
  if (labels.size() != centers.rows()) throw std::invalid_argument("one center per label required");
  const std::size_t k = centers.rows(), dim = centers.cols();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spread);
  auto draw = [&](std::size_t per_class) {
    Split s;
    s.x = Tensor::matrix(k * per_class, dim);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < per_class; ++i) {
        auto row = s.x.row(c * per_class + i);
        for (std::size_t d = 0; d < dim; ++d)
          row[d] = std::clamp(centers(c, d) + noise(rng), 0.0, 1.0);
        s.y.push_back(c);
      }
    return s;
  };
  Dataset ds;
  ds.labels = std::move(labels);
  ds.dim = dim;
  ds.train = draw(train_per_class);
  ds.test = draw(test_per_class);
  return ds;
}

/// Blobs around centers drawn uniformly from [0.2, 0.8]^dim. A quarter of the
/// per-class samples (at least one) is held out as the test split.
inline Dataset make_synthetic_dataset(std::size_t num_classes, std::size_t dim,
                                      std::size_t samples_per_class, double spread,
                                      std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("need at least two classes");
  if (!(spread > 0.0)) throw std::invalid_argument("spread must be positive");
  if (dim < 1 || samples_per_class < 2) {
    throw std::invalid_argument("need dim >= 1 and at least two samples per class");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 0.8);
  Tensor centers = Tensor::matrix(num_classes, dim);
  for (double& v : centers.data()) v = u(rng);
  const std::size_t test = std::max<std::size_t>(1, samples_per_class / 4);
  return make_blob_dataset(default_class_labels(num_classes), centers,
                           samples_per_class - test, test, spread, rng());
}

namespace detail {

inline std::vector<double> random_unit(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  double nrm = 0.0;
  do {
    for (double& x : v) x = g(rng);
    nrm = norm2(v);
  } while (nrm < 1e-12);
  for (double& x : v) x /= nrm;
  return v;
}

/// Unit vector at polar angle `angle` from `center` along a random azimuth.
inline std::vector<double> at_polar_angle(const std::vector<double>& center, double angle,
                                          std::mt19937_64& rng) {
  std::vector<double> u;
  double nrm = 0.0;
  do {
    u = random_unit(center.size(), rng);
    const double c = dot(u, center);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] -= c * center[i];
    nrm = norm2(u);
  } while (nrm < 1e-6);
  std::vector<double> out(center.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    out[i] = std::cos(angle) * center[i] + std::sin(angle) * u[i] / nrm;
  return out;
}

}  // namespace detail

/// A synthetic task whose classes are tied to anchor directions: every class
/// has a latent direction spread over a hemisphere, its inputs are blobs
/// around a fixed linear image of that direction, and its "text" anchor is
/// the direction with the polar angle squeezed into a narrow cap (so the
/// anchors share the high mutual cosine of real text-encoder anchors).
struct SemanticTaskConfig {
  std::size_t num_classes = 10;
  std::size_t anchor_dim = 16;
  std::size_t input_dim = 32;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 40;
  double spread = 0.1;
  double cap_half_angle = 0.6;   // max polar angle of the squeezed anchors
  double center_scale = 0.3;     // input centers = 0.5 + scale * W s
  std::uint64_t seed = 0;
};

struct SemanticTask {
  Dataset data;
  AnchorSet latent;       // well-spread class directions
  AnchorSet text_anchors; // clustered anchors (high mutual cosine)
};

inline SemanticTask make_semantic_task(const SemanticTaskConfig& cfg) {
  if (cfg.num_classes < 2) throw std::invalid_argument("need at least two classes");
  if (cfg.anchor_dim < 2) throw std::invalid_argument("anchor dimension must be at least 2");
  if (!(cfg.cap_half_angle > 0.0 && cfg.cap_half_angle < std::numbers::pi / 2)) {
    throw std::invalid_argument("cap half-angle must lie in (0, pi/2)");
  }
  std::mt19937_64 rng(cfg.seed);
  const std::size_t k = cfg.num_classes, n = cfg.anchor_dim;
  const auto center = detail::random_unit(n, rng);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Tensor latent = Tensor::matrix(k, n);
  Tensor text = Tensor::matrix(k, n);
  for (std::size_t c = 0; c < k; ++c) {
    // Class 0 sits on the hemisphere rim so the squeezed cap is exactly full.
    const double psi = c == 0 ? std::numbers::pi / 2
                              : std::numbers::pi / 2 * std::sqrt(unif(rng));
    const auto dir = detail::at_polar_angle(center, psi, rng);
    std::vector<double> u(n);
    for (std::size_t i = 0; i < n; ++i) u[i] = dir[i] - std::cos(psi) * center[i];
    const double un = norm2(u);
    const double squeezed = psi * cfg.cap_half_angle / (std::numbers::pi / 2);
    for (std::size_t i = 0; i < n; ++i) {
      latent(c, i) = dir[i];
      text(c, i) = std::cos(squeezed) * center[i] + std::sin(squeezed) * u[i] / un;
    }
  }

  std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(n)));
  Tensor w = Tensor::matrix(n, cfg.input_dim);
  for (double& v : w.data()) v = g(rng);
  Tensor centers = matmul(latent, w);
  for (double& v : centers.data()) v = std::clamp(0.5 + cfg.center_scale * v, 0.05, 0.95);

  auto labels = default_class_labels(k);
  SemanticTask task{
      make_blob_dataset(labels, centers, cfg.train_per_class, cfg.test_per_class,
                        cfg.spread, rng()),
      AnchorSet::normalized(labels, std::move(latent), "synthetic-latent"),
      AnchorSet::normalized(labels, std::move(text), "synthetic-cap")};
  return task;
}

/// Copy of `s` whose labels index `anchors` rows instead of `labels`.
inline Split align_to_anchors(const Split& s, const std::vector<std::string>& labels,
                              const AnchorSet& anchors) {
  std::vector<std::size_t> to_anchor(labels.size());
  for (std::size_t c = 0; c < labels.size(); ++c) {
    auto i = anchors.index_of(labels[c]);
    if (!i) throw std::invalid_argument("dataset class '" + labels[c] + "' has no anchor");
    to_anchor[c] = *i;
  }
  Split out{s.x, {}};
  out.y.reserve(s.size());
  for (std::size_t y : s.y) out.y.push_back(to_anchor.at(y));
  return out;
}

}  // namespace laat

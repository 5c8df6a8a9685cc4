// Zero-shot and few-shot classification against anchors, robustness
// evaluation, and semantic-consistency rank metrics.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "laat/anchor_geometry.hpp"
#include "laat/attacks.hpp"
#include "laat/dataset.hpp"
#include "laat/encoder.hpp"

namespace laat {

template <FeatureEncoder E>
Tensor encode(const E& encoder, const Tensor& x) {
  Tape t;
  return encoder.forward(t, t.constant(x)).value();
}

/// Row-wise argmax of z . A^T; ties go to the lowest anchor index.
inline std::vector<std::size_t> predict_from_features(const Tensor& z, const Tensor& anchors) {
  if (z.cols() != anchors.cols()) {
    throw std::invalid_argument("feature dimension " + std::to_string(z.cols()) +
                                " does not match anchor dimension " +
                                std::to_string(anchors.cols()));
  }
  const Tensor logits = matmul(z, anchors, true);
  std::vector<std::size_t> out(z.rows());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto row = logits.row(b);
    out[b] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

template <FeatureEncoder E>
std::vector<std::size_t> zero_shot_predict(const E& encoder, const Tensor& anchors,
                                           const Tensor& x) {
  if (encoder.output_dim() != anchors.cols()) {
    throw std::invalid_argument("encoder output dimension " +
                                std::to_string(encoder.output_dim()) +
                                " does not match anchor dimension " +
                                std::to_string(anchors.cols()));
  }
  return predict_from_features(encode(encoder, x), anchors);
}

/// Label of the anchor closest (in cosine) to the single input row `x`.
template <FeatureEncoder E>
std::string zero_shot_predict(const E& encoder, const AnchorSet& anchors, const Tensor& x) {
  if (x.rows() != 1) throw std::invalid_argument("expected a single input row");
  return anchors.labels()[zero_shot_predict(encoder, anchors.vectors(), x)[0]];
}

inline double accuracy_of(const std::vector<std::size_t>& pred, Labels y) {
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

template <FeatureEncoder E>
double clean_accuracy(const E& encoder, const Tensor& anchors, const Tensor& x, Labels y) {
  return accuracy_of(zero_shot_predict(encoder, anchors, x), y);
}

/// Accuracy on adversarial versions of `x`, attacked in batches of `batch`.
template <FeatureEncoder E>
double robust_accuracy(const E& encoder, const Tensor& anchors, const Tensor& x, Labels y,
                       const AttackConfig& attack, std::mt19937_64& rng,
                       std::size_t batch = 256) {
  std::size_t hit = 0;
  for (std::size_t start = 0; start < x.rows(); start += batch) {
    const std::size_t end = std::min(x.rows(), start + batch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor xb = x.gather_rows(idx);
    const Labels yb = y.subspan(start, end - start);
    const Tensor xa = pgd(encoder, anchors, xb, yb, attack, rng);
    const auto pred = zero_shot_predict(encoder, anchors, xa);
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == yb[i];
  }
  return x.rows() ? static_cast<double>(hit) / static_cast<double>(x.rows()) : 0.0;
}

// ---- image and blended anchors -----------------------------------------------

inline std::vector<double> normalized_or_throw(std::vector<double> v, const char* what) {
  const double n = norm2(v);
  if (!(n > 1e-12)) throw std::domain_error(std::string(what) + ": degenerate zero sum");
  for (double& x : v) x /= n;
  return v;
}

/// Norm2 of the summed (benign) support features.
template <FeatureEncoder E>
std::vector<double> build_image_anchor(const E& encoder, const Tensor& support) {
  if (support.rows() < 1) throw std::invalid_argument("image anchor needs at least one support image");
  const Tensor z = encode(encoder, support);
  std::vector<double> sum(z.cols(), 0.0);
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) sum[c] += z(r, c);
  return normalized_or_throw(std::move(sum), "image anchor");
}

/// Norm2(beta * text_anchor + sum of support features). `support` may be empty.
template <FeatureEncoder E>
std::vector<double> build_blended_anchor(std::span<const double> text_anchor, const E& encoder,
                                         const Tensor& support, double beta) {
  if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
  std::vector<double> sum(text_anchor.begin(), text_anchor.end());
  for (double& v : sum) v *= beta;
  if (support.rows() > 0) {
    const Tensor z = encode(encoder, support);
    if (z.cols() != sum.size()) throw std::invalid_argument("blended anchor: dimension mismatch");
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) sum[c] += z(r, c);
  }
  return normalized_or_throw(std::move(sum), "blended anchor");
}

// ---- reports -----------------------------------------------------------------

struct EvalReport {
  double clean_acc = 0.0;
  std::map<std::string, double> robust_acc;
  // Half-width of the 95% interval across tasks; empty for whole-split runs.
  std::map<std::string, double> ci95;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::string anchor_mode = "text";
  double beta = 0.0;
  std::size_t num_examples = 0;
  std::size_t num_tasks = 0;
  std::size_t queries_per_class = 0;
  std::vector<AttackConfig> attacks;
  std::uint64_t seed = 0;
};

/// Clean and per-attack robust accuracy on one split; split label c is
/// anchor row c (see `align_to_anchors`).
template <FeatureEncoder E>
EvalReport evaluate(const E& encoder, const Tensor& anchors, const Split& split,
                    const std::vector<AttackConfig>& attacks, std::uint64_t seed = 0) {
  EvalReport rep;
  rep.n_way = anchors.rows();
  rep.num_examples = split.size();
  rep.attacks = attacks;
  rep.seed = seed;
  rep.clean_acc = clean_accuracy(encoder, anchors, split.x, split.y);
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    std::mt19937_64 rng(seed + 7919 * (a + 1));
    rep.robust_acc[attacks[a].name] =
        robust_accuracy(encoder, anchors, split.x, split.y, attacks[a], rng);
  }
  return rep;
}

// ---- episodic tasks ------------------------------------------------------------

struct FewShotTask {
  std::vector<std::size_t> classes;                  // dataset class indices
  std::vector<std::vector<std::size_t>> support;     // per class, split rows
  std::vector<std::size_t> query;                    // split rows
  std::vector<std::size_t> query_labels;             // positions in `classes`
};

inline std::vector<FewShotTask> sample_nway_tasks(const Split& split, std::size_t num_classes,
                                                  std::size_t n_way, std::size_t k_shot,
                                                  std::size_t num_tasks, std::uint64_t seed,
                                                  std::size_t queries_per_class = 15) {
  if (n_way < 1) throw std::invalid_argument("n_way must be positive");
  if (num_classes < n_way) {
    throw std::invalid_argument("dataset has " + std::to_string(num_classes) +
                                " classes, fewer than n_way = " + std::to_string(n_way));
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < split.size(); ++i) by_class.at(split.y[i]).push_back(i);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (by_class[c].size() < k_shot + queries_per_class) {
      throw std::invalid_argument("class " + std::to_string(c) + " has only " +
                                  std::to_string(by_class[c].size()) + " samples");
    }
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> all(num_classes);
  std::iota(all.begin(), all.end(), 0);
  std::vector<FewShotTask> tasks;
  tasks.reserve(num_tasks);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    FewShotTask task;
    std::shuffle(all.begin(), all.end(), rng);
    task.classes.assign(all.begin(), all.begin() + static_cast<long>(n_way));
    for (std::size_t pos = 0; pos < n_way; ++pos) {
      auto pool = by_class[task.classes[pos]];
      std::shuffle(pool.begin(), pool.end(), rng);
      task.support.emplace_back(pool.begin(), pool.begin() + static_cast<long>(k_shot));
      for (std::size_t q = 0; q < queries_per_class; ++q) {
        task.query.push_back(pool[k_shot + q]);
        task.query_labels.push_back(pos);
      }
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

enum class AnchorMode { Text, Image, Blended };

inline std::string anchor_mode_name(AnchorMode m) {
  switch (m) {
    case AnchorMode::Text: return "text";
    case AnchorMode::Image: return "image";
    case AnchorMode::Blended: return "blended";
  }
  return "?";
}

/// Anchor matrix for one task. `text_anchors` row c belongs to dataset class c.
template <FeatureEncoder E>
Tensor task_anchors(const E& encoder, const Tensor& text_anchors, const Split& split,
                    const FewShotTask& task, AnchorMode mode, double beta) {
  Tensor a = Tensor::matrix(task.classes.size(), encoder.output_dim());
  for (std::size_t pos = 0; pos < task.classes.size(); ++pos) {
    const Tensor support = task.support[pos].empty()
                               ? Tensor::matrix(0, split.x.cols())
                               : split.x.gather_rows(task.support[pos]);
    std::vector<double> v;
    switch (mode) {
      case AnchorMode::Text: {
        auto t = text_anchors.row(task.classes[pos]);
        v.assign(t.begin(), t.end());
        break;
      }
      case AnchorMode::Image:
        v = build_image_anchor(encoder, support);
        break;
      case AnchorMode::Blended:
        v = build_blended_anchor(text_anchors.row(task.classes[pos]), encoder, support, beta);
        break;
    }
    std::copy(v.begin(), v.end(), a.row(pos).begin());
  }
  return a;
}

/// Mean accuracy over tasks; only query images are attacked.
template <FeatureEncoder E>
EvalReport evaluate_tasks(const E& encoder, const Tensor& text_anchors, const Split& split,
                          const std::vector<FewShotTask>& tasks, AnchorMode mode, double beta,
                          const std::vector<AttackConfig>& attacks, std::uint64_t seed = 0) {
  if (tasks.empty()) throw std::invalid_argument("no tasks to evaluate");
  EvalReport rep;
  rep.n_way = tasks.front().classes.size();
  rep.k_shot = tasks.front().support.front().size();
  rep.anchor_mode = anchor_mode_name(mode);
  rep.beta = mode == AnchorMode::Blended ? beta : 0.0;
  rep.num_tasks = tasks.size();
  rep.queries_per_class = tasks.front().query.size() / rep.n_way;
  rep.attacks = attacks;
  rep.seed = seed;

  std::vector<double> clean;
  std::vector<std::vector<double>> robust(attacks.size());
  std::mt19937_64 rng(seed);
  for (const auto& task : tasks) {
    const Tensor anchors = task_anchors(encoder, text_anchors, split, task, mode, beta);
    const Tensor q = split.x.gather_rows(task.query);
    clean.push_back(clean_accuracy(encoder, anchors, q, task.query_labels));
    for (std::size_t a = 0; a < attacks.size(); ++a)
      robust[a].push_back(
          robust_accuracy(encoder, anchors, q, task.query_labels, attacks[a], rng));
    rep.num_examples += task.query.size();
  }
  auto mean_ci = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    var = v.size() > 1 ? var / (n - 1) : 0.0;
    return std::pair{m, 1.96 * std::sqrt(var / n)};
  };
  auto [cm, cc] = mean_ci(clean);
  rep.clean_acc = cm;
  rep.ci95["clean"] = cc;
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    auto [m, c] = mean_ci(robust[a]);
    rep.robust_acc[attacks[a].name] = m;
    rep.ci95[attacks[a].name] = c;
  }
  return rep;
}

// ---- semantic consistency ----------------------------------------------------

struct GroupRanks {
  std::string group;
  double sum_of_ranks = 0.0;
  double top_ratio = 0.0;
};

struct RankMetrics {
  double sum_of_ranks = 0.0;  // averaged over groups
  double top5_ratio = 0.0;    // averaged over groups
  std::vector<GroupRanks> per_group;
  Tensor ranks;               // ranks(i, j): position of j in i's descending-cosine order
};

/// Ranks every category against every other by descending cosine (self is
/// rank 0, ties go to the lower index), then sums ranks within each group and
/// takes the fraction of within-group ranks below the group size.
inline RankMetrics rank_metrics(const AnchorSet& anchors,
                                const std::map<std::string, std::string>& group_of) {
  const std::size_t n = anchors.size();
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    auto it = group_of.find(anchors.labels()[i]);
    if (it == group_of.end()) {
      throw std::invalid_argument("label '" + anchors.labels()[i] + "' has no group");
    }
    groups[it->second].push_back(i);
  }
  const std::size_t gsize = groups.begin()->second.size();
  for (const auto& [g, members] : groups) {
    if (members.size() != gsize) {
      throw std::invalid_argument("group '" + g + "' has " + std::to_string(members.size()) +
                                  " members, expected " + std::to_string(gsize));
    }
  }

  const Tensor cos = matmul(anchors.vectors(), anchors.vectors(), true);
  RankMetrics out;
  out.ranks = Tensor::matrix(n, n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cos(i, a) > cos(i, b); });
    out.ranks(i, i) = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) out.ranks(i, order[k]) = double(k + 1);
  }

  for (const auto& [g, members] : groups) {
    GroupRanks gr{g, 0.0, 0.0};
    std::size_t top = 0;
    for (std::size_t i : members)
      for (std::size_t j : members) {
        gr.sum_of_ranks += out.ranks(i, j);
        top += out.ranks(i, j) < static_cast<double>(gsize);
      }
    gr.top_ratio = static_cast<double>(top) / static_cast<double>(gsize * gsize);
    out.sum_of_ranks += gr.sum_of_ranks;
    out.top5_ratio += gr.top_ratio;
    out.per_group.push_back(gr);
  }
  out.sum_of_ranks /= static_cast<double>(groups.size());
  out.top5_ratio /= static_cast<double>(groups.size());
  return out;
}

}  // namespace laat

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dot/model.hpp"
#include "dot/tensor.hpp"

namespace dot {

struct LossWeights {
  double lambda = 1.0;  // contrastive weight
  double beta = 0.1;    // difference-regularizer weight
  double tau = 0.07;    // temperature

  void validate() const {
    if (tau <= 0.0) throw std::invalid_argument("LossWeights: tau must be positive");
    if (lambda < 0.0 || beta < 0.0)
      throw std::invalid_argument("LossWeights: negative loss weight");
  }
};

// The four representation sets for one minibatch plus the labels driving
// the positive sets.
struct BatchFeatures {
  Tensor fs_src, ft_src;  // Bs x D
  Tensor fs_tgt, ft_tgt;  // Bt x D
  std::vector<int> source_labels;
  std::vector<int> target_pseudo_labels;
};

struct LossReport {
  double sup_s = 0.0, sup_t = 0.0;
  double con_s = 0.0, con_t = 0.0;
  double diff = 0.0;
  double total = 0.0;
  int skipped_anchors = 0;
  bool contrastive_all_skipped = false;
};

// Call counters used by the training-stage structural tests.
struct LossCallStats {
  std::uint64_t sup_source = 0, sup_target = 0;
  std::uint64_t contrastive_source = 0, contrastive_target = 0;
  std::uint64_t diff = 0;
  void reset() { *this = LossCallStats{}; }
};

inline LossCallStats& loss_call_stats() {
  static LossCallStats stats;
  return stats;
}

inline Tensor sup_loss_source(const BatchFeatures& batch,
                              const DotVitModel& model) {
  ++loss_call_stats().sup_source;
  if (!batch.fs_src.defined() || batch.fs_src.dim(0) == 0)
    throw std::invalid_argument("sup_loss_source: empty source batch");
  return cross_entropy_with_logits(model.classify(batch.fs_src, 0),
                                   batch.source_labels);
}

inline Tensor sup_loss_target(const BatchFeatures& batch,
                              const DotVitModel& model) {
  ++loss_call_stats().sup_target;
  if (!batch.ft_tgt.defined() || batch.ft_tgt.dim(0) == 0)
    throw std::invalid_argument("sup_loss_target: empty target batch");
  const std::size_t tgt_domain = model.config().num_domain_tokens - 1;
  return cross_entropy_with_logits(model.classify(batch.ft_tgt, tgt_domain),
                                   batch.target_pseudo_labels);
}

struct ContrastiveResult {
  Tensor loss;
  int skipped = 0;
  bool all_skipped = false;
};

namespace detail {

// Mean over anchors with a non-empty positive set of
//   logsumexp(sim_row / tau) - mean_{p in P} sim[row, p] / tau,
// on a similarity matrix of unit-normalized features. Anchors with empty
// positive sets are skipped and counted.
inline ContrastiveResult supcon_from_sim(const Tensor& sim,
                                         const std::vector<std::vector<int>>& positives,
                                         double tau) {
  const std::size_t a = sim.dim(0), c = sim.dim(1);
  std::vector<int> active;
  for (std::size_t j = 0; j < a; ++j)
    if (!positives[j].empty()) active.push_back(static_cast<int>(j));
  ContrastiveResult res;
  res.skipped = static_cast<int>(a - active.size());
  if (active.empty()) {
    res.loss = Tensor::scalar(0.0);
    res.all_skipped = true;
    return res;
  }
  const double inv_active = 1.0 / static_cast<double>(active.size());
  double total = 0.0;
  for (int j : active) {
    const double* row = sim.data().data() + static_cast<std::size_t>(j) * c;
    double mx = row[0] / tau;
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, row[i] / tau);
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) z += std::exp(row[i] / tau - mx);
    const double lse = mx + std::log(z);
    double pos_mean = 0.0;
    for (int p : positives[static_cast<std::size_t>(j)]) pos_mean += row[p] / tau;
    pos_mean /= static_cast<double>(positives[static_cast<std::size_t>(j)].size());
    total += lse - pos_mean;
  }
  res.loss = dot::detail::make_node(
      {1}, {total * inv_active}, {sim},
      [a, c, positives, tau, inv_active, active](dot::detail::TensorImpl& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = dot::detail::ensure_grad(p);
        const double gs = self.grad[0] * inv_active / tau;
        for (int j : active) {
          const double* row = p.data.data() + static_cast<std::size_t>(j) * c;
          double mx = row[0] / tau;
          for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, row[i] / tau);
          double z = 0.0;
          for (std::size_t i = 0; i < c; ++i) z += std::exp(row[i] / tau - mx);
          const auto& pos = positives[static_cast<std::size_t>(j)];
          const double inv_pos = 1.0 / static_cast<double>(pos.size());
          for (std::size_t i = 0; i < c; ++i)
            g[static_cast<std::size_t>(j) * c + i] +=
                gs * std::exp(row[i] / tau - mx) / z;
          for (int pi : pos)
            g[static_cast<std::size_t>(j) * c + static_cast<std::size_t>(pi)] -=
                gs * inv_pos;
        }
        (void)a;
      });
  return res;
}

inline ContrastiveResult supervised_contrastive(
    const Tensor& anchor_feats, const Tensor& candidate_feats,
    const std::vector<int>& anchor_labels,
    const std::vector<int>& candidate_labels, double tau) {
  if (candidate_feats.dim(0) < 2)
    throw std::invalid_argument(
        "contrastive loss: candidate pool needs at least 2 samples");
  if (anchor_labels.size() != anchor_feats.dim(0) ||
      candidate_labels.size() != candidate_feats.dim(0))
    throw std::invalid_argument("contrastive loss: label count mismatch");
  Tensor sim = matmul(l2_normalize(anchor_feats),
                      transpose(l2_normalize(candidate_feats)));
  std::vector<std::vector<int>> positives(anchor_labels.size());
  for (std::size_t j = 0; j < anchor_labels.size(); ++j)
    for (std::size_t i = 0; i < candidate_labels.size(); ++i)
      if (candidate_labels[i] == anchor_labels[j])
        positives[j].push_back(static_cast<int>(i));
  return supcon_from_sim(sim, positives, tau);
}

}  // namespace detail

// Target anchors against the in-batch source pool in the source-oriented
// space. Positives are the source samples sharing the anchor's pseudo-label.
inline ContrastiveResult contrastive_source(const BatchFeatures& batch,
                                            double tau) {
  ++loss_call_stats().contrastive_source;
  return detail::supervised_contrastive(batch.fs_tgt, batch.fs_src,
                                        batch.target_pseudo_labels,
                                        batch.source_labels, tau);
}

// Mirror image: source anchors against the in-batch target pool in the
// target-oriented space.
inline ContrastiveResult contrastive_target(const BatchFeatures& batch,
                                            double tau) {
  ++loss_call_stats().contrastive_target;
  return detail::supervised_contrastive(batch.ft_src, batch.ft_tgt,
                                        batch.source_labels,
                                        batch.target_pseudo_labels, tau);
}

namespace detail {

// Mean over rows of squared cosine similarity between paired rows of a and b.
inline Tensor mean_squared_cosine(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mean_squared_cosine");
  const std::size_t r = a.dim(0), d = a.dim(1);
  if (r == 0) throw std::invalid_argument("mean_squared_cosine: empty input");
  std::vector<double> cosines(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* av = a.data().data() + i * d;
    const double* bv = b.data().data() + i * d;
    double dot_ab = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot_ab += av[j] * bv[j];
      na += av[j] * av[j];
      nb += bv[j] * bv[j];
    }
    if (na <= 1e-24 || nb <= 1e-24)
      throw std::invalid_argument(
          "mean_squared_cosine: degenerate zero-norm feature");
    cosines[i] = dot_ab / (std::sqrt(na) * std::sqrt(nb));
  }
  double total = 0.0;
  for (double cv : cosines) total += cv * cv;
  total /= static_cast<double>(r);
  return make_node(
      {1}, {total}, {a, b},
      [r, d, cosines](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double gs = self.grad[0] * 2.0 / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i) {
          const double* av = pa.data.data() + i * d;
          const double* bv = pb.data.data() + i * d;
          double na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            na += av[j] * av[j];
            nb += bv[j] * bv[j];
          }
          const double inv_na = 1.0 / std::sqrt(na), inv_nb = 1.0 / std::sqrt(nb);
          const double ci = cosines[i];
          if (pa.requires_grad) {
            auto& g = ensure_grad(pa);
            for (std::size_t j = 0; j < d; ++j)
              g[i * d + j] += gs * ci * (bv[j] * inv_na * inv_nb -
                                         ci * av[j] * inv_na * inv_na);
          }
          if (pb.requires_grad) {
            auto& g = ensure_grad(pb);
            for (std::size_t j = 0; j < d; ++j)
              g[i * d + j] += gs * ci * (av[j] * inv_na * inv_nb -
                                         ci * bv[j] * inv_nb * inv_nb);
          }
        }
      });
}

}  // namespace detail

// Mean squared cosine between each sample's source- and target-oriented
// representations, over the union of both batches.
inline Tensor diff_regularizer(const BatchFeatures& batch) {
  ++loss_call_stats().diff;
  std::vector<Tensor> fs_parts, ft_parts;
  if (batch.fs_src.defined() && batch.fs_src.dim(0) > 0) {
    fs_parts.push_back(batch.fs_src);
    ft_parts.push_back(batch.ft_src);
  }
  if (batch.fs_tgt.defined() && batch.fs_tgt.dim(0) > 0) {
    fs_parts.push_back(batch.fs_tgt);
    ft_parts.push_back(batch.ft_tgt);
  }
  if (fs_parts.empty())
    throw std::invalid_argument("diff_regularizer: empty batch");
  return detail::mean_squared_cosine(concat_rows(fs_parts),
                                     concat_rows(ft_parts));
}

struct TotalLoss {
  Tensor value;
  LossReport report;
};

// L = sup_s + sup_t + lambda * (con_s + con_t) + beta * diff.
// Terms with a zero weight are not evaluated and report as exactly 0.
inline TotalLoss total_loss(const BatchFeatures& batch,
                            const DotVitModel& model,
                            const LossWeights& weights) {
  weights.validate();
  TotalLoss out;
  Tensor sup_s = sup_loss_source(batch, model);
  Tensor sup_t = sup_loss_target(batch, model);
  out.report.sup_s = sup_s.item();
  out.report.sup_t = sup_t.item();
  Tensor total = add(sup_s, sup_t);
  if (weights.lambda > 0.0) {
    ContrastiveResult cs = contrastive_source(batch, weights.tau);
    ContrastiveResult ct = contrastive_target(batch, weights.tau);
    out.report.con_s = cs.loss.item();
    out.report.con_t = ct.loss.item();
    out.report.skipped_anchors = cs.skipped + ct.skipped;
    out.report.contrastive_all_skipped = cs.all_skipped && ct.all_skipped;
    total = add(total, scale(add(cs.loss, ct.loss), weights.lambda));
  }
  if (weights.beta > 0.0) {
    Tensor diff = diff_regularizer(batch);
    out.report.diff = diff.item();
    total = add(total, scale(diff, weights.beta));
  }
  out.report.total = total.item();
  out.value = total;
  return out;
}

}  // namespace dot

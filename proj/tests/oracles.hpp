// Independent brute-force / scalar oracles used to pin expected values.
// Everything here is plain loops over std::vector<double> on purpose: these
// must not share code with the library paths they check.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Softmax of one row in extended precision.
inline std::vector<double> softmax_row(const std::vector<double>& x) {
  long double mx = x[0];
  for (double v : x) mx = std::max<long double>(mx, v);
  long double z = 0.0L;
  std::vector<long double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = expl(static_cast<long double>(x[i]) - mx);
    z += e[i];
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<double>(e[i] / z);
  return out;
}

// Mean cross-entropy of logits rows against integer labels.
inline double cross_entropy(const std::vector<std::vector<double>>& logits,
                            const std::vector<int>& labels) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    long double mx = logits[i][0];
    for (double v : logits[i]) mx = std::max<long double>(mx, v);
    long double z = 0.0L;
    for (double v : logits[i]) z += expl(static_cast<long double>(v) - mx);
    total += mx + logl(z) - logits[i][static_cast<std::size_t>(labels[i])];
  }
  return static_cast<double>(total / static_cast<long double>(logits.size()));
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const std::vector<double>& a) {
  return std::sqrt(dot(a, a));
}

inline std::vector<double> normalized(const std::vector<double>& a) {
  std::vector<double> out = a;
  const double n = norm(a);
  for (auto& v : out) v /= n;
  return out;
}

inline double cosine(const std::vector<double>& a,
                     const std::vector<double>& b) {
  return dot(a, b) / std::max(norm(a) * norm(b), 1e-12);
}

// Term-by-term evaluation of the supervised contrastive loss: for each
// anchor with a non-empty positive set,
//   -(1/|P|) sum_{p in P} log( exp(s_p/tau) / sum_c exp(s_c/tau) ),
// averaged over those anchors. Features are raw; normalization happens here.
inline double supcon(const std::vector<std::vector<double>>& anchors,
                     const std::vector<std::vector<double>>& candidates,
                     const std::vector<int>& anchor_labels,
                     const std::vector<int>& candidate_labels, double tau,
                     int* skipped_out = nullptr) {
  long double total = 0.0L;
  int active = 0, skipped = 0;
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    std::vector<double> a = normalized(anchors[j]);
    std::vector<long double> sims(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      std::vector<double> cc = normalized(candidates[c]);
      sims[c] = static_cast<long double>(dot(a, cc)) / tau;
    }
    std::vector<std::size_t> pos;
    for (std::size_t c = 0; c < candidates.size(); ++c)
      if (candidate_labels[c] == anchor_labels[j]) pos.push_back(c);
    if (pos.empty()) {
      ++skipped;
      continue;
    }
    long double mx = sims[0];
    for (auto s : sims) mx = std::max(mx, s);
    long double z = 0.0L;
    for (auto s : sims) z += expl(s - mx);
    const long double lse = mx + logl(z);
    long double anchor_loss = 0.0L;
    for (std::size_t p : pos) anchor_loss += -(sims[p] - lse);
    total += anchor_loss / static_cast<long double>(pos.size());
    ++active;
  }
  if (skipped_out) *skipped_out = skipped;
  return active ? static_cast<double>(total / active) : 0.0;
}

// Independent naive-loop implementation of the pseudo-label refinement
// algorithm: argmax predictions, per-class mean-delta split, reliable
// centers, weighted cosine reassignment.
struct RefineOracle {
  std::vector<int> labels;
  std::vector<bool> reliable;
  std::vector<std::vector<double>> centers;
  std::vector<bool> center_valid;
  std::vector<double> weights;
};

inline RefineOracle refine_naive(const std::vector<std::vector<double>>& feats,
                                 const std::vector<std::vector<double>>& logits,
                                 const std::vector<double>& deltas,
                                 std::size_t num_classes) {
  const std::size_t n = feats.size();
  RefineOracle out;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < num_classes; ++k)
      if (logits[i][k] > logits[i][best]) best = k;
    out.labels[i] = static_cast<int>(best);
  }
  out.reliable.assign(n, false);
  std::vector<std::vector<int>> members(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    double mean = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (out.labels[i] == static_cast<int>(k)) {
        mean += deltas[i];
        ++count;
      }
    if (count == 0) continue;
    mean /= count;
    for (std::size_t i = 0; i < n; ++i)
      if (out.labels[i] == static_cast<int>(k) && deltas[i] >= mean) {
        out.reliable[i] = true;
        members[k].push_back(static_cast<int>(i));
      }
  }
  const std::size_t d = feats.empty() ? 0 : feats[0].size();
  out.centers.assign(num_classes, std::vector<double>(d, 0.0));
  out.center_valid.assign(num_classes, false);
  std::size_t total_reliable = 0;
  for (std::size_t k = 0; k < num_classes; ++k) total_reliable += members[k].size();
  out.weights.assign(num_classes, 0.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (members[k].empty()) continue;
    for (int i : members[k])
      for (std::size_t j = 0; j < d; ++j)
        out.centers[k][j] += feats[static_cast<std::size_t>(i)][j];
    for (std::size_t j = 0; j < d; ++j)
      out.centers[k][j] /= static_cast<double>(members[k].size());
    out.center_valid[k] = true;
    out.weights[k] = std::exp(static_cast<double>(members[k].size()) /
                              static_cast<double>(total_reliable));
  }
  bool any_valid = false;
  for (bool v : out.center_valid) any_valid = any_valid || v;
  if (!any_valid) return out;
  for (std::size_t i = 0; i < n; ++i) {
    if (out.reliable[i]) continue;
    int best = -1;
    double best_score = 0.0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (!out.center_valid[k]) continue;
      const double score =
          out.weights[k] * (1.0 - cosine(feats[i], out.centers[k]));
      if (best < 0 || score < best_score) {
        best = static_cast<int>(k);
        best_score = score;
      }
    }
    out.labels[i] = best;
  }
  return out;
}

// SGD-with-momentum scalar walk used against the optimizer.
inline double sgd_sim(double theta, const std::vector<double>& grads, double lr,
                      double momentum, double weight_decay, double lr_scale) {
  double v = 0.0;
  for (double g : grads) {
    v = momentum * v + (g + weight_decay * theta);
    theta -= lr * lr_scale * v;
  }
  return theta;
}

}  // namespace oracle

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dot/model.hpp"
#include "dot/tensor.hpp"

namespace dot {

// Reliability metrics. Each returns higher values for more reliable
// samples; the entropy variant is therefore negated.
enum class MetricKind { confidence, neg_entropy, energy };

inline std::string metric_name(MetricKind k) {
  switch (k) {
    case MetricKind::confidence: return "confidence";
    case MetricKind::neg_entropy: return "neg_entropy";
    case MetricKind::energy: return "energy";
  }
  throw std::logic_error("metric_name: bad enum");
}

inline MetricKind metric_from_name(const std::string& s) {
  if (s == "confidence") return MetricKind::confidence;
  if (s == "neg_entropy") return MetricKind::neg_entropy;
  if (s == "energy") return MetricKind::energy;
  throw std::invalid_argument("unknown metric \"" + s +
                              "\" (confidence|neg_entropy|energy)");
}

struct PseudoLabelState {
  std::vector<int> labels;          // refined pseudo-label per target sample
  std::vector<bool> reliable;       // per-sample reliability flag
  std::vector<double> deltas;       // metric value per sample
  std::vector<std::vector<double>> centers;  // K x D reliable class centers
  std::vector<bool> center_valid;            // per class
  std::vector<double> class_weights;         // w_k, meaningful where valid
  MetricKind metric = MetricKind::energy;
  bool aborted = false;  // no valid center was available; labels kept as-is
};

// argmax over softmax of the source-head logits; ties break to the lowest
// class index. Probabilities are retained for the metrics.
inline std::pair<std::vector<int>, Tensor> initial_predictions(
    const Tensor& fs_tgt, const DotVitModel& model) {
  NoGradGuard ng;
  Tensor logits = model.classify(fs_tgt, 0);
  Tensor probs = softmax(logits);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    labels[i] = static_cast<int>(best);
  }
  return {labels, probs};
}

inline std::vector<double> metric_delta(const Tensor& logits, MetricKind kind) {
  if (logits.rank() != 2)
    throw std::invalid_argument("metric_delta: expected [NxK] logits");
  dot::detail::check_finite(logits, "metric_delta");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    switch (kind) {
      case MetricKind::confidence: {
        double best = 0.0;
        for (std::size_t j = 0; j < k; ++j)
          best = std::max(best, std::exp(row[j] - mx) / z);
        out[i] = best;
        break;
      }
      case MetricKind::neg_entropy: {
        double ent = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const double p = std::exp(row[j] - mx) / z;
          if (p > 0.0) ent -= p * std::log(p);
        }
        out[i] = -ent;
        break;
      }
      case MetricKind::energy:
        out[i] = mx + std::log(z);
        break;
    }
  }
  return out;
}

// Per predicted class, samples at or above the class mean of delta are
// reliable. Returns the flags and the per-class reliable index sets.
inline std::pair<std::vector<bool>, std::vector<std::vector<int>>>
split_reliable(const std::vector<int>& labels, const std::vector<double>& deltas,
               std::size_t num_classes) {
  if (labels.size() != deltas.size())
    throw std::invalid_argument("split_reliable: size mismatch");
  std::vector<double> mean(num_classes, 0.0);
  std::vector<std::size_t> count(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    mean[static_cast<std::size_t>(labels[i])] += deltas[i];
    ++count[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    if (count[k] > 0) mean[k] /= static_cast<double>(count[k]);
  std::vector<bool> flags(labels.size(), false);
  std::vector<std::vector<int>> sets(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    if (deltas[i] >= mean[k]) {
      flags[i] = true;
      sets[k].push_back(static_cast<int>(i));
    }
  }
  return {flags, sets};
}

// Unweighted mean of the source-oriented features of each class's reliable
// samples. Classes with no reliable samples are flagged invalid.
inline std::pair<std::vector<std::vector<double>>, std::vector<bool>>
class_centers(const Tensor& fs_tgt,
              const std::vector<std::vector<int>>& reliable_sets) {
  const std::size_t d = fs_tgt.dim(1);
  std::vector<std::vector<double>> centers(reliable_sets.size(),
                                           std::vector<double>(d, 0.0));
  std::vector<bool> valid(reliable_sets.size(), false);
  for (std::size_t k = 0; k < reliable_sets.size(); ++k) {
    if (reliable_sets[k].empty()) continue;
    for (int idx : reliable_sets[k]) {
      const double* row =
          fs_tgt.data().data() + static_cast<std::size_t>(idx) * d;
      for (std::size_t j = 0; j < d; ++j) centers[k][j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j)
      centers[k][j] /= static_cast<double>(reliable_sets[k].size());
    valid[k] = true;
  }
  return {centers, valid};
}

namespace detail {

inline double cosine(const double* a, const double* b, std::size_t d) {
  double dot_ab = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    dot_ab += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  return dot_ab / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

}  // namespace detail

// Reliable samples keep their predicted label; unreliable samples move to
// argmin_k w_k * (1 - cos(f, c_k)) over valid centers, ties to the lowest
// class index. With no valid center the state is returned aborted.
inline std::vector<int> reassign(const Tensor& fs_tgt,
                                 const PseudoLabelState& state) {
  const std::size_t n = fs_tgt.dim(0), d = fs_tgt.dim(1);
  bool any_valid = false;
  for (bool v : state.center_valid) any_valid = any_valid || v;
  if (!any_valid)
    throw std::runtime_error("reassign: no valid class centers");
  std::vector<int> out = state.labels;
  for (std::size_t i = 0; i < n; ++i) {
    if (state.reliable[i]) continue;
    const double* row = fs_tgt.data().data() + i * d;
    int best = -1;
    double best_score = 0.0;
    for (std::size_t k = 0; k < state.centers.size(); ++k) {
      if (!state.center_valid[k]) continue;
      const double score =
          state.class_weights[k] *
          (1.0 - detail::cosine(row, state.centers[k].data(), d));
      if (best < 0 || score < best_score) {
        best = static_cast<int>(k);
        best_score = score;
      }
    }
    out[i] = best;
  }
  return out;
}

// Full refinement pipeline: initial predictions, reliability split,
// reliable class centers, weighted nearest-center reassignment.
inline PseudoLabelState refine(const Tensor& fs_tgt, const DotVitModel& model,
                               MetricKind kind, std::size_t head_index = 0) {
  NoGradGuard ng;
  PseudoLabelState st;
  st.metric = kind;
  Tensor logits = model.classify(fs_tgt, head_index);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  st.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    st.labels[i] = static_cast<int>(best);
  }
  st.deltas = metric_delta(logits, kind);
  auto [flags, sets] = split_reliable(st.labels, st.deltas, k);
  st.reliable = flags;
  auto [centers, valid] = class_centers(fs_tgt, sets);
  st.centers = centers;
  st.center_valid = valid;

  std::size_t reliable_total = 0;
  for (const auto& s : sets) reliable_total += s.size();
  st.class_weights.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c)
    if (valid[c])
      st.class_weights[c] = std::exp(static_cast<double>(sets[c].size()) /
                                     static_cast<double>(reliable_total));

  bool any_valid = false;
  for (bool v : valid) any_valid = any_valid || v;
  if (!any_valid || n == 0) {
    st.aborted = true;  // keep the raw predictions
    return st;
  }
  st.labels = reassign(fs_tgt, st);
  return st;
}

inline double reliable_ratio(const PseudoLabelState& st) {
  if (st.reliable.empty()) return 0.0;
  std::size_t r = 0;
  for (bool b : st.reliable) r += b ? 1 : 0;
  return static_cast<double>(r) / static_cast<double>(st.reliable.size());
}

inline nlohmann::json pseudo_label_state_to_json(const PseudoLabelState& st) {
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < st.labels.size(); ++i)
    samples.push_back({{"id", i},
                       {"label", st.labels[i]},
                       {"reliable", static_cast<bool>(st.reliable[i])},
                       {"delta", st.deltas[i]}});
  return {{"metric", metric_name(st.metric)},
          {"aborted", st.aborted},
          {"samples", samples},
          {"centers", st.centers},
          {"center_valid", st.center_valid},
          {"class_weights", st.class_weights}};
}

inline PseudoLabelState pseudo_label_state_from_json(const nlohmann::json& j) {
  PseudoLabelState st;
  st.metric = metric_from_name(j.at("metric").get<std::string>());
  st.aborted = j.at("aborted").get<bool>();
  for (const auto& s : j.at("samples")) {
    st.labels.push_back(s.at("label").get<int>());
    st.reliable.push_back(s.at("reliable").get<bool>());
    st.deltas.push_back(s.at("delta").get<double>());
  }
  st.centers = j.at("centers").get<std::vector<std::vector<double>>>();
  st.center_valid = j.at("center_valid").get<std::vector<bool>>();
  st.class_weights = j.at("class_weights").get<std::vector<double>>();
  return st;
}

}  // namespace dot

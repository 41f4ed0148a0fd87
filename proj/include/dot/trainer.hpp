#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dot/data.hpp"
#include "dot/losses.hpp"
#include "dot/model.hpp"
#include "dot/optim.hpp"
#include "dot/pseudo_labels.hpp"
#include "dot/serialize.hpp"

namespace dot {

struct TrainConfig {
  int stage1_epochs = 15;
  int stage2_epochs = 25;
  int refine_every = 1;
  double lr = 3e-3;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::size_t batch_size = 32;
  LossWeights weights;
  MetricKind metric = MetricKind::energy;
  std::uint64_t seed = 0;
  bool augment = true;
  bool warm_start_stage2 = false;     // keep stage-1 weights instead of reinit
  bool refine_in_target_space = false;  // comparison flag, not a supported path

  void validate() const {
    if (stage1_epochs < 0 || stage2_epochs < 0)
      throw std::invalid_argument("TrainConfig: negative epoch count");
    if (refine_every < 1)
      throw std::invalid_argument("TrainConfig: refine_every must be >= 1");
    if (lr <= 0.0 || momentum < 0.0 || weight_decay < 0.0)
      throw std::invalid_argument("TrainConfig: bad optimizer settings");
    if (batch_size < 2)
      throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
    weights.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"stage1_epochs", c.stage1_epochs},
          {"stage2_epochs", c.stage2_epochs},
          {"refine_every", c.refine_every},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"lambda", c.weights.lambda},
          {"beta", c.weights.beta},
          {"tau", c.weights.tau},
          {"metric", metric_name(c.metric)},
          {"seed", c.seed},
          {"augment", c.augment},
          {"warm_start_stage2", c.warm_start_stage2},
          {"refine_in_target_space", c.refine_in_target_space}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.stage1_epochs = j.at("stage1_epochs").get<int>();
  c.stage2_epochs = j.at("stage2_epochs").get<int>();
  c.refine_every = j.at("refine_every").get<int>();
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.weights.lambda = j.at("lambda").get<double>();
  c.weights.beta = j.at("beta").get<double>();
  c.weights.tau = j.at("tau").get<double>();
  c.metric = metric_from_name(j.at("metric").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.augment = j.at("augment").get<bool>();
  c.warm_start_stage2 = j.at("warm_start_stage2").get<bool>();
  c.refine_in_target_space = j.at("refine_in_target_space").get<bool>();
  c.validate();
  return c;
}

struct EpochRecord {
  int stage = 0;
  int epoch = 0;
  double sup_s = 0, sup_t = 0, con_s = 0, con_t = 0, diff = 0, total = 0;
  double skipped_anchors = 0;  // mean per step
  double source_acc = 0;       // h_s(f_s(x_s)) on the source set
  double target_acc = 0;       // active target path (see README)
  double pseudo_label_acc = 0;
  double reliable_ratio = 0;
  double reliable_acc = 0;
  double token_divergence = 0;
  int refine_aborted = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"stage", r.stage},
          {"epoch", r.epoch},
          {"sup_s", r.sup_s},
          {"sup_t", r.sup_t},
          {"con_s", r.con_s},
          {"con_t", r.con_t},
          {"diff", r.diff},
          {"total", r.total},
          {"skipped_anchors", r.skipped_anchors},
          {"source_acc", r.source_acc},
          {"target_acc", r.target_acc},
          {"pseudo_label_acc", r.pseudo_label_acc},
          {"reliable_ratio", r.reliable_ratio},
          {"reliable_acc", r.reliable_acc},
          {"token_divergence", r.token_divergence},
          {"refine_aborted", r.refine_aborted}};
}

// Stable column order for the CSV exporter.
inline const std::vector<std::string>& epoch_record_columns() {
  static const std::vector<std::string> cols = {
      "stage",          "epoch",          "sup_s",
      "sup_t",          "con_s",          "con_t",
      "diff",           "total",          "skipped_anchors",
      "source_acc",     "target_acc",     "pseudo_label_acc",
      "reliable_ratio", "reliable_acc",   "token_divergence",
      "refine_aborted"};
  return cols;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::size_t> per_class_correct;
  std::vector<std::size_t> per_class_total;

  std::vector<double> per_class_accuracy() const {
    std::vector<double> out(per_class_total.size(), 0.0);
    for (std::size_t k = 0; k < out.size(); ++k)
      if (per_class_total[k])
        out[k] = static_cast<double>(per_class_correct[k]) /
                 static_cast<double>(per_class_total[k]);
    return out;
  }
};

namespace detail {

inline std::vector<int> predict_range(const DotVitModel& model,
                                      const DomainDataset& ds,
                                      std::size_t head, std::size_t space,
                                      std::size_t begin, std::size_t end) {
  NoGradGuard ng;
  std::vector<int> preds;
  preds.reserve(end - begin);
  const std::size_t chunk = 64;
  for (std::size_t start = begin; start < end; start += chunk) {
    const std::size_t stop = std::min(end, start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    EncoderOutput enc = model.encode(images_at(ds, idx));
    Tensor logits = model.classify(enc.domain_features.at(space), head);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < stop - start; ++i) {
      const double* row = logits.data().data() + i * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      preds.push_back(static_cast<int>(best));
    }
  }
  return preds;
}

}  // namespace detail

// Argmax accuracy of head h_{head} applied to the f_{space} representation.
// Shards across threads with integer count reduction when threads > 1.
inline EvalReport evaluate(const DotVitModel& model, const DomainDataset& ds,
                           std::size_t head, std::size_t space,
                           unsigned threads = 1) {
  const std::size_t n = ds.size();
  const std::size_t k = model.config().num_classes;
  std::vector<int> preds(n);
  if (threads <= 1 || n < 2 * threads) {
    preds = detail::predict_range(model, ds, head, space, 0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::vector<int>> parts(threads);
    const std::size_t per = (n + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t begin = std::min<std::size_t>(n, t * per);
      const std::size_t end = std::min<std::size_t>(n, begin + per);
      pool.emplace_back([&, t, begin, end] {
        parts[t] = detail::predict_range(model, ds, head, space, begin, end);
      });
    }
    for (auto& th : pool) th.join();
    preds.clear();
    for (auto& p : parts) preds.insert(preds.end(), p.begin(), p.end());
  }
  EvalReport rep;
  rep.per_class_correct.assign(k, 0);
  rep.per_class_total.assign(k, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto truth = static_cast<std::size_t>(ds.labels[i]);
    ++rep.per_class_total[truth];
    if (preds[i] == ds.labels[i]) {
      ++correct;
      ++rep.per_class_correct[truth];
    }
  }
  rep.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  return rep;
}

// Mean cosine similarity between the two domain-token representations of
// each sample; the quantity the difference regularizer pushes down.
inline double token_divergence(const DotVitModel& model,
                               const DomainDataset& ds) {
  NoGradGuard ng;
  const std::size_t n = ds.size();
  const std::size_t d = model.config().embed_dim;
  double total = 0.0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    EncoderOutput enc = model.encode(images_at(ds, idx));
    for (std::size_t i = 0; i < stop - start; ++i)
      total += detail::cosine(enc.fs.data().data() + i * d,
                              enc.ft.data().data() + i * d, d);
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// Source-oriented (or, behind the comparison flag, target-oriented) features
// of the full target set under a frozen model.
inline Tensor extract_features(const DotVitModel& model,
                               const DomainDataset& ds, std::size_t space) {
  NoGradGuard ng;
  const std::size_t n = ds.size();
  std::vector<Tensor> parts;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    EncoderOutput enc = model.encode(images_at(ds, idx));
    parts.push_back(enc.domain_features.at(space));
  }
  return concat_rows(parts);
}

inline double label_accuracy(const std::vector<int>& labels,
                             const std::vector<int>& truth) {
  if (labels.empty() || labels.size() != truth.size()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    ok += labels[i] == truth[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

inline double reliable_accuracy(const PseudoLabelState& st,
                                const std::vector<int>& truth) {
  std::size_t ok = 0, n = 0;
  for (std::size_t i = 0; i < st.labels.size(); ++i)
    if (st.reliable[i]) {
      ++n;
      ok += st.labels[i] == truth[i] ? 1 : 0;
    }
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Two-stage training
// ---------------------------------------------------------------------------

struct Stage1Result {
  DotVitModel model;
  PseudoLabelState initial_labels;
  double raw_label_acc = 0.0;      // argmax predictions before refinement
  double refined_label_acc = 0.0;  // after the first refinement
};

struct TrainState {
  DotVitConfig model_cfg;
  TrainConfig cfg;
  DotVitModel model;
  SgdOptimizer opt{1.0, 0.0, 0.0};
  PseudoLabelState pl;
  int stage2_epochs_done = 0;
};

using EpochSink = std::function<void(const EpochRecord&)>;
using CheckpointSink = std::function<void(TrainState&)>;

namespace detail {

inline PseudoLabelState run_refinement(const DotVitModel& model,
                                       const DomainDataset& target,
                                       const TrainConfig& cfg) {
  const std::size_t space =
      cfg.refine_in_target_space ? model.config().num_domain_tokens - 1 : 0;
  Tensor feats = extract_features(model, target, space);
  return refine(feats, model, cfg.metric, space);
}

}  // namespace detail

// Stage 1: source-supervised training of the full backbone through the
// source token and head, then the first pseudo-label refinement pass.
inline Stage1Result stage1(const DomainDataset& source,
                           const DomainDataset& target,
                           const DotVitConfig& model_cfg,
                           const TrainConfig& cfg,
                           const EpochSink& sink = nullptr) {
  cfg.validate();
  Stage1Result res;
  res.model = DotVitModel::init(model_cfg, tag_seed(cfg.seed, "stage1.init"));
  SgdOptimizer opt(cfg.lr, cfg.momentum, cfg.weight_decay);
  auto params = res.model.parameters();
  const std::uint64_t stream = tag_seed(cfg.seed, "stage1.source");
  for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (const Batch& b :
         batches(source, cfg.batch_size, mix_seed(stream, epoch), cfg.augment)) {
      EncoderOutput enc = res.model.encode(b.images);
      BatchFeatures bf;
      bf.fs_src = enc.fs;
      bf.ft_src = enc.ft;
      bf.source_labels = labels_at(source, b.indices);
      Tensor loss = sup_loss_source(bf, res.model);
      zero_grads(params);
      loss.backward();
      opt.step(params);
      loss_sum += loss.item();
      ++steps;
    }
    if (sink) {
      EpochRecord rec;
      rec.stage = 1;
      rec.epoch = epoch;
      rec.sup_s = steps ? loss_sum / static_cast<double>(steps) : 0.0;
      rec.total = rec.sup_s;
      rec.source_acc = evaluate(res.model, source, 0, 0).accuracy;
      rec.target_acc = evaluate(res.model, target, 0, 0).accuracy;
      rec.token_divergence = token_divergence(res.model, target);
      sink(rec);
    }
  }
  {
    Tensor feats = extract_features(res.model, target, 0);
    auto [raw_labels, probs] = initial_predictions(feats, res.model);
    res.raw_label_acc = label_accuracy(raw_labels, target.labels);
  }
  res.initial_labels = detail::run_refinement(res.model, target, cfg);
  res.refined_label_acc = label_accuracy(res.initial_labels.labels, target.labels);
  return res;
}

// Stage 2 epochs, starting from whatever state is passed in. Used both for
// fresh runs and checkpoint resumes; per-epoch streams are derived from
// (seed, epoch), so the walk is identical either way.
inline void run_stage2(const DomainDataset& source, const DomainDataset& target,
                       TrainState& st, const EpochSink& sink = nullptr,
                       const CheckpointSink& checkpoint_sink = nullptr) {
  st.cfg.validate();
  auto params = st.model.parameters();
  const std::uint64_t src_stream = tag_seed(st.cfg.seed, "stage2.source");
  const std::uint64_t tgt_stream = tag_seed(st.cfg.seed, "stage2.target");
  for (int epoch = st.stage2_epochs_done; epoch < st.cfg.stage2_epochs;
       ++epoch) {
    auto src_batches = batches(source, st.cfg.batch_size,
                               mix_seed(src_stream, epoch), st.cfg.augment);
    auto tgt_batches = batches(target, st.cfg.batch_size,
                               mix_seed(tgt_stream, epoch), st.cfg.augment);
    const std::size_t steps = std::min(src_batches.size(), tgt_batches.size());
    EpochRecord rec;
    rec.stage = 2;
    rec.epoch = epoch;
    for (std::size_t i = 0; i < steps; ++i) {
      EncoderOutput enc_s = st.model.encode(src_batches[i].images);
      EncoderOutput enc_t = st.model.encode(tgt_batches[i].images);
      BatchFeatures bf;
      bf.fs_src = enc_s.fs;
      bf.ft_src = enc_s.ft;
      bf.fs_tgt = enc_t.fs;
      bf.ft_tgt = enc_t.ft;
      bf.source_labels = labels_at(source, src_batches[i].indices);
      bf.target_pseudo_labels.reserve(st.cfg.batch_size);
      for (std::size_t idx : tgt_batches[i].indices)
        bf.target_pseudo_labels.push_back(st.pl.labels.at(idx));
      TotalLoss tl = total_loss(bf, st.model, st.cfg.weights);
      st.model.zero_grad();
      tl.value.backward();
      st.opt.step(params);
      rec.sup_s += tl.report.sup_s;
      rec.sup_t += tl.report.sup_t;
      rec.con_s += tl.report.con_s;
      rec.con_t += tl.report.con_t;
      rec.diff += tl.report.diff;
      rec.total += tl.report.total;
      rec.skipped_anchors += tl.report.skipped_anchors;
    }
    if (steps) {
      const double inv = 1.0 / static_cast<double>(steps);
      rec.sup_s *= inv;
      rec.sup_t *= inv;
      rec.con_s *= inv;
      rec.con_t *= inv;
      rec.diff *= inv;
      rec.total *= inv;
      rec.skipped_anchors *= inv;
    }
    if ((epoch + 1) % st.cfg.refine_every == 0) {
      PseudoLabelState fresh = detail::run_refinement(st.model, target, st.cfg);
      if (fresh.aborted) {
        rec.refine_aborted = 1;  // keep previous labels and continue
      } else {
        st.pl = fresh;
      }
    }
    rec.source_acc = evaluate(st.model, source, 0, 0).accuracy;
    rec.target_acc =
        evaluate(st.model, target, st.model.config().num_domain_tokens - 1,
                 st.model.config().num_domain_tokens - 1)
            .accuracy;
    rec.pseudo_label_acc = label_accuracy(st.pl.labels, target.labels);
    rec.reliable_ratio = reliable_ratio(st.pl);
    rec.reliable_acc = reliable_accuracy(st.pl, target.labels);
    rec.token_divergence = token_divergence(st.model, target);
    st.stage2_epochs_done = epoch + 1;
    if (sink) sink(rec);
    if (checkpoint_sink) checkpoint_sink(st);
  }
}

// Full two-stage pipeline (supplementary training algorithm): stage-1
// source model for initial pseudo-labels, then a reinitialized model
// trained with the complete objective.
inline TrainState train(const DomainDataset& source,
                        const DomainDataset& target,
                        const DotVitConfig& model_cfg, const TrainConfig& cfg,
                        const EpochSink& sink = nullptr,
                        const CheckpointSink& checkpoint_sink = nullptr,
                        Stage1Result* stage1_out = nullptr) {
  Stage1Result s1 = stage1(source, target, model_cfg, cfg, sink);
  if (stage1_out) *stage1_out = s1;
  TrainState st;
  st.model_cfg = model_cfg;
  st.cfg = cfg;
  st.model = cfg.warm_start_stage2
                 ? s1.model
                 : DotVitModel::init(model_cfg, tag_seed(cfg.seed, "stage2.init"));
  st.opt = SgdOptimizer(cfg.lr, cfg.momentum, cfg.weight_decay);
  st.pl = s1.initial_labels;
  run_stage2(source, target, st, sink, checkpoint_sink);
  return st;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, TrainState& st) {
  nlohmann::json manifest = {
      {"model_config", to_json(st.model_cfg)},
      {"train_config", to_json(st.cfg)},
      {"stage2_epochs_done", st.stage2_epochs_done},
      {"pseudo_labels", pseudo_label_state_to_json(st.pl)}};
  NamedBlobs c;
  c.manifest = manifest.dump();
  auto params = st.model.parameters();
  for (Parameter* p : params) c.blobs.emplace_back(p->name, p->tensor);
  const auto& vel = st.opt.velocities();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> v =
        i < vel.size() && !vel.empty()
            ? vel[i]
            : std::vector<double>(params[i]->tensor.size(), 0.0);
    c.blobs.emplace_back("opt.velocity." + params[i]->name,
                         Tensor({params[i]->tensor.size()}, std::move(v)));
  }
  write_container_file(path, c);
}

inline TrainState load_checkpoint(const std::string& path) {
  NamedBlobs c = read_container_file(path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(c.manifest);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
  }
  TrainState st;
  st.model_cfg = vit_config_from_json(manifest.at("model_config"));
  st.cfg = train_config_from_json(manifest.at("train_config"));
  st.stage2_epochs_done = manifest.at("stage2_epochs_done").get<int>();
  st.pl = pseudo_label_state_from_json(manifest.at("pseudo_labels"));
  st.model = DotVitModel::from_blobs(st.model_cfg, c);
  st.opt = SgdOptimizer(st.cfg.lr, st.cfg.momentum, st.cfg.weight_decay);
  auto params = st.model.parameters();
  std::vector<std::vector<double>> vel;
  vel.reserve(params.size());
  for (Parameter* p : params)
    vel.push_back(c.find("opt.velocity." + p->name).data());
  st.opt.set_velocities(std::move(vel));
  return st;
}

}  // namespace dot

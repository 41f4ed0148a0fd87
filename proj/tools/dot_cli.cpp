// Command-line entry point: dataset generation, two-stage training,
// evaluation, one-shot pseudo-label refinement, the gradient-check suite,
// and metrics export.
//
// Exit codes: 0 success, 1 runtime/IO failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dot/data.hpp"
#include "dot/gradcheck.hpp"
#include "dot/losses.hpp"
#include "dot/model.hpp"
#include "dot/pseudo_labels.hpp"
#include "dot/serialize.hpp"
#include "dot/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Overlays a config-file section onto the JSON form of the defaults,
// rejecting keys the section does not define.
json merge_section(const json& defaults, const json& file_section,
                   const std::string& section) {
  json merged = defaults;
  for (auto it = file_section.begin(); it != file_section.end(); ++it) {
    if (!merged.contains(it.key()))
      throw UsageError("unknown key \"" + it.key() + "\" in config section \"" +
                       section + "\"");
    merged[it.key()] = it.value();
  }
  return merged;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

dot::DomainDataset load_dataset_checked(const std::string& path) {
  if (!fs::exists(path))
    throw std::runtime_error("dataset file not found: " + path);
  return dot::load_dataset(path);
}

std::size_t space_index(const dot::DotVitConfig& cfg, const std::string& s) {
  if (s == "s") return 0;
  if (s == "t") return cfg.num_domain_tokens - 1;
  throw UsageError("expected s or t, got \"" + s + "\"");
}

int cmd_gen_data(const dot::SyntheticSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  auto [source, target] = dot::generate_pair(spec);
  dot::save_dataset(source, (fs::path(out_dir) / "source.dotds").string());
  dot::save_dataset(target, (fs::path(out_dir) / "target.dotds").string());
  json echo = dot::to_json(spec);
  write_text_file(fs::path(out_dir) / "genspec.json", echo.dump(2) + "\n");
  std::cout << "wrote " << out_dir << "/source.dotds and target.dotds ("
            << source.size() << " samples per domain)\n";
  return 0;
}

struct TrainArgs {
  std::string config_path, source_path, target_path, out_dir, resume_path;
  std::vector<std::pair<std::string, json>> train_overrides;
  std::vector<std::pair<std::string, json>> model_overrides;
};

int cmd_train(const TrainArgs& args) {
  json model_json = dot::to_json(dot::DotVitConfig{});
  json train_json = dot::to_json(dot::TrainConfig{});
  std::string source_path = args.source_path, target_path = args.target_path;
  if (!args.config_path.empty()) {
    std::ifstream is(args.config_path);
    if (!is)
      throw std::runtime_error("config file not found: " + args.config_path);
    json file;
    try {
      file = json::parse(is);
    } catch (const json::exception& e) {
      throw UsageError("config parse error: " + std::string(e.what()));
    }
    for (auto it = file.begin(); it != file.end(); ++it) {
      if (it.key() == "model")
        model_json = merge_section(model_json, it.value(), "model");
      else if (it.key() == "train")
        train_json = merge_section(train_json, it.value(), "train");
      else if (it.key() == "data") {
        for (auto d = it.value().begin(); d != it.value().end(); ++d) {
          if (d.key() == "source") {
            if (source_path.empty()) source_path = d.value().get<std::string>();
          } else if (d.key() == "target") {
            if (target_path.empty()) target_path = d.value().get<std::string>();
          } else {
            throw UsageError("unknown key \"" + d.key() +
                             "\" in config section \"data\"");
          }
        }
      } else {
        throw UsageError("unknown config section \"" + it.key() + "\"");
      }
    }
  }
  for (const auto& [k, v] : args.model_overrides) model_json[k] = v;
  for (const auto& [k, v] : args.train_overrides) train_json[k] = v;
  if (source_path.empty() || target_path.empty())
    throw UsageError("train: --source and --target are required (flag or config)");

  dot::DomainDataset source = load_dataset_checked(source_path);
  dot::DomainDataset target = load_dataset_checked(target_path);

  fs::create_directories(args.out_dir);
  fs::create_directories(fs::path(args.out_dir) / "checkpoints");
  std::ofstream metrics(fs::path(args.out_dir) / "metrics.jsonl");
  if (!metrics)
    throw std::runtime_error("cannot write metrics log in " + args.out_dir);
  auto sink = [&](const dot::EpochRecord& rec) {
    metrics << dot::to_json(rec).dump() << "\n";
    metrics.flush();
  };
  auto checkpoint_sink = [&](dot::TrainState& st) {
    char name[64];
    std::snprintf(name, sizeof(name), "stage2_epoch_%04d.dotck",
                  st.stage2_epochs_done);
    dot::save_checkpoint(
        (fs::path(args.out_dir) / "checkpoints" / name).string(), st);
  };

  dot::TrainState state;
  if (!args.resume_path.empty()) {
    state = dot::load_checkpoint(args.resume_path);
    json echo = {{"model", dot::to_json(state.model_cfg)},
                 {"train", dot::to_json(state.cfg)},
                 {"data", {{"source", source_path}, {"target", target_path}}},
                 {"resumed_from", args.resume_path}};
    write_text_file(fs::path(args.out_dir) / "config.json", echo.dump(2) + "\n");
    dot::run_stage2(source, target, state, sink, checkpoint_sink);
  } else {
    dot::DotVitConfig model_cfg = dot::vit_config_from_json(model_json);
    dot::TrainConfig cfg = dot::train_config_from_json(train_json);
    if (model_cfg.image_size != source.manifest.image_size)
      throw std::runtime_error("model image_size does not match dataset");
    json echo = {{"model", model_json},
                 {"train", train_json},
                 {"data", {{"source", source_path}, {"target", target_path}}}};
    write_text_file(fs::path(args.out_dir) / "config.json", echo.dump(2) + "\n");
    state = dot::train(source, target, model_cfg, cfg, sink, checkpoint_sink);
  }
  dot::save_checkpoint((fs::path(args.out_dir) / "checkpoint_final.dotck").string(),
                       state);
  std::cout << "training complete; metrics at " << args.out_dir
            << "/metrics.jsonl\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::string& head, const std::string& space,
             unsigned threads) {
  dot::TrainState st = dot::load_checkpoint(ckpt);
  dot::DomainDataset ds = load_dataset_checked(data);
  if (ds.manifest.image_size != st.model_cfg.image_size)
    throw std::runtime_error("checkpoint/dataset image size mismatch");
  const std::size_t h = space_index(st.model_cfg, head);
  const std::size_t sp = space_index(st.model_cfg, space);
  dot::EvalReport rep = dot::evaluate(st.model, ds, h, sp, threads);
  json out = {{"accuracy", rep.accuracy},
              {"per_class_accuracy", rep.per_class_accuracy()},
              {"per_class_total", rep.per_class_total},
              {"head", head},
              {"space", space},
              {"num_samples", ds.size()},
              {"domain_tag", ds.domain_tag}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_refine_once(const std::string& ckpt, const std::string& data,
                    const std::string& metric, const std::string& out_path) {
  dot::TrainState st = dot::load_checkpoint(ckpt);
  dot::DomainDataset ds = load_dataset_checked(data);
  if (ds.manifest.image_size != st.model_cfg.image_size)
    throw std::runtime_error("checkpoint/dataset image size mismatch");
  dot::MetricKind kind = dot::metric_from_name(metric);
  dot::Tensor feats = dot::extract_features(st.model, ds, 0);
  auto [raw_labels, probs] = dot::initial_predictions(feats, st.model);
  dot::PseudoLabelState pl = dot::refine(feats, st.model, kind);
  if (!out_path.empty())
    write_text_file(out_path, dot::pseudo_label_state_to_json(pl).dump() + "\n");
  json report = {{"metric", metric},
                 {"num_samples", pl.labels.size()},
                 {"reliable_ratio", dot::reliable_ratio(pl)},
                 {"aborted", pl.aborted}};
  if (!ds.labels.empty()) {
    report["initial_label_accuracy"] = dot::label_accuracy(raw_labels, ds.labels);
    report["pseudo_label_accuracy"] = dot::label_accuracy(pl.labels, ds.labels);
    report["reliable_subset_accuracy"] = dot::reliable_accuracy(pl, ds.labels);
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int instances, bool corrupt) {
  auto rows = dot::run_gradcheck_suite(seed, instances, corrupt);
  bool ok = true;
  std::printf("%-24s %-12s %-10s %-9s %s\n", "op", "max_rel_err", "threshold",
              "instances", "result");
  for (const auto& r : rows) {
    ok = ok && r.pass();
    std::printf("%-24s %-12.3e %-10.0e %-9d %s\n", r.name.c_str(),
                r.max_rel_err, r.threshold, r.instances,
                r.pass() ? "PASS" : "FAIL");
  }
  return ok ? 0 : 1;
}

int cmd_export_metrics(const std::string& log_path, const std::string& format,
                       const std::string& out_path) {
  std::ifstream is(log_path);
  if (!is) throw std::runtime_error("metrics log not found: " + log_path);
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot write " + out_path);
  const auto& cols = dot::epoch_record_columns();
  if (format == "csv") {
    for (std::size_t i = 0; i < cols.size(); ++i)
      os << (i ? "," : "") << cols[i];
    os << "\n";
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("malformed metrics line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    if (format == "csv") {
      for (std::size_t i = 0; i < cols.size(); ++i) {
        if (!rec.contains(cols[i]))
          throw std::runtime_error("metrics line " + std::to_string(lineno) +
                                   " missing column " + cols[i]);
        os << (i ? "," : "") << rec[cols[i]].dump();
      }
      os << "\n";
    } else {
      os << rec.dump() << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-oriented transformer experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic domain pair");
  dot::SyntheticSpec spec;
  std::string gen_out = "data";
  gen->add_option("--classes", spec.num_classes, "number of classes")
      ->check(CLI::PositiveNumber);
  gen->add_option("--per-class", spec.samples_per_class, "samples per class")
      ->check(CLI::PositiveNumber);
  gen->add_option("--image-size", spec.image_size, "square image size");
  gen->add_option("--seed", spec.seed, "generation seed");
  gen->add_option("--brightness", spec.shift.brightness_offset,
                  "target brightness offset");
  gen->add_option("--noise", spec.shift.noise_sigma, "target noise sigma");
  gen->add_option("--texture", spec.shift.background_texture_amplitude,
                  "target background texture amplitude");
  gen->add_flag("--invert", spec.shift.invert, "invert target pixels");
  gen->add_option("--out", gen_out, "output directory");

  // train
  auto* tr = app.add_subcommand("train", "run the two-stage training pipeline");
  TrainArgs targs;
  targs.out_dir = "run";
  tr->add_option("--config", targs.config_path, "JSON config file");
  tr->add_option("--source", targs.source_path, "source dataset file");
  tr->add_option("--target", targs.target_path, "target dataset file");
  tr->add_option("--out", targs.out_dir, "output directory");
  tr->add_option("--resume", targs.resume_path,
                 "checkpoint to resume stage 2 from");
  std::optional<double> lambda, beta, tau, lr;
  std::optional<int> s1e, s2e, refine_every;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> metric;
  std::optional<bool> augment, warm_start;
  tr->add_option("--lambda", lambda, "contrastive weight");
  tr->add_option("--beta", beta, "difference regularizer weight");
  tr->add_option("--tau", tau, "contrastive temperature");
  tr->add_option("--lr", lr, "base learning rate");
  tr->add_option("--stage1-epochs", s1e, "stage 1 epoch count");
  tr->add_option("--stage2-epochs", s2e, "stage 2 epoch count");
  tr->add_option("--refine-every", refine_every, "epochs between refinements");
  tr->add_option("--seed", seed, "training seed");
  tr->add_option("--batch-size", batch_size, "minibatch size per domain");
  tr->add_option("--metric", metric,
                 "reliability metric (confidence|neg_entropy|energy)");
  tr->add_option("--augment", augment, "enable flip/erase augmentation");
  tr->add_option("--warm-start", warm_start,
                 "warm-start stage 2 from the stage-1 weights");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_head = "t", ev_space = "t";
  unsigned ev_threads = 1;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset file")->required();
  ev->add_option("--head", ev_head, "classifier head: s or t");
  ev->add_option("--space", ev_space, "feature space: s or t");
  ev->add_option("--threads", ev_threads, "evaluation shards");

  // refine-once
  auto* rf = app.add_subcommand("refine-once",
                                "run one pseudo-label refinement pass");
  std::string rf_ckpt, rf_data, rf_metric = "energy", rf_out;
  rf->add_option("--checkpoint", rf_ckpt, "checkpoint file")->required();
  rf->add_option("--data", rf_data, "target dataset file")->required();
  rf->add_option("--metric", rf_metric,
                 "reliability metric (confidence|neg_entropy|energy)");
  rf->add_option("--out", rf_out, "pseudo-label state output file");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t gc_seed = 0;
  int gc_instances = 20;
  bool gc_corrupt = false;
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--instances", gc_instances, "random instances per op")
      ->check(CLI::PositiveNumber);
  gc->add_flag("--corrupt-gradient-hook", gc_corrupt,
               "negative control: corrupt one gradient and expect failure");

  // export-metrics
  auto* ex = app.add_subcommand("export-metrics", "export a metrics log");
  std::string ex_log, ex_format = "csv", ex_out;
  ex->add_option("--log", ex_log, "metrics.jsonl path")->required();
  ex->add_option("--format", ex_format, "csv or records")
      ->check(CLI::IsMember({"csv", "records"}));
  ex->add_option("--out", ex_out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec, gen_out);
    if (tr->parsed()) {
      auto set = [&](const char* key, const auto& opt) {
        if (opt) targs.train_overrides.emplace_back(key, json(*opt));
      };
      set("lambda", lambda);
      set("beta", beta);
      set("tau", tau);
      set("lr", lr);
      set("stage1_epochs", s1e);
      set("stage2_epochs", s2e);
      set("refine_every", refine_every);
      set("seed", seed);
      set("batch_size", batch_size);
      set("metric", metric);
      set("augment", augment);
      set("warm_start_stage2", warm_start);
      return cmd_train(targs);
    }
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_head, ev_space, ev_threads);
    if (rf->parsed()) return cmd_refine_once(rf_ckpt, rf_data, rf_metric, rf_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_instances, gc_corrupt);
    if (ex->parsed()) return cmd_export_metrics(ex_log, ex_format, ex_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

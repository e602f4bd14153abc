#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "qml/config.hpp"
#include "qml/dataspace.hpp"
#include "qml/log.hpp"
#include "qml/retrieval.hpp"
#include "qml/trainer.hpp"

// Experiment orchestration: dataset -> split -> train -> zero-shot retrieval,
// with every artifact (config copy, checkpoint, history, metrics) written to
// the run's output directory. Ablations run the same pipeline per
// (arm, seed) cell, optionally across threads.

namespace qml {

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("io: cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("io: cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("io: write failed for '" + path + "'");
}

inline Dataset load_or_generate(const DataConfig& dc) {
  return dc.use_synthetic ? generate_synthetic(dc.synth) : load_features(dc.features_file);
}

inline SplitSpec make_split(const Dataset& ds, const DataConfig& dc) {
  return zero_shot_split(ds, dc.unseen_fraction, dc.split_seed);
}

// Queries are unseen-class sketches against an unseen-class photo gallery
// (roles swap under reverse).
inline RetrievalRun unseen_retrieval(const Dataset& ds, const SplitSpec& split, const Array& emb,
                                     bool reverse) {
  Modality query_mod = reverse ? Modality::Photo : Modality::Sketch;
  std::size_t e = emb.shape[1];
  std::vector<std::size_t> qrows, grows;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (!split.unseen.count(ds.samples[i].class_id)) continue;
    (ds.samples[i].modality == query_mod ? qrows : grows).push_back(i);
  }
  if (qrows.empty()) throw std::runtime_error("evaluate: no unseen-class queries");
  if (grows.empty()) throw std::runtime_error("evaluate: empty unseen-class gallery");

  Array q({qrows.size(), e}), g({grows.size(), e});
  std::vector<int> qc, gc;
  std::vector<long long> gid;
  for (std::size_t i = 0; i < qrows.size(); ++i) {
    std::copy_n(emb.data.begin() + qrows[i] * e, e, q.data.begin() + i * e);
    qc.push_back(ds.samples[qrows[i]].class_id);
  }
  for (std::size_t i = 0; i < grows.size(); ++i) {
    std::copy_n(emb.data.begin() + grows[i] * e, e, g.data.begin() + i * e);
    gc.push_back(ds.samples[grows[i]].class_id);
    gid.push_back(ds.samples[grows[i]].id);
  }
  return retrieve(q, g, qc, gc, gid);
}

inline RetrievalMetrics evaluate_params(const Dataset& ds, const SplitSpec& split,
                                        const TrainConfig& tc, const Bindings& params,
                                        bool reverse) {
  Array emb = embed_all(ds, tc, params);
  return compute_metrics(unseen_retrieval(ds, split, emb, reverse));
}

struct ExperimentResult {
  TrainResult train_result;
  RetrievalMetrics metrics;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                       const std::string& config_text) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "config.json").string(), config_text);

  Dataset ds = load_or_generate(cfg.data);
  SplitSpec split = make_split(ds, cfg.data);
  log_info("training: " + std::to_string(ds.samples.size()) + " samples, " +
           std::to_string(split.seen.size()) + " seen / " + std::to_string(split.unseen.size()) +
           " unseen classes");

  ExperimentResult res;
  res.train_result = train(ds, split, cfg.train, config_text);
  save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), res.train_result.checkpoint);
  write_text_file((fs::path(out_dir) / "history.csv").string(),
                  history_csv(res.train_result.history));
  write_text_file((fs::path(out_dir) / "distances.csv").string(),
                  distance_csv(res.train_result.epoch_cross_dist,
                               res.train_result.epoch_intra_dist));

  res.metrics = evaluate_params(ds, split, cfg.train, res.train_result.checkpoint.params,
                                cfg.eval.reverse_direction);
  write_text_file((fs::path(out_dir) / "metrics.json").string(), metrics_json(res.metrics));
  log_info("metrics: map_all=" + format_real(res.metrics.map_all));
  return res;
}

// Re-evaluate an existing run directory's checkpoint under the same config.
inline RetrievalMetrics run_evaluate(const ExperimentConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  Checkpoint ck = load_checkpoint((fs::path(out_dir) / "checkpoint.bin").string());
  Dataset ds = load_or_generate(cfg.data);
  SplitSpec split = make_split(ds, cfg.data);
  RetrievalMetrics m =
      evaluate_params(ds, split, cfg.train, ck.params, cfg.eval.reverse_direction);
  write_text_file((fs::path(out_dir) / "metrics.json").string(), metrics_json(m));
  return m;
}

inline ExperimentConfig apply_arm(ExperimentConfig base, const ArmSpec& arm, std::uint64_t seed) {
  base.train.loss.variant = arm.variant;
  base.train.loss.use_cls = arm.use_cls;
  base.train.loss.use_meta_margin = arm.use_meta;
  base.train.meta.enabled = arm.use_meta;
  base.train.seed = seed;
  base.ablation.reset();
  return base;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct AblationCell {
  std::string arm;
  std::uint64_t seed = 0;
  RetrievalMetrics metrics;
};

inline std::string ablation_summary_csv(const AblationConfig& ab,
                                        const std::vector<AblationCell>& cells) {
  std::string out = "arm,seed,map_all,map_at_200,prec_at_100,prec_at_200\n";
  auto row = [&](const std::string& arm, const std::string& seed, const RetrievalMetrics& m) {
    out += arm + "," + seed + "," + format_real(m.map_all) + "," + format_real(m.map_at_200) +
           "," + format_real(m.prec_at_100) + "," + format_real(m.prec_at_200) + "\n";
  };
  for (const auto& c : cells) row(c.arm, std::to_string(c.seed), c.metrics);
  for (const auto& arm : ab.arms) {
    std::vector<double> ma, m2, p1, p2;
    for (const auto& c : cells) {
      if (c.arm != arm) continue;
      ma.push_back(c.metrics.map_all);
      m2.push_back(c.metrics.map_at_200);
      p1.push_back(c.metrics.prec_at_100);
      p2.push_back(c.metrics.prec_at_200);
    }
    RetrievalMetrics m;
    m.map_all = median(ma);
    m.map_at_200 = median(m2);
    m.prec_at_100 = median(p1);
    m.prec_at_200 = median(p2);
    row(arm, "median", m);
  }
  return out;
}

// Every (arm, seed) cell trains and evaluates in its own subdirectory; a
// progress log line is flushed as each cell lands so partial sweeps survive
// interruption. The summary is written afterwards in canonical cell order.
inline std::vector<AblationCell> run_ablation(const ExperimentConfig& base,
                                              const std::string& out_dir, std::size_t jobs,
                                              const std::string& config_text) {
  namespace fs = std::filesystem;
  if (!base.ablation) throw std::invalid_argument("ablation: config has no ablation section");
  const AblationConfig& ab = *base.ablation;
  fs::create_directories(fs::path(out_dir) / "cells");
  write_text_file((fs::path(out_dir) / "config.json").string(), config_text);

  Dataset ds = load_or_generate(base.data);
  SplitSpec split = make_split(ds, base.data);

  std::vector<AblationCell> cells;
  for (const auto& arm : ab.arms)
    for (std::uint64_t seed : ab.seeds) cells.push_back({arm, seed, {}});

  std::ofstream progress((fs::path(out_dir) / "progress.log").string(),
                         std::ios::binary | std::ios::trunc);
  std::mutex progress_mu;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(cells.size());

  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        AblationCell& cell = cells[i];
        ExperimentConfig cfg = apply_arm(base, parse_arm(cell.arm), cell.seed);
        std::string cell_dir =
            (fs::path(out_dir) / "cells" / (cell.arm + "_s" + std::to_string(cell.seed))).string();
        fs::create_directories(cell_dir);
        TrainResult tr = train(ds, split, cfg.train, config_text);
        save_checkpoint((fs::path(cell_dir) / "checkpoint.bin").string(), tr.checkpoint);
        write_text_file((fs::path(cell_dir) / "history.csv").string(), history_csv(tr.history));
        cell.metrics = evaluate_params(ds, split, cfg.train, tr.checkpoint.params,
                                       base.eval.reverse_direction);
        write_text_file((fs::path(cell_dir) / "metrics.json").string(),
                        metrics_json(cell.metrics));
        std::lock_guard<std::mutex> lock(progress_mu);
        progress << cell.arm << " seed=" << cell.seed << " map_all=" << format_real(
            cell.metrics.map_all) << "\n";
        progress.flush();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  write_text_file((fs::path(out_dir) / "summary.csv").string(), ablation_summary_csv(ab, cells));
  return cells;
}

inline std::string run_generate(const ExperimentConfig& cfg, const std::string& out_dir,
                                const std::string& config_text) {
  namespace fs = std::filesystem;
  if (!cfg.data.use_synthetic) {
    throw std::invalid_argument("generate: config must carry data.synthetic");
  }
  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "config.json").string(), config_text);
  std::string path = (fs::path(out_dir) / "features.csv").string();
  Dataset ds = generate_synthetic(cfg.data.synth);
  save_features(path, ds);
  return path;
}

}  // namespace qml

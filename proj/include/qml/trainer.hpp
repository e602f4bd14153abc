#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qml/dataspace.hpp"
#include "qml/graph.hpp"
#include "qml/losses.hpp"
#include "qml/meta_margin.hpp"
#include "qml/rng.hpp"

// Optimization loop: PK-sample a batch, embed it, optionally run the meta
// episode for the margin pair, build the loss graph, backprop, and apply one
// AdamW step. Everything trainable lives in one named parameter map so the
// optimizer and the checkpoint stay format-agnostic.

namespace qml {

enum class EmbeddingMode { DirectCoordinates, LinearProjection };

inline std::string embedding_mode_name(EmbeddingMode m) {
  return m == EmbeddingMode::DirectCoordinates ? "direct" : "linear_projection";
}

inline EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "direct") return EmbeddingMode::DirectCoordinates;
  if (s == "linear_projection") return EmbeddingMode::LinearProjection;
  throw std::invalid_argument("config: unknown embedding mode '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 20;
  std::size_t batches_per_epoch = 25;
  std::size_t P = 3;
  std::size_t K = 4;
  std::uint64_t seed = 1;
  EmbeddingMode embedding_mode = EmbeddingMode::LinearProjection;
  std::size_t proj_out_dim = 16;
  LossConfig loss;
  MetaConfig meta;

  void validate() const {
    // zero learning rate is the degenerate no-op case used by tests
    if (learning_rate < 0.0) throw std::invalid_argument("train: learning_rate must be >= 0");
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("train: adam betas must lie in [0,1)");
    }
    if (adam_eps <= 0.0) throw std::invalid_argument("train: adam_eps must be > 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batches_per_epoch < 1) throw std::invalid_argument("train: batches_per_epoch must be >= 1");
    if (P < 2) throw std::invalid_argument("train: P must be >= 2 (mining needs two classes)");
    if (K < 1) throw std::invalid_argument("train: K must be >= 1");
    if (embedding_mode == EmbeddingMode::LinearProjection && proj_out_dim < 1) {
      throw std::invalid_argument("train: proj_out_dim must be >= 1");
    }
    loss.validate();
    if (meta.enabled) meta.validate();
    if (loss.use_meta_margin != meta.enabled) {
      throw std::invalid_argument("train: loss.use_meta_margin must match meta.enabled");
    }
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::uint64_t t = 0;
  std::map<std::string, Array> m;
  std::map<std::string, Array> v;
};

// Bias-corrected Adam with decoupled weight decay; a parameter absent from
// the gradient map is treated as zero-gradient.
inline void adam_step(Bindings& params, const std::map<std::string, Array>& grads,
                      AdamState& st, const AdamConfig& cfg) {
  st.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (auto& [name, p] : params) {
    const Array* g = nullptr;
    auto it = grads.find(name);
    if (it != grads.end()) {
      if (it->second.shape != p.shape) {
        throw std::invalid_argument("adam: gradient shape mismatch for " + name);
      }
      g = &it->second;
    }
    Array& m = st.m.try_emplace(name, Array::zeros(p.shape)).first->second;
    Array& v = st.v.try_emplace(name, Array::zeros(p.shape)).first->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double gi = g ? g->data[i] : 0.0;
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      p.data[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.data[i]);
    }
  }
}

struct HistoryRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double total = 0.0;
  double inter = 0.0;
  double intra = 0.0;
  double cls = 0.0;
  double active_fraction = 0.0;
  double m_inter = 0.0;
  double m_intra = 0.0;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,batch,total,inter,intra,cls,active_fraction,m_inter,m_intra\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.batch) + "," + format_real(r.total) +
           "," + format_real(r.inter) + "," + format_real(r.intra) + "," + format_real(r.cls) +
           "," + format_real(r.active_fraction) + "," + format_real(r.m_inter) + "," +
           format_real(r.m_intra) + "\n";
  }
  return out;
}

inline std::string distance_csv(const std::vector<double>& cross, const std::vector<double>& intra) {
  std::string out = "epoch,mean_cross_modal_same_class,mean_intra_modal_same_class\n";
  for (std::size_t i = 0; i < cross.size(); ++i) {
    out += std::to_string(i + 1) + "," + format_real(cross[i]) + "," + format_real(intra[i]) + "\n";
  }
  return out;
}

struct Checkpoint {
  std::string config_json;
  std::uint64_t epoch = 0;
  std::string rng_state;
  Bindings params;
  AdamState opt;
};

namespace detail {

inline void guard_finite_total(double total, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(total)) {
    throw std::runtime_error("train: loss diverged (non-finite total at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch) + ")");
  }
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_str(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}

inline void put_array(std::string& out, const Array& a) {
  put_u64(out, a.shape.size());
  for (std::size_t d : a.shape) put_u64(out, d);
  static_assert(sizeof(double) == 8);
  std::size_t base = out.size();
  out.resize(base + 8 * a.data.size());
  std::memcpy(out.data() + base, a.data.data(), 8 * a.data.size());
}

inline void put_map(std::string& out, const std::map<std::string, Array>& m) {
  put_u64(out, m.size());
  for (const auto& [name, a] : m) {
    put_str(out, name);
    put_array(out, a);
  }
}

struct Cursor {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(
        static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    std::uint64_t n = u64();
    if (n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  Array array() {
    std::uint64_t rank = u64();
    if (rank > 8) throw std::runtime_error("checkpoint: implausible array rank");
    std::vector<std::size_t> shape;
    std::uint64_t count = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      std::uint64_t d = u64();
      if (d == 0 || count > (1ull << 30) / std::max<std::uint64_t>(d, 1)) {
        throw std::runtime_error("checkpoint: implausible array shape");
      }
      count *= d;
      shape.push_back(d);
    }
    need(8 * count);
    Array a(shape);
    std::memcpy(a.data.data(), buf.data() + pos, 8 * count);
    pos += 8 * count;
    if (!a.finite()) throw std::runtime_error("checkpoint: non-finite parameter data");
    return a;
  }
  std::map<std::string, Array> map() {
    std::uint64_t n = u64();
    std::map<std::string, Array> m;
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = str();
      if (!m.emplace(name, array()).second) {
        throw std::runtime_error("checkpoint: duplicate entry '" + name + "'");
      }
    }
    return m;
  }
};

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "QMLCKP01";

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 8);
  detail::put_str(out, ck.config_json);
  detail::put_u64(out, ck.epoch);
  detail::put_str(out, ck.rng_state);
  detail::put_map(out, ck.params);
  detail::put_u64(out, ck.opt.t);
  detail::put_map(out, ck.opt.m);
  detail::put_map(out, ck.opt.v);
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& buf) {
  if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");
  }
  detail::Cursor c{buf, 8};
  Checkpoint ck;
  ck.config_json = c.str();
  ck.epoch = c.u64();
  ck.rng_state = c.str();
  ck.params = c.map();
  ck.opt.t = c.u64();
  ck.opt.m = c.map();
  ck.opt.v = c.map();
  if (c.pos != buf.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(buf);
}

// Fresh parameter map for a run; draw order is part of the determinism
// contract.
inline Bindings init_params(const Dataset& ds, const SplitSpec& split, const TrainConfig& cfg,
                            Rng& rng) {
  Bindings p;
  std::size_t e_out = cfg.embedding_mode == EmbeddingMode::DirectCoordinates ? ds.dim
                                                                             : cfg.proj_out_dim;
  if (cfg.embedding_mode == EmbeddingMode::DirectCoordinates) {
    Array emb({ds.samples.size(), ds.dim});
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
      for (std::size_t k = 0; k < ds.dim; ++k) emb.data[i * ds.dim + k] = ds.samples[i].features[k];
    p["emb"] = std::move(emb);
  } else {
    double s = 1.0 / std::sqrt(static_cast<double>(ds.dim));
    Array w({ds.dim, cfg.proj_out_dim});
    for (double& v : w.data) v = rng.uniform(-s, s);
    p["proj_w"] = std::move(w);
    p["proj_b"] = Array::zeros({cfg.proj_out_dim});
  }
  if (cfg.loss.use_cls) {
    std::size_t C = split.seen.size();
    double s = 1.0 / std::sqrt(static_cast<double>(e_out));
    Array w({e_out, C});
    for (double& v : w.data) v = rng.uniform(-s, s);
    p["cls_w"] = std::move(w);
    p["cls_b"] = Array::zeros({C});
  }
  if (cfg.meta.enabled) {
    Bindings meta = init_meta_params(cfg.meta, e_out + cfg.P, cfg.loss.fixed_margin, rng);
    for (auto& [name, a] : meta) p[name] = std::move(a);
  }
  return p;
}

// Current normalized embedding of every sample, for diagnostics and
// retrieval. A zero embedding cannot be placed on the unit sphere, so it is
// an error rather than a guarded value here.
inline Array embed_all(const Dataset& ds, const TrainConfig& cfg, const Bindings& params) {
  std::size_t N = ds.samples.size();
  std::size_t e_out = cfg.embedding_mode == EmbeddingMode::DirectCoordinates ? ds.dim
                                                                             : cfg.proj_out_dim;
  Array out({N, e_out});
  if (cfg.embedding_mode == EmbeddingMode::DirectCoordinates) {
    const Array& emb = params.at("emb");
    if (emb.shape != std::vector<std::size_t>{N, ds.dim}) {
      throw std::runtime_error("embed: coordinate table shape mismatch");
    }
    out.data = emb.data;
  } else {
    const Array& w = params.at("proj_w");
    const Array& b = params.at("proj_b");
    if (w.shape != std::vector<std::size_t>{ds.dim, e_out} || b.numel() != e_out) {
      throw std::runtime_error("embed: projection shape mismatch");
    }
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < e_out; ++j) {
        double s = b.data[j];
        for (std::size_t k = 0; k < ds.dim; ++k) {
          s += ds.samples[i].features[k] * w.data[k * e_out + j];
        }
        out.data[i * e_out + j] = s;
      }
    }
  }
  for (std::size_t i = 0; i < N; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < e_out; ++j) n2 += out.data[i * e_out + j] * out.data[i * e_out + j];
    if (n2 <= 1e-24) {
      throw std::runtime_error("embed: zero embedding for sample id " +
                               std::to_string(ds.samples[i].id));
    }
    double inv = 1.0 / std::sqrt(n2);
    for (std::size_t j = 0; j < e_out; ++j) out.data[i * e_out + j] *= inv;
  }
  return out;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<HistoryRow> history;
  std::vector<double> epoch_cross_dist;  // same-class cross-modal mean per epoch
  std::vector<double> epoch_intra_dist;  // same-class within-modality mean per epoch
};

// One full run of the training procedure; pass a checkpoint to resume from
// its recorded epoch with identical downstream behavior.
inline TrainResult train(const Dataset& ds, const SplitSpec& split, const TrainConfig& cfg,
                         const std::string& config_json, const Checkpoint* resume = nullptr) {
  cfg.validate();
  if (ds.samples.empty() || ds.dim == 0) throw std::invalid_argument("train: empty dataset");
  if (split.seen.size() < cfg.P) {
    throw std::invalid_argument("train: P exceeds the seen class count");
  }
  if (resume && resume->epoch > cfg.epochs) {
    throw std::invalid_argument("train: resume checkpoint is past the configured epoch count");
  }

  Rng rng(cfg.seed);
  Bindings params;
  AdamState opt;
  std::size_t start_epoch = 0;
  if (resume) {
    params = resume->params;
    opt = resume->opt;
    rng.set_state(resume->rng_state);
    start_epoch = resume->epoch;
  } else {
    params = init_params(ds, split, cfg, rng);
  }

  std::size_t e_out = cfg.embedding_mode == EmbeddingMode::DirectCoordinates ? ds.dim
                                                                             : cfg.proj_out_dim;
  std::map<long long, std::size_t> row_of;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) row_of[ds.samples[i].id] = i;

  AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  acfg.beta1 = cfg.beta1;
  acfg.beta2 = cfg.beta2;
  acfg.eps = cfg.adam_eps;
  acfg.weight_decay = cfg.weight_decay;

  TrainResult result;
  for (std::size_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t bi = 1; bi <= cfg.batches_per_epoch; ++bi) {
      Batch batch = pk_sample(ds, split, cfg.P, cfg.K, rng);

      Graph g;
      NodeId emb_node;
      if (cfg.embedding_mode == EmbeddingMode::DirectCoordinates) {
        NodeId table = g.leaf("emb", {ds.samples.size(), ds.dim});
        std::vector<std::size_t> rows;
        rows.reserve(batch.size());
        for (const auto& s : batch.samples) rows.push_back(row_of.at(s.id));
        emb_node = g.gather_rows(table, rows);
      } else {
        NodeId feats = g.constant(batch.features());
        NodeId w = g.leaf("proj_w", {ds.dim, cfg.proj_out_dim});
        NodeId b = g.leaf("proj_b", {cfg.proj_out_dim});
        emb_node = g.add(g.matmul(feats, w), b);
      }

      LossInputs in;
      in.embedding = emb_node;
      in.class_ids = batch.class_ids();
      in.modalities = batch.modalities();
      if (cfg.loss.use_cls) {
        in.cls_labels = remap_labels(in.class_ids, split.seen);
        in.cls_w = g.leaf("cls_w", {e_out, split.seen.size()});
        in.cls_b = g.leaf("cls_b", {split.seen.size()});
      }

      Session s(g, params);
      EpisodeBuild ep;
      if (cfg.meta.enabled) {
        MetaLeaves lv = declare_meta_leaves(g, cfg.meta, e_out + cfg.P);
        ep = run_episode(g, s, lv, cfg.meta, g.l2_normalize(emb_node), in.class_ids);
        in.margins = std::make_pair(ep.m_inter, ep.m_intra);
      }

      BuiltLoss built = build_loss(g, in, cfg.loss);
      LossReport rep = eval_loss(s, built);
      detail::guard_finite_total(rep.total, epoch, bi);

      std::map<std::string, Array> grads = s.backward(built.total);
      adam_step(params, grads, opt, acfg);

      HistoryRow row;
      row.epoch = epoch;
      row.batch = bi;
      row.total = rep.total;
      row.inter = rep.inter;
      row.intra = rep.intra;
      row.cls = rep.cls;
      row.active_fraction = rep.active_fraction;
      row.m_inter = s.value(built.m_inter).data[0];
      row.m_intra = s.value(built.m_intra).data[0];
      result.history.push_back(row);
    }

    Array emb = embed_all(ds, cfg, params);
    std::vector<int> cls;
    std::vector<Modality> mod;
    for (const auto& smp : ds.samples) {
      cls.push_back(smp.class_id);
      mod.push_back(smp.modality);
    }
    result.epoch_cross_dist.push_back(mean_same_class_sq_dist(emb, cls, mod, true));
    result.epoch_intra_dist.push_back(mean_same_class_sq_dist(emb, cls, mod, false));
  }

  result.checkpoint.config_json = config_json;
  result.checkpoint.epoch = cfg.epochs;
  result.checkpoint.rng_state = rng.state();
  result.checkpoint.params = std::move(params);
  result.checkpoint.opt = std::move(opt);
  return result;
}

}  // namespace qml

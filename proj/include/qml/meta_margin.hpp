#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "qml/graph.hpp"
#include "qml/rng.hpp"

// Memory-augmented meta-learner for the adaptive margin pair: a GRU
// controller emits a key per step, the key reads an external memory through
// cosine similarity and softmax, and the mean read vector feeds a two-output
// ReLU head producing (m_inter, m_intra).
//
// The stored memory matrix is a constant under differentiation: each step
// bakes the realized M_{t-1} into the graph as a Constant node, so gradients
// flow through the key into the read weights and the read vector, but not
// through the write history. Write bookkeeping (write weights, usage,
// least-used) is therefore plain numeric state.

namespace qml {

struct MetaConfig {
  bool enabled = false;
  std::size_t slots = 32;   // S
  std::size_t width = 32;   // W, key and memory row size
  std::size_t hidden = 32;  // GRU hidden size
  std::size_t heads = 1;    // read heads; least-used n equals this
  double gamma = 1.0;       // usage decay; 1 keeps the full history
  bool cosine = true;       // false switches the read similarity to dot product

  void validate() const {
    if (heads < 1 || slots <= heads) {
      throw std::invalid_argument("meta: need slots > heads >= 1");
    }
    if (width < 1 || hidden < 1) throw std::invalid_argument("meta: zero-sized controller");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("meta: gamma must be in (0,1]");
  }
};

struct MemoryState {
  Array M;                  // {S, W}
  Array w_u;                // {S}
  std::vector<Array> w_r;   // per head, {S}
  Array w_lu;               // {S}, exactly n ones
  std::size_t t = 0;
};

// w_lu(i) = 1 iff w_u(i) is among the n smallest, ties resolved by lowest
// index so exactly n entries are set.
inline Array least_used(const Array& w_u, std::size_t n) {
  std::size_t S = w_u.numel();
  if (n < 1 || n > S) throw std::invalid_argument("least_used: n out of range");
  std::vector<std::size_t> idx(S);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return w_u.data[a] < w_u.data[b]; });
  Array out = Array::zeros({S});
  for (std::size_t i = 0; i < n; ++i) out.data[idx[i]] = 1.0;
  return out;
}

inline MemoryState reset_memory(std::size_t S, std::size_t W, std::size_t n_heads) {
  if (n_heads < 1 || S <= n_heads) throw std::invalid_argument("memory: need S > n_heads >= 1");
  if (W < 1) throw std::invalid_argument("memory: zero width");
  MemoryState st;
  st.M = Array::full({S, W}, 1e-6);
  st.w_u = Array::zeros({S});
  st.w_r.assign(n_heads, Array::full({S}, 1.0 / static_cast<double>(S)));
  st.w_lu = least_used(st.w_u, n_heads);
  st.t = 0;
  return st;
}

// w_w = sigma(alpha) * w_r^{t-1} + (1 - sigma(alpha)) * w_lu^{t-1}, per head.
inline std::vector<Array> write_weights(const MemoryState& st, double alpha_raw) {
  double gate = 1.0 / (1.0 + std::exp(-alpha_raw));
  std::vector<Array> out;
  out.reserve(st.w_r.size());
  for (const auto& wr : st.w_r) {
    Array w(wr.shape);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      w.data[i] = gate * wr.data[i] + (1.0 - gate) * st.w_lu.data[i];
    }
    out.push_back(std::move(w));
  }
  return out;
}

// M(i) += w_w(i) * k, additive with no erase term.
inline void memory_write(MemoryState& st, const std::vector<Array>& w_w,
                         const std::vector<Array>& keys) {
  std::size_t S = st.M.shape[0], W = st.M.shape[1];
  if (w_w.size() != keys.size()) throw std::invalid_argument("memory_write: head count mismatch");
  for (std::size_t h = 0; h < w_w.size(); ++h) {
    if (w_w[h].numel() != S || keys[h].numel() != W) {
      throw std::invalid_argument("memory_write: shape mismatch");
    }
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < W; ++j) st.M.data[i * W + j] += w_w[h].data[i] * keys[h].data[j];
  }
}

// w_u <- gamma * w_u + sum_h w_r + sum_h w_w; gamma = 1 is the literal rule.
inline void update_usage(MemoryState& st, const std::vector<Array>& w_r,
                         const std::vector<Array>& w_w, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("usage: gamma must be in (0,1]");
  for (std::size_t i = 0; i < st.w_u.numel(); ++i) {
    double v = gamma * st.w_u.data[i];
    for (const auto& wr : w_r) v += wr.data[i];
    for (const auto& ww : w_w) v += ww.data[i];
    st.w_u.data[i] = v;
  }
}

struct ReadResult {
  Array m;                 // {W}, mean over heads
  std::vector<Array> w_r;  // per head, {S}
};

// Numeric mirror of the graph read path: normalize (guarded), similarity,
// softmax, weighted row sum. Kept in step with the node construction below.
inline ReadResult memory_read(const MemoryState& st, const std::vector<Array>& keys,
                              bool cosine) {
  std::size_t S = st.M.shape[0], W = st.M.shape[1];
  ReadResult out;
  out.m = Array::zeros({W});
  for (const auto& key : keys) {
    if (key.numel() != W) throw std::invalid_argument("memory_read: key width mismatch");
    double kn2 = 0.0;
    for (double v : key.data) kn2 += v * v;
    if (kn2 <= 1e-24) throw std::invalid_argument("memory_read: zero key");
    Array sims({S});
    if (cosine) {
      double kd = std::sqrt(std::max(kn2, 1e-24));
      for (std::size_t i = 0; i < S; ++i) {
        double rn2 = 0.0;
        for (std::size_t j = 0; j < W; ++j) rn2 += st.M.data[i * W + j] * st.M.data[i * W + j];
        double rd = std::sqrt(std::max(rn2, 1e-24));
        double s = 0.0;
        for (std::size_t j = 0; j < W; ++j) s += (st.M.data[i * W + j] / rd) * (key.data[j] / kd);
        sims.data[i] = s;
      }
    } else {
      for (std::size_t i = 0; i < S; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < W; ++j) s += st.M.data[i * W + j] * key.data[j];
        sims.data[i] = s;
      }
    }
    double mx = sims.data[0];
    for (double v : sims.data) mx = std::max(mx, v);
    Array wr({S});
    double z = 0.0;
    for (std::size_t i = 0; i < S; ++i) {
      wr.data[i] = std::exp(sims.data[i] - mx);
      z += wr.data[i];
    }
    for (std::size_t i = 0; i < S; ++i) wr.data[i] /= z;
    for (std::size_t j = 0; j < W; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < S; ++i) s += wr.data[i] * st.M.data[i * W + j];
      out.m.data[j] += s;
    }
    out.w_r.push_back(std::move(wr));
  }
  double inv = 1.0 / static_cast<double>(keys.size());
  for (double& v : out.m.data) v *= inv;
  return out;
}

struct MetaLeaves {
  NodeId gru_wz = -1, gru_uz = -1, gru_bz = -1;
  NodeId gru_wr = -1, gru_ur = -1, gru_br = -1;
  NodeId gru_wh = -1, gru_uh = -1, gru_bh = -1;
  NodeId key_w = -1, key_b = -1;
  NodeId alpha = -1;
  NodeId head_w = -1, head_b = -1;
};

// in_dim = feature width + label one-hot width (the episode's class count).
inline MetaLeaves declare_meta_leaves(Graph& g, const MetaConfig& mc, std::size_t in_dim) {
  mc.validate();
  MetaLeaves lv;
  std::size_t H = mc.hidden, W = mc.width, R = mc.heads * mc.width;
  lv.gru_wz = g.leaf("meta.gru_wz", {H, in_dim});
  lv.gru_uz = g.leaf("meta.gru_uz", {H, H});
  lv.gru_bz = g.leaf("meta.gru_bz", {H});
  lv.gru_wr = g.leaf("meta.gru_wr", {H, in_dim});
  lv.gru_ur = g.leaf("meta.gru_ur", {H, H});
  lv.gru_br = g.leaf("meta.gru_br", {H});
  lv.gru_wh = g.leaf("meta.gru_wh", {H, in_dim});
  lv.gru_uh = g.leaf("meta.gru_uh", {H, H});
  lv.gru_bh = g.leaf("meta.gru_bh", {H});
  lv.key_w = g.leaf("meta.key_w", {R, H});
  lv.key_b = g.leaf("meta.key_b", {R});
  lv.alpha = g.leaf("meta.alpha", {1});
  lv.head_w = g.leaf("meta.head_w", {2, W});
  lv.head_b = g.leaf("meta.head_b", {2});
  (void)W;
  return lv;
}

// Uniform fan-in init; the head bias starts at the fixed margin so the
// learned margins begin where the fixed-margin baseline operates instead of
// in the dead half of the ReLU.
inline Bindings init_meta_params(const MetaConfig& mc, std::size_t in_dim, double head_bias,
                                 Rng& rng) {
  mc.validate();
  std::size_t H = mc.hidden, W = mc.width, R = mc.heads * mc.width;
  Bindings b;
  auto mat = [&](const std::string& name, std::size_t r, std::size_t c, std::size_t fan) {
    Array a({r, c});
    double s = 1.0 / std::sqrt(static_cast<double>(fan));
    for (double& v : a.data) v = rng.uniform(-s, s);
    b[name] = std::move(a);
  };
  mat("meta.gru_wz", H, in_dim, in_dim);
  b["meta.gru_bz"] = Array::zeros({H});
  mat("meta.gru_uz", H, H, H);
  mat("meta.gru_wr", H, in_dim, in_dim);
  mat("meta.gru_ur", H, H, H);
  b["meta.gru_br"] = Array::zeros({H});
  mat("meta.gru_wh", H, in_dim, in_dim);
  mat("meta.gru_uh", H, H, H);
  b["meta.gru_bh"] = Array::zeros({H});
  mat("meta.key_w", R, H, H);
  b["meta.key_b"] = Array::zeros({R});
  b["meta.alpha"] = Array::vec({0.0});
  mat("meta.head_w", 2, W, W);
  b["meta.head_b"] = Array::vec({head_bias, head_bias});
  return b;
}

struct GruNodes {
  NodeId h_next = -1;
  NodeId key = -1;  // {heads * W}
};

// Standard update/reset-gate cell plus the key projection.
inline GruNodes build_gru_step(Graph& g, const MetaLeaves& lv, NodeId h, NodeId u) {
  NodeId z = g.sigmoid(g.add(g.add(g.matmul(lv.gru_wz, u), g.matmul(lv.gru_uz, h)), lv.gru_bz));
  NodeId r = g.sigmoid(g.add(g.add(g.matmul(lv.gru_wr, u), g.matmul(lv.gru_ur, h)), lv.gru_br));
  NodeId cand = g.tanh_(
      g.add(g.add(g.matmul(lv.gru_wh, u), g.matmul(lv.gru_uh, g.mul(r, h))), lv.gru_bh));
  // h' = (1 - z) * h + z * cand
  NodeId keep = g.sub(h, g.mul(z, h));
  GruNodes out;
  out.h_next = g.add(keep, g.mul(z, cand));
  out.key = g.add(g.matmul(lv.key_w, out.h_next), lv.key_b);
  return out;
}

struct EpisodeStepTrace {
  MemoryState state;            // after the step
  std::vector<Array> w_r;       // realized read weights of the step
  std::vector<Array> w_w;       // realized write weights of the step
  NodeId hidden = -1;           // graph nodes, for inspection in tests
  NodeId read = -1;             // {W} mean read vector m_t
};

struct EpisodeBuild {
  NodeId margins = -1;   // {2} ReLU head output
  NodeId m_inter = -1;   // {1}
  NodeId m_intra = -1;   // {1}
  MemoryState final_state;
  std::vector<EpisodeStepTrace> trace;
};

// One meta episode over a batch: features row t and the one-hot of the
// previous row's class (zero at t = 0) drive the GRU; each step reads the
// realized memory, then the write/usage/least-used bookkeeping advances
// numerically. The session evaluates key and read nodes as the graph grows.
inline EpisodeBuild run_episode(Graph& g, Session& s, const MetaLeaves& lv, const MetaConfig& mc,
                                NodeId features, const std::vector<int>& class_ids) {
  mc.validate();
  const auto& fshape = g.shape(features);
  if (fshape.size() != 2 || fshape[0] != class_ids.size() || class_ids.empty()) {
    throw std::invalid_argument("episode: features and class list disagree");
  }
  std::size_t T = class_ids.size(), e = fshape[1];
  std::vector<int> classes(class_ids);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::size_t P = classes.size();
  auto local_index = [&](int cls) {
    return static_cast<std::size_t>(
        std::lower_bound(classes.begin(), classes.end(), cls) - classes.begin());
  };

  EpisodeBuild out;
  MemoryState st = reset_memory(mc.slots, mc.width, mc.heads);
  double alpha_raw = s.eval(lv.alpha).data[0];

  NodeId h = g.constant(Array::zeros({mc.hidden}));
  std::vector<NodeId> reads;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::pair<std::size_t, std::size_t>> row;
    for (std::size_t k = 0; k < e; ++k) row.emplace_back(t, k);
    NodeId x_t = g.gather_entries(features, row);
    Array onehot = Array::zeros({P});
    if (t > 0) onehot.data[local_index(class_ids[t - 1])] = 1.0;
    NodeId u_t = g.concat({x_t, g.constant(std::move(onehot))});

    GruNodes cell = build_gru_step(g, lv, h, u_t);
    h = cell.h_next;

    // read against M_{t-1}, baked in as a constant
    NodeId mem = g.constant(st.M);
    NodeId mem_rows = mc.cosine ? g.l2_normalize(mem) : mem;
    std::vector<NodeId> head_reads;
    std::vector<Array> wr_vals;
    std::vector<Array> key_vals;
    for (std::size_t hd = 0; hd < mc.heads; ++hd) {
      NodeId k_h = g.slice(cell.key, hd * mc.width, mc.width);
      NodeId k_sim = mc.cosine ? g.l2_normalize(k_h) : k_h;
      NodeId w_r_node = g.softmax(g.matmul(mem_rows, k_sim));
      head_reads.push_back(g.matmul(w_r_node, mem));
      wr_vals.push_back(s.eval(w_r_node));
      key_vals.push_back(s.value(k_h));
      double kn2 = 0.0;
      for (double v : key_vals.back().data) kn2 += v * v;
      if (kn2 <= 1e-24) {
        throw std::runtime_error("episode: zero key at step " + std::to_string(t));
      }
    }
    NodeId m_t = head_reads[0];
    for (std::size_t hd = 1; hd < mc.heads; ++hd) m_t = g.add(m_t, head_reads[hd]);
    if (mc.heads > 1) m_t = g.scalar_mul(m_t, 1.0 / static_cast<double>(mc.heads));
    reads.push_back(m_t);

    // numeric bookkeeping: write with the previous step's read weights, then
    // usage and least-used advance with this step's
    std::vector<Array> ww = write_weights(st, alpha_raw);
    memory_write(st, ww, key_vals);
    update_usage(st, wr_vals, ww, mc.gamma);
    st.w_lu = least_used(st.w_u, mc.heads);
    st.w_r = wr_vals;
    st.t = t + 1;

    EpisodeStepTrace tr;
    tr.state = st;
    tr.w_r = wr_vals;
    tr.w_w = ww;
    tr.hidden = h;
    tr.read = m_t;
    out.trace.push_back(std::move(tr));
  }

  NodeId mean_read = reads[0];
  for (std::size_t t = 1; t < T; ++t) mean_read = g.add(mean_read, reads[t]);
  mean_read = g.scalar_mul(mean_read, 1.0 / static_cast<double>(T));

  out.margins = g.relu(g.add(g.matmul(lv.head_w, mean_read), lv.head_b));
  out.m_inter = g.slice(out.margins, 0, 1);
  out.m_intra = g.slice(out.margins, 1, 1);
  out.final_state = st;
  return out;
}

}  // namespace qml

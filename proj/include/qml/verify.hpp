#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qml/dataspace.hpp"
#include "qml/graph.hpp"
#include "qml/losses.hpp"
#include "qml/meta_margin.hpp"
#include "qml/retrieval.hpp"
#include "qml/rng.hpp"

// Built-in verification suite: the same checks back `qml verify` and the
// acceptance harness. Each check is self-contained, deterministic, and
// reports its worst observed error.

namespace qml {

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_err = 0.0;
  std::string detail;
};

struct VerifyOptions {
  int loss_instances = 100;     // gradient instances per loss variant
  int episode_instances = 100;  // gradient instances for the meta episode
  int mining_batches = 200;
  int memory_steps = 1000;
  int metric_runs = 50;
  int identity_trials = 20;
  double grad_tol = 1e-4;
  bool fault_selftest = true;
};

namespace verify_detail {

struct RandomBatch {
  Array features;
  std::vector<int> cls;
  std::vector<Modality> mod;
};

// Rows 0..7 cover every (class in {0,1}) x modality cell twice so all mining
// combinations exist whenever n >= 8.
inline RandomBatch make_batch(Rng& rng, std::size_t n, int num_classes, std::size_t dim) {
  RandomBatch b;
  b.features = Array({n, dim});
  for (double& v : b.features.data) v = rng.gaussian();
  b.cls.resize(n);
  b.mod.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.cls[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
    b.mod[i] = rng.below(2) == 0 ? Modality::Sketch : Modality::Photo;
  }
  const int fixed_cls[8] = {0, 1, 0, 1, 0, 1, 0, 1};
  const Modality fixed_mod[8] = {Modality::Sketch, Modality::Photo, Modality::Photo,
                                 Modality::Sketch, Modality::Sketch, Modality::Photo,
                                 Modality::Photo,  Modality::Sketch};
  for (std::size_t i = 0; i < std::min<std::size_t>(n, 8); ++i) {
    b.cls[i] = fixed_cls[i];
    b.mod[i] = fixed_mod[i];
  }
  return b;
}

inline Array unit_rows(const Array& a) {
  Array f = a;
  std::size_t n = f.shape[0], d = f.shape[1];
  for (std::size_t i = 0; i < n; ++i) {
    double n2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) n2 += f.data[i * d + k] * f.data[i * d + k];
    double nr = std::sqrt(std::max(n2, 1e-24));
    for (std::size_t k = 0; k < d; ++k) f.data[i * d + k] /= nr;
  }
  return f;
}

struct BruteResult {
  bool found = false;
  double value = 0.0;
  std::size_t a = 0, p = 0;
};

// Exhaustive mining scan straight from the definition; first index wins ties.
inline BruteResult brute_scan(const Array& D, const std::vector<int>& cls,
                              const std::vector<Modality>& mod, std::optional<Modality> am,
                              std::optional<Modality> pm, bool same, bool want_max) {
  BruteResult r;
  std::size_t n = cls.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (am && mod[i] != *am) continue;
      if (pm && mod[j] != *pm) continue;
      if (same != (cls[i] == cls[j])) continue;
      double v = D.data[i * n + j];
      bool better = !r.found || (want_max ? v > r.value : v < r.value);
      if (better) {
        r.found = true;
        r.value = v;
        r.a = i;
        r.p = j;
      }
    }
  }
  return r;
}

inline void merge(CheckResult& into, const GradCheckReport& rep, double tol) {
  into.max_err = std::max(into.max_err, rep.max_rel_err);
  if (rep.max_rel_err > tol || rep.checked == 0) into.pass = false;
}

}  // namespace verify_detail

// Composite graphs exercising every operator's backward pass.
inline CheckResult check_op_gradients(const VerifyOptions& opt) {
  using namespace verify_detail;
  CheckResult out;
  out.name = "op_gradients";
  out.pass = true;
  Rng rng(2024);
  int checked = 0, skipped = 0;

  for (int trial = 0; trial < 20; ++trial) {
    {  // smooth composite: matmul, add, sub, mul, scalar_mul, sigmoid, tanh,
       // softmax, l2_normalize, reduce_sum
      Graph g;
      NodeId a = g.leaf("a", {2, 3});
      NodeId w = g.leaf("w", {3, 2});
      NodeId b = g.leaf("b", {2});
      NodeId h = g.add(g.matmul(a, w), b);
      NodeId s = g.mul(g.sigmoid(h), g.tanh_(g.sub(h, g.scalar_mul(h, 0.25))));
      NodeId z = g.softmax(g.l2_normalize(s));
      // weight the softmax before reducing: a bare row sum is constant
      NodeId root = g.reduce_sum(g.mul(z, h));
      Bindings bind;
      for (const auto& [name, id] : g.leaves()) {
        Array v(g.shape(id));
        for (double& x : v.data) x = rng.gaussian();
        bind[name] = v;
      }
      GradCheckReport rep = grad_check(g, root, bind, 1e-5, opt.grad_tol);
      merge(out, rep, opt.grad_tol);
      checked += rep.checked;
      skipped += static_cast<int>(rep.skipped.size());
    }
    {  // structural ops: concat, slice, gather_rows, gather_entries,
       // pairwise_sq_dist, reduce_max, reduce_min, relu, hinge
      Graph g;
      NodeId m = g.leaf("m", {3, 2});
      NodeId v = g.leaf("v", {4});
      NodeId rows = g.gather_rows(m, {2, 0});
      NodeId ent = g.gather_entries(m, {{0, 1}, {2, 0}, {1, 1}});
      NodeId cat = g.concat({ent, g.slice(v, 1, 3)});
      NodeId d = g.pairwise_sq_dist(rows);
      NodeId mx = g.reduce_max(g.relu(cat));
      NodeId mn = g.reduce_min(g.hinge(cat));
      NodeId root = g.add(g.add(g.reduce_sum(d), mx), mn);
      Bindings bind;
      for (const auto& [name, id] : g.leaves()) {
        Array val(g.shape(id));
        for (double& x : val.data) x = rng.gaussian() + (rng.below(2) ? 2.0 : -2.0);
        bind[name] = val;
      }
      GradCheckReport rep = grad_check(g, root, bind, 1e-5, opt.grad_tol);
      merge(out, rep, opt.grad_tol);
      checked += rep.checked;
      skipped += static_cast<int>(rep.skipped.size());
    }
    {  // classifier head: softmax cross-entropy
      Graph g;
      NodeId x = g.leaf("x", {3, 3});
      NodeId root = g.softmax_cross_entropy(x, {2, 0, 1});
      Bindings bind;
      Array val({3, 3});
      for (double& e : val.data) e = rng.gaussian();
      bind["x"] = val;
      GradCheckReport rep = grad_check(g, root, bind, 1e-5, opt.grad_tol);
      merge(out, rep, opt.grad_tol);
      checked += rep.checked;
      skipped += static_cast<int>(rep.skipped.size());
    }
  }
  out.detail = std::to_string(checked) + " entries checked, " + std::to_string(skipped) +
               " skipped at kinks";
  if (!out.pass && g_grad_fault.delta != 0.0) {
    out.detail += " [injected gradient fault on op '" + g_grad_fault.op + "']";
  }
  return out;
}

// Closed-form triplet gradient: L = |a-p|^2 - |a-n|^2 + margin while active,
// so dL/da = 2(n-p), dL/dp = 2(p-a), dL/dn = 2(a-n).
inline CheckResult check_triplet_analytic() {
  CheckResult out;
  out.name = "triplet_analytic";
  out.pass = true;
  Rng rng(7);
  const std::size_t d = 4;
  int active = 0;
  for (int trial = 0; trial < 60; ++trial) {
    Graph g;
    NodeId e = g.leaf("e", {3, d});
    NodeId D = g.pairwise_sq_dist(e);
    NodeId pos = g.gather_entries(D, {{0, 1}});
    NodeId neg = g.gather_entries(D, {{0, 2}});
    NodeId loss = g.hinge(g.add(g.sub(pos, neg), g.constant(Array::scalar(10.0))));
    Bindings bind;
    Array val({3, d});
    for (double& x : val.data) x = rng.gaussian();
    bind["e"] = val;
    Session s(g, bind);
    if (s.eval(loss).data[0] <= 0.0) continue;
    active += 1;
    auto grads = s.backward(loss);
    const Array& ge = grads.at("e");
    for (std::size_t k = 0; k < d; ++k) {
      double a = val.at(0, k), p = val.at(1, k), n = val.at(2, k);
      out.max_err = std::max(out.max_err, std::fabs(ge.at(0, k) - 2.0 * (n - p)));
      out.max_err = std::max(out.max_err, std::fabs(ge.at(1, k) - 2.0 * (p - a)));
      out.max_err = std::max(out.max_err, std::fabs(ge.at(2, k) - 2.0 * (a - n)));
    }
  }
  if (out.max_err > 1e-12 || active < 30) out.pass = false;
  out.detail = std::to_string(active) + " active instances, exact closed form";
  if (!out.pass && g_grad_fault.delta != 0.0) {
    out.detail += " [injected gradient fault on op '" + g_grad_fault.op + "']";
  }
  return out;
}

// Full-objective gradient check per loss variant: embedding, margin, and
// classifier leaves all receive finite-difference treatment.
inline CheckResult check_loss_gradients(Variant variant, const VerifyOptions& opt) {
  using namespace verify_detail;
  CheckResult out;
  out.name = std::string("loss_gradients_") + variant_name(variant);
  out.pass = true;
  Rng rng(100 + static_cast<std::uint64_t>(variant));
  int checked = 0, skipped = 0, done = 0;

  for (int trial = 0; trial < opt.loss_instances; ++trial) {
    std::size_t n = 8 + rng.below(3);
    int classes = 2 + static_cast<int>(rng.below(2));
    RandomBatch b = make_batch(rng, n, classes, 3);

    Graph g;
    LossInputs in;
    in.embedding = g.leaf("emb", {n, 3});
    in.class_ids = b.cls;
    in.modalities = b.mod;
    std::set<int> seen;
    for (int c : b.cls) seen.insert(c);
    in.cls_labels = remap_labels(b.cls, seen);
    in.cls_w = g.leaf("cls_w", {3, seen.size()});
    in.cls_b = g.leaf("cls_b", {seen.size()});
    in.margins = std::make_pair(g.leaf("m_inter", {1}), g.leaf("m_intra", {1}));

    LossConfig cfg;
    cfg.variant = variant;
    cfg.lambda = rng.uniform(0.0, 1.0);
    cfg.use_meta_margin = true;
    cfg.qua_weight = rng.uniform(0.5, 1.5);
    BuiltLoss built = build_loss(g, in, cfg);

    Bindings bind;
    bind["emb"] = b.features;
    Array cw({3, seen.size()});
    for (double& v : cw.data) v = rng.gaussian();
    bind["cls_w"] = cw;
    Array cb({seen.size()});
    for (double& v : cb.data) v = rng.gaussian() * 0.1;
    bind["cls_b"] = cb;
    bind["m_inter"] = Array::vec({rng.uniform(0.05, 0.5)});
    bind["m_intra"] = Array::vec({rng.uniform(0.05, 0.5)});

    GradCheckReport rep = grad_check(g, built.total, bind, 1e-5, opt.grad_tol);
    merge(out, rep, opt.grad_tol);
    checked += rep.checked;
    skipped += static_cast<int>(rep.skipped.size());
    done += 1;
  }
  out.detail = std::to_string(done) + " instances, " + std::to_string(checked) + " entries, " +
               std::to_string(skipped) + " skipped at kinks";
  if (!out.pass && g_grad_fault.delta != 0.0) {
    out.detail += " [injected gradient fault on op '" + g_grad_fault.op + "']";
  }
  return out;
}

inline CheckResult check_episode_gradients(const VerifyOptions& opt) {
  using namespace verify_detail;
  CheckResult out;
  out.name = "episode_gradients";
  out.pass = true;
  Rng rng(4242);
  int checked = 0, skipped = 0;

  for (int trial = 0; trial < opt.episode_instances; ++trial) {
    MetaConfig mc;
    mc.slots = 4 + rng.below(3);
    mc.width = 2 + rng.below(2);
    mc.hidden = 2 + rng.below(2);
    mc.heads = 1 + rng.below(std::min<std::uint64_t>(2, mc.slots - 2));
    mc.cosine = rng.below(2) == 0;
    mc.gamma = rng.below(2) == 0 ? 1.0 : 0.9;
    std::size_t T = 2 + rng.below(3), e = 2 + rng.below(2);
    std::vector<int> cls;
    for (std::size_t t = 0; t < T; ++t) cls.push_back(static_cast<int>(rng.below(2)));
    cls[0] = 0;
    if (T > 1) cls[1] = 1;
    std::vector<int> sorted_cls(cls.begin(), cls.end());
    std::sort(sorted_cls.begin(), sorted_cls.end());
    sorted_cls.erase(std::unique(sorted_cls.begin(), sorted_cls.end()), sorted_cls.end());

    Graph g;
    MetaLeaves lv = declare_meta_leaves(g, mc, e + sorted_cls.size());
    NodeId feats = g.leaf("emb", {T, e});
    Bindings bind = init_meta_params(mc, e + sorted_cls.size(), 0.3, rng);
    Array fv({T, e});
    for (double& v : fv.data) v = rng.gaussian();
    bind["emb"] = fv;

    Session s(g, bind);
    EpisodeBuild ep = run_episode(g, s, lv, mc, feats, cls);
    NodeId root = g.add(g.scalar_mul(ep.m_inter, rng.uniform(0.5, 1.5)),
                        g.scalar_mul(ep.m_intra, rng.uniform(0.5, 1.5)));
    GradCheckReport rep = grad_check(g, root, bind, 1e-5, opt.grad_tol);
    merge(out, rep, opt.grad_tol);
    checked += rep.checked;
    skipped += static_cast<int>(rep.skipped.size());
  }
  out.detail = std::to_string(opt.episode_instances) + " episodes, " + std::to_string(checked) +
               " entries, " + std::to_string(skipped) + " skipped at kinks";
  if (!out.pass && g_grad_fault.delta != 0.0) {
    out.detail += " [injected gradient fault on op '" + g_grad_fault.op + "']";
  }
  return out;
}

inline CheckResult check_mining_oracle(const VerifyOptions& opt) {
  using namespace verify_detail;
  CheckResult out;
  out.name = "mining_oracle";
  out.pass = true;
  Rng rng(314);
  int mismatches = 0;
  for (int trial = 0; trial < opt.mining_batches; ++trial) {
    std::size_t n = 8 + rng.below(57);  // up to 64
    int classes = 2 + static_cast<int>(rng.below(7));
    RandomBatch b = make_batch(rng, n, classes, 3);
    Array D = pairwise_sq_distances(unit_rows(b.features));
    MinedPairs mined = mine_pairs(D, b.cls, b.mod);

    for (Modality am : {Modality::Sketch, Modality::Photo}) {
      for (Modality pm : {Modality::Sketch, Modality::Photo}) {
        BruteResult bp = brute_scan(D, b.cls, b.mod, am, pm, true, true);
        BruteResult bn = brute_scan(D, b.cls, b.mod, am, pm, false, false);
        const auto& mp = mined.pos[modality_index(am)][modality_index(pm)];
        const auto& mn = mined.neg[modality_index(am)][modality_index(pm)];
        if (bp.found != mp.has_value() ||
            (bp.found && (mp->value != bp.value || mp->anchor != bp.a || mp->partner != bp.p))) {
          mismatches += 1;
        }
        if (bn.found != mn.has_value() ||
            (bn.found && (mn->value != bn.value || mn->anchor != bn.a || mn->partner != bn.p))) {
          mismatches += 1;
        }
      }
    }
    BruteResult ap = brute_scan(D, b.cls, b.mod, std::nullopt, std::nullopt, true, true);
    BruteResult an = brute_scan(D, b.cls, b.mod, std::nullopt, std::nullopt, false, false);
    if (!mined.pos_any || mined.pos_any->value != ap.value || mined.pos_any->anchor != ap.a ||
        mined.pos_any->partner != ap.p) {
      mismatches += 1;
    }
    if (!mined.neg_any || mined.neg_any->value != an.value || mined.neg_any->anchor != an.a ||
        mined.neg_any->partner != an.p) {
      mismatches += 1;
    }
  }
  out.pass = mismatches == 0;
  out.max_err = static_cast<double>(mismatches);
  out.detail = std::to_string(opt.mining_batches) + " batches vs exhaustive scan, " +
               std::to_string(mismatches) + " mismatches";
  return out;
}

inline CheckResult check_memory_invariants(const VerifyOptions& opt) {
  CheckResult out;
  out.name = "memory_invariants";
  out.pass = true;

  Array worked = least_used(Array::vec({3, 1, 2, 5}), 2);
  if (worked.data != std::vector<double>{0, 1, 1, 0}) {
    out.pass = false;
    out.detail = "least_used worked example failed";
    return out;
  }

  Rng rng(72);
  const std::size_t S = 8, W = 4, H = 2;
  MemoryState st = reset_memory(S, W, H);
  std::vector<double> prev_u(st.w_u.data);
  double worst_sum_err = 0.0;
  for (int step = 0; step < opt.memory_steps; ++step) {
    std::vector<Array> keys(H, Array::zeros({W}));
    for (auto& k : keys)
      for (double& v : k.data) v = rng.gaussian();
    ReadResult rr = memory_read(st, keys, true);
    auto ww = write_weights(st, rng.uniform(-2.0, 2.0));
    memory_write(st, ww, keys);
    update_usage(st, rr.w_r, ww, 1.0);
    st.w_lu = least_used(st.w_u, H);
    st.w_r = rr.w_r;

    for (const auto& wr : st.w_r) {
      double sum = 0.0;
      for (double v : wr.data) sum += v;
      worst_sum_err = std::max(worst_sum_err, std::fabs(sum - 1.0));
    }
    std::size_t ones = 0;
    for (double v : st.w_lu.data) ones += v == 1.0 ? 1 : 0;
    if (ones != H) out.pass = false;
    for (std::size_t i = 0; i < S; ++i) {
      if (st.w_u.data[i] < prev_u[i]) out.pass = false;
    }
    prev_u = st.w_u.data;
  }
  out.max_err = worst_sum_err;
  if (worst_sum_err > 1e-10) out.pass = false;
  out.detail = std::to_string(opt.memory_steps) +
               " steps: read mass, least-used count, usage monotonicity";
  return out;
}

inline CheckResult check_structural_identities(const VerifyOptions& opt) {
  using namespace verify_detail;
  CheckResult out;
  out.name = "structural_identities";
  out.pass = true;
  Rng rng(555);

  for (int trial = 0; trial < opt.identity_trials; ++trial) {
    std::size_t n = 8 + rng.below(5);
    RandomBatch b = make_batch(rng, n, 2 + static_cast<int>(rng.below(2)), 3);
    double m_inter = rng.uniform(0.05, 0.5), m_intra = rng.uniform(0.05, 0.5);
    double lambda = rng.uniform(0.0, 1.0);

    auto total_of = [&](Variant v, double lam, double mi, double ma) {
      Graph g;
      LossInputs in;
      in.embedding = g.leaf("emb", {n, 3});
      in.class_ids = b.cls;
      in.modalities = b.mod;
      in.margins = std::make_pair(g.constant(Array::scalar(mi)), g.constant(Array::scalar(ma)));
      LossConfig cfg;
      cfg.variant = v;
      cfg.lambda = lam;
      cfg.use_cls = false;
      cfg.use_meta_margin = true;
      BuiltLoss built = build_loss(g, in, cfg);
      Bindings bind{{"emb", b.features}};
      Session s(g, bind);
      LossReport rep = eval_loss(s, built);
      return std::make_pair(rep.total, rep.intra);
    };

    // SinQua is RaQua with the intra terms removed
    auto [raqua, raqua_intra] = total_of(Variant::RaQua, lambda, m_inter, m_intra);
    auto [sinqua, sin_intra] = total_of(Variant::SinQua, lambda, m_inter, m_intra);
    out.max_err = std::max(out.max_err, std::fabs(sinqua - (raqua - raqua_intra)));
    out.max_err = std::max(out.max_err, std::fabs(sin_intra));

    // bidirectional triplet doubles the one-direction triplet
    auto [bid, bid_intra] = total_of(Variant::BidTri, lambda, m_inter, m_intra);
    auto [com, com_intra] = total_of(Variant::ComTri, lambda, m_inter, m_intra);
    (void)bid_intra;
    (void)com_intra;
    out.max_err = std::max(out.max_err, std::fabs(bid - 2.0 * com));

    // lambda = 1 single quadruplet collapses to two cross-modal triplets
    auto [sin1, sin1_intra] = total_of(Variant::SinQua, 1.0, m_inter, m_intra);
    (void)sin1_intra;
    Array D = pairwise_sq_distances(unit_rows(b.features));
    MinedPairs mined = mine_pairs(D, b.cls, b.mod);
    double tri = inter_modal_quadruplet(mined, Modality::Sketch, Modality::Photo, m_inter, 1.0) +
                 inter_modal_quadruplet(mined, Modality::Photo, Modality::Sketch, m_inter, 1.0);
    out.max_err = std::max(out.max_err, std::fabs(sin1 - tri));
  }
  out.pass = out.max_err <= 1e-12;
  out.detail = std::to_string(opt.identity_trials) + " random batches, tolerance 1e-12";
  return out;
}

inline CheckResult check_metric_oracles(const VerifyOptions& opt) {
  CheckResult out;
  out.name = "metric_oracles";
  out.pass = true;
  Rng rng(909);

  for (int trial = 0; trial < opt.metric_runs; ++trial) {
    std::size_t G = 5 + rng.below(26), Q = 1 + rng.below(8), d = 2 + rng.below(3);
    int classes = 2 + static_cast<int>(rng.below(4));
    Array q({Q, d}), g({G, d});
    for (double& v : q.data) v = rng.gaussian();
    for (double& v : g.data) v = rng.gaussian();
    std::vector<int> qc, gc;
    std::vector<long long> gid;
    for (std::size_t i = 0; i < G; ++i) {
      gc.push_back(i < static_cast<std::size_t>(classes)
                       ? static_cast<int>(i)
                       : static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
      gid.push_back(static_cast<long long>(i));
    }
    for (std::size_t i = 0; i < Q; ++i)
      qc.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
    RetrievalRun run = retrieve(q, g, qc, gc, gid);

    std::size_t cutoff = 1 + rng.below(G);
    std::size_t k = 1 + rng.below(G + 10);

    // definitional recomputation, precision-at-rank from scratch
    double map_all = 0.0, map_cut = 0.0, prec = 0.0;
    for (std::size_t qi = 0; qi < Q; ++qi) {
      const auto& ord = run.order[qi];
      auto ap_at = [&](std::size_t depth) {
        double sum = 0.0;
        std::size_t used = 0;
        for (std::size_t r = 1; r <= std::min(depth, ord.size()); ++r) {
          if (gc[ord[r - 1]] != qc[qi]) continue;
          std::size_t in_top = 0;
          for (std::size_t j = 0; j < r; ++j) in_top += gc[ord[j]] == qc[qi] ? 1 : 0;
          sum += static_cast<double>(in_top) / static_cast<double>(r);
          used += 1;
        }
        return used == 0 ? 0.0 : sum / static_cast<double>(used);
      };
      map_all += ap_at(G);
      map_cut += ap_at(cutoff);
      std::size_t depth = std::min(k, G), hits = 0;
      for (std::size_t r = 0; r < depth; ++r) hits += gc[ord[r]] == qc[qi] ? 1 : 0;
      prec += static_cast<double>(hits) / static_cast<double>(depth);
    }
    map_all /= static_cast<double>(Q);
    map_cut /= static_cast<double>(Q);
    prec /= static_cast<double>(Q);

    out.max_err = std::max(out.max_err, std::fabs(mean_average_precision(run) - map_all));
    out.max_err = std::max(out.max_err, std::fabs(mean_average_precision(run, cutoff) - map_cut));
    out.max_err = std::max(out.max_err, std::fabs(precision_at_k(run, k) - prec));
  }
  out.pass = out.max_err <= 1e-12;
  out.detail = std::to_string(opt.metric_runs) + " random retrieval runs, tolerance 1e-12";
  return out;
}

inline CheckResult check_margins_nonnegative() {
  CheckResult out;
  out.name = "margins_nonnegative";
  out.pass = true;
  Rng rng(66);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    MetaConfig mc;
    mc.slots = 5;
    mc.width = 3;
    mc.hidden = 3;
    std::size_t T = 3, e = 2;
    std::vector<int> cls{0, 1, 0};
    Graph g;
    MetaLeaves lv = declare_meta_leaves(g, mc, e + 2);
    Bindings bind = init_meta_params(mc, e + 2, rng.uniform(0.0, 0.5), rng);
    Array fv({T, e});
    for (double& v : fv.data) v = rng.gaussian();
    NodeId feats = g.constant(fv);
    Session s(g, bind);
    EpisodeBuild ep = run_episode(g, s, lv, mc, feats, cls);
    const Array& m = s.eval(ep.margins);
    worst = std::min(std::min(worst, m.data[0]), m.data[1]);
  }
  out.max_err = worst < 0.0 ? -worst : 0.0;
  out.pass = worst >= 0.0;
  out.detail = "30 random episodes, both margins >= 0";
  return out;
}

// Plants a known gradient perturbation and requires the checker to flag it;
// the previous fault state is restored afterwards.
inline CheckResult check_fault_selftest(const VerifyOptions& opt) {
  CheckResult out;
  out.name = "fault_selftest";
  GradFault saved = g_grad_fault;
  g_grad_fault = {"relu", 1e-3};

  Graph g;
  NodeId x = g.leaf("x", {4});
  NodeId root = g.reduce_sum(g.relu(x));
  Bindings bind{{"x", Array::vec({1.0, 2.0, -1.5, 0.5})}};
  GradCheckReport rep = grad_check(g, root, bind, 1e-5, opt.grad_tol);
  g_grad_fault = saved;

  out.max_err = rep.max_rel_err;
  out.pass = rep.max_rel_err > opt.grad_tol;
  out.detail = out.pass ? "planted fault on op 'relu' detected by the gradient checker"
                        : "planted fault on op 'relu' was NOT detected";
  return out;
}

inline std::vector<CheckResult> run_verification(const VerifyOptions& opt = {}) {
  std::vector<CheckResult> checks;
  checks.push_back(check_op_gradients(opt));
  checks.push_back(check_triplet_analytic());
  for (Variant v : {Variant::RaQua, Variant::ComTri, Variant::BidTri, Variant::AllTri,
                    Variant::SinQua}) {
    checks.push_back(check_loss_gradients(v, opt));
  }
  checks.push_back(check_episode_gradients(opt));
  checks.push_back(check_mining_oracle(opt));
  checks.push_back(check_memory_invariants(opt));
  checks.push_back(check_structural_identities(opt));
  checks.push_back(check_metric_oracles(opt));
  checks.push_back(check_margins_nonnegative());
  if (opt.fault_selftest) checks.push_back(check_fault_selftest(opt));
  return checks;
}

inline bool all_passed(const std::vector<CheckResult>& checks) {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

inline std::string verification_table(const std::vector<CheckResult>& checks) {
  std::string out = "check                      status  max error     detail\n";
  out += "-------------------------  ------  ------------  ------\n";
  char buf[64];
  for (const auto& c : checks) {
    std::snprintf(buf, sizeof(buf), "%-25s  %-6s  %-12.3g  ", c.name.c_str(),
                  c.pass ? "PASS" : "FAIL", c.max_err);
    out += buf;
    out += c.detail + "\n";
  }
  return out;
}

}  // namespace qml

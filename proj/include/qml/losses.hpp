#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qml/dataspace.hpp"
#include "qml/graph.hpp"

// Hard-mined pair selection, the relation-aware quadruplet loss, its four
// baseline variants, the classification term, and the combined objective
// built as one differentiable graph.
//
// Mining lives in the graph: for every (anchor modality, partner modality)
// combination the candidate distance entries are gathered in lexicographic
// (anchor, partner) order and reduced with max/min. Reduce ties resolve to
// the first candidate, so the graph picks exactly the pair the numeric
// mine_pairs scan picks, and gradients flow only to the selected pair.

namespace qml {

enum class Variant { RaQua, ComTri, BidTri, AllTri, SinQua };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::RaQua: return "raqua";
    case Variant::ComTri: return "comtri";
    case Variant::BidTri: return "bidtri";
    case Variant::AllTri: return "alltri";
    case Variant::SinQua: return "sinqua";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::RaQua, Variant::ComTri, Variant::BidTri, Variant::AllTri,
                    Variant::SinQua}) {
    if (s == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown loss variant '" + s +
                              "' (expected raqua|comtri|bidtri|alltri|sinqua)");
}

struct LossConfig {
  double lambda = 0.3;       // weight of the cross-modal ("weak push") negative
  double fixed_margin = 0.3;
  Variant variant = Variant::RaQua;
  bool use_meta_margin = false;
  bool use_cls = true;
  double qua_weight = 1.0;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0))
      throw std::invalid_argument("loss: lambda must lie in [0,1]");
    if (fixed_margin < 0.0) throw std::invalid_argument("loss: fixed_margin must be >= 0");
    if (qua_weight < 0.0) throw std::invalid_argument("loss: qua_weight must be >= 0");
  }
};

// Candidate (anchor, partner) index pairs in lexicographic order. Modality
// filters are optional so the pooled AllTri scan can reuse the same walk.
inline std::vector<std::pair<std::size_t, std::size_t>> mining_candidates(
    const std::vector<int>& cls, const std::vector<Modality>& mod,
    std::optional<Modality> anchor_mod, std::optional<Modality> partner_mod, bool same_class) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t n = cls.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (anchor_mod && mod[i] != *anchor_mod) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (partner_mod && mod[j] != *partner_mod) continue;
      if ((cls[i] == cls[j]) != same_class) continue;
      out.emplace_back(i, j);
    }
  }
  return out;
}

struct MinedEntry {
  double value = 0.0;
  std::size_t anchor = 0;
  std::size_t partner = 0;
};

inline std::size_t modality_index(Modality m) { return m == Modality::Sketch ? 0 : 1; }

struct MinedPairs {
  // indexed [anchor modality][partner modality] via modality_index
  std::optional<MinedEntry> pos[2][2];
  std::optional<MinedEntry> neg[2][2];
  // pooled over modalities (AllTri)
  std::optional<MinedEntry> pos_any;
  std::optional<MinedEntry> neg_any;

  static std::string combo_name(Modality a, Modality b) {
    return std::string(modality_tag(a)) + " anchor, " + modality_tag(b) + " partner";
  }

  const MinedEntry& require_pos(Modality a, Modality b) const {
    const auto& e = pos[modality_index(a)][modality_index(b)];
    if (!e) {
      throw std::runtime_error("mining: no same-class pair with " + combo_name(a, b));
    }
    return *e;
  }

  const MinedEntry& require_neg(Modality a, Modality b) const {
    const auto& e = neg[modality_index(a)][modality_index(b)];
    if (!e) {
      throw std::runtime_error("mining: no different-class pair with " + combo_name(a, b));
    }
    return *e;
  }
};

namespace detail {

inline std::optional<MinedEntry> scan(
    const Array& D, const std::vector<std::pair<std::size_t, std::size_t>>& cands,
    bool want_max) {
  std::optional<MinedEntry> best;
  std::size_t n = D.shape[0];
  for (const auto& [i, j] : cands) {
    double v = D.data[i * n + j];
    // strict comparison keeps the first (lex-lowest) candidate on ties
    if (!best || (want_max ? v > best->value : v < best->value)) {
      best = MinedEntry{v, i, j};
    }
  }
  return best;
}

}  // namespace detail

// Hardest positive (max same-class distance) and hardest negative (min
// different-class distance) per modality combination, plus the pooled scan.
inline MinedPairs mine_pairs(const Array& D, const std::vector<int>& cls,
                             const std::vector<Modality>& mod) {
  if (D.rank() != 2 || D.shape[0] != D.shape[1] || D.shape[0] != cls.size() ||
      cls.size() != mod.size()) {
    throw std::invalid_argument("mining: distance matrix and batch metadata disagree");
  }
  std::set<int> classes(cls.begin(), cls.end());
  if (classes.size() < 2) throw std::invalid_argument("mining: batch needs >= 2 classes");
  bool has_ske = false, has_pho = false;
  for (Modality m : mod) (m == Modality::Sketch ? has_ske : has_pho) = true;
  if (!has_ske || !has_pho) throw std::invalid_argument("mining: batch needs both modalities");

  MinedPairs out;
  for (Modality a : {Modality::Sketch, Modality::Photo}) {
    for (Modality b : {Modality::Sketch, Modality::Photo}) {
      out.pos[modality_index(a)][modality_index(b)] =
          detail::scan(D, mining_candidates(cls, mod, a, b, true), true);
      out.neg[modality_index(a)][modality_index(b)] =
          detail::scan(D, mining_candidates(cls, mod, a, b, false), false);
    }
  }
  out.pos_any = detail::scan(D, mining_candidates(cls, mod, {}, {}, true), true);
  out.neg_any = detail::scan(D, mining_candidates(cls, mod, {}, {}, false), false);
  return out;
}

inline double hinge_value(double x) { return x > 0.0 ? x : 0.0; }

// Numeric forms of the two quadruplet terms, used as oracles against the
// graph build. j is the anchor modality, k the other one (j != k).
inline double inter_modal_quadruplet(const MinedPairs& p, Modality j, Modality k, double m_inter,
                                     double lambda) {
  double pos = p.require_pos(j, k).value;
  double push = lambda * p.require_neg(j, k).value + (1.0 - lambda) * p.require_neg(j, j).value;
  return hinge_value(pos + m_inter - push);
}

inline double intra_modal_quadruplet(const MinedPairs& p, Modality j, Modality k, double m_intra,
                                     double lambda) {
  double pos = p.require_pos(j, j).value;
  double push = lambda * p.require_neg(j, k).value + (1.0 - lambda) * p.require_neg(j, j).value;
  return hinge_value(pos + m_intra - push);
}

inline double relation_aware_quadruplet(const MinedPairs& p, double m_inter, double m_intra,
                                        double lambda) {
  double sum = 0.0;
  for (Modality j : {Modality::Sketch, Modality::Photo}) {
    Modality k = j == Modality::Sketch ? Modality::Photo : Modality::Sketch;
    sum += inter_modal_quadruplet(p, j, k, m_inter, lambda);
    sum += intra_modal_quadruplet(p, j, k, m_intra, lambda);
  }
  return sum;
}

// Dense labels for the classifier: seen classes in sorted order map to
// 0..C-1. A batch class outside the seen set is a caller bug.
inline std::vector<int> remap_labels(const std::vector<int>& batch_cls,
                                     const std::set<int>& seen) {
  std::vector<int> sorted(seen.begin(), seen.end());
  std::vector<int> out(batch_cls.size());
  for (std::size_t i = 0; i < batch_cls.size(); ++i) {
    auto it = std::lower_bound(sorted.begin(), sorted.end(), batch_cls[i]);
    if (it == sorted.end() || *it != batch_cls[i]) {
      throw std::invalid_argument("labels: class " + std::to_string(batch_cls[i]) +
                                  " is not a seen class");
    }
    out[i] = static_cast<int>(it - sorted.begin());
  }
  return out;
}

struct LossInputs {
  NodeId embedding = -1;            // {n, e}, pre-normalization
  std::vector<int> class_ids;       // per batch row
  std::vector<Modality> modalities; // per batch row
  std::vector<int> cls_labels;      // dense labels; empty disables the cls term
  NodeId cls_w = -1;                // {e, C}, required when cls_labels nonempty
  NodeId cls_b = -1;                // {C}
  // (m_inter, m_intra) nodes, each shape {1}; unset uses cfg.fixed_margin
  std::optional<std::pair<NodeId, NodeId>> margins;
};

struct BuiltLoss {
  NodeId total = -1;
  NodeId qua = -1;    // weighted variant term
  NodeId inter = -1;  // weighted sum of inter hinges
  NodeId intra = -1;  // weighted sum of intra hinges
  NodeId cls = -1;
  NodeId normalized = -1;  // {n, e} unit-norm embeddings
  NodeId distances = -1;   // {n, n}
  std::vector<NodeId> hinge_args;   // pre-hinge scalars
  std::vector<NodeId> inter_terms;  // hinge outputs feeding the inter bucket
  std::vector<NodeId> intra_terms;
  NodeId m_inter = -1;
  NodeId m_intra = -1;
};

namespace detail {

class LossBuilder {
 public:
  LossBuilder(Graph& g, NodeId D, const std::vector<int>& cls, const std::vector<Modality>& mod)
      : g_(g), D_(D), cls_(cls), mod_(mod) {}

  NodeId pos_node(std::optional<Modality> a, std::optional<Modality> b) {
    return mined(a, b, true, true);
  }
  NodeId neg_node(std::optional<Modality> a, std::optional<Modality> b) {
    return mined(a, b, false, false);
  }

 private:
  NodeId mined(std::optional<Modality> a, std::optional<Modality> b, bool same_class,
               bool want_max) {
    Key key{a, b, same_class, want_max};
    for (const auto& [k, id] : cache_)
      if (k == key) return id;
    auto cands = mining_candidates(cls_, mod_, a, b, same_class);
    if (cands.empty()) {
      std::string combo =
          a ? MinedPairs::combo_name(*a, *b) : std::string("any-modality pair");
      throw std::runtime_error(std::string("mining: no ") +
                               (same_class ? "same-class" : "different-class") + " pair with " +
                               combo);
    }
    NodeId gathered = g_.gather_entries(D_, cands);
    NodeId id = want_max ? g_.reduce_max(gathered) : g_.reduce_min(gathered);
    cache_.emplace_back(key, id);
    return id;
  }

  struct Key {
    std::optional<Modality> a, b;
    bool same_class, want_max;
    bool operator==(const Key&) const = default;
  };

  Graph& g_;
  NodeId D_;
  const std::vector<int>& cls_;
  const std::vector<Modality>& mod_;
  std::vector<std::pair<Key, NodeId>> cache_;
};

}  // namespace detail

// Assembles the full objective: variant loss over mined graph nodes plus the
// classification term, all downstream of one shared distance matrix.
inline BuiltLoss build_loss(Graph& g, const LossInputs& in, const LossConfig& cfg) {
  cfg.validate();
  std::size_t n = in.class_ids.size();
  if (n == 0 || in.modalities.size() != n) {
    throw std::invalid_argument("loss: batch metadata sizes disagree");
  }

  BuiltLoss out;
  out.normalized = g.l2_normalize(in.embedding);
  out.distances = g.pairwise_sq_dist(out.normalized);

  if (in.margins) {
    out.m_inter = in.margins->first;
    out.m_intra = in.margins->second;
  } else {
    out.m_inter = g.constant(Array::scalar(cfg.fixed_margin));
    out.m_intra = g.constant(Array::scalar(cfg.fixed_margin));
  }

  detail::LossBuilder mine(g, out.distances, in.class_ids, in.modalities);

  auto weak_push = [&](Modality j, Modality k) {
    NodeId cross = g.scalar_mul(mine.neg_node(j, k), cfg.lambda);
    NodeId same = g.scalar_mul(mine.neg_node(j, j), 1.0 - cfg.lambda);
    return g.add(cross, same);
  };
  auto inter_term = [&](Modality j, Modality k) {
    NodeId arg = g.sub(g.add(mine.pos_node(j, k), out.m_inter), weak_push(j, k));
    out.hinge_args.push_back(arg);
    NodeId h = g.hinge(arg);
    out.inter_terms.push_back(h);
    return h;
  };
  auto intra_term = [&](Modality j, Modality k) {
    NodeId arg = g.sub(g.add(mine.pos_node(j, j), out.m_intra), weak_push(j, k));
    out.hinge_args.push_back(arg);
    NodeId h = g.hinge(arg);
    out.intra_terms.push_back(h);
    return h;
  };
  // plain triplet with margin m_inter over one mined (anchor, partner) scan
  auto triplet_term = [&](std::optional<Modality> a, std::optional<Modality> b) {
    NodeId arg = g.sub(g.add(mine.pos_node(a, b), out.m_inter), mine.neg_node(a, b));
    out.hinge_args.push_back(arg);
    NodeId h = g.hinge(arg);
    out.inter_terms.push_back(h);
    return h;
  };

  std::vector<NodeId> parts;
  const Modality S = Modality::Sketch, P = Modality::Photo;
  switch (cfg.variant) {
    case Variant::RaQua:
      for (Modality j : {S, P}) {
        Modality k = j == S ? P : S;
        parts.push_back(inter_term(j, k));
        parts.push_back(intra_term(j, k));
      }
      break;
    case Variant::ComTri:
      parts.push_back(triplet_term(P, S));
      break;
    case Variant::BidTri:
      parts.push_back(triplet_term(P, S));
      parts.push_back(triplet_term(S, P));
      break;
    case Variant::AllTri:
      parts.push_back(triplet_term({}, {}));
      break;
    case Variant::SinQua:
      for (Modality j : {S, P}) {
        Modality k = j == S ? P : S;
        parts.push_back(inter_term(j, k));
      }
      break;
  }

  auto weighted_sum = [&](const std::vector<NodeId>& terms) {
    if (terms.empty()) return g.constant(Array::scalar(0.0));
    NodeId s = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) s = g.add(s, terms[i]);
    return g.scalar_mul(s, cfg.qua_weight);
  };
  out.inter = weighted_sum(out.inter_terms);
  out.intra = weighted_sum(out.intra_terms);
  out.qua = weighted_sum(parts);

  if (cfg.use_cls && !in.cls_labels.empty()) {
    if (in.cls_w < 0 || in.cls_b < 0) {
      throw std::invalid_argument("loss: classifier parameters missing");
    }
    NodeId logits = g.add(g.matmul(out.normalized, in.cls_w), in.cls_b);
    out.cls = g.softmax_cross_entropy(logits, in.cls_labels);
  } else {
    out.cls = g.constant(Array::scalar(0.0));
  }

  out.total = g.add(out.qua, out.cls);
  return out;
}

struct LossReport {
  double total = 0.0;
  double inter = 0.0;
  double intra = 0.0;
  double cls = 0.0;
  double active_fraction = 0.0;
};

inline LossReport eval_loss(Session& s, const BuiltLoss& built) {
  LossReport r;
  r.total = s.eval(built.total).data[0];
  r.inter = s.value(built.inter).data[0];
  r.intra = s.value(built.intra).data[0];
  r.cls = s.value(built.cls).data[0];
  std::size_t active = 0;
  for (NodeId arg : built.hinge_args) {
    if (s.value(arg).data[0] > 0.0) ++active;
  }
  r.active_fraction = built.hinge_args.empty()
                          ? 0.0
                          : static_cast<double>(active) / static_cast<double>(built.hinge_args.size());
  return r;
}

}  // namespace qml

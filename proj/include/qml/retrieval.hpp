#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qml/array.hpp"
#include "qml/dataspace.hpp"

// Zero-shot retrieval: each sketch query ranks the photo gallery by squared
// Euclidean distance (equivalent to negative-distance similarity), relevance
// is exact class match, and the metrics are mAP and precision at fixed depth.

namespace qml {

struct RetrievalRun {
  std::vector<int> query_class;                   // per query
  std::vector<int> gallery_class;                 // per gallery position
  std::vector<long long> gallery_ids;             // per gallery position
  std::vector<std::vector<std::size_t>> order;    // per query: gallery positions, best first
};

// Stable deterministic ranking: ascending squared distance, ties broken by
// gallery id.
inline RetrievalRun retrieve(const Array& queries, const Array& gallery,
                             const std::vector<int>& query_class,
                             const std::vector<int>& gallery_class,
                             const std::vector<long long>& gallery_ids) {
  if (queries.rank() != 2 || gallery.rank() != 2 || queries.shape[1] != gallery.shape[1]) {
    throw std::invalid_argument("retrieve: embedding shapes disagree");
  }
  std::size_t Q = queries.shape[0], G = gallery.shape[0], d = queries.shape[1];
  if (Q == 0) throw std::invalid_argument("retrieve: no queries");
  if (G == 0) throw std::invalid_argument("retrieve: empty gallery");
  if (query_class.size() != Q || gallery_class.size() != G || gallery_ids.size() != G) {
    throw std::invalid_argument("retrieve: metadata sizes disagree");
  }

  RetrievalRun run;
  run.query_class = query_class;
  run.gallery_class = gallery_class;
  run.gallery_ids = gallery_ids;
  run.order.resize(Q);
  std::vector<double> dist(G);
  for (std::size_t q = 0; q < Q; ++q) {
    for (std::size_t j = 0; j < G; ++j) {
      dist[j] = sq_distance(queries.data.data() + q * d, gallery.data.data() + j * d, d);
    }
    auto& ord = run.order[q];
    ord.resize(G);
    for (std::size_t j = 0; j < G; ++j) ord[j] = j;
    std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
      if (dist[a] != dist[b]) return dist[a] < dist[b];
      return gallery_ids[a] < gallery_ids[b];
    });
  }
  return run;
}

// AP truncated at cutoff: mean over relevant ranks r <= cutoff of
// (relevant seen so far) / r; zero when no relevant item makes the cut.
inline double average_precision(const RetrievalRun& run, std::size_t q,
                                std::optional<std::size_t> cutoff) {
  const auto& ord = run.order.at(q);
  std::size_t depth = cutoff ? std::min(*cutoff, ord.size()) : ord.size();
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 1; r <= depth; ++r) {
    if (run.gallery_class[ord[r - 1]] == run.query_class[q]) {
      hits += 1;
      sum += static_cast<double>(hits) / static_cast<double>(r);
    }
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

inline double mean_average_precision(const RetrievalRun& run,
                                     std::optional<std::size_t> cutoff = std::nullopt) {
  if (run.order.empty()) throw std::invalid_argument("map: no queries");
  double sum = 0.0;
  for (std::size_t q = 0; q < run.order.size(); ++q) {
    std::size_t relevant = 0;
    for (int c : run.gallery_class) relevant += c == run.query_class[q] ? 1 : 0;
    if (relevant == 0) {
      throw std::invalid_argument("map: query " + std::to_string(q) +
                                  " (class " + std::to_string(run.query_class[q]) +
                                  ") has no relevant gallery item");
    }
    sum += average_precision(run, q, cutoff);
  }
  return sum / static_cast<double>(run.order.size());
}

// Mean fraction of relevant items in the top k; k beyond the gallery
// truncates to the gallery size.
inline double precision_at_k(const RetrievalRun& run, std::size_t k) {
  if (run.order.empty()) throw std::invalid_argument("precision: no queries");
  if (k < 1) throw std::invalid_argument("precision: k must be >= 1");
  double sum = 0.0;
  for (std::size_t q = 0; q < run.order.size(); ++q) {
    const auto& ord = run.order[q];
    std::size_t depth = std::min(k, ord.size());
    std::size_t hits = 0;
    for (std::size_t r = 0; r < depth; ++r) {
      hits += run.gallery_class[ord[r]] == run.query_class[q] ? 1 : 0;
    }
    sum += static_cast<double>(hits) / static_cast<double>(depth);
  }
  return sum / static_cast<double>(run.order.size());
}

struct RetrievalMetrics {
  double map_all = 0.0;
  double map_at_200 = 0.0;
  double prec_at_100 = 0.0;
  double prec_at_200 = 0.0;
};

inline RetrievalMetrics compute_metrics(const RetrievalRun& run) {
  RetrievalMetrics m;
  m.map_all = mean_average_precision(run);
  m.map_at_200 = mean_average_precision(run, 200);
  m.prec_at_100 = precision_at_k(run, 100);
  m.prec_at_200 = precision_at_k(run, 200);
  return m;
}

inline std::string metrics_json(const RetrievalMetrics& m) {
  std::string out = "{";
  out += "\"map_all\":" + format_real(m.map_all);
  out += ",\"map_at_200\":" + format_real(m.map_at_200);
  out += ",\"prec_at_100\":" + format_real(m.prec_at_100);
  out += ",\"prec_at_200\":" + format_real(m.prec_at_200);
  out += "}\n";
  return out;
}

}  // namespace qml

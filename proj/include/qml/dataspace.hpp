#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qml/array.hpp"
#include "qml/rng.hpp"

// Two-modality feature data: synthetic generation, CSV ingestion, zero-shot
// class splits, PK batch sampling, normalization, pairwise distances.

namespace qml {

enum class Modality { Sketch, Photo };

inline const char* modality_tag(Modality m) { return m == Modality::Sketch ? "ske" : "pho"; }

inline Modality parse_modality(const std::string& s) {
  if (s == "ske") return Modality::Sketch;
  if (s == "pho") return Modality::Photo;
  throw std::runtime_error("modality must be 'ske' or 'pho', got '" + s + "'");
}

struct Sample {
  long long id = 0;
  Modality modality = Modality::Photo;
  int class_id = 0;
  std::vector<double> features;
};

struct Dataset {
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::vector<int> classes() const {
    std::set<int> c;
    for (const auto& s : samples) c.insert(s.class_id);
    return {c.begin(), c.end()};
  }

  std::size_t count(Modality m) const {
    std::size_t n = 0;
    for (const auto& s : samples)
      if (s.modality == m) ++n;
    return n;
  }
};

struct SplitSpec {
  std::set<int> seen;
  std::set<int> unseen;
};

struct SynthConfig {
  int num_classes = 5;
  std::size_t dim = 16;
  int samples_per_class_per_modality = 20;
  double center_scale = 1.0;
  double intra_std = 0.2;
  double modality_offset = 1.2;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("synth: num_classes must be >= 1");
    if (dim < 2) throw std::invalid_argument("synth: dim must be >= 2");
    if (samples_per_class_per_modality < 1)
      throw std::invalid_argument("synth: samples_per_class_per_modality must be >= 1");
    if (center_scale <= 0.0) throw std::invalid_argument("synth: center_scale must be > 0");
    if (intra_std < 0.0) throw std::invalid_argument("synth: intra_std must be >= 0");
    if (modality_offset < 0.0) throw std::invalid_argument("synth: modality_offset must be >= 0");
  }
};

// Class centers are Gaussian; photos scatter around the center, sketches get
// one extra global offset shared by every class. Draw order is fixed (offset
// direction, then centers, then per class: sketches before photos) so a seed
// pins the dataset exactly.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  std::vector<double> offset(cfg.dim, 0.0);
  {
    double n2 = 0.0;
    for (double& v : offset) {
      v = rng.gaussian();
      n2 += v * v;
    }
    double n = std::sqrt(n2);
    if (n < 1e-12) {
      std::fill(offset.begin(), offset.end(), 0.0);
      offset[0] = 1.0;
      n = 1.0;
    }
    for (double& v : offset) v *= cfg.modality_offset / n;
  }

  std::vector<std::vector<double>> centers(static_cast<std::size_t>(cfg.num_classes));
  for (auto& c : centers) {
    c.resize(cfg.dim);
    for (double& v : c) v = cfg.center_scale * rng.gaussian();
  }

  Dataset ds;
  ds.dim = cfg.dim;
  long long next_id = 0;
  for (int cls = 0; cls < cfg.num_classes; ++cls) {
    for (Modality m : {Modality::Sketch, Modality::Photo}) {
      for (int i = 0; i < cfg.samples_per_class_per_modality; ++i) {
        Sample s;
        s.id = next_id++;
        s.modality = m;
        s.class_id = cls;
        s.features.resize(cfg.dim);
        for (std::size_t k = 0; k < cfg.dim; ++k) {
          double v = centers[static_cast<std::size_t>(cls)][k] + cfg.intra_std * rng.gaussian();
          if (m == Modality::Sketch) v += offset[k];
          s.features[k] = v;
        }
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void save_features(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "id,modality,class";
  for (std::size_t k = 0; k < ds.dim; ++k) out << ",f" << k;
  out << "\n";
  for (const auto& s : ds.samples) {
    out << s.id << ',' << modality_tag(s.modality) << ',' << s.class_id;
    for (double v : s.features) out << ',' << format_real(v);
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_real(const std::string& s) {
  const char* p = s.c_str();
  char* end = nullptr;
  double v = std::strtod(p, &end);
  if (end == p || *end != '\0' || !std::isfinite(v)) {
    throw std::runtime_error("bad numeric value '" + s + "'");
  }
  return v;
}

inline long long parse_int(const std::string& s) {
  const char* p = s.c_str();
  char* end = nullptr;
  long long v = std::strtoll(p, &end, 10);
  if (end == p || *end != '\0') throw std::runtime_error("bad integer value '" + s + "'");
  return v;
}

}  // namespace detail

inline Dataset load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;

  auto fail = [&](const std::string& what) -> std::runtime_error {
    return std::runtime_error(path + ":" + std::to_string(lineno) + ": " + what);
  };

  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  ++lineno;
  auto head = detail::split_csv_line(line);
  if (head.size() < 4 || head[0] != "id" || head[1] != "modality" || head[2] != "class") {
    throw fail("header must start with id,modality,class,f0,...");
  }
  std::size_t dim = head.size() - 3;
  for (std::size_t k = 0; k < dim; ++k) {
    if (head[3 + k] != "f" + std::to_string(k)) {
      throw fail("feature column " + std::to_string(k) + " must be named f" + std::to_string(k));
    }
  }

  Dataset ds;
  ds.dim = dim;
  std::set<long long> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != dim + 3) {
      throw fail("expected " + std::to_string(dim + 3) + " columns, got " +
                 std::to_string(cells.size()));
    }
    Sample s;
    try {
      s.id = detail::parse_int(cells[0]);
      s.modality = parse_modality(cells[1]);
      long long cls = detail::parse_int(cells[2]);
      if (cls < 0) throw std::runtime_error("class must be nonnegative");
      s.class_id = static_cast<int>(cls);
      s.features.resize(dim);
      for (std::size_t k = 0; k < dim; ++k) s.features[k] = detail::parse_real(cells[3 + k]);
    } catch (const std::exception& e) {
      throw fail(e.what());
    }
    if (!ids.insert(s.id).second) throw fail("duplicate id " + std::to_string(s.id));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline SplitSpec zero_shot_split(const Dataset& ds, double unseen_fraction, std::uint64_t seed) {
  if (!(unseen_fraction > 0.0 && unseen_fraction < 1.0)) {
    throw std::invalid_argument("split: unseen_fraction must lie in (0,1)");
  }
  std::vector<int> classes = ds.classes();
  auto n_unseen = static_cast<std::size_t>(
      std::llround(static_cast<double>(classes.size()) * unseen_fraction));
  if (n_unseen == 0 || n_unseen >= classes.size()) {
    throw std::invalid_argument("split: fraction " + std::to_string(unseen_fraction) + " over " +
                                std::to_string(classes.size()) +
                                " classes leaves one side empty");
  }
  Rng rng(seed);
  rng.shuffle(classes);
  SplitSpec sp;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    (i < n_unseen ? sp.unseen : sp.seen).insert(classes[i]);
  }
  return sp;
}

struct Batch {
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  Array features() const {
    Array f({samples.size(), dim});
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (std::size_t k = 0; k < dim; ++k) f.data[i * dim + k] = samples[i].features[k];
    return f;
  }

  std::vector<int> class_ids() const {
    std::vector<int> c(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) c[i] = samples[i].class_id;
    return c;
  }

  std::vector<Modality> modalities() const {
    std::vector<Modality> m(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) m[i] = samples[i].modality;
    return m;
  }
};

// P seen classes, K sketches and K photos from each, drawn without
// replacement and presented in shuffled order (the meta episode consumes the
// batch as a sequence, so class blocks would be degenerate input).
inline Batch pk_sample(const Dataset& ds, const SplitSpec& split, std::size_t P, std::size_t K,
                       Rng& rng) {
  std::vector<int> seen(split.seen.begin(), split.seen.end());
  if (P == 0 || K == 0) throw std::invalid_argument("pk_sample: P and K must be positive");
  if (P > seen.size()) {
    throw std::invalid_argument("pk_sample: P=" + std::to_string(P) + " exceeds " +
                                std::to_string(seen.size()) + " seen classes");
  }
  rng.shuffle(seen);
  seen.resize(P);

  Batch batch;
  batch.dim = ds.dim;
  for (int cls : seen) {
    for (Modality m : {Modality::Sketch, Modality::Photo}) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (ds.samples[i].class_id == cls && ds.samples[i].modality == m) pool.push_back(i);
      }
      if (pool.size() < K) {
        throw std::invalid_argument("pk_sample: class " + std::to_string(cls) + " has " +
                                    std::to_string(pool.size()) + " " + modality_tag(m) +
                                    " samples, need " + std::to_string(K));
      }
      rng.shuffle(pool);
      for (std::size_t i = 0; i < K; ++i) batch.samples.push_back(ds.samples[pool[i]]);
    }
  }
  rng.shuffle(batch.samples);
  return batch;
}

inline Batch l2_normalize_batch(const Batch& in) {
  Batch out = in;
  for (auto& s : out.samples) {
    double n2 = 0.0;
    for (double v : s.features) n2 += v * v;
    double n = std::sqrt(n2);
    if (n < 1e-12) {
      throw std::invalid_argument("normalize: sample " + std::to_string(s.id) +
                                  " has zero feature vector");
    }
    for (double& v : s.features) v /= n;
  }
  return out;
}

inline Array pairwise_sq_distances(const Array& features) {
  if (features.rank() != 2) throw std::invalid_argument("pairwise: features must be a matrix");
  std::size_t n = features.shape[0], d = features.shape[1];
  Array D({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    D.data[i * n + i] = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double v = sq_distance(features.data.data() + i * d, features.data.data() + j * d, d);
      D.data[i * n + j] = v;
      D.data[j * n + i] = v;
    }
  }
  return D;
}

// Mean squared distance over same-class pairs, either across modalities or
// within one. Used by the synthetic-premise test and training diagnostics.
inline double mean_same_class_sq_dist(const Array& features, const std::vector<int>& cls,
                                      const std::vector<Modality>& mod, bool cross_modal) {
  std::size_t n = features.shape[0], d = features.shape[1];
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (cls[i] != cls[j]) continue;
      bool cross = mod[i] != mod[j];
      if (cross != cross_modal) continue;
      sum += sq_distance(features.data.data() + i * d, features.data.data() + j * d, d);
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

}  // namespace qml

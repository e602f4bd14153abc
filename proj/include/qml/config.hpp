#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qml/dataspace.hpp"
#include "qml/losses.hpp"
#include "qml/meta_margin.hpp"
#include "qml/trainer.hpp"

// Strict JSON experiment configuration: every key is known, every value is
// type- and range-checked before any work starts, and the raw text is copied
// into the output directory as provenance.

namespace qml {

struct DataConfig {
  bool use_synthetic = true;
  SynthConfig synth;
  std::string features_file;
  double unseen_fraction = 0.4;
  std::uint64_t split_seed = 1;
};

struct EvalConfig {
  bool reverse_direction = false;  // photos query sketches, for diagnostics
};

struct AblationConfig {
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  std::optional<AblationConfig> ablation;
};

// Ablation arms are self-contained loss settings; base config supplies
// everything else (lambda, margins, sizes, optimizer).
struct ArmSpec {
  std::string name;
  Variant variant = Variant::RaQua;
  bool use_cls = true;
  bool use_meta = false;
};

inline ArmSpec parse_arm(const std::string& name) {
  ArmSpec a;
  a.name = name;
  if (name == "raqua_nocls") {
    a.variant = Variant::RaQua;
    a.use_cls = false;
    return a;
  }
  if (name == "raqua_meta") {
    a.variant = Variant::RaQua;
    a.use_meta = true;
    return a;
  }
  a.variant = parse_variant(name);  // raqua / bidtri / comtri / alltri / sinqua
  return a;
}

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& obj, const std::string& where,
                       const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
    }
  }
}

inline double num(const json& obj, const std::string& where, const std::string& key, double dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_number()) throw std::invalid_argument("config: " + where + "." + key + " must be a number");
  return v.get<double>();
}

inline bool flag(const json& obj, const std::string& where, const std::string& key, bool dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_boolean())
    throw std::invalid_argument("config: " + where + "." + key + " must be a boolean");
  return v.get<bool>();
}

inline std::uint64_t uint(const json& obj, const std::string& where, const std::string& key,
                          std::uint64_t dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<double>() < 0)) {
    throw std::invalid_argument("config: " + where + "." + key +
                                " must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

inline std::string text(const json& obj, const std::string& where, const std::string& key,
                        const std::string& dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_string()) throw std::invalid_argument("config: " + where + "." + key + " must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& json_text) {
  using nlohmann::json;
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
  }
  detail::check_keys(root, "root", {"data", "train", "loss", "meta", "eval", "ablation"});

  ExperimentConfig cfg;

  if (root.contains("data")) {
    const json& d = root.at("data");
    detail::check_keys(d, "data", {"synthetic", "features_file", "unseen_fraction", "split_seed"});
    if (d.contains("synthetic") && d.contains("features_file")) {
      throw std::invalid_argument("config: data.synthetic and data.features_file are exclusive");
    }
    if (d.contains("features_file")) {
      cfg.data.use_synthetic = false;
      cfg.data.features_file = detail::text(d, "data", "features_file", "");
      if (cfg.data.features_file.empty()) {
        throw std::invalid_argument("config: data.features_file must not be empty");
      }
    }
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      detail::check_keys(s, "data.synthetic",
                         {"num_classes", "dim", "samples_per_class_per_modality", "center_scale",
                          "intra_std", "modality_offset", "seed"});
      SynthConfig& sc = cfg.data.synth;
      sc.num_classes = static_cast<int>(detail::uint(s, "data.synthetic", "num_classes",
                                                     static_cast<std::uint64_t>(sc.num_classes)));
      sc.dim = static_cast<std::size_t>(detail::uint(s, "data.synthetic", "dim", sc.dim));
      sc.samples_per_class_per_modality = static_cast<int>(detail::uint(
          s, "data.synthetic", "samples_per_class_per_modality",
          static_cast<std::uint64_t>(sc.samples_per_class_per_modality)));
      sc.center_scale = detail::num(s, "data.synthetic", "center_scale", sc.center_scale);
      sc.intra_std = detail::num(s, "data.synthetic", "intra_std", sc.intra_std);
      sc.modality_offset = detail::num(s, "data.synthetic", "modality_offset", sc.modality_offset);
      sc.seed = detail::uint(s, "data.synthetic", "seed", sc.seed);
    }
    cfg.data.unseen_fraction = detail::num(d, "data", "unseen_fraction", cfg.data.unseen_fraction);
    cfg.data.split_seed = detail::uint(d, "data", "split_seed", cfg.data.split_seed);
  }
  if (!(cfg.data.unseen_fraction > 0.0 && cfg.data.unseen_fraction < 1.0)) {
    throw std::invalid_argument("config: data.unseen_fraction must lie in (0,1)");
  }
  if (cfg.data.use_synthetic) cfg.data.synth.validate();

  if (root.contains("train")) {
    const json& t = root.at("train");
    detail::check_keys(t, "train",
                       {"learning_rate", "weight_decay", "beta1", "beta2", "adam_eps", "epochs",
                        "batches_per_epoch", "P", "K", "seed", "embedding_mode", "proj_out_dim"});
    TrainConfig& tc = cfg.train;
    tc.learning_rate = detail::num(t, "train", "learning_rate", tc.learning_rate);
    tc.weight_decay = detail::num(t, "train", "weight_decay", tc.weight_decay);
    tc.beta1 = detail::num(t, "train", "beta1", tc.beta1);
    tc.beta2 = detail::num(t, "train", "beta2", tc.beta2);
    tc.adam_eps = detail::num(t, "train", "adam_eps", tc.adam_eps);
    tc.epochs = static_cast<std::size_t>(detail::uint(t, "train", "epochs", tc.epochs));
    tc.batches_per_epoch =
        static_cast<std::size_t>(detail::uint(t, "train", "batches_per_epoch", tc.batches_per_epoch));
    tc.P = static_cast<std::size_t>(detail::uint(t, "train", "P", tc.P));
    tc.K = static_cast<std::size_t>(detail::uint(t, "train", "K", tc.K));
    tc.seed = detail::uint(t, "train", "seed", tc.seed);
    tc.embedding_mode =
        parse_embedding_mode(detail::text(t, "train", "embedding_mode",
                                          embedding_mode_name(tc.embedding_mode)));
    tc.proj_out_dim =
        static_cast<std::size_t>(detail::uint(t, "train", "proj_out_dim", tc.proj_out_dim));
  }

  bool meta_margin_explicit = false;
  if (root.contains("loss")) {
    const json& l = root.at("loss");
    detail::check_keys(l, "loss",
                       {"variant", "lambda", "fixed_margin", "use_cls", "use_meta_margin",
                        "qua_weight"});
    LossConfig& lc = cfg.train.loss;
    lc.variant = parse_variant(detail::text(l, "loss", "variant", variant_name(lc.variant)));
    lc.lambda = detail::num(l, "loss", "lambda", lc.lambda);
    lc.fixed_margin = detail::num(l, "loss", "fixed_margin", lc.fixed_margin);
    lc.use_cls = detail::flag(l, "loss", "use_cls", lc.use_cls);
    lc.qua_weight = detail::num(l, "loss", "qua_weight", lc.qua_weight);
    if (l.contains("use_meta_margin")) {
      meta_margin_explicit = true;
      lc.use_meta_margin = detail::flag(l, "loss", "use_meta_margin", lc.use_meta_margin);
    }
  }

  if (root.contains("meta")) {
    const json& m = root.at("meta");
    detail::check_keys(m, "meta",
                       {"enabled", "slots", "width", "hidden", "heads", "gamma", "cosine"});
    MetaConfig& mc = cfg.train.meta;
    mc.enabled = detail::flag(m, "meta", "enabled", mc.enabled);
    mc.slots = static_cast<std::size_t>(detail::uint(m, "meta", "slots", mc.slots));
    mc.width = static_cast<std::size_t>(detail::uint(m, "meta", "width", mc.width));
    mc.hidden = static_cast<std::size_t>(detail::uint(m, "meta", "hidden", mc.hidden));
    mc.heads = static_cast<std::size_t>(detail::uint(m, "meta", "heads", mc.heads));
    mc.gamma = detail::num(m, "meta", "gamma", mc.gamma);
    mc.cosine = detail::flag(m, "meta", "cosine", mc.cosine);
  }
  // the loss flag follows the meta block unless the config pins it explicitly
  if (!meta_margin_explicit) cfg.train.loss.use_meta_margin = cfg.train.meta.enabled;

  if (root.contains("eval")) {
    const json& e = root.at("eval");
    detail::check_keys(e, "eval", {"reverse_direction"});
    cfg.eval.reverse_direction = detail::flag(e, "eval", "reverse_direction", false);
  }

  if (root.contains("ablation")) {
    const json& a = root.at("ablation");
    detail::check_keys(a, "ablation", {"arms", "seeds"});
    AblationConfig ab;
    if (!a.contains("arms") || !a.at("arms").is_array()) {
      throw std::invalid_argument("config: ablation.arms must be an array of arm names");
    }
    for (const auto& v : a.at("arms")) {
      if (!v.is_string()) throw std::invalid_argument("config: ablation.arms entries must be strings");
      parse_arm(v.get<std::string>());  // validates the name
      ab.arms.push_back(v.get<std::string>());
    }
    if (!a.contains("seeds") || !a.at("seeds").is_array()) {
      throw std::invalid_argument("config: ablation.seeds must be an array of integers");
    }
    for (const auto& v : a.at("seeds")) {
      if (!v.is_number_integer() || v.get<double>() < 0) {
        throw std::invalid_argument("config: ablation.seeds entries must be nonnegative integers");
      }
      ab.seeds.push_back(v.get<std::uint64_t>());
    }
    if (ab.arms.size() < 2) throw std::invalid_argument("config: ablation needs at least 2 arms");
    if (ab.seeds.size() < 3) throw std::invalid_argument("config: ablation needs at least 3 seeds");
    std::set<std::string> uniq_arms(ab.arms.begin(), ab.arms.end());
    if (uniq_arms.size() != ab.arms.size()) {
      throw std::invalid_argument("config: ablation.arms contains duplicates");
    }
    std::set<std::uint64_t> uniq_seeds(ab.seeds.begin(), ab.seeds.end());
    if (uniq_seeds.size() != ab.seeds.size()) {
      throw std::invalid_argument("config: ablation.seeds contains duplicates");
    }
    cfg.ablation = std::move(ab);
  }

  cfg.train.validate();
  return cfg;
}

}  // namespace qml

#include <catch2/catch_amalgamated.hpp>

#include "qml/config.hpp"

using namespace qml;

TEST_CASE("a full config parses into every section") {
  const char* text = R"({
    "data": {
      "synthetic": {"num_classes": 7, "dim": 9, "samples_per_class_per_modality": 5,
                    "center_scale": 0.8, "intra_std": 0.4, "modality_offset": 2.5, "seed": 11},
      "unseen_fraction": 0.3,
      "split_seed": 4
    },
    "train": {"learning_rate": 0.01, "weight_decay": 0.001, "beta1": 0.8, "beta2": 0.95,
              "adam_eps": 1e-9, "epochs": 3, "batches_per_epoch": 7, "P": 2, "K": 3,
              "seed": 5, "embedding_mode": "direct", "proj_out_dim": 6},
    "loss": {"variant": "sinqua", "lambda": 0.6, "fixed_margin": 0.2, "use_cls": false,
             "qua_weight": 1.5},
    "meta": {"enabled": true, "slots": 9, "width": 5, "hidden": 6, "heads": 2,
             "gamma": 0.9, "cosine": false},
    "eval": {"reverse_direction": true},
    "ablation": {"arms": ["raqua", "comtri", "raqua_meta"], "seeds": [3, 1, 2]}
  })";
  ExperimentConfig cfg = parse_experiment_config(text);

  CHECK(cfg.data.use_synthetic);
  CHECK(cfg.data.synth.num_classes == 7);
  CHECK(cfg.data.synth.dim == 9);
  CHECK(cfg.data.synth.samples_per_class_per_modality == 5);
  CHECK(cfg.data.synth.center_scale == 0.8);
  CHECK(cfg.data.synth.intra_std == 0.4);
  CHECK(cfg.data.synth.modality_offset == 2.5);
  CHECK(cfg.data.synth.seed == 11);
  CHECK(cfg.data.unseen_fraction == 0.3);
  CHECK(cfg.data.split_seed == 4);

  CHECK(cfg.train.learning_rate == 0.01);
  CHECK(cfg.train.weight_decay == 0.001);
  CHECK(cfg.train.beta1 == 0.8);
  CHECK(cfg.train.beta2 == 0.95);
  CHECK(cfg.train.adam_eps == 1e-9);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.batches_per_epoch == 7);
  CHECK(cfg.train.P == 2);
  CHECK(cfg.train.K == 3);
  CHECK(cfg.train.seed == 5);
  CHECK(cfg.train.embedding_mode == EmbeddingMode::DirectCoordinates);
  CHECK(cfg.train.proj_out_dim == 6);

  CHECK(cfg.train.loss.variant == Variant::SinQua);
  CHECK(cfg.train.loss.lambda == 0.6);
  CHECK(cfg.train.loss.fixed_margin == 0.2);
  CHECK_FALSE(cfg.train.loss.use_cls);
  CHECK(cfg.train.loss.qua_weight == 1.5);
  // no explicit use_meta_margin: follows meta.enabled
  CHECK(cfg.train.loss.use_meta_margin);

  CHECK(cfg.train.meta.enabled);
  CHECK(cfg.train.meta.slots == 9);
  CHECK(cfg.train.meta.width == 5);
  CHECK(cfg.train.meta.hidden == 6);
  CHECK(cfg.train.meta.heads == 2);
  CHECK(cfg.train.meta.gamma == 0.9);
  CHECK_FALSE(cfg.train.meta.cosine);

  CHECK(cfg.eval.reverse_direction);
  REQUIRE(cfg.ablation.has_value());
  CHECK(cfg.ablation->arms == std::vector<std::string>{"raqua", "comtri", "raqua_meta"});
  CHECK(cfg.ablation->seeds == std::vector<std::uint64_t>{3, 1, 2});
}

TEST_CASE("an empty object yields pure defaults") {
  ExperimentConfig cfg = parse_experiment_config("{}");
  CHECK(cfg.data.use_synthetic);
  CHECK(cfg.data.synth.num_classes == 5);
  CHECK(cfg.data.synth.dim == 16);
  CHECK(cfg.data.unseen_fraction == 0.4);
  CHECK(cfg.train.learning_rate == 1e-3);
  CHECK(cfg.train.epochs == 20);
  CHECK(cfg.train.loss.variant == Variant::RaQua);
  CHECK(cfg.train.loss.lambda == 0.3);
  CHECK(cfg.train.loss.fixed_margin == 0.3);
  CHECK(cfg.train.loss.use_cls);
  CHECK_FALSE(cfg.train.loss.use_meta_margin);
  CHECK_FALSE(cfg.train.meta.enabled);
  CHECK_FALSE(cfg.eval.reverse_direction);
  CHECK_FALSE(cfg.ablation.has_value());
}

TEST_CASE("unknown keys are rejected at every level") {
  auto rejects = [](const std::string& text, const std::string& needle) {
    try {
      parse_experiment_config(text);
      FAIL("expected rejection: " << text);
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  rejects(R"({"bogus": 1})", "unknown key 'bogus' in root");
  rejects(R"({"data": {"bogus": 1}})", "unknown key 'bogus' in data");
  rejects(R"({"data": {"synthetic": {"bogus": 1}}})", "unknown key 'bogus' in data.synthetic");
  rejects(R"({"train": {"momentum": 0.9}})", "unknown key 'momentum' in train");
  rejects(R"({"loss": {"margin": 0.3}})", "unknown key 'margin' in loss");
  rejects(R"({"meta": {"bogus": 1}})", "unknown key 'bogus' in meta");
  rejects(R"({"eval": {"bogus": 1}})", "unknown key 'bogus' in eval");
  rejects(R"({"ablation": {"bogus": 1, "arms": ["raqua","comtri"], "seeds": [1,2,3]}})",
          "unknown key 'bogus' in ablation");
}

TEST_CASE("malformed inputs fail with clear messages") {
  CHECK_THROWS_WITH(parse_experiment_config("not json"),
                    Catch::Matchers::ContainsSubstring("not valid JSON"));
  CHECK_THROWS_WITH(
      parse_experiment_config(R"({"data": {"synthetic": {}, "features_file": "x.csv"}})"),
      Catch::Matchers::ContainsSubstring("exclusive"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"data": {"features_file": ""}})"),
                    Catch::Matchers::ContainsSubstring("must not be empty"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"data": {"unseen_fraction": 1.0}})"),
                    Catch::Matchers::ContainsSubstring("unseen_fraction"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"data": {"unseen_fraction": 0.0}})"),
                    Catch::Matchers::ContainsSubstring("unseen_fraction"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"data": {"synthetic": {"dim": 0}}})"),
                    Catch::Matchers::ContainsSubstring("dim"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"train": {"embedding_mode": "mystery"}})"),
                    Catch::Matchers::ContainsSubstring("unknown embedding mode"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"loss": {"variant": "pentuplet"}})"),
                    Catch::Matchers::ContainsSubstring("variant"));
  CHECK_THROWS_WITH(parse_experiment_config(R"({"train": {"learning_rate": -1}})"),
                    Catch::Matchers::ContainsSubstring("learning_rate"));
  // explicit flag contradicting the meta block is caught by validation
  CHECK_THROWS(parse_experiment_config(R"({"loss": {"use_meta_margin": true}})"));
}

TEST_CASE("ablation lists are validated") {
  CHECK_THROWS_WITH(
      parse_experiment_config(R"({"ablation": {"arms": ["raqua"], "seeds": [1,2,3]}})"),
      Catch::Matchers::ContainsSubstring("at least 2 arms"));
  CHECK_THROWS_WITH(
      parse_experiment_config(R"({"ablation": {"arms": ["raqua","comtri"], "seeds": [1,2]}})"),
      Catch::Matchers::ContainsSubstring("at least 3 seeds"));
  CHECK_THROWS_WITH(
      parse_experiment_config(
          R"({"ablation": {"arms": ["raqua","megaqua"], "seeds": [1,2,3]}})"),
      Catch::Matchers::ContainsSubstring("megaqua"));
  CHECK_THROWS(parse_experiment_config(
      R"({"ablation": {"arms": ["raqua","comtri"], "seeds": [1,-2,3]}})"));
  CHECK_THROWS(parse_experiment_config(
      R"({"ablation": {"arms": ["raqua","raqua"], "seeds": [1,2,3]}})"));
  CHECK_THROWS(parse_experiment_config(
      R"({"ablation": {"arms": ["raqua","comtri"], "seeds": [1,2,2]}})"));
}

TEST_CASE("arm names map onto loss settings") {
  ArmSpec plain = parse_arm("bidtri");
  CHECK(plain.variant == Variant::BidTri);
  CHECK(plain.use_cls);
  CHECK_FALSE(plain.use_meta);

  ArmSpec nocls = parse_arm("raqua_nocls");
  CHECK(nocls.variant == Variant::RaQua);
  CHECK_FALSE(nocls.use_cls);
  CHECK_FALSE(nocls.use_meta);

  ArmSpec meta = parse_arm("raqua_meta");
  CHECK(meta.variant == Variant::RaQua);
  CHECK(meta.use_cls);
  CHECK(meta.use_meta);

  CHECK_THROWS(parse_arm("quintuplet"));
}

TEST_CASE("feature-file configs drop the synthetic section") {
  ExperimentConfig cfg = parse_experiment_config(
      R"({"data": {"features_file": "feats.csv", "unseen_fraction": 0.25}})");
  CHECK_FALSE(cfg.data.use_synthetic);
  CHECK(cfg.data.features_file == "feats.csv");
  CHECK(cfg.data.unseen_fraction == 0.25);
}

#include "ddi/config.hpp"

#include <doctest.h>

#include "ddi/errors.hpp"

using namespace ddi;

TEST_CASE("sectioned key-value parsing") {
  ConfigMap m = parse_config_text(
      "# experiment A\n"
      "[run]\n"
      "seed = 7   # inline comment\n"
      "out = runs/a\n"
      "\n"
      "[train]\n"
      "lr=0.1\n");
  CHECK(m.at("run").at("seed") == "7");
  CHECK(m.at("run").at("out") == "runs/a");
  CHECK(m.at("train").at("lr") == "0.1");

  CHECK_THROWS_AS(parse_config_text("seed = 7\n"), ConfigError);       // no section
  CHECK_THROWS_AS(parse_config_text("[run]\nseed\n"), ConfigError);    // no '='
  CHECK_THROWS_AS(parse_config_text("[run\nseed = 1\n"), ConfigError); // bad header
  CHECK_THROWS_AS(parse_config_text("[run]\ns = 1\ns = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[run]\n= 3\n"), ConfigError);     // empty key
}

TEST_CASE("run config: defaults, parsing, round-trip, validation") {
  RunConfig def = RunConfig::from_text("");
  def.validate();
  CHECK(def.metric == CostMetric::flops);
  CHECK(def.data.dataset == "synthetic");

  RunConfig cfg = RunConfig::from_text(
      "[run]\n"
      "out = runs/exp1\n"
      "seed = 99\n"
      "metric = energy\n"
      "[arch]\n"
      "kind = resnet\n"
      "blocks = 2,2\n"
      "widths = 8,16\n"
      "classes = 2\n"
      "in_channels = 1\n"
      "image_size = 16\n"
      "[train]\n"
      "lr = 0.025\n"
      "batch_size = 16\n"
      "target_skip = 0.5\n"
      "augment = crop_flip\n"
      "warmup_iters = 50\n"
      "iadi_iters = 75\n"
      "ddi_iters = 25\n"
      "[cost]\n"
      "e_dram = 100\n"
      "e_cache = 5\n"
      "e_reg = 0.5\n"
      "[data]\n"
      "dataset = synthetic\n"
      "synthetic_train = 256\n"
      "synthetic_eval = 64\n");
  cfg.validate();
  CHECK(cfg.out_dir == "runs/exp1");
  CHECK(cfg.seed == 99);
  CHECK(cfg.metric == CostMetric::energy);
  CHECK(cfg.arch.blocks_per_stage == std::vector<int>{2, 2});
  CHECK(cfg.arch.widths == std::vector<int>{8, 16});
  CHECK(cfg.arch.num_classes == 2);
  CHECK(cfg.train.lr == doctest::Approx(0.025f));
  CHECK(cfg.train.batch_size == 16);
  CHECK(cfg.train.target_skip_ratio == doctest::Approx(0.5f));
  CHECK(cfg.train.augment == Augment::crop_flip);
  CHECK(cfg.warmup_iters == 50);
  CHECK(cfg.iadi_iters == 75);
  CHECK(cfg.ddi_iters == 25);
  CHECK(cfg.eparams.e[0] == 100.0);
  CHECK(cfg.eparams.e[2] == 0.5);
  CHECK(cfg.data.synthetic_train == 256);

  // The resolved echo round-trips losslessly, and echoing it again is a
  // fixed point (byte-identical).
  std::string echo = cfg.to_text();
  RunConfig back = RunConfig::from_text(echo);
  CHECK(back.to_text() == echo);
  CHECK(back.seed == cfg.seed);
  CHECK(back.train.lr == cfg.train.lr);
  CHECK(back.eparams.e[2] == cfg.eparams.e[2]);
  CHECK(back.arch.widths == cfg.arch.widths);

  // Every key of the echo is known: the echo mentions all sections/keys.
  for (const char* key :
       {"out = ", "seed = ", "metric = ", "blocks = ", "lr = ", "alpha = ",
        "e_mac = ", "dataset = ", "pretrain_iters = "})
    CHECK(echo.find(key) != std::string::npos);
}

TEST_CASE("config overrides and presets") {
  RunConfig cfg = RunConfig::from_text("");
  cfg.set("run.seed", "1234");
  cfg.set("run.metric", "uniform");
  cfg.set("train.target_skip", "0.4");
  CHECK(cfg.seed == 1234);
  CHECK(cfg.metric == CostMetric::uniform);
  CHECK(cfg.train.target_skip_ratio == doctest::Approx(0.4f));

  cfg.set("arch.preset", "resnet20");
  CHECK(cfg.arch.kind == BackboneKind::resnet);
  CHECK(cfg.arch.blocks_per_stage == std::vector<int>{3, 3, 3});

  // Explicit keys layered over a preset override individual fields even when
  // they appear before the preset in the file.
  RunConfig pre = RunConfig::from_text(
      "[arch]\n"
      "classes = 2\n"
      "preset = resnet20\n"
      "in_channels = 1\n");
  CHECK(pre.arch.blocks_per_stage == std::vector<int>{3, 3, 3});
  CHECK(pre.arch.num_classes == 2);
  CHECK(pre.arch.in_channels == 1);

  CHECK_THROWS_AS(cfg.set("run.bogus", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("nosection", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("run.seed", "abc"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.lr", "fast"), ConfigError);
  CHECK_THROWS_AS(cfg.set("arch.preset", "vgg16"), ConfigError);
  CHECK_THROWS_AS(cfg.set("train.augment", "mixup"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("[run]\nmetric = joules\n"),
                  ConfigError);

  RunConfig bad = RunConfig::from_text("");
  bad.data.dataset = "imagenet";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig::from_text("");
  bad.out_dir = "";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig::from_text("");
  bad.eparams.e = {1.0, 5.0, 0.5};  // must be strictly decreasing
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("environment variable supplies the dataset root") {
  setenv("DDI_DATA_ROOT", "/tmp/ddi-data-root", 1);
  RunConfig cfg = RunConfig::from_text("");
  CHECK(cfg.data.root == "/tmp/ddi-data-root");
  // An explicit root wins over the environment.
  RunConfig explicit_root =
      RunConfig::from_text("[data]\nroot = /elsewhere\n");
  CHECK(explicit_root.data.root == "/elsewhere");
  unsetenv("DDI_DATA_ROOT");
  RunConfig clean = RunConfig::from_text("");
  CHECK(clean.data.root.empty());
}

#include "ddi/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "ddi/checkpoint.hpp"
#include "ddi/costmodel.hpp"
#include "ddi/errors.hpp"
#include "ddi/runtime.hpp"
#include "ddi/training.hpp"

namespace fs = std::filesystem;

namespace ddi {

namespace {

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  DDI_CHECK_T(DataError, out.good(), "cannot write '", path.string(), "'");
  out << content;
  DDI_CHECK_T(DataError, out.good(), "failed writing '", path.string(), "'");
}

std::string read_file(const fs::path& path, const std::string& hint) {
  std::ifstream in(path, std::ios::binary);
  DDI_CHECK_T(DataError, in.good(), "missing '", path.string(), "'; ", hint);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& path, const std::string& hint) {
  std::string text = read_file(path, hint);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail<DataError>("cannot parse '", path.string(), "': ", e.what());
  }
}

std::string num6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

void require_files(const std::string& what,
                   const std::vector<fs::path>& paths) {
  std::vector<std::string> missing;
  for (const auto& p : paths)
    if (!fs::exists(p)) missing.push_back(p.string());
  if (missing.empty()) return;
  std::ostringstream os;
  os << what << " dataset files not found:";
  for (const auto& m : missing) os << " '" << m << "'";
  os << " (set data.root or the DDI_DATA_ROOT environment variable)";
  throw DataError(os.str());
}

void save_net(const DDINetwork& net, const NormStats& stats,
              const fs::path& path) {
  Checkpoint ckpt = net.to_checkpoint(false);
  ckpt.add("norm.mean",
           Tensor(Shape{static_cast<int>(stats.mean.size())}, stats.mean));
  ckpt.add("norm.stddev",
           Tensor(Shape{static_cast<int>(stats.stddev.size())}, stats.stddev));
  save_checkpoint(ckpt, path.string());
}

std::pair<DDINetwork, NormStats> load_net(const fs::path& path) {
  DDI_CHECK_T(DataError, fs::exists(path), "checkpoint not found: '",
              path.string(), "'; run the train command first");
  Checkpoint ckpt = load_checkpoint(path.string());
  DDINetwork net = DDINetwork::from_checkpoint(ckpt);
  const Tensor* mean = ckpt.find("norm.mean");
  const Tensor* stddev = ckpt.find("norm.stddev");
  DDI_CHECK_T(DataError, mean != nullptr && stddev != nullptr,
              "checkpoint '", path.string(),
              "' lacks normalization statistics (norm.mean/norm.stddev)");
  NormStats stats{mean->vec(), stddev->vec()};
  return {std::move(net), std::move(stats)};
}

nlohmann::json phase_json(const PhaseResult& r) {
  return {{"iterations", r.iterations_run},
          {"final_loss", r.final_loss},
          {"final_running_skip", r.final_running_skip},
          {"alpha_sign_flips", r.alpha_sign_flips}};
}

nlohmann::json eval_json(const EvalResult& ev) {
  return {{"samples", ev.samples},
          {"accuracy", ev.accuracy},
          {"mean_skip_ratio", ev.mean_skip_ratio},
          {"mean_realized_cost", ev.mean_realized_cost},
          {"vanilla_cost", ev.vanilla_cost},
          {"savings", ev.savings},
          {"per_exit_accuracy", ev.per_exit_accuracy}};
}

}  // namespace

std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
  const DataConfig& d = cfg.data;
  if (d.dataset == "synthetic") {
    Dataset train = synthetic_easy_hard(d.synthetic_train,
                                        Rng::derive(cfg.seed, "data-train"));
    Dataset eval = synthetic_easy_hard(d.synthetic_eval,
                                       Rng::derive(cfg.seed, "data-eval"));
    return {std::move(train), std::move(eval)};
  }
  fs::path root(d.root.empty() ? "." : d.root);
  if (d.dataset == "mnist") {
    fs::path ti = root / "train-images-idx3-ubyte";
    fs::path tl = root / "train-labels-idx1-ubyte";
    fs::path ei = root / "t10k-images-idx3-ubyte";
    fs::path el = root / "t10k-labels-idx1-ubyte";
    require_files("mnist", {ti, tl, ei, el});
    return {load_mnist_idx(ti.string(), tl.string()),
            load_mnist_idx(ei.string(), el.string())};
  }
  if (d.dataset == "cifar10") {
    std::vector<fs::path> train_paths;
    for (int i = 1; i <= 5; ++i)
      train_paths.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
    fs::path test_path = root / "test_batch.bin";
    std::vector<fs::path> all = train_paths;
    all.push_back(test_path);
    require_files("cifar10", all);
    std::vector<std::string> names;
    for (const auto& p : train_paths) names.push_back(p.string());
    return {load_cifar10(names), load_cifar10(test_path.string())};
  }
  if (d.dataset == "file") {
    fs::path train_path = root / "train.dds";
    fs::path eval_path = root / "eval.dds";
    require_files("file", {train_path, eval_path});
    return {load_dataset(train_path.string()), load_dataset(eval_path.string())};
  }
  fail<ConfigError>("unknown dataset '", d.dataset, "'");
}

nlohmann::json cmd_train(const RunConfig& cfg) {
  cfg.validate();
  fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_file(out / "config.txt", cfg.to_text());
  write_file(out / "version.txt",
             std::string("ddi-engine ") + kEngineVersion + "\n");

  auto [train_ds, eval_ds] = load_datasets(cfg);
  NormStats stats = compute_norm_stats(train_ds);
  Rng init = Rng::substream(cfg.seed, "init");
  DDINetwork net(cfg.arch, init);
  CostLedger ledger = build_cost_ledger(net, cfg.mem, cfg.eparams);

  std::ofstream log(out / "train-log.jsonl", std::ios::binary | std::ios::trunc);
  DDI_CHECK_T(DataError, log.good(), "cannot write '",
              (out / "train-log.jsonl").string(), "'");
  auto sink_for = [&log](const char* phase) {
    return StepSink([&log, phase](const nlohmann::json& j) {
      nlohmann::json row = j;
      row["phase"] = phase;
      log << row.dump() << "\n";
    });
  };
  auto phase_cfg = [&cfg](const char* name, int iters) {
    TrainConfig t = cfg.train;
    t.iterations = iters;
    t.metric = cfg.metric;
    t.seed = Rng::derive(cfg.seed, name);
    return t;
  };
  // On divergence keep the best usable snapshot beside the phase artifacts,
  // then let the error halt the pipeline; earlier checkpoints stay on disk.
  auto guarded = [&](const char* phase, auto&& body) {
    Checkpoint last_good;
    try {
      return body(last_good);
    } catch (const TrainingDivergence&) {
      if (!last_good.tensors.empty())
        save_checkpoint(last_good,
                        (out / (std::string("ckpt-") + phase + "-lastgood.bin"))
                            .string());
      throw;
    }
  };

  nlohmann::json phases;
  if (cfg.pretrain_iters > 0)
    phases["pretrain"] = phase_json(pretrain_phase(
        net, train_ds, stats, phase_cfg("pretrain", cfg.pretrain_iters),
        sink_for("pretrain")));
  save_net(net, stats, out / "ckpt-pretrain.bin");

  if (cfg.warmup_iters > 0)
    phases["warmup"] = phase_json(
        warmup_phase(net, train_ds, stats, ledger,
                     phase_cfg("warmup", cfg.warmup_iters), sink_for("warmup")));
  save_net(net, stats, out / "ckpt-warmup.bin");

  if (cfg.iadi_iters > 0)
    phases["iadi"] = phase_json(guarded("iadi", [&](Checkpoint& lg) {
      return iadi_joint_phase(net, train_ds, stats, ledger,
                              phase_cfg("iadi", cfg.iadi_iters),
                              sink_for("iadi"), &lg);
    }));
  save_net(net, stats, out / "ckpt-iadi.bin");

  if (cfg.ddi_iters > 0)
    phases["ddi"] = phase_json(guarded("ddi", [&](Checkpoint& lg) {
      return ddi_finetune(net, train_ds, stats,
                          phase_cfg("ddi", cfg.ddi_iters), sink_for("ddi"),
                          &lg);
    }));
  save_net(net, stats, out / "ckpt-ddi.bin");

  EvalResult ev = evaluate(net, eval_ds, stats, ledger, cfg.metric,
                           cfg.train.batch_size);
  nlohmann::json metrics{{"version", kEngineVersion},
                         {"seed", cfg.seed},
                         {"metric", metric_name(cfg.metric)},
                         {"phases", phases},
                         {"eval", eval_json(ev)}};
  write_file(out / "metrics.json", metrics.dump(2) + "\n");
  return metrics;
}

nlohmann::json cmd_eval(const RunConfig& cfg, const EvalOptions& opt) {
  cfg.validate();
  fs::path out(cfg.out_dir);
  fs::create_directories(out);
  fs::path ckpt_path =
      opt.checkpoint.empty() ? out / "ckpt-ddi.bin" : fs::path(opt.checkpoint);
  auto [net, stats] = load_net(ckpt_path);
  Dataset eval_ds = load_datasets(cfg).second;
  CostLedger ledger = build_cost_ledger(net, cfg.mem, cfg.eparams);
  int batch = cfg.train.batch_size;

  if (opt.mode == "adaptive") {
    EvalResult ev = evaluate(net, eval_ds, stats, ledger, cfg.metric, batch);
    SkipReport rep =
        skip_pattern_report(net, eval_ds, stats, ledger, cfg.metric, batch);

    // Per-sample JSON-lines log from the same hard-gated pass the aggregate
    // metrics use; adaptive execution always reaches the final head.
    std::ostringstream lines;
    int head_exit = static_cast<int>(net.branches().size());
    BatchIterator it(eval_ds, stats,
                     std::min<int>(batch, static_cast<int>(eval_ds.size())),
                     false, 0, Augment::none);
    Batch b;
    while (it.next(b)) {
      auto res = net.full_forward(b.images, ForwardMode::hard, false);
      const Tensor& head = res.exit_logits.back();
      int classes = head.dim(1);
      for (size_t s = 0; s < res.traces.size(); ++s) {
        const float* row = head.data() + static_cast<int64_t>(s) * classes;
        int pred = static_cast<int>(std::max_element(row, row + classes) - row);
        InferenceResult tmp;
        tmp.trace = res.traces[s];
        nlohmann::json line{
            {"sample_id", b.indices[s]},
            {"pred", pred},
            {"label", b.labels[s]},
            {"exit", head_exit},
            {"cost", dynamic_cost(res.traces[s], ledger, cfg.metric)},
            {"skip_ratio", res.traces[s].skip_ratio()},
            {"difficulty", difficulty_name(classify_difficulty(tmp))}};
        lines << line.dump() << "\n";
      }
    }
    write_file(out / "eval-adaptive-log.jsonl", lines.str());

    nlohmann::json skip_rows = nlohmann::json::array();
    for (const auto& r : rep.rows)
      skip_rows.push_back({{"block_id", r.block_id},
                           {"stage", r.stage},
                           {"gated", r.gated},
                           {"frequency", r.frequency}});
    nlohmann::json doc{{"mode", "adaptive"},
                       {"version", kEngineVersion},
                       {"metric", metric_name(cfg.metric)},
                       {"samples", ev.samples},
                       {"accuracy", ev.accuracy},
                       {"mean_skip_ratio", ev.mean_skip_ratio},
                       {"mean_realized_cost", ev.mean_realized_cost},
                       {"vanilla_cost", ev.vanilla_cost},
                       {"savings", ev.savings},
                       {"per_exit_accuracy", ev.per_exit_accuracy},
                       {"skip",
                        {{"rows", skip_rows},
                         {"easy_indices", rep.easy_indices},
                         {"hard_indices", rep.hard_indices},
                         {"mean_skip", rep.mean_skip},
                         {"mean_cost", rep.mean_cost}}}};
    write_file(out / "eval-adaptive.json", doc.dump(2) + "\n");
    return doc;
  }

  if (opt.mode == "budget") {
    double vanilla = ledger.vanilla_total(cfg.metric);
    std::vector<double> budgets;
    if (opt.budget_limit > 0.0) {
      budgets.push_back(opt.budget_limit);
    } else {
      for (int i = 0; i < 20; ++i)
        budgets.push_back(vanilla * (0.30 + (1.20 - 0.30) * i / 19.0));
    }
    int64_t n = std::min<int64_t>(eval_ds.size(), opt.max_budget_samples);
    DDI_CHECK_T(DataError, n > 0, "budget evaluation needs samples");

    // Materialize per-sample inputs once, in storage order.
    std::vector<Tensor> inputs;
    inputs.reserve(n);
    std::vector<int> labels;
    {
      std::vector<int64_t> idx(n);
      for (int64_t i = 0; i < n; ++i) idx[i] = i;
      Dataset head_ds = subset(eval_ds, idx);
      BatchIterator one(head_ds, stats, 1, false, 0, Augment::none);
      Batch b;
      while (one.next(b)) {
        inputs.push_back(b.images);
        labels.push_back(b.labels[0]);
      }
    }

    nlohmann::json sweep = nlohmann::json::array();
    for (double limit : budgets) {
      Budget budget{cfg.metric, limit};
      int correct = 0, infeasible = 0;
      double cost_sum = 0.0;
      double cheapest = std::numeric_limits<double>::infinity();
      std::vector<int64_t> exit_hist(net.branches().size() + 1, 0);
      for (int64_t i = 0; i < n; ++i) {
        try {
          InferenceResult r = budgeted_infer(net, inputs[i], ledger, budget);
          correct += r.predicted == labels[i] ? 1 : 0;
          cost_sum += r.realized_cost;
          ++exit_hist[r.exit_index];
        } catch (const BudgetInfeasible& e) {
          ++infeasible;  // no usable prediction: scored as incorrect
          cheapest = std::min(cheapest, e.min_feasible_budget);
        }
      }
      // A single requested budget that serves no sample at all is an error,
      // not a data point.
      if (opt.budget_limit > 0.0 && infeasible == n) {
        std::ostringstream os;
        os << "budget " << limit << " " << metric_name(cfg.metric)
           << " cannot serve any of the " << n
           << " samples; the cheapest sample needs at least " << cheapest;
        throw BudgetInfeasible(os.str(), cheapest);
      }
      int64_t feasible = n - infeasible;
      sweep.push_back(
          {{"budget", limit},
           {"accuracy", static_cast<double>(correct) / static_cast<double>(n)},
           {"mean_realized_cost",
            feasible > 0 ? cost_sum / static_cast<double>(feasible) : 0.0},
           {"infeasible", infeasible},
           {"exit_histogram", exit_hist}});
    }
    nlohmann::json doc{{"mode", "budget"},
                       {"version", kEngineVersion},
                       {"metric", metric_name(cfg.metric)},
                       {"samples", n},
                       {"vanilla_cost", vanilla},
                       {"sweep", sweep}};
    write_file(out / "eval-budget.json", doc.dump(2) + "\n");
    return doc;
  }

  if (opt.mode == "all_exits") {
    EvalResult ev = evaluate(net, eval_ds, stats, ledger, cfg.metric, batch);
    nlohmann::json doc{{"mode", "all_exits"},
                       {"version", kEngineVersion},
                       {"metric", metric_name(cfg.metric)},
                       {"samples", ev.samples},
                       {"per_exit_accuracy", ev.per_exit_accuracy}};
    write_file(out / "eval-all_exits.json", doc.dump(2) + "\n");
    return doc;
  }

  fail<ConfigError>("eval mode must be adaptive, budget, or all_exits, got '",
                    opt.mode, "'");
}

nlohmann::json cmd_report(const std::string& run_dir) {
  fs::path out(run_dir);
  nlohmann::json budget = read_json(
      out / "eval-budget.json", "run the eval command with --mode budget first");
  nlohmann::json adaptive = read_json(
      out / "eval-adaptive.json",
      "run the eval command with --mode adaptive first");

  // Accuracy-vs-cost frontier, ascending by realized cost.
  struct Point {
    double cost, accuracy, budget;
    int64_t infeasible;
  };
  std::vector<Point> pts;
  for (const auto& p : budget.at("sweep"))
    pts.push_back({p.at("mean_realized_cost").get<double>(),
                   p.at("accuracy").get<double>(),
                   p.at("budget").get<double>(),
                   p.at("infeasible").get<int64_t>()});
  std::stable_sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) {
    return a.cost != b.cost ? a.cost < b.cost : a.budget < b.budget;
  });
  std::ostringstream frontier;
  frontier << "cost,accuracy,budget,infeasible\n";
  for (const auto& p : pts)
    frontier << num6(p.cost) << ',' << num6(p.accuracy) << ','
             << num6(p.budget) << ',' << p.infeasible << '\n';
  write_file(out / "frontier.csv", frontier.str());

  std::ostringstream skip_csv;
  skip_csv << "block_id,stage,frequency\n";
  for (const auto& r : adaptive.at("skip").at("rows"))
    skip_csv << r.at("block_id").get<int>() << ',' << r.at("stage").get<int>()
             << ',' << num6(r.at("frequency").get<double>()) << '\n';
  write_file(out / "skip-pattern.csv", skip_csv.str());

  auto index_lines = [](const nlohmann::json& xs) {
    std::ostringstream os;
    for (const auto& x : xs) os << x.get<int64_t>() << '\n';
    return os.str();
  };
  write_file(out / "easy-indices.txt",
             index_lines(adaptive.at("skip").at("easy_indices")));
  write_file(out / "hard-indices.txt",
             index_lines(adaptive.at("skip").at("hard_indices")));

  nlohmann::json summary{
      {"version", kEngineVersion},
      {"frontier_points", pts.size()},
      {"samples", adaptive.at("samples")},
      {"mean_skip_ratio", adaptive.at("mean_skip_ratio")},
      {"savings", adaptive.at("savings")},
      {"easy_count", adaptive.at("skip").at("easy_indices").size()},
      {"hard_count", adaptive.at("skip").at("hard_indices").size()}};
  write_file(out / "report-summary.json", summary.dump(2) + "\n");
  return summary;
}

}  // namespace ddi

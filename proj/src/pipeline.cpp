#include "lomt/pipeline.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>

#include "lomt/serialize.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace lomt {

// ----------------------------------------------------------------- parsing

namespace {

ordered_json get_field(const ordered_json& j, const std::string& field) {
  if (!j.contains(field)) throw ConfigError(field, "missing config field: " + field);
  return j.at(field);
}

BackboneSpec parse_backbone(const ordered_json& j) {
  BackboneSpec spec;
  if (!j.is_object()) throw ConfigError("backbone", "backbone must be an object");
  spec.input_channels = j.value("input_channels", 1);
  const ordered_json blocks = get_field(j, "blocks");
  if (blocks.is_number_integer()) {
    spec = BackboneSpec::standard(blocks.get<int>(), j.value("width", 16),
                                  spec.input_channels);
  } else if (blocks.is_array()) {
    for (const auto& b : blocks) {
      BlockSpec block;
      block.width = b.value("width", 16);
      block.kernel = b.value("kernel", 3);
      block.dilation = b.value("dilation", 1);
      block.penalizable = b.value("penalizable", true);
      spec.blocks.push_back(block);
    }
  } else {
    throw ConfigError("backbone.blocks", "blocks must be a count or a block list");
  }
  try {
    spec.validate();
  } catch (const std::exception& e) {
    throw ConfigError("backbone", e.what());
  }
  return spec;
}

TaskSpec parse_task(const ordered_json& j) {
  try {
    if (j.is_string()) return standard_task(j.get<std::string>());
    TaskSpec t;
    t.name = get_field(j, "name").get<std::string>();
    if (j.contains("head") || j.contains("loss") || j.contains("metric") ||
        j.contains("target")) {
      t.head = head_kind_from(get_field(j, "head").get<std::string>());
      t.loss = loss_kind_from(get_field(j, "loss").get<std::string>());
      t.metric = metric_kind_from(get_field(j, "metric").get<std::string>());
      t.target_key = get_field(j, "target").get<std::string>();
      t.out_channels = j.value("out_channels", 1);
    } else {
      t = standard_task(t.name);
    }
    t.validate();
    return t;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("tasks", e.what());
  }
}

SceneConfig parse_generator(const ordered_json& j) {
  SceneConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.blob_count_min = j.value("blob_count_min", c.blob_count_min);
  c.blob_count_max = j.value("blob_count_max", c.blob_count_max);
  c.discs = j.value("discs", c.discs);
  c.rects = j.value("rects", c.rects);
  c.noise_amplitude = j.value("noise_amplitude", c.noise_amplitude);
  c.class_threshold = j.value("class_threshold", c.class_threshold);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError("dataset.generator", e.what());
  }
  return c;
}

void apply_override(ordered_json& j, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set", "override must be key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  ordered_json parsed;
  try {
    parsed = ordered_json::parse(value);
  } catch (const std::exception&) {
    parsed = value;  // plain string
  }
  ordered_json* node = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("--set", "bad override path: " + path);
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (kind != "dense-stl" && kind != "sparse-stl" && kind != "dense-mtl" && kind != "lomt")
    throw ConfigError("kind", "unknown experiment kind: " + kind);
  if (tasks.empty()) throw ConfigError("tasks", "no tasks configured");
  const double lambda = train.optimizer.lambda;
  if (lambda < 0.0) throw ConfigError("optimizer.lambda", "lambda must be >= 0");
  if (kind == "dense-stl" || kind == "sparse-stl") {
    if (tasks.size() != 1)
      throw ConfigError("tasks", kind + " requires exactly one task");
    if (kind == "sparse-stl" && lambda <= 0.0)
      throw ConfigError("optimizer.lambda", "sparse-stl requires lambda > 0");
    if (kind == "dense-stl" && lambda != 0.0)
      throw ConfigError("optimizer.lambda", "dense-stl requires lambda = 0");
  } else {
    if (lambda != 0.0)
      throw ConfigError("optimizer.lambda", "phase-2 kinds require lambda = 0");
    if (kind == "lomt")
      for (const TaskSpec& t : tasks)
        if (phase1_runs.find(t.name) == phase1_runs.end())
          throw ConfigError("phase1_runs", "lomt requires a phase-1 run directory per task (missing " +
                                               t.name + ")");
  }
  if (train.seeds.empty()) throw ConfigError("train.seeds", "no seeds configured");
  if (dataset.manifest.empty() && !dataset.generator)
    throw ConfigError("dataset", "dataset needs a generator or a manifest path");
  if (dataset.generator && dataset.n < 1)
    throw ConfigError("dataset.n", "generator dataset needs n >= 1");
  try {
    train.validate(tasks.size());
    for (const TaskSpec& t : tasks) t.validate();
  } catch (const std::exception& e) {
    throw ConfigError("train", e.what());
  }
  if (output_dir.empty()) throw ConfigError("output_dir", "missing output_dir");
}

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError("(root)", std::string("config parse error: ") + e.what());
  }
  for (const std::string& o : overrides) apply_override(j, o);

  ExperimentConfig cfg;
  cfg.snapshot = text;
  cfg.kind = get_field(j, "kind").get<std::string>();
  cfg.backbone = parse_backbone(get_field(j, "backbone"));
  for (const auto& t : get_field(j, "tasks")) cfg.tasks.push_back(parse_task(t));

  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    cfg.train.optimizer.lambda = o.value("lambda", 0.0);
    cfg.train.optimizer.alpha = o.value("alpha", cfg.train.optimizer.alpha);
    cfg.train.optimizer.momentum = o.value("momentum", 0.0);
    cfg.train.optimizer.batch_size = o.value("batch_size", cfg.train.optimizer.batch_size);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.eval_every = t.value("eval_every", cfg.train.eval_every);
    if (t.contains("seeds")) {
      cfg.train.seeds.clear();
      for (const auto& s : t["seeds"]) cfg.train.seeds.push_back(s.get<uint64_t>());
    }
  }
  cfg.train.phase = (cfg.kind == "dense-mtl" || cfg.kind == "lomt") ? 2 : 1;
  if (cfg.train.phase == 2) cfg.train.epochs = j.contains("train") && j["train"].contains("epochs")
                                                   ? cfg.train.epochs
                                                   : 40;

  const ordered_json ds = get_field(j, "dataset");
  if (ds.contains("manifest")) {
    cfg.dataset.manifest = ds["manifest"].get<std::string>();
  } else if (ds.contains("generator")) {
    cfg.dataset.generator = parse_generator(ds["generator"]);
    cfg.dataset.n = ds.value("n", 0);
    cfg.dataset.seed = ds.value("seed", 0);
  } else {
    throw ConfigError("dataset", "dataset needs a generator or a manifest path");
  }

  if (j.contains("phase1_runs"))
    for (const auto& [task, dir] : j["phase1_runs"].items())
      cfg.phase1_runs[task] = dir.get<std::string>();

  cfg.output_dir = get_field(j, "output_dir").get<std::string>();
  cfg.effective = j.dump(2) + "\n";
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path,
                                   const std::vector<std::string>& overrides) {
  return parse_config_text(read_text_file(path), overrides);
}

std::string resolve_output_dir(const std::string& dir) {
  const char* root = std::getenv("LOMT_OUT");
  if (root && *root && !fs::path(dir).is_absolute()) return (fs::path(root) / dir).string();
  return dir;
}

Dataset load_dataset_source(const DatasetSource& source) {
  if (!source.manifest.empty()) return load_manifest(source.manifest);
  return generate_dataset(*source.generator, source.seed, source.n);
}

// ----------------------------------------------------------- run artifacts

namespace {

std::string seed_dir(const std::string& root, uint64_t seed) {
  return root + "/seed_" + std::to_string(seed);
}

std::string format_cr(double cr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", cr);
  return buf;
}

long long backbone_nonzero(const ModelGraph& model) {
  long long n = 0;
  for (const auto& p : model.params)
    if (p.role == ParamRole::backbone)
      for (double v : p.values().v)
        if (v != 0.0) ++n;
  return n;
}

ordered_json metrics_to_json(const MetricReport& report) {
  ordered_json j;
  for (const auto& [task, v] : report.values) {
    j[task] = {{"metric", metric_kind_name(v.first)}, {"value", v.second}};
  }
  return j;
}

void write_report_csv(const std::string& root, const std::vector<TaskSpec>& tasks,
                      const std::vector<MetricReport>& reports,
                      const std::vector<uint64_t>& seeds) {
  std::string csv = "task,metric,mean,std,seeds\n";
  if (reports.size() >= 2) {
    RunAggregate agg = aggregate_runs(reports);
    for (const TaskSpec& t : tasks) {
      const auto& e = agg.per_task.at(t.name);
      csv += t.name + "," + metric_kind_name(e.metric) + "," + std::to_string(e.mean) + "," +
             std::to_string(e.stddev) + "," + std::to_string(e.runs) + "\n";
    }
  } else {
    std::cerr << "warning: single seed, std column left empty in report.csv\n";
    for (const TaskSpec& t : tasks) {
      const auto& v = reports.at(0).values.at(t.name);
      csv += t.name + "," + metric_kind_name(v.first) + "," + std::to_string(v.second) +
             ",," + std::to_string(seeds.size()) + "\n";
    }
  }
  write_text_file(root + "/report.csv", csv);
}

void write_common_artifacts(const ExperimentConfig& config, const std::string& root) {
  fs::create_directories(root);
  write_text_file(root + "/config.json", config.snapshot);
  write_text_file(root + "/config_effective.json", config.effective);
}

int modal_tap(std::vector<int> taps) {
  std::sort(taps.begin(), taps.end());
  int best = taps.front(), best_count = 0;
  for (size_t i = 0; i < taps.size();) {
    size_t j = i;
    while (j < taps.size() && taps[j] == taps[i]) ++j;
    if ((int)(j - i) > best_count) {
      best_count = (int)(j - i);
      best = taps[i];
    }
    i = j;
  }
  return best;
}

}  // namespace

// ------------------------------------------------------------- subcommands

void run_gen_data(const ExperimentConfig& config) {
  if (!config.dataset.generator)
    throw ConfigError("dataset.generator", "gen-data needs a generator dataset");
  const std::string out = resolve_output_dir(config.output_dir);
  Dataset ds = load_dataset_source(config.dataset);
  export_dataset(ds, out);
}

void run_train_stl(const ExperimentConfig& config) {
  if (config.train.phase != 1)
    throw ConfigError("kind", "train-stl expects a dense-stl or sparse-stl config");
  const std::string root = resolve_output_dir(config.output_dir);
  write_common_artifacts(config, root);
  Dataset ds = load_dataset_source(config.dataset);
  const TaskSpec& task = config.tasks.front();

  std::vector<MetricReport> reports;
  for (uint64_t seed : config.train.seeds) {
    Phase1Result result = train_phase1(task, ds, config.backbone, config.train, seed);
    const std::string dir = seed_dir(root, seed);
    fs::create_directories(dir);
    write_text_file(dir + "/history.jsonl", history_to_jsonl(result.history));
    write_text_file(dir + "/pattern_flags.json", pattern_to_json(result.pattern));
    PatternRender render = render_pattern({result.pattern});
    write_text_file(dir + "/pattern.csv", render.csv);
    write_text_file(dir + "/pattern.svg", render.svg);
    write_checkpoint(dir + "/checkpoint.bin", result.model);

    MetricReport metrics = evaluate(result.model, ds, ds.val_idx, {task});
    write_text_file(dir + "/metrics.json", metrics_to_json(metrics).dump(2) + "\n");
    reports.push_back(metrics);

    const long long total = result.model.backbone_param_count();
    const long long nonzero = backbone_nonzero(result.model);
    ordered_json summary;
    summary["kind"] = config.kind;
    summary["seed"] = seed;
    summary["tasks"] = ordered_json::array({task.name});
    summary["taps"] = {{task.name, (int)config.backbone.conv_layers() - 1}};
    summary["percent_sparsity"] = result.history.back().percent_sparsity;
    summary["backbone_total_params"] = total;
    summary["backbone_nonzero_params"] = nonzero;
    if (nonzero > 0)
      summary["compression_ratio"] = compression_ratio(total, nonzero).compression_ratio;
    else
      summary["compression_ratio"] = nullptr;
    write_text_file(dir + "/summary.json", summary.dump(2) + "\n");
  }
  write_report_csv(root, config.tasks, reports, config.train.seeds);
}

std::map<uint64_t, TapSelection> run_plan_lomt(const ExperimentConfig& config) {
  if (config.kind != "lomt") throw ConfigError("kind", "plan-lomt expects a lomt config");
  const std::string root = resolve_output_dir(config.output_dir);
  std::map<uint64_t, TapSelection> per_seed;
  for (uint64_t seed : config.train.seeds) {
    std::map<std::string, SparsityPattern> patterns;
    for (const TaskSpec& t : config.tasks) {
      const std::string file = resolve_output_dir(config.phase1_runs.at(t.name)) +
                               "/seed_" + std::to_string(seed) + "/pattern_flags.json";
      if (!fs::exists(file))
        throw ConfigError("phase1_runs",
                          "missing phase-1 artifacts for lomt: " + file);
      patterns[t.name] = pattern_from_json_file(file);
    }
    try {
      per_seed[seed] = plan_lomt(patterns);
    } catch (const AllZeroPattern& e) {
      throw DegenerateSparsityError(e.what());
    }
  }

  fs::create_directories(root);
  ordered_json j;
  j["per_seed"] = ordered_json::object();
  std::map<std::string, std::vector<int>> by_task;
  for (const auto& [seed, sel] : per_seed) {
    ordered_json taps;
    for (const auto& [task, tap] : sel.taps) {
      taps[task] = tap;
      by_task[task].push_back(tap);
    }
    j["per_seed"][std::to_string(seed)] = taps;
  }
  j["modal"] = ordered_json::object();
  for (const auto& [task, taps] : by_task) j["modal"][task] = modal_tap(taps);
  write_text_file(root + "/taps.json", j.dump(2) + "\n");
  return per_seed;
}

void run_train_mtl(const ExperimentConfig& config) {
  if (config.train.phase != 2)
    throw ConfigError("kind", "train-mtl expects a dense-mtl or lomt config");
  const std::string root = resolve_output_dir(config.output_dir);
  write_common_artifacts(config, root);
  Dataset ds = load_dataset_source(config.dataset);

  std::map<uint64_t, TapSelection> taps;
  const int final_layer = config.backbone.conv_layers() - 1;
  if (config.kind == "lomt") {
    taps = run_plan_lomt(config);
  } else {
    for (uint64_t seed : config.train.seeds) {
      TapSelection sel;
      for (const TaskSpec& t : config.tasks) sel.taps[t.name] = final_layer;
      taps[seed] = sel;
    }
  }

  std::vector<MetricReport> reports;
  for (uint64_t seed : config.train.seeds) {
    const TapSelection& sel = taps.at(seed);
    std::vector<std::pair<HeadSpec, int>> attachments;
    for (const TaskSpec& t : config.tasks)
      attachments.emplace_back(t.head_spec(), sel.taps.at(t.name));
    ModelGraph model = assemble_model(build_backbone(config.backbone, seed), attachments);
    Phase2Result result = train_phase2(std::move(model), config.tasks, ds, config.train, seed);

    const std::string dir = seed_dir(root, seed);
    fs::create_directories(dir);
    write_text_file(dir + "/history.jsonl", history_to_jsonl(result.history));
    write_checkpoint(dir + "/checkpoint.bin", result.model);
    write_text_file(dir + "/metrics.json", metrics_to_json(result.report).dump(2) + "\n");
    reports.push_back(result.report);

    bool all_final = true;
    for (const auto& [task, tap] : sel.taps) all_final = all_final && tap == final_layer;
    ordered_json summary;
    summary["kind"] = config.kind;
    summary["seed"] = seed;
    summary["tasks"] = ordered_json::array();
    for (const TaskSpec& t : config.tasks) summary["tasks"].push_back(t.name);
    summary["taps"] = ordered_json::object();
    for (const auto& [task, tap] : sel.taps) summary["taps"][task] = tap;
    if (config.kind == "lomt") summary["equivalent_to_dense_mtl"] = all_final;
    summary["backbone_total_params"] = result.model.backbone_param_count();
    summary["backbone_nonzero_params"] = backbone_nonzero(result.model);
    summary["total_params"] = result.model.total_param_count();
    write_text_file(dir + "/summary.json", summary.dump(2) + "\n");
    if (config.kind == "lomt" && all_final)
      std::cerr << "note: all taps landed on the final layer; model is "
                   "equivalent-to-dense-mtl (seed "
                << seed << ")\n";
  }
  write_report_csv(root, config.tasks, reports, config.train.seeds);
}

void run_analyze(const std::string& run_dir) {
  const std::string root = resolve_output_dir(run_dir);
  ExperimentConfig config = parse_config_text(read_text_file(root + "/config_effective.json"), {});
  if (config.train.phase != 1)
    throw ConfigError("kind", "analyze expects a train-stl run directory");
  const TaskSpec& task = config.tasks.front();
  const int final_layer = config.backbone.conv_layers() - 1;

  std::string cr_csv = "seed,backbone_total,backbone_nonzero,compression_ratio\n";
  std::map<std::string, std::vector<int>> by_task;
  ordered_json taps_json;
  taps_json["task"] = task.name;
  taps_json["per_seed"] = ordered_json::object();
  for (uint64_t seed : config.train.seeds) {
    const std::string dir = seed_dir(root, seed);
    ModelGraph model = assemble_model(build_backbone(config.backbone, seed),
                                      {{task.head_spec(), final_layer}});
    load_checkpoint(dir + "/checkpoint.bin", model);
    GroupIndex index = build_channel_groups(model, config.train.optimizer.lambda);
    SparsityPattern pattern = extract_pattern(model, index);
    pattern.task_name = task.name;

    write_text_file(dir + "/pattern_flags.json", pattern_to_json(pattern));
    PatternRender render = render_pattern({pattern});
    write_text_file(dir + "/pattern.csv", render.csv);
    write_text_file(dir + "/pattern.svg", render.svg);

    const long long total = model.backbone_param_count();
    const long long nonzero = backbone_nonzero(model);
    cr_csv += std::to_string(seed) + "," + std::to_string(total) + "," +
              std::to_string(nonzero) + "," +
              (nonzero > 0 ? format_cr((double)total / (double)nonzero) : "") + "\n";

    try {
      const int tap = last_active_layer(pattern);
      taps_json["per_seed"][std::to_string(seed)] = tap;
      by_task[task.name].push_back(tap);
    } catch (const AllZeroPattern&) {
      taps_json["per_seed"][std::to_string(seed)] = nullptr;
    }
  }
  if (!by_task.empty()) taps_json["modal"] = modal_tap(by_task.begin()->second);
  write_text_file(root + "/cr.csv", cr_csv);
  write_text_file(root + "/taps.json", taps_json.dump(2) + "\n");
}

void run_sweep(const ExperimentConfig& config, const std::vector<double>& lambdas) {
  if (config.kind != "sparse-stl")
    throw ConfigError("kind", "sweep expects a sparse-stl config");
  if (lambdas.empty()) throw ConfigError("--lambdas", "empty lambda grid");
  const std::string root = resolve_output_dir(config.output_dir);
  fs::create_directories(root);

  std::string csv = "lambda,seed,percent_sparsity\n";
  for (double lambda : lambdas) {
    char name[48];
    std::snprintf(name, sizeof name, "lambda_%g", lambda);
    ExperimentConfig sub = config;
    sub.train.optimizer.lambda = lambda;
    sub.output_dir = config.output_dir + "/" + name;
    // keep the snapshot faithful to the sweep request
    ordered_json eff = ordered_json::parse(sub.effective);
    eff["optimizer"]["lambda"] = lambda;
    eff["output_dir"] = sub.output_dir;
    sub.effective = eff.dump(2) + "\n";
    run_train_stl(sub);

    for (uint64_t seed : sub.train.seeds) {
      const std::string summary_path =
          seed_dir(resolve_output_dir(sub.output_dir), seed) + "/summary.json";
      ordered_json summary = ordered_json::parse(read_text_file(summary_path));
      csv += std::string(name + 7) + "," + std::to_string(seed) + "," +
             std::to_string(summary["percent_sparsity"].get<double>()) + "\n";
    }
  }
  write_text_file(root + "/sparsity_vs_lambda.csv", csv);
}

// ----------------------------------------------------------------- reports

namespace {

struct RunInfo {
  std::string dir;
  std::string label;
  std::string kind;
  std::vector<std::string> tasks;
  std::vector<uint64_t> seeds;
  std::vector<MetricReport> reports;
  std::vector<ordered_json> summaries;
  ExperimentConfig config;
};

RunInfo load_run(const std::string& run_dir) {
  RunInfo info;
  info.dir = resolve_output_dir(run_dir);
  info.config = parse_config_text(read_text_file(info.dir + "/config_effective.json"), {});
  info.kind = info.config.kind;
  for (const TaskSpec& t : info.config.tasks) info.tasks.push_back(t.name);
  info.seeds = info.config.train.seeds;
  for (uint64_t seed : info.seeds) {
    const std::string dir = seed_dir(info.dir, seed);
    if (!fs::exists(dir + "/metrics.json"))
      throw std::runtime_error("incomplete run dir (missing metrics for seed " +
                               std::to_string(seed) + "): " + run_dir);
    ordered_json m = ordered_json::parse(read_text_file(dir + "/metrics.json"));
    MetricReport report;
    for (const auto& [task, v] : m.items())
      report.values[task] = {metric_kind_from(v.at("metric").get<std::string>()),
                             v.at("value").get<double>()};
    info.reports.push_back(report);
    info.summaries.push_back(ordered_json::parse(read_text_file(dir + "/summary.json")));
  }
  return info;
}

}  // namespace

void run_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw ConfigError("--run", "report needs at least one run directory");
  const std::string out = resolve_output_dir(out_dir);
  fs::create_directories(out);

  std::vector<RunInfo> runs;
  for (const std::string& dir : run_dirs) runs.push_back(load_run(dir));

  // unique column labels per run
  std::map<std::string, int> kind_counts;
  for (RunInfo& r : runs) {
    const int n = kind_counts[r.kind]++;
    r.label = n == 0 ? r.kind : r.kind + "#" + std::to_string(n + 1);
  }

  // ---- metrics.csv: one column block per run
  std::set<std::pair<std::string, std::string>> row_keys;  // (task, metric)
  std::map<std::string, std::map<std::string, std::pair<std::string, std::string>>> cells;
  bool single_seed_warning = false;
  for (const RunInfo& r : runs) {
    if (r.reports.size() >= 2) {
      RunAggregate agg = aggregate_runs(r.reports);
      for (const auto& [task, e] : agg.per_task) {
        row_keys.insert({task, metric_kind_name(e.metric)});
        cells[r.label][task] = {std::to_string(e.mean), std::to_string(e.stddev)};
      }
    } else {
      single_seed_warning = true;
      for (const auto& [task, v] : r.reports.at(0).values) {
        row_keys.insert({task, metric_kind_name(v.first)});
        cells[r.label][task] = {std::to_string(v.second), ""};
      }
    }
  }
  if (single_seed_warning)
    std::cerr << "warning: some runs have a single seed; their std cells are empty\n";

  std::string metrics_csv = "task,metric";
  for (const RunInfo& r : runs) metrics_csv += "," + r.label + "_mean," + r.label + "_std";
  metrics_csv += "\n";
  for (const auto& [task, metric] : row_keys) {
    metrics_csv += task + "," + metric;
    for (const RunInfo& r : runs) {
      const auto& run_cells = cells.at(r.label);
      auto cit = run_cells.find(task);
      if (cit != run_cells.end())
        metrics_csv += "," + cit->second.first + "," + cit->second.second;
      else
        metrics_csv += ",,";
    }
    metrics_csv += "\n";
  }
  write_text_file(out + "/metrics.csv", metrics_csv);

  // ---- cr.csv: per-run parameter counts plus paper-style comparisons
  std::string cr_csv = "row,backbone_total,backbone_nonzero,cr\n";
  auto mean_of = [](const RunInfo& r, const char* field) {
    double acc = 0.0;
    for (const auto& s : r.summaries) acc += (double)s.at(field).get<long long>();
    return acc / (double)r.summaries.size();
  };
  const RunInfo* lomt = nullptr;
  const RunInfo* dense_mtl = nullptr;
  double sparse_stl_nonzero_sum = 0.0;
  int sparse_stl_count = 0;
  double dense_stl_total = 0.0;
  bool have_dense_stl = false;
  for (const RunInfo& r : runs) {
    const double total = mean_of(r, "backbone_total_params");
    const double nonzero = mean_of(r, "backbone_nonzero_params");
    cr_csv += r.label + "," + std::to_string((long long)total) + "," +
              std::to_string((long long)std::llround(nonzero)) + "," +
              (nonzero > 0 ? format_cr(total / nonzero) : "") + "\n";
    if (r.kind == "lomt") lomt = &r;
    if (r.kind == "dense-mtl") dense_mtl = &r;
    if (r.kind == "sparse-stl") {
      sparse_stl_nonzero_sum += nonzero;
      ++sparse_stl_count;
    }
    if (r.kind == "dense-stl") {
      dense_stl_total = total;
      have_dense_stl = true;
    }
  }
  if (lomt) {
    const double lomt_total = mean_of(*lomt, "backbone_total_params");
    const int n_tasks = (int)lomt->tasks.size();
    if (dense_mtl) {
      const double mtl_total = mean_of(*dense_mtl, "backbone_total_params");
      cr_csv += "dense-mtl_vs_lomt," + std::to_string((long long)mtl_total) + "," +
                std::to_string((long long)lomt_total) + "," + format_cr(mtl_total / lomt_total) +
                "\n";
    }
    if (have_dense_stl) {
      const double stacked = dense_stl_total * n_tasks;
      cr_csv += "dense-stl_x" + std::to_string(n_tasks) + "_vs_lomt," +
                std::to_string((long long)stacked) + "," + std::to_string((long long)lomt_total) +
                "," + format_cr(stacked / lomt_total) + "\n";
      if (sparse_stl_count > 0)
        cr_csv += "dense-stl_x" + std::to_string(n_tasks) + "_vs_sparse-stl_sum," +
                  std::to_string((long long)stacked) + "," +
                  std::to_string((long long)std::llround(sparse_stl_nonzero_sum)) + "," +
                  format_cr(stacked / sparse_stl_nonzero_sum) + "\n";
    }
  }
  write_text_file(out + "/cr.csv", cr_csv);

  // ---- taps.json: per task per seed across runs that selected taps
  ordered_json taps;
  for (const RunInfo& r : runs) {
    if (r.kind != "lomt") continue;
    ordered_json per_seed;
    std::map<std::string, std::vector<int>> by_task;
    for (size_t i = 0; i < r.seeds.size(); ++i) {
      const ordered_json& s = r.summaries[i].at("taps");
      per_seed[std::to_string(r.seeds[i])] = s;
      for (const auto& [task, tap] : s.items()) by_task[task].push_back(tap.get<int>());
    }
    ordered_json modal;
    for (const auto& [task, v] : by_task) modal[task] = modal_tap(v);
    taps[r.label] = {{"per_seed", per_seed}, {"modal", modal}};
  }
  write_text_file(out + "/taps.json", taps.dump(2) + "\n");

  // ---- per-task sparsity grids over seeds for sparse runs
  for (const RunInfo& r : runs) {
    if (r.kind != "sparse-stl") continue;
    std::vector<SparsityPattern> patterns;
    for (uint64_t seed : r.seeds) {
      SparsityPattern p =
          pattern_from_json_file(seed_dir(r.dir, seed) + "/pattern_flags.json");
      p.task_name = "seed " + std::to_string(seed);
      patterns.push_back(std::move(p));
    }
    write_text_file(out + "/pattern_" + r.tasks.front() + ".svg",
                    render_pattern(patterns).svg);
  }
}

// --------------------------------------------------------------------- CLI

namespace {

void emit_error_record(int code, const std::string& kind, const std::string& message,
                       const std::string& field, const std::string& out_dir) {
  ordered_json rec;
  rec["error"] = {{"code", code}, {"kind", kind}, {"message", message}};
  if (!field.empty()) rec["error"]["field"] = field;
  std::cerr << rec.dump() << "\n";
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!ec) {
      std::ofstream f(out_dir + "/error.json");
      f << rec.dump(2) << "\n";
    }
  }
}

std::vector<double> parse_lambda_list(const std::string& csv) {
  std::vector<double> out;
  size_t start = 0;
  while (start <= csv.size()) {
    size_t comma = csv.find(',', start);
    const std::string item =
        csv.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!item.empty()) {
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError("--lambdas", "bad lambda value: " + item);
      }
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"layer-optimized multi-task training pipeline"};
  app.require_subcommand(1);

  std::string config_path, run_dir, out_dir, lambdas_csv;
  std::vector<std::string> overrides, report_runs;
  std::vector<uint64_t> seeds;

  auto add_config_opts = [&](CLI::App* cmd, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config JSON");
    if (needs_config) opt->required();
    cmd->add_option("--set", overrides, "override config values (dotted.key=value)");
    cmd->add_option("--seed", seeds, "seed(s) overriding train.seeds");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "materialize a synthetic dataset");
  add_config_opts(gen);
  CLI::App* stl = app.add_subcommand("train-stl", "dense or sparse single-task training");
  add_config_opts(stl);
  CLI::App* mtl = app.add_subcommand("train-mtl", "dense-mtl or lomt training");
  add_config_opts(mtl);
  CLI::App* analyze = app.add_subcommand("analyze", "pattern + taps + CR from a finished run");
  analyze->add_option("--run", run_dir, "train-stl run directory")->required();
  CLI::App* plan = app.add_subcommand("plan-lomt", "tap selection from phase-1 patterns");
  add_config_opts(plan);
  CLI::App* sweep = app.add_subcommand("sweep", "lambda grid of sparse-stl runs");
  add_config_opts(sweep);
  sweep->add_option("--lambdas", lambdas_csv, "comma-separated lambda grid");
  CLI::App* report = app.add_subcommand("report", "aggregate run directories into tables");
  report->add_option("--run", report_runs, "run directory (repeatable)")->required();
  report->add_option("--out", out_dir, "report output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string known_out;
  try {
    ExperimentConfig config;
    const bool needs_config = !app.got_subcommand(analyze) && !app.got_subcommand(report);
    if (needs_config) {
      config = parse_config_file(config_path, overrides);
      if (!seeds.empty()) config.train.seeds = seeds;
      known_out = resolve_output_dir(config.output_dir);
    }

    if (app.got_subcommand(gen)) {
      run_gen_data(config);
    } else if (app.got_subcommand(stl)) {
      run_train_stl(config);
    } else if (app.got_subcommand(mtl)) {
      run_train_mtl(config);
    } else if (app.got_subcommand(plan)) {
      run_plan_lomt(config);
    } else if (app.got_subcommand(sweep)) {
      std::vector<double> grid = lambdas_csv.empty()
                                     ? std::vector<double>{1e-4, 2e-4, 5e-4, 1e-3}
                                     : parse_lambda_list(lambdas_csv);
      run_sweep(config, grid);
    } else if (app.got_subcommand(analyze)) {
      run_analyze(run_dir);
    } else if (app.got_subcommand(report)) {
      run_report(report_runs, out_dir);
    }
    return 0;
  } catch (const ConfigError& e) {
    emit_error_record(2, "config", e.what(), e.field, known_out);
    return 2;
  } catch (const TrainingDivergence& e) {
    emit_error_record(3, "divergence", e.what(), "", known_out);
    return 3;
  } catch (const DegenerateSparsityError& e) {
    emit_error_record(4, "degenerate-sparsity", e.what(), "", known_out);
    return 4;
  } catch (const std::exception& e) {
    emit_error_record(1, "error", e.what(), "", known_out);
    return 1;
  }
}

}  // namespace lomt

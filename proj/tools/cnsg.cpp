// cnsg: command-line front end for dataset generation, training, evaluation
// and the ablation / alpha-sweep experiments.

#include <cnsg/config.hpp>
#include <cnsg/dataset.hpp>
#include <cnsg/engine.hpp>
#include <cnsg/report.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cnsg;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string data_root;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config_path, "JSON config file (missing keys take defaults)");
  cmd->add_option("--set", c.overrides, "override one setting, e.g. --set train.iterations=200")->take_all();
  cmd->add_option("--seed", c.seed, "run seed (shorthand for --set seed=N)");
  cmd->add_option("--data", c.data_root, "dataset root written by gen-data")->envname("CNSG_DATA_ROOT");
  auto* out = cmd->add_option("--out", c.out_dir, "output directory");
  if (needs_out) out->required();
}

json effective_json(const Common& c) {
  json j = c.config_path.empty() ? config::default_json() : config::load_config_json(c.config_path);
  for (const auto& o : c.overrides) config::apply_override(j, o);
  if (c.seed) j["seed"] = *c.seed;
  if (!c.data_root.empty()) j["data"]["root"] = c.data_root;
  config::resolve(j);  // validate before anything runs
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw io::IoError(path, "cannot open for writing");
  os << text;
  if (!os) throw io::IoError(path, "write failed");
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw io::IoError(path, "cannot open");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw io::IoError(path, e.what());
  }
}

void write_config(const fs::path& out, const json& j) {
  write_text(out / "effective_config.json", j.dump(2) + "\n");
}

/// The on-disk dataset when a root is configured, otherwise one generated in memory.
synth::Dataset load_data(const engine::RunConfig& cfg) {
  if (cfg.data.root.empty()) {
    std::cerr << "note: no dataset root given (--data / CNSG_DATA_ROOT); generating the dataset in memory\n";
    return synth::generate_dataset(cfg.data.spec);
  }
  auto ds = synth::disk::read_dataset(cfg.data.root);
  if (ds.num_classes != cfg.model.num_classes || ds.height != cfg.model.image_h || ds.width != cfg.model.image_w)
    throw config::ConfigError(cfg.data.root + ": dataset has " + std::to_string(ds.num_classes) + " classes at " +
                              std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                              ", config expects " + std::to_string(cfg.model.num_classes) + " at " +
                              std::to_string(cfg.model.image_h) + "x" + std::to_string(cfg.model.image_w));
  return ds;
}

void write_eval(const fs::path& out, const engine::EvaluationReport& rep, const std::string& stem) {
  const auto j = report::to_json(rep);
  write_text(out / (stem + ".json"), j.dump(2) + "\n");
  write_text(out / (stem + ".csv"), report::evaluation_csv(j));
  std::cout << report::evaluation_text(j);
}

int cmd_gen_data(const Common& c) {
  const auto j = effective_json(c);
  const auto cfg = config::resolve(j);
  const auto ds = synth::generate_dataset(cfg.data.spec);
  synth::disk::write_dataset(ds, c.out_dir);
  size_t n = 0;
  for (const auto& d : ds.domains) n += d.train.size() + d.eval.size();
  std::cout << "wrote " << n << " samples in " << ds.domains.size() << " domains to " << c.out_dir << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& resume) {
  const auto j = effective_json(c);
  const auto cfg = config::resolve(j);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_config(out, j);
  const auto data = load_data(cfg);
  engine::Trainer trainer(cfg, &data.domain(cfg.data.source_domain).train);
  if (!resume.empty()) {
    trainer.load(resume);
    std::cerr << "resumed from " << resume << " at iteration " << trainer.iteration() << "\n";
  }
  std::ofstream log(out / "train_log.ndjson", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw io::IoError(out / "train_log.ndjson", "cannot open for writing");
  const int64_t every = std::max<int64_t>(1, cfg.train.iterations / 20);
  try {
    trainer.run(&log, [&](const engine::LogRecord& r) {
      if (r.iter % every == 0 || r.iter + 1 == cfg.train.iterations)
        std::cerr << "iter " << r.iter << "  L_s " << r.l_s << "  L_cls " << r.l_cls << "  L_sca " << r.l_sca
                  << "  lr " << r.lr << "\n";
    });
  } catch (const engine::TrainingDiverged&) {
    trainer.save(out / "checkpoint_diverged.pt");
    throw;
  }
  trainer.save(out / "checkpoint.pt");
  auto rep = engine::evaluate(trainer.model(), data, data.domain_names(), cfg);
  write_eval(out, rep, "metrics");
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::vector<std::string>& domains) {
  auto ck = engine::load_checkpoint(checkpoint);
  json j = ck.config_json;
  for (const auto& o : c.overrides) config::apply_override(j, o);
  if (!c.data_root.empty()) j["data"]["root"] = c.data_root;
  const auto cfg = config::resolve(j);
  const auto data = load_data(cfg);
  const auto names = domains.empty() ? data.domain_names() : domains;
  auto rep = engine::evaluate(ck.model, data, names, cfg);
  if (c.out_dir.empty()) {
    std::cout << report::evaluation_text(report::to_json(rep));
    return 0;
  }
  fs::create_directories(c.out_dir);
  write_config(c.out_dir, j);
  write_eval(c.out_dir, rep, "metrics");
  return 0;
}

int cmd_ablate(const Common& c) {
  const auto j = effective_json(c);
  const auto cfg = config::resolve(j);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_config(out, j);
  const auto data = load_data(cfg);
  engine::CellRunner runner(data, &std::cerr);
  const auto table = engine::ablate(cfg, runner);
  const auto tj = report::to_json(table);
  write_text(out / "ablation.json", tj.dump(2) + "\n");
  write_text(out / "ablation.csv", report::ablation_csv(tj));
  std::cout << report::ablation_text(tj);
  int failed = 0;
  for (const auto& r : table.rows)
    for (const auto& cell : r.cells) failed += cell.error ? 1 : 0;
  if (failed) std::cerr << "warning: " << failed << " cell(s) failed; see ablation.json\n";
  return 0;
}

int cmd_sweep(const Common& c) {
  const auto j = effective_json(c);
  const auto cfg = config::resolve(j);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_config(out, j);
  const auto data = load_data(cfg);
  engine::CellRunner runner(data, &std::cerr);
  const auto curve = engine::alpha_sweep(cfg, cfg.experiment.alphas, runner);
  const auto cj = report::to_json(curve);
  write_text(out / "sweep.json", cj.dump(2) + "\n");
  write_text(out / "sweep.csv", report::sweep_csv(cj));
  write_text(out / "sweep.svg", report::sweep_svg(cj));
  std::cout << report::sweep_text(cj);
  return 0;
}

int cmd_report(const std::string& in_dir) {
  const fs::path in = in_dir;
  if (!fs::is_directory(in)) throw io::IoError(in, "not a directory");
  bool any = false;
  if (fs::exists(in / "ablation.json")) {
    std::cout << "Ablation (unseen-domain mIoU, %, mean ± std over seeds)\n"
              << report::ablation_text(read_json(in / "ablation.json")) << "\n";
    any = true;
  }
  if (fs::exists(in / "sweep.json")) {
    const auto cj = read_json(in / "sweep.json");
    std::cout << "Alpha sweep\n" << report::sweep_text(cj) << "\n";
    write_text(in / "sweep.svg", report::sweep_svg(cj));
    any = true;
  }
  if (fs::exists(in / "metrics.json")) {
    std::cout << "Evaluation (mIoU, %)\n" << report::evaluation_text(read_json(in / "metrics.json")) << "\n";
    any = true;
  }
  if (fs::exists(in / "train_log.ndjson")) {
    std::ifstream is(in / "train_log.ndjson");
    std::vector<json> records;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        records.push_back(json::parse(line));
      } catch (const json::exception& e) {
        throw io::IoError(in / "train_log.ndjson", "line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    write_text(in / "loss.svg", report::loss_svg(records));
    std::cout << "Training log: " << records.size() << " records, loss curve written to " << (in / "loss.svg").string()
              << "\n";
    any = true;
  }
  if (!any) throw io::IoError(in, "no ablation.json, sweep.json, metrics.json or train_log.ndjson found");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cnsg: video domain-generalizable segmentation with class-wise non-salient regions"};
  app.require_subcommand(1);

  Common gen, train, eval, ablate, sweep;
  std::string resume, checkpoint, report_dir;
  std::vector<std::string> eval_domains;

  auto* c_gen = app.add_subcommand("gen-data", "render the synthetic multi-domain video dataset to disk");
  add_common(c_gen, gen);
  auto* c_train = app.add_subcommand("train", "train on the source domain and evaluate every domain");
  add_common(c_train, train);
  c_train->add_option("--resume", resume, "checkpoint to continue from");
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(c_eval, eval, /*needs_out=*/false);
  c_eval->add_option("--checkpoint", checkpoint, "checkpoint.pt written by train")->required();
  c_eval->add_option("--domains", eval_domains, "domains to evaluate (default: all)")->delimiter(',');
  auto* c_ablate = app.add_subcommand("ablate", "baseline / +NSCA / +NSFR / full, over the configured seeds");
  add_common(c_ablate, ablate);
  auto* c_sweep = app.add_subcommand("sweep-alpha", "unseen-domain mIoU as a function of alpha");
  add_common(c_sweep, sweep);
  auto* c_report = app.add_subcommand("report", "tables and SVG plots from a result directory");
  c_report->add_option("--in", report_dir, "directory written by train, ablate or sweep-alpha")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_train->parsed()) return cmd_train(train, resume);
    if (c_eval->parsed()) return cmd_eval(eval, checkpoint, eval_domains);
    if (c_ablate->parsed()) return cmd_ablate(ablate);
    if (c_sweep->parsed()) return cmd_sweep(sweep);
    if (c_report->parsed()) return cmd_report(report_dir);
  } catch (const engine::TrainingDiverged& e) {
    std::cerr << "cnsg: training diverged: " << e.what() << "\n";
    return 3;
  } catch (const config::ConfigError& e) {
    std::cerr << "cnsg: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "cnsg: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

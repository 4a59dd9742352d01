// SPDX-License-Identifier: Apache-2.0
// distillseg: data generation, teacher training, distillation, ablation, evaluation, plots.

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "distillseg/distillseg.hpp"

namespace fs = std::filesystem;
using namespace distillseg;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

std::string config_help() {
  std::ostringstream os;
  os << "Config fields (JSON keys; override with --set key=value):\n";
  for (const auto& [key, doc] : config_field_docs()) {
    os << "  " << key << std::string(key.size() < 26 ? 26 - key.size() : 1, ' ') << doc << "\n";
  }
  os << "\nEnvironment: DISTILLSEG_OUT sets the default output root (default ./runs).\n"
     << "Exit codes: 0 success, 1 validation, 2 numeric abort, 3 I/O.";
  return os.str();
}

void add_common(CLI::App* cmd, CommonOptions& opt, bool with_out = true) {
  cmd->add_option("--config", opt.config_path, "JSON experiment config");
  cmd->add_option("--set", opt.overrides, "override a config field, key=value (repeatable)");
  cmd->add_option("--seed", opt.seed, "shorthand for --set seed=S");
  if (with_out) cmd->add_option("--out", opt.out, "output root (default $DISTILLSEG_OUT or ./runs)");
  cmd->footer(config_help());
}

ExperimentConfig resolve_config(const CommonOptions& opt) {
  ExperimentConfig cfg = opt.config_path.empty() ? ExperimentConfig{} : load_config(opt.config_path);
  for (const auto& o : opt.overrides) cfg = apply_override(cfg, o);
  if (opt.seed) cfg.seed = *opt.seed;
  validate(cfg);
  return cfg;
}

std::string output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DISTILLSEG_OUT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

/// Fresh directory `<root>/<stamp>-<label>`; a numeric suffix avoids collisions.
std::string run_dir(const std::string& root, const std::string& label) {
  const std::string base = (fs::path(root) / (timestamp() + "-" + label)).string();
  std::string dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = base + "-" + std::to_string(i);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  return dir;
}

std::unique_ptr<models::SegNet> obtain_teacher(const ExperimentConfig& cfg,
                                               const data::SiteSplit& split,
                                               const std::string& dir) {
  if (!cfg.teacher_checkpoint.empty()) {
    auto loaded = models::load_checkpoint(cfg.teacher_checkpoint);
    return std::move(loaded.net);
  }
  std::cout << "training teacher " << cfg.teacher_name << " on";
  for (const auto& s : split.teacher_train) std::cout << " " << s.site_id;
  std::cout << std::endl;
  auto run = train::train_teacher(cfg, data::concat(split.teacher_train),
                                  (fs::path(dir) / "teacher").string());
  return std::move(run.model);
}

int cmd_gen_data(const std::string& out, int sites, int per_site, int size, std::uint64_t seed) {
  require(sites >= 1 && sites <= static_cast<int>(data::default_sites().size()),
          "--sites must be in [1, " + std::to_string(data::default_sites().size()) + "]");
  require(per_site >= 1, "--per-site must be >= 1");
  require(size >= 32, "--size must be >= 32");
  const std::uint64_t data_seed = Rng(seed).child("data").seed();
  for (int i = 0; i < sites; ++i) {
    const auto& spec = data::default_sites()[static_cast<std::size_t>(i)];
    const auto ds = data::generate_site(spec, static_cast<std::size_t>(per_site),
                                        static_cast<std::size_t>(size),
                                        static_cast<std::size_t>(size), data_seed);
    const std::string dir = (fs::path(out) / spec.site_id).string();
    data::save_dataset(ds, dir);
    std::printf("%s  %3d samples  mean intensity %.4f  -> %s\n", spec.site_id.c_str(), per_site,
                data::intensity_mean(ds), dir.c_str());
  }
  return 0;
}

int cmd_train_teacher(const CommonOptions& opt) {
  const auto cfg = resolve_config(opt);
  const auto sites = train::prepare_sites(cfg);
  const auto split = data::leave_one_site_out(sites, cfg.target_site, cfg.teacher_fraction);
  const std::string dir = run_dir(output_root(opt.out), "teacher-" + cfg.target_site);
  auto run = train::train_teacher(cfg, data::concat(split.teacher_train), dir);
  std::printf("teacher %s: best training dice %.4f at epoch %d (%.1fs)\n", cfg.teacher_name.c_str(),
              run.report.best_dice, run.report.best_epoch, run.report.wall_seconds);
  std::printf("checkpoint %s\n", run.report.best_checkpoint.c_str());
  return 0;
}

int cmd_distill(const CommonOptions& opt) {
  const auto cfg = resolve_config(opt);
  const auto sites = train::prepare_sites(cfg);
  const auto split = data::leave_one_site_out(sites, cfg.target_site, cfg.teacher_fraction);
  const std::string dir = run_dir(output_root(opt.out), "distill-" + cfg.target_site);
  auto teacher = obtain_teacher(cfg, split, dir);
  auto run = train::distill_student(cfg, *teacher, data::concat(split.student_train), split.eval_set,
                                    (fs::path(dir) / "student").string());
  std::printf("student %s on %s: best eval dice %.4f at epoch %d (%.1fs)\n",
              cfg.student_name.c_str(), cfg.target_site.c_str(), run.report.best_dice,
              run.report.best_epoch, run.report.wall_seconds);
  std::printf("checkpoint %s\n", run.report.best_checkpoint.c_str());
  return 0;
}

int cmd_ablate(const CommonOptions& opt, const std::string& grid_flag) {
  auto cfg = resolve_config(opt);
  const std::string grid = grid_flag.empty() ? cfg.ablation.grid : grid_flag;
  const std::string dir = run_dir(output_root(opt.out), "ablate-" + grid);
  save_config(cfg, (fs::path(dir) / "config.json").string());
  std::unique_ptr<models::SegNet> fixed_teacher;
  train::AblationOptions aopt;
  aopt.seeds = cfg.ablation.seeds;
  aopt.targets = cfg.ablation.targets;
  aopt.grid = train::grid_by_name(grid);
  aopt.out_dir = dir;
  aopt.log = [](const std::string& line) { std::cout << line << std::endl; };
  if (!cfg.teacher_checkpoint.empty()) {
    fixed_teacher = std::move(models::load_checkpoint(cfg.teacher_checkpoint).net);
    aopt.teacher = fixed_teacher.get();
  }
  const auto table = train::run_ablation(cfg, aopt);
  std::cout << "\n" << table.text();
  std::printf("table %s\n", (fs::path(dir) / "ablation.csv").c_str());
  return 0;
}

int cmd_eval(const CommonOptions& opt, const std::string& checkpoint, std::vector<std::string> sites_flag) {
  const auto cfg = resolve_config(opt);
  auto loaded = models::load_checkpoint(checkpoint);
  const auto all = train::prepare_sites(cfg);
  if (sites_flag.empty()) sites_flag = {cfg.target_site};
  std::vector<data::SiteDataset> chosen;
  for (const auto& id : sites_flag) {
    bool found = false;
    for (const auto& s : all) {
      if (s.site_id == id) {
        chosen.push_back(s);
        found = true;
      }
    }
    require(found, "--site " + id + " is not among the configured sites");
  }
  const auto table = train::evaluate(*loaded.net, chosen);
  json out = json::array();
  for (const auto& row : table) {
    std::printf("%s  dice %.6f  (%zu samples)\n", row.site_id.c_str(), row.dice, row.samples);
    out.push_back({{"site", row.site_id}, {"dice", row.dice}, {"samples", row.samples}});
  }
  if (!opt.out.empty()) {
    fs::create_directories(opt.out);
    std::ofstream f(fs::path(opt.out) / "eval.json");
    if (!f) throw IoError("cannot write eval.json under " + opt.out);
    f << out.dump(2) << "\n";
  }
  return 0;
}

// --- plot ------------------------------------------------------------------------------------

struct MetricsRow {
  int epoch = 0;
  double total = 0.0;
  double seg = 0.0;
  double eval_dice = std::numeric_limits<double>::quiet_NaN();
};

double parse_cell(const std::string& cell, const std::string& where) {
  if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != cell.size()) throw ValidationError(where + ": bad number \"" + cell + "\"");
  return v;
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing metrics file " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,epoch,", 0) != 0) {
    throw ValidationError(path + ":1: missing metrics header");
  }
  std::vector<MetricsRow> rows;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    const std::string where = path + ":" + std::to_string(lineno);
    if (cells.size() != 11) {
      throw ValidationError(where + ": expected 11 columns, got " + std::to_string(cells.size()));
    }
    MetricsRow row;
    row.epoch = static_cast<int>(parse_cell(cells[1], where));
    row.seg = parse_cell(cells[3], where);
    row.total = parse_cell(cells[7], where);
    row.eval_dice = parse_cell(cells[10], where);
    if (std::isnan(row.total)) throw ValidationError(where + ": missing total");
    rows.push_back(row);
  }
  if (rows.empty()) throw ValidationError(path + ": no metric rows");
  return rows;
}

/// Accepts a run directory holding metrics.csv directly or one level down (teacher/, student/).
std::string find_metrics(const std::string& run) {
  const fs::path direct = fs::path(run) / "metrics.csv";
  if (fs::exists(direct)) return direct.string();
  for (const char* sub : {"student", "teacher"}) {
    const fs::path p = fs::path(run) / sub / "metrics.csv";
    if (fs::exists(p)) return p.string();
  }
  throw IoError("no metrics.csv under " + run);
}

int cmd_plot(const std::vector<std::string>& runs, const std::string& out) {
  require(!runs.empty(), "plot needs at least one --run");
  const fs::path prefix(out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  std::vector<plot::Series> curves;
  std::vector<plot::Series> bars;
  std::vector<std::string> sites;
  std::vector<std::pair<std::string, std::map<std::string, double>>> per_run;
  std::string table = "Run                       Site    Dice\n";
  for (const auto& run : runs) {
    const std::string metrics = find_metrics(run);
    const auto rows = read_metrics(metrics);
    const std::string label = fs::path(run).filename().string();
    curves.push_back({label, {}});
    for (const auto& r : rows) curves.back().values.push_back(r.total);

    // Best per-site eval dice from the run report; falls back to the CSV column.
    std::map<std::string, double> best;
    const fs::path report = fs::path(metrics).parent_path() / "report.json";
    if (fs::exists(report)) {
      std::ifstream in(report);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw ValidationError(report.string() + ": " + e.what());
      }
      const json site_dice = j.value("site_dice", json::object());
      for (const auto& [site, hist] : site_dice.items()) {
        double b = 0.0;
        for (const auto& v : hist) b = std::max(b, v.get<double>());
        best[site] = b;
      }
    }
    if (best.empty()) {
      double b = std::numeric_limits<double>::quiet_NaN();
      for (const auto& r : rows) {
        if (!std::isnan(r.eval_dice)) b = std::isnan(b) ? r.eval_dice : std::max(b, r.eval_dice);
      }
      if (!std::isnan(b)) best["eval"] = b;
    }
    for (const auto& [site, _] : best) {
      if (std::find(sites.begin(), sites.end(), site) == sites.end()) sites.push_back(site);
    }
    for (const auto& [site, v] : best) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%-25s %-6s %6.4f\n", label.c_str(), site.c_str(), v);
      table += buf;
    }
    per_run.emplace_back(label, std::move(best));
  }
  for (const auto& [label, best] : per_run) {
    bars.push_back({label, {}});
    for (const auto& s : sites) {
      const auto it = best.find(s);
      bars.back().values.push_back(it != best.end() ? it->second
                                                    : std::numeric_limits<double>::quiet_NaN());
    }
  }

  const std::string loss_png = prefix.string() + "_loss.png";
  plot::loss_curves_png(loss_png, curves);
  std::printf("wrote %s\n", loss_png.c_str());
  if (!sites.empty()) {
    const std::string dice_png = prefix.string() + "_dice.png";
    plot::grouped_bars_png(dice_png, sites, bars);
    std::printf("wrote %s\n", dice_png.c_str());
  }
  // An ablation directory carries its own table; render it verbatim.
  for (const auto& run : runs) {
    const fs::path abl = fs::path(run) / "ablation.txt";
    if (fs::exists(abl)) {
      std::ifstream in(abl);
      table = std::string(std::istreambuf_iterator<char>(in), {});
    }
  }
  const std::string table_path = prefix.string() + "_table.txt";
  std::ofstream t(table_path);
  if (!t) throw IoError("cannot write " + table_path);
  t << table;
  std::printf("wrote %s\n", table_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relation-based knowledge distillation for segmentation across sites"};
  app.require_subcommand(1);
  app.footer(config_help());

  auto* gen = app.add_subcommand("gen-data", "write synthetic per-site datasets");
  std::string gen_out;
  int gen_sites = 6;
  int gen_per_site = 100;
  int gen_size = 64;
  std::uint64_t gen_seed = 1;
  std::string gen_config;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--sites", gen_sites, "number of default sites, S1 onwards")->capture_default_str();
  gen->add_option("--per-site", gen_per_site, "samples per site")->capture_default_str();
  gen->add_option("--size", gen_size, "image side length")->capture_default_str();
  gen->add_option("--seed", gen_seed, "base seed")->capture_default_str();
  gen->add_option("--config", gen_config, "JSON config; seed and data.* fields become defaults");
  gen->footer(config_help());

  CommonOptions teacher_opt;
  auto* teacher = app.add_subcommand("train-teacher", "train a teacher on its leave-one-site-out sites");
  add_common(teacher, teacher_opt);

  CommonOptions distill_opt;
  auto* distill = app.add_subcommand("distill", "train a student with the enabled distillation modules");
  add_common(distill, distill_opt);

  CommonOptions ablate_opt;
  std::string grid;
  auto* ablate = app.add_subcommand("ablate", "run the module ablation grid");
  add_common(ablate, ablate_opt);
  ablate->add_option("--grid", grid, "components | singles (default: ablation.grid)");

  CommonOptions eval_opt;
  std::string checkpoint;
  std::vector<std::string> eval_sites;
  auto* eval = app.add_subcommand("eval", "dice of a checkpoint on one or more sites");
  add_common(eval, eval_opt);
  eval->add_option("--checkpoint", checkpoint, "checkpoint archive")->required();
  eval->add_option("--site", eval_sites, "site to evaluate (repeatable; default target_site)");

  std::vector<std::string> plot_runs;
  std::string plot_out;
  auto* plt = app.add_subcommand("plot", "loss curves, per-site dice bars and a text table");
  plt->add_option("--run", plot_runs, "run directory (repeatable)")->required();
  plt->add_option("--out", plot_out, "output prefix; writes <out>_loss.png, _dice.png, _table.txt")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::validation);
  }

  try {
    if (*gen) {
      if (!gen_config.empty()) {
        const auto cfg = load_config(gen_config);
        if (gen->count("--seed") == 0) gen_seed = cfg.seed;
        if (gen->count("--per-site") == 0) gen_per_site = cfg.data.samples_per_site;
        if (gen->count("--size") == 0) gen_size = cfg.data.image_size;
      }
      return cmd_gen_data(gen_out, gen_sites, gen_per_site, gen_size, gen_seed);
    }
    if (*teacher) return cmd_train_teacher(teacher_opt);
    if (*distill) return cmd_distill(distill_opt);
    if (*ablate) return cmd_ablate(ablate_opt, grid);
    if (*eval) return cmd_eval(eval_opt, checkpoint, eval_sites);
    if (*plt) return cmd_plot(plot_runs, plot_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::io);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::validation);
  }
  return 0;
}

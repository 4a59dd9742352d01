// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and writes the same
// report to acceptance_report.txt in the working directory.
//
// Criteria 4 and 5 are empirical claims about the training benchmark. They are always
// reported, but they only affect the exit status under --strict.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "oracles.hpp"

using namespace distillseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::ostringstream g_report;

void log(const std::string& line) {
  std::cerr << line << std::endl;
  g_report << "  " << line << "\n";
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  int id;
  bool pass;
  bool gating;
  std::string detail;
};

std::vector<Verdict> g_verdicts;

void verdict(int id, bool pass, bool gating, const std::string& detail) {
  g_verdicts.push_back({id, pass, gating, detail});
  char buf[64];
  std::snprintf(buf, sizeof buf, "criterion %d: %s", id, pass ? "PASS" : "FAIL");
  const std::string line = std::string(buf) + "  " + detail;
  std::cout << line << std::endl;
  g_report << line << "\n";
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

int run_command(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void unit_suite() {
  const auto t0 = Clock::now();
  const int code = run_command("\"" DISTILLSEG_UNIT_PATH "\" --gtest_brief=1 > unit_suite.log 2>&1");
  const double secs = seconds_since(t0);
  verdict(1, code == 0 && secs < 60.0, true,
          fmt("unit suite exit %.0f in %.1fs (limit 60s)", code, secs));
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const int n = 20;
  const std::map<std::string, double> worst{
      {"affinity", oracle::fd_affinity(101, n)},
      {"kernel", oracle::fd_kernel(102, n)},
      {"logits", oracle::fd_logits(103, n)},
      {"dice", oracle::fd_seg(104, n, true)},
      {"focal", oracle::fd_seg(105, n, false)},
  };
  const double secs = seconds_since(t0);
  bool ok = secs < 300.0;
  std::string detail;
  for (const auto& [name, err] : worst) {
    ok = ok && err < 1e-3;
    detail += name + fmt(" %.2e, ", err);
  }
  verdict(2, ok, true, "max rel error " + detail + fmt("%.1fs (limit 1e-3, 300s)", secs));
}

void brute_force() {
  const double gap = oracle::affinity_brute_force_gap(201, 50);
  verdict(3, gap <= 1e-9, true, fmt("max gap vs exhaustive oracle %.3e over 50 maps (limit 1e-9)", gap));
}

struct Benchmark {
  // combo -> dice per (seed, target)
  std::map<std::string, std::vector<double>> dice;
  double kd_seconds = 0.0;
  train::TrainReport logged;
  bool have_logged = false;

  double mean(const std::string& combo) const {
    const auto& v = dice.at(combo);
    double s = 0.0;
    for (double d : v) s += d;
    return s / static_cast<double>(v.size());
  }
};

Benchmark run_benchmark() {
  Benchmark bm;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const std::vector<std::string> targets{"S3", "S4", "S5"};
  struct Run {
    std::string name;
    ModuleFlags flags;
    double margin;
    bool kd_criterion;
  };
  const std::vector<Run> runs{
      {"baseline", {false, false, false}, 3.0, true}, {"full m=1", {true, true, true}, 1.0, true},
      {"full m=3", {true, true, true}, 3.0, true},    {"full m=5", {true, true, true}, 5.0, true},
      {"+LM", {false, false, true}, 3.0, false},      {"+AAM", {true, false, false}, 3.0, false},
      {"+KMM", {false, true, false}, 3.0, false},
  };
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    const auto sites = train::prepare_sites(cfg);
    for (const auto& target : targets) {
      cfg.target_site = target;
      const auto split = data::leave_one_site_out(sites, target, cfg.teacher_fraction);
      const auto student_train = data::concat(split.student_train);
      auto t0 = Clock::now();
      auto teacher = train::train_teacher(cfg, data::concat(split.teacher_train));
      const double teacher_dice = train::evaluate(*teacher.model, {split.eval_set}).front().dice;
      bm.kd_seconds += seconds_since(t0);
      log(fmt("seed %.0f ", static_cast<double>(seed)) + target +
          fmt(" teacher dice on target %.4f (%.1fs)", teacher_dice, teacher.report.wall_seconds));
      for (const auto& r : runs) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.module_flags = r.flags;
        run_cfg.margin = r.margin;
        t0 = Clock::now();
        auto out = train::distill_student(run_cfg, *teacher.model, student_train, split.eval_set);
        const double dice = train::evaluate(*out.model, {split.eval_set}).front().dice;
        if (r.kd_criterion) bm.kd_seconds += seconds_since(t0);
        bm.dice[r.name].push_back(dice);
        log(fmt("seed %.0f ", static_cast<double>(seed)) + target + " " + r.name +
            fmt(" dice %.4f (%.1fs)", dice, out.report.wall_seconds));
        if (!bm.have_logged && r.name == "full m=3") {
          bm.logged = std::move(out.report);
          bm.have_logged = true;
        }
      }
    }
  }
  return bm;
}

void directional(const Benchmark& bm) {
  const double base = bm.mean("baseline");
  bool ok = bm.kd_seconds < 1200.0;
  std::string detail = fmt("baseline %.4f", base);
  for (const char* m : {"full m=1", "full m=3", "full m=5"}) {
    const double d = bm.mean(m) - base;
    ok = ok && d >= 0.02;
    detail += std::string(", ") + m + fmt(" %+.4f", d);
  }
  verdict(4, ok, false, detail + fmt(" (need >= +0.02 each); %.0fs (limit 1200s)", bm.kd_seconds));
}

void ordering(const Benchmark& bm) {
  const double full = bm.mean("full m=3");
  bool ok = true;
  std::string detail = fmt("full %.4f", full);
  for (const char* s : {"+LM", "+AAM", "+KMM"}) {
    ok = ok && full >= bm.mean(s) - 0.005;
    detail += std::string(", ") + s + fmt(" %.4f", bm.mean(s));
  }
  verdict(5, ok, false, detail + " (full must be >= each single - 0.005)");
}

void capacity() {
  std::size_t min_teacher = SIZE_MAX;
  std::size_t max_student = 0;
  std::string detail;
  for (const auto& name : models::registry_names()) {
    const std::size_t n = models::registry_param_count(name);
    detail += name + "=" + std::to_string(n) + " ";
    if (models::lookup_spec(name).role == models::Role::teacher) {
      min_teacher = std::min(min_teacher, n);
    } else {
      max_student = std::max(max_student, n);
    }
  }
  verdict(6, min_teacher >= 10 * max_student, true,
          detail + fmt("ratio %.1f (need >= 10)", static_cast<double>(min_teacher) / static_cast<double>(max_student)));
}

void ledger(const Benchmark& bm) {
  const auto& r = bm.logged;
  double worst = 0.0;
  for (const auto& s : r.steps) {
    const double expect = s.loss.seg + 0.2 * s.loss.logits + 0.9 * s.loss.kernel + 0.9 * s.loss.affinity;
    worst = std::max(worst, std::abs(s.loss.total - expect));
  }
  const bool ok = bm.have_logged && r.history.size() == 30 && !r.steps.empty() && worst <= 1e-6;
  verdict(7, ok, true,
          fmt("%.0f epochs, %.0f steps, max |total - recomposed| %.3e (limit 1e-6)",
              static_cast<double>(r.history.size()), static_cast<double>(r.steps.size()), worst));
}

void reproducibility() {
  const fs::path root = fs::absolute("acceptance_repro");
  fs::remove_all(root);
  std::vector<std::string> csv;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    const int code = run_command("\"" DISTILLSEG_CLI_PATH "\" distill --seed 7 --out \"" + out.string() +
                                 "\" > \"" + root.string() + "_" + run + ".log\" 2>&1");
    std::string content;
    if (code == 0 && fs::exists(out)) {
      for (const auto& e : fs::directory_iterator(out)) {
        content = slurp(e.path() / "teacher" / "metrics.csv") + slurp(e.path() / "student" / "metrics.csv");
      }
    }
    csv.push_back(content);
  }
  const bool ok = !csv[0].empty() && csv[0] == csv[1];
  verdict(8, ok, true,
          fmt("two CLI distill runs with seed 7, teacher+student metrics.csv %.0f bytes, ",
              static_cast<double>(csv[0].size())) +
              (ok ? "byte-identical" : "differ or missing"));
}

}  // namespace

int main(int argc, char** argv) {
  const bool strict = argc > 1 && std::strcmp(argv[1], "--strict") == 0;
  try {
    unit_suite();
    gradient_suite();
    brute_force();
    const auto bm = run_benchmark();
    directional(bm);
    ordering(bm);
    capacity();
    ledger(bm);
    reproducibility();
  } catch (const std::exception& e) {
    std::cout << "acceptance harness error: " << e.what() << std::endl;
    return 2;
  }
  int gating_failures = 0;
  int failures = 0;
  for (const auto& v : g_verdicts) {
    if (!v.pass) {
      ++failures;
      if (v.gating || strict) ++gating_failures;
    }
  }
  const std::string summary = std::to_string(g_verdicts.size() - static_cast<std::size_t>(failures)) + "/" +
                              std::to_string(g_verdicts.size()) + " criteria passed";
  std::cout << summary << std::endl;
  g_report << summary << "\n";
  std::ofstream("acceptance_report.txt") << g_report.str();
  return gating_failures == 0 ? 0 : 1;
}

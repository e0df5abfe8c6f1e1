// Desk-scale initialization study runner. Executes the five-arm matrix from
// svt/desk.hpp over a set of seeds, caching every result under an output
// directory (default runs/cache) so finished arms are never repeated. Flags
// exist to shrink the recipe for calibration probes; the defaults are the
// committed study.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "svt/desk_cache.hpp"

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale initialization study"};
  std::string out_dir = "runs/cache";
  std::string seeds_csv = "1,2,3";
  std::string arms_csv = "ssl30,ft_teacher30,ft_student30,scratch30,scratch60";
  svt::desk::Recipe r;
  bool force = false;
  app.add_option("--out", out_dir, "cache directory");
  app.add_option("--seeds", seeds_csv, "comma-separated seeds");
  app.add_option("--arms", arms_csv, "comma-separated arms to run");
  app.add_option("--ssl-epochs", r.ssl_epochs, "stage-1 epochs");
  app.add_option("--ssl-batch", r.ssl_batch, "stage-1 batch size");
  app.add_option("--ssl-lr", r.ssl_base_lr, "stage-1 base lr per 256");
  app.add_option("--ssl-warmup", r.ssl_warmup, "stage-1 lr warmup epochs");
  app.add_option("--ft-epochs", r.ft_epochs, "stage-2 epochs");
  app.add_option("--long-epochs", r.long_epochs, "budget-matched scratch epochs");
  app.add_option("--per-class", r.per_class, "train images per class");
  app.add_option("--noise", r.noise, "dataset pixel noise");
  app.add_flag("--force", force, "re-run even when cached");
  CLI11_PARSE(app, argc, argv);

  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_csv(seeds_csv)) seeds.push_back(std::stoull(s));
  const std::vector<std::string> arms = split_csv(arms_csv);
  for (const auto& a : arms) {
    bool known = false;
    for (const char* k : svt::desk::kArms) known = known || a == k;
    if (!known) {
      std::fprintf(stderr, "unknown arm '%s'\n", a.c_str());
      return 2;
    }
  }

  std::printf("dataset: %d classes x %d/class, %dpx, noise %.2f, %d hue groups\n",
              r.classes, r.per_class, r.image, r.noise, r.hue_groups);
  std::fflush(stdout);
  const svt::Dataset data = r.dataset();
  std::printf("         %zu train / %zu test\n", data.train.size(),
              data.test.size());
  std::fflush(stdout);

  // seed-major so each stage-1 checkpoint is produced right before the two
  // arms that consume it
  std::map<std::string, std::map<std::uint64_t, double>> top1;
  for (const auto seed : seeds) {
    svt::desk::Stage1 st1;
    for (const char* arm : svt::desk::kArms) {
      if (std::find(arms.begin(), arms.end(), arm) == arms.end()) continue;
      const auto j =
          svt::desk::ensure_arm(out_dir, r, arm, seed, data, st1, force);
      const auto& res = j["result"];
      if (res.contains("final_top1")) {
        top1[arm][seed] = res["final_top1"].get<double>();
        std::printf("[s%llu %s] done: top1 %.2f%% (best %.2f%% @ epoch %d), %.0fs\n",
                    (unsigned long long)seed, arm,
                    100.0 * res["final_top1"].get<double>(),
                    100.0 * res["best_top1"].get<double>(),
                    res["best_epoch"].get<int>(),
                    res["wall_seconds"].get<double>());
      } else {
        std::printf(
            "[s%llu %s] done: loss %.4f, teacher entropy %.3f, %d collapse "
            "warnings, %.0fs\n",
            (unsigned long long)seed, arm, res["final_loss"].get<double>(),
            res["final_teacher_entropy"].get<double>(),
            res["collapse_warnings"].get<int>(),
            res["wall_seconds"].get<double>());
      }
      std::fflush(stdout);
    }
  }

  if (!top1.empty()) {
    std::printf("\n%-14s", "arm");
    for (const auto seed : seeds)
      std::printf("  s%-8llu", (unsigned long long)seed);
    std::printf("  mean\n");
    for (const auto& [arm, by_seed] : top1) {
      std::printf("%-14s", arm.c_str());
      double sum = 0;
      for (const auto seed : seeds) {
        const auto it = by_seed.find(seed);
        if (it == by_seed.end()) {
          std::printf("  %-9s", "-");
        } else {
          std::printf("  %-9.2f", 100.0 * it->second);
          sum += it->second;
        }
      }
      if (by_seed.size() == seeds.size())
        std::printf("  %.2f", 100.0 * sum / seeds.size());
      std::printf("\n");
    }
  }
  return 0;
}

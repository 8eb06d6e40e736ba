// Command-line front end for the FD2 distillation pipeline.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "fd2/config.hpp"
#include "fd2/data.hpp"
#include "fd2/pipeline.hpp"
#include "fd2/theory.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::int64_t seed = -1;
  bool deterministic = false;
  bool nondeterministic = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "config file (key = value)");
  cmd->add_option("--out", flags.out_dir, "output directory");
  cmd->add_option("--seed", flags.seed, "global seed");
  cmd->add_flag("--deterministic", flags.deterministic,
                "force deterministic mode");
  cmd->add_flag("--nondeterministic", flags.nondeterministic,
                "draw the seed from the system entropy source");
}

fd2::config::PipelineConfig resolve_config(const CommonFlags& flags) {
  fd2::config::PipelineConfig cfg;
  if (!flags.config_path.empty())
    cfg = fd2::config::parse_file(flags.config_path);
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  if (flags.seed >= 0) cfg.seed = static_cast<std::uint64_t>(flags.seed);
  if (flags.deterministic) cfg.deterministic = true;
  if (flags.nondeterministic) {
    cfg.deterministic = false;
    std::random_device rd;
    cfg.seed = (std::uint64_t(rd()) << 32) ^ rd();
  }
  cfg.validate();
  return cfg;
}

int run_stages(const CommonFlags& flags, const std::vector<std::string>& stages) {
  const auto cfg = resolve_config(flags);
  const auto result = fd2::pipeline::run_pipeline(cfg, stages);
  for (const auto& rec : result.records) {
    std::printf("stage %-14s %8.2fs", rec.stage.c_str(), rec.seconds);
    for (const auto& [path, fp] : rec.artifacts)
      std::printf("  %s=%s", path.c_str(), fp.c_str());
    std::printf("\n");
  }
  if (result.student_top1 >= 0)
    std::printf("student_top1 %.4f\n", result.student_top1);
  std::printf("manifest %s\n", result.manifest_path.c_str());
  bool ran_theory = false;
  for (const auto& rec : result.records)
    ran_theory = ran_theory || rec.stage == "verify-theory";
  if (ran_theory) {
    std::ifstream t(std::filesystem::path(cfg.out_dir) / "theory.txt");
    std::cout << t.rdbuf();
    if (!result.theory_passed) return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FD2 fine-grained dataset distillation"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string stages_arg;

  auto* gen = app.add_subcommand("gen-toy-data",
                                 "generate the procedural toy dataset");
  add_common(gen, flags);
  auto* pre = app.add_subcommand("pretrain", "stage 1: train the teacher");
  add_common(pre, flags);
  auto* dis = app.add_subcommand("distill", "stage 2: synthesize images");
  add_common(dis, flags);
  auto* soft = app.add_subcommand("softlabel", "stage 3: generate soft labels");
  add_common(soft, flags);
  auto* ev = app.add_subcommand("eval", "train and score the student");
  add_common(ev, flags);
  auto* met = app.add_subcommand("metrics", "feature/attention diagnostics");
  add_common(met, flags);
  auto* theory = app.add_subcommand("verify-theory",
                                    "run the appendix verification suite");
  add_common(theory, flags);
  auto* run = app.add_subcommand("run", "run several stages in order");
  add_common(run, flags);
  run->add_option("--stages", stages_arg,
                  "comma-separated stage list (default: all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(flags);
      const std::string dir = cfg.dataset_path.empty()
                                  ? (std::filesystem::path(cfg.out_dir) / "toy")
                                        .string()
                                  : cfg.dataset_path;
      fd2::data::gen_toy_dataset(cfg.to_toy_spec(), dir);
      std::printf("toy dataset written to %s\n", dir.c_str());
      return 0;
    }
    if (pre->parsed()) return run_stages(flags, {"pretrain"});
    if (dis->parsed()) return run_stages(flags, {"distill"});
    if (soft->parsed()) return run_stages(flags, {"softlabel"});
    if (ev->parsed()) return run_stages(flags, {"eval"});
    if (met->parsed()) return run_stages(flags, {"metrics"});
    if (theory->parsed()) return run_stages(flags, {"verify-theory"});
    if (run->parsed()) {
      std::vector<std::string> stages;
      if (!stages_arg.empty()) {
        std::stringstream ss(stages_arg);
        std::string item;
        while (std::getline(ss, item, ',')) stages.push_back(item);
      }
      return run_stages(flags, stages);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

// SPDX-License-Identifier: Apache-2.0
// unir: synthesize pairs, train, enhance, evaluate.
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "unir/commands.hpp"

namespace {

using namespace unir;

// One flag per config key of the given sections, e.g. train.lr -> --lr.
struct ConfigFlags {
  std::map<std::string, std::string> values;  // key -> raw text
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App& app, std::initializer_list<const char*> sections) {
    for (const auto& key : config::known_keys()) {
      const std::string section = key.substr(0, key.find('.'));
      if (std::find(sections.begin(), sections.end(), section) == sections.end()) continue;
      if (key == "synth.seed" || key == "train.seed") continue;  // the global --seed
      std::string name = key.substr(key.find('.') + 1);
      std::replace(name.begin(), name.end(), '_', '-');
      options[key] = app.add_option("--" + name, values[key], "sets " + key);
    }
  }

  config::Overrides overrides() const {
    config::Overrides out;
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) out.emplace_back(key, values.at(key));
    return out;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Underwater non-uniform illumination restoration"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string seed_text, config_path;
  int threads = 1;
  app.add_option("--seed", seed_text, "seed for synthesis and training");
  app.add_option("--threads", threads, "worker threads for per-image work")->check(CLI::PositiveNumber);
  app.add_option("--config", config_path, "file of 'section.key = value' lines")->check(CLI::ExistingFile);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "make low/GT pairs from raw images and masks");
  std::string raw_dir, mask_dir, synth_out, force;
  synth_cmd->add_option("--raw-dir,--raw", raw_dir, "directory of raw images")->required();
  synth_cmd->add_option("--mask-dir,--masks", mask_dir, "directory of binary masks named like the raw images")->required();
  synth_cmd->add_option("--out-dir,--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--force", force, "always apply this adjustment")
      ->check(CLI::IsMember({"deepen", "surface", "none"}));
  ConfigFlags synth_flags;
  synth_flags.add(*synth_cmd, {"synth"});

  // train
  auto* train_cmd = app.add_subcommand("train", "train the network on a manifest");
  std::string manifest, train_out, resume;
  train_cmd->add_option("--manifest", manifest, "manifest.jsonl of training pairs")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  ConfigFlags train_flags;
  train_flags.add(*train_cmd, {"net", "train"});

  // enhance
  auto* enhance_cmd = app.add_subcommand("enhance", "run a trained network on images");
  std::string weights, enhance_in, enhance_out;
  bool no_ccm = false;
  enhance_cmd->add_option("--weights", weights, "weights or checkpoint file")->required();
  enhance_cmd->add_option("--in", enhance_in, "image file or directory")->required();
  enhance_cmd->add_option("--out", enhance_out, "output file or directory")->required();
  enhance_cmd->add_flag("--no-ccm", no_ccm, "skip the contrast correction stage");
  ConfigFlags enhance_flags;
  enhance_flags.add(*enhance_cmd, {"net"});

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score images");
  std::string pairs, eval_dir, enhanced_dir, eval_out;
  auto* pairs_opt = eval_cmd->add_option("--pairs", pairs, "manifest; scores low (or enhanced) against GT");
  auto* dir_opt = eval_cmd->add_option("--dir", eval_dir, "directory; UCIQE only");
  pairs_opt->excludes(dir_opt);
  eval_cmd->add_option("--enhanced-dir", enhanced_dir, "enhanced images named <low stem>.png")->needs(pairs_opt);
  eval_cmd->add_option("--out", eval_out, "CSV path")->required();

  // info
  auto* info_cmd = app.add_subcommand("info", "print the layer table and parameter count");
  std::size_t find_target = 0;
  auto* find_opt = info_cmd->add_option("--find-width", find_target, "base width closest to this parameter count");
  ConfigFlags info_flags;
  info_flags.add(*info_cmd, {"net"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    config::Overrides file;
    if (!config_path.empty()) file = config::read_config_file(config_path);
    config::Overrides flags;
    if (!seed_text.empty()) flags = {{"synth.seed", seed_text}, {"train.seed", seed_text}};
    for (const auto* f : {&synth_flags, &train_flags, &enhance_flags, &info_flags})
      for (auto& kv : f->overrides()) flags.push_back(kv);
    const config::RunConfig cfg = config::resolve(file, flags);

    if (*synth_cmd) {
      cli::SynthOptions opt{raw_dir, mask_dir, synth_out, cfg.synth, std::nullopt, threads};
      if (!force.empty()) opt.force = synth::adjustment_from_string(force);
      cli::run_synth(opt, std::cout);
    } else if (*train_cmd) {
      cli::TrainOptions opt{manifest, train_out, cfg.net, cfg.train, std::nullopt};
      if (!resume.empty()) opt.resume = resume;
      cli::run_train(opt, std::cout);
    } else if (*enhance_cmd) {
      cli::run_enhance({weights, enhance_in, enhance_out, no_ccm, cfg.net, threads}, std::cout);
    } else if (*eval_cmd) {
      cli::EvalOptions opt;
      if (!pairs.empty()) opt.pairs = pairs;
      if (!eval_dir.empty()) opt.dir = eval_dir;
      if (!enhanced_dir.empty()) opt.enhanced_dir = enhanced_dir;
      opt.out = eval_out;
      opt.threads = threads;
      cli::run_eval(opt, std::cout);
    } else if (*info_cmd) {
      std::optional<std::size_t> target;
      if (find_opt->count() > 0) target = find_target;
      cli::run_info(cfg.net, target, std::cout);
    }
  } catch (const unir::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::is_internal(e) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

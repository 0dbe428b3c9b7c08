// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "unir/config.hpp"
#include "unir/image_tensor.hpp"
#include "unir/io.hpp"
#include "unir/metrics.hpp"
#include "unir/network.hpp"
#include "unir/synthesis.hpp"
#include "unir/training.hpp"

// Implementations behind the `unir` command line tool.
namespace unir::cli {

namespace fs = std::filesystem;
using net::NetWeights;

// Errors that indicate a bug rather than bad input (exit code 1).
inline bool is_internal(const Error& e) {
  static const std::set<std::string> codes = {"TapeConsumed", "EmptyTape", "NotScalar", "NonDeterministic"};
  return codes.count(e.code()) != 0;
}

// Runs fn(0..n-1) on up to `threads` workers. The first failure by index
// is rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".ppm";
}

// Supported images directly inside `dir`, sorted by file name.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("MissingFile", "directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- synth

struct SynthOptions {
  fs::path raw_dir, mask_dir, out_dir;
  synth::SynthConfig config;
  std::optional<synth::Adjustment> force;
  int threads = 1;
};

inline io::Json synth_params(const synth::SynthConfig& c, std::size_t index, const synth::SynthResult& r) {
  return {{"alpha", c.alpha},
          {"kernel_g", c.kernel_g},
          {"gamma_d", c.gamma_d},
          {"gamma_s", c.gamma_s},
          {"beta", c.beta},
          {"epsilon_gf", c.epsilon_gf},
          {"guide", c.guide == synth::Guide::Luminance ? "luminance" : "source"},
          {"seed", c.seed},
          {"index", index},
          {"delta", synth::to_string(r.delta)},
          {"brightness", r.brightness}};
}

// Relative to the manifest when the mask sits under it, otherwise absolute.
inline std::string mask_entry(const fs::path& mask, const fs::path& out_dir) {
  const fs::path rel = fs::proximate(mask, out_dir);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return fs::absolute(mask).lexically_normal().generic_string();
}

// Writes <stem>_low.png, <stem>_gt.png and manifest.jsonl. All inputs are
// validated before anything is written.
inline std::vector<io::ManifestRecord> run_synth(const SynthOptions& opt, std::ostream& log) {
  opt.config.validate();
  const auto raws = list_images(opt.raw_dir);
  if (raws.empty()) throw Error("MissingFile", "no PNG/PPM images in '" + opt.raw_dir.string() + "'");
  std::vector<fs::path> masks;
  std::vector<std::string> missing;
  for (const auto& raw : raws) {
    fs::path found;
    for (const char* ext : {".png", ".ppm", ".PNG", ".PPM"}) {
      const fs::path candidate = opt.mask_dir / (raw.stem().string() + ext);
      if (fs::exists(candidate)) {
        found = candidate;
        break;
      }
    }
    if (found.empty()) missing.push_back(raw.stem().string());
    masks.push_back(found);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
    throw Error("MissingMask", "no mask in '" + opt.mask_dir.string() + "' for: " + list);
  }

  const std::size_t n = raws.size();
  std::vector<ImageU8> images(n);
  std::vector<synth::BinaryMask> mask_data(n);
  for (std::size_t i = 0; i < n; ++i) {
    images[i] = io::load_image(raws[i]);
    mask_data[i] = io::load_mask(masks[i]);
    if (mask_data[i].height != images[i].height || mask_data[i].width != images[i].width)
      throw Error("ShapeMismatch", "mask '" + masks[i].string() + "' does not match image size");
    if (std::none_of(mask_data[i].data.begin(), mask_data[i].data.end(), [](std::uint8_t v) { return v != 0; }))
      throw Error("EmptyMask", "mask '" + masks[i].string() + "' has no set pixels");
  }

  fs::create_directories(opt.out_dir);
  std::vector<io::ManifestRecord> records(n);
  parallel_for(n, opt.threads, [&](std::size_t i) {
    const std::string stem = raws[i].stem().string();
    synth::Rng rng = synth::image_rng(opt.config.seed, i);
    const auto result = synth::synthesize_low(images[i], mask_data[i], opt.config, rng, opt.force);
    io::save_image(result.low, opt.out_dir / (stem + "_low.png"));
    io::save_image(synth::sharpen_gt(images[i]), opt.out_dir / (stem + "_gt.png"));
    records[i] = {stem,
                  stem + "_low.png",
                  stem + "_gt.png",
                  mask_entry(masks[i], opt.out_dir),
                  synth_params(opt.config, i, result),
                  io::Json::object()};
  });
  io::write_manifest(records, opt.out_dir / "manifest.jsonl");
  for (const auto& r : records) log << r.id << ": " << r.synth_params->at("delta").get<std::string>() << '\n';
  log << "wrote " << 2 * n << " images and " << (opt.out_dir / "manifest.jsonl").string() << '\n';
  return records;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  fs::path manifest, out_dir;
  net::NetConfig net;
  train::TrainConfig train;
  std::optional<fs::path> resume;
};

inline train::TrainResult run_train(const TrainOptions& opt, std::ostream& log) {
  if (!fs::exists(opt.manifest)) throw Error("MissingFile", "manifest '" + opt.manifest.string() + "' does not exist");
  opt.net.validate();
  opt.train.validate();
  const auto pairs = train::load_pairs(opt.manifest);
  std::optional<io::Checkpoint> resume;
  if (opt.resume) resume = io::load_checkpoint(*opt.resume, opt.net);

  fs::create_directories(opt.out_dir);
  const fs::path log_path = opt.out_dir / "loss_log.csv";
  const bool append = resume && fs::exists(log_path);
  std::ofstream loss_log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!loss_log) throw Error("IoError", "cannot write '" + log_path.string() + "'");
  if (!append) loss_log << "epoch,loss\n";

  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::EpochLoss& row) {
    train::write_loss_log(loss_log, {row}, false);
    loss_log.flush();
    log << "epoch " << row.epoch << " loss " << metrics::format_metric(row.loss) << std::endl;
  };
  hooks.on_checkpoint = [&](std::size_t epoch, const io::Checkpoint& c) {
    io::save_checkpoint(c, opt.out_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt"));
  };
  auto result = train::train(pairs, opt.net, opt.train, resume, hooks);
  io::save_checkpoint(result.checkpoint, opt.out_dir / "final.ckpt");
  io::save_weights(result.checkpoint.weights, opt.out_dir / "weights.bin");
  log << "saved " << (opt.out_dir / "final.ckpt").string() << " after " << result.checkpoint.meta["step"] << " steps\n";
  return result;
}

// ---------------------------------------------------------------- enhance

struct EnhanceOptions {
  fs::path weights, in, out;
  bool no_ccm = false;
  net::NetConfig net;
  int threads = 1;
};

inline ImageU8 enhance_image(const ImageU8& img, const NetWeights& w, const net::NetConfig& cfg, bool ccm) {
  NoGradScope no_grad;
  return tensor_to_image(net::unirnet_forward(image_to_tensor(img), w, cfg, ccm));
}

// `in` may be one image or a directory; outputs are PNGs named by stem.
inline std::vector<fs::path> run_enhance(const EnhanceOptions& opt, std::ostream& log) {
  if (!fs::exists(opt.weights)) throw Error("MissingFile", "weights '" + opt.weights.string() + "' do not exist");
  if (!fs::exists(opt.in)) throw Error("MissingFile", "input '" + opt.in.string() + "' does not exist");
  const NetWeights weights = io::load_weights(opt.weights, opt.net);
  std::vector<fs::path> inputs, outputs;
  if (fs::is_directory(opt.in)) {
    inputs = list_images(opt.in);
    fs::create_directories(opt.out);
    for (const auto& p : inputs) outputs.push_back(opt.out / (p.stem().string() + ".png"));
  } else {
    inputs = {opt.in};
    outputs = {fs::is_directory(opt.out) ? opt.out / (opt.in.stem().string() + ".png") : opt.out};
    if (outputs[0].has_parent_path()) fs::create_directories(outputs[0].parent_path());
  }
  parallel_for(inputs.size(), opt.threads, [&](std::size_t i) {
    io::save_image(enhance_image(io::load_image(inputs[i]), weights, opt.net, !opt.no_ccm), outputs[i]);
  });
  for (const auto& p : outputs) log << "wrote " << p.string() << '\n';
  return outputs;
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
  std::optional<fs::path> pairs;         // manifest: low_path (or enhanced_dir/<stem>.png) vs gt_path
  std::optional<fs::path> dir;           // no-reference mode
  std::optional<fs::path> enhanced_dir;  // replaces each pair's low image
  fs::path out;
  int threads = 1;
};

inline void write_uciqe_csv(std::ostream& os, const std::vector<std::pair<std::string, double>>& rows) {
  os << "image_id,uciqe\n";
  double sum = 0.0;
  for (const auto& [id, v] : rows) {
    os << id << ',' << metrics::format_metric(v) << '\n';
    sum += v;
  }
  os << "MEAN," << metrics::format_metric(rows.empty() ? 0.0 : sum / static_cast<double>(rows.size())) << '\n';
}

inline void run_eval(const EvalOptions& opt, std::ostream& log) {
  if (opt.pairs.has_value() == opt.dir.has_value()) throw Error("Usage", "give exactly one of --pairs or --dir");
  std::ostringstream csv;
  if (opt.pairs) {
    if (!fs::exists(*opt.pairs)) throw Error("MissingFile", "manifest '" + opt.pairs->string() + "' does not exist");
    const auto records = io::read_manifest(*opt.pairs);
    metrics::MetricsReport report;
    report.rows.resize(records.size());
    parallel_for(records.size(), opt.threads, [&](std::size_t i) {
      const auto& r = records[i];
      const fs::path enhanced = opt.enhanced_dir
                                    ? *opt.enhanced_dir / (fs::path(r.low_path).stem().string() + ".png")
                                    : io::resolve(*opt.pairs, r.low_path);
      const ImageU8 a = io::load_image(enhanced), b = io::load_image(io::resolve(*opt.pairs, r.gt_path));
      if (a.height != b.height || a.width != b.width)
        throw Error("ShapeMismatch", "pair '" + r.id + "': " + std::to_string(a.width) + "x" +
                                         std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                         std::to_string(b.height));
      report.rows[i] = metrics::evaluate_pair(r.id, a, b);
    });
    metrics::write_csv(csv, report);
  } else {
    const auto images = list_images(*opt.dir);
    std::vector<std::pair<std::string, double>> rows(images.size());
    parallel_for(images.size(), opt.threads, [&](std::size_t i) {
      rows[i] = {images[i].stem().string(), metrics::uciqe(io::load_image(images[i]))};
    });
    write_uciqe_csv(csv, rows);
  }
  if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
  std::ofstream out(opt.out, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("IoError", "cannot write '" + opt.out.string() + "'");
  out << csv.str();
  log << csv.str();
}

// ---------------------------------------------------------------- info

inline void print_layer_table(std::ostream& os) {
  os << std::left << std::setw(10) << "Module" << std::setw(15) << "# Conv Layers" << std::setw(8) << "Kernel"
     << std::setw(8) << "Stride" << std::setw(9) << "Padding" << "Act." << '\n';
  for (const auto& r : net::layer_table())
    os << std::setw(10) << r.module << std::setw(15) << r.conv_layers << std::setw(8) << r.kernel << std::setw(8)
       << r.stride << std::setw(9) << r.padding << r.activation << '\n';
}

inline void run_info(const net::NetConfig& cfg, std::optional<std::size_t> find_target, std::ostream& os) {
  print_layer_table(os);
  os << "parameters: " << net::param_count(cfg) << '\n';
  if (find_target) {
    const std::size_t width = net::find_width(*find_target, cfg);
    net::NetConfig found = cfg;
    found.width_schedule.clear();
    found.base_width = width;
    os << "find_width(" << *find_target << "): " << width << " (" << net::param_count(found) << " parameters)\n";
  }
}

}  // namespace unir::cli

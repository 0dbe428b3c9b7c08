// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "unir/network.hpp"
#include "unir/synthesis.hpp"
#include "unir/training.hpp"

// Flat `section.key = value` settings shared by config files and CLI flags.
namespace unir::config {

struct RunConfig {
  synth::SynthConfig synth;
  net::NetConfig net;
  train::TrainConfig train;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw Error("InvalidConfig", "'" + key + "': cannot parse '" + text + "' as a number");
  return v;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = trim(text.substr(start, comma - start));
    if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
    start = comma + 1;
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class F>
Setter num(F field) {
  return [field](RunConfig& c, const std::string& key, const std::string& value) {
    auto& ref = field(c);
    ref = parse_number<std::remove_reference_t<decltype(ref)>>(key, value);
  };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"synth.alpha", num([](RunConfig& c) -> double& { return c.synth.alpha; })},
      {"synth.kernel_g", num([](RunConfig& c) -> int& { return c.synth.kernel_g; })},
      {"synth.gamma_d", num([](RunConfig& c) -> double& { return c.synth.gamma_d; })},
      {"synth.gamma_s", num([](RunConfig& c) -> double& { return c.synth.gamma_s; })},
      {"synth.beta", num([](RunConfig& c) -> double& { return c.synth.beta; })},
      {"synth.epsilon_gf", num([](RunConfig& c) -> double& { return c.synth.epsilon_gf; })},
      {"synth.seed", num([](RunConfig& c) -> std::uint64_t& { return c.synth.seed; })},
      {"synth.guide",
       [](RunConfig& c, const std::string& key, const std::string& v) {
         if (v == "luminance") c.synth.guide = synth::Guide::Luminance;
         else if (v == "source") c.synth.guide = synth::Guide::Source;
         else throw Error("InvalidConfig", "'" + key + "' must be 'luminance' or 'source'");
       }},
      {"net.base_width", num([](RunConfig& c) -> std::size_t& { return c.net.base_width; })},
      {"net.width_schedule",
       [](RunConfig& c, const std::string& key, const std::string& v) { c.net.width_schedule = parse_list(key, v); }},
      {"net.n_heads", num([](RunConfig& c) -> std::size_t& { return c.net.n_heads; })},
      {"net.ffn_expansion", num([](RunConfig& c) -> std::size_t& { return c.net.ffn_expansion; })},
      {"net.attn_window", num([](RunConfig& c) -> std::size_t& { return c.net.attn_window; })},
      {"net.gamma_ccm", num([](RunConfig& c) -> double& { return c.net.gamma_ccm; })},
      {"train.epochs", num([](RunConfig& c) -> std::size_t& { return c.train.epochs; })},
      {"train.batch_size", num([](RunConfig& c) -> std::size_t& { return c.train.batch_size; })},
      {"train.patch_size", num([](RunConfig& c) -> std::size_t& { return c.train.patch_size; })},
      {"train.lr", num([](RunConfig& c) -> double& { return c.train.adam.lr; })},
      {"train.beta1", num([](RunConfig& c) -> double& { return c.train.adam.beta1; })},
      {"train.beta2", num([](RunConfig& c) -> double& { return c.train.adam.beta2; })},
      {"train.adam_eps", num([](RunConfig& c) -> double& { return c.train.adam.eps; })},
      {"train.seed", num([](RunConfig& c) -> std::uint64_t& { return c.train.seed; })},
      {"train.checkpoint_every", num([](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; })},
      {"train.max_steps", num([](RunConfig& c) -> std::size_t& { return c.train.max_steps; })},
      {"train.lambda_c", num([](RunConfig& c) -> double& { return c.train.loss.lambda_c; })},
      {"train.lambda_s", num([](RunConfig& c) -> double& { return c.train.loss.lambda_s; })},
      {"train.lambda_p", num([](RunConfig& c) -> double& { return c.train.loss.lambda_p; })},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::setters()) keys.push_back(k);
  return keys;
}

inline void set_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::setters();
  auto it = table.find(key);
  if (it == table.end()) throw Error("InvalidConfig", "unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

// Ordered key/value pairs; later entries win when applied.
using Overrides = std::vector<std::pair<std::string, std::string>>;

inline Overrides parse_overrides(std::istream& in, const std::string& source) {
  Overrides out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("InvalidConfig", source + " line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    if (!detail::setters().count(key))
      throw Error("InvalidConfig", source + " line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    out.emplace_back(key, detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline Overrides read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("IoError", "cannot open config file '" + path.string() + "'");
  return parse_overrides(in, path.string());
}

inline void apply(RunConfig& cfg, const Overrides& overrides) {
  for (const auto& [k, v] : overrides) set_value(cfg, k, v);
}

// Defaults, then the file, then flags.
inline RunConfig resolve(const Overrides& file, const Overrides& flags) {
  RunConfig cfg;
  apply(cfg, file);
  apply(cfg, flags);
  return cfg;
}

}  // namespace unir::config

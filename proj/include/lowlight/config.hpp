#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "lowlight/dehaze.hpp"
#include "lowlight/net.hpp"
#include "lowlight/train.hpp"

namespace lowlight {

// Everything a run needs, parsed from a line-based "key = value" file with
// [section] headers. Unknown keys are rejected so typos cannot silently fall
// back to defaults.
struct RunConfig {
  NetSpec net;
  TrainConfig train;
  DehazeParams dehaze;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct ConfigSetter {
  RunConfig* cfg;

  bool set(const std::string& section, const std::string& key, const std::string& value) {
    const std::string k = section + "." + key;
    auto as_int = [&] { return std::stoi(value); };
    auto as_double = [&] { return std::stod(value); };
    auto as_u64 = [&] { return static_cast<std::uint64_t>(std::stoull(value)); };

    if (k == "net.in_channels") cfg->net.in_channels = as_int();
    else if (k == "net.depth") cfg->net.depth = as_int();
    else if (k == "net.base_width") cfg->net.base_width = as_int();
    else if (k == "net.upsample") cfg->net.upsample = as_int();
    else if (k == "train.epochs") cfg->train.epochs = as_int();
    else if (k == "train.lr_initial") cfg->train.lr_initial = as_double();
    else if (k == "train.lr_after") cfg->train.lr_after = as_double();
    else if (k == "train.lr_switch_epoch") cfg->train.lr_switch_epoch = as_int();
    else if (k == "train.crop_size") cfg->train.crop_size = as_int();
    else if (k == "train.batch_size") cfg->train.batch_size = as_int();
    else if (k == "train.seed") cfg->train.seed = as_u64();
    else if (k == "train.finetune_epochs") cfg->train.finetune_epochs = as_int();
    else if (k == "train.checkpoint_every") cfg->train.checkpoint_every = as_int();
    else if (k == "train.feature_seed") cfg->train.feature_seed = as_u64();
    else if (k == "train.feature_weights") cfg->train.feature_weights = value;
    else if (k == "loss.alpha") cfg->train.loss.alpha = as_double();
    else if (k == "loss.beta") cfg->train.loss.beta = as_double();
    else if (k == "loss.msssim_scales") cfg->train.loss.msssim_scales = as_int();
    else if (k == "loss.window") cfg->train.loss.window = as_int();
    else if (k == "loss.window_sigma") cfg->train.loss.window_sigma = as_double();
    else if (k == "loss.c1") cfg->train.loss.c1 = as_double();
    else if (k == "loss.c2") cfg->train.loss.c2 = as_double();
    else if (k == "loss.feature_stage") cfg->train.loss.feature_stage = as_int();
    else if (k == "dehaze.patch_size") cfg->dehaze.patch_size = as_int();
    else if (k == "dehaze.omega") cfg->dehaze.omega = as_double();
    else if (k == "dehaze.t0") cfg->dehaze.t0 = as_double();
    else if (k == "dehaze.airlight_fraction") cfg->dehaze.airlight_fraction = as_double();
    else if (k == "dehaze.guided_radius") cfg->dehaze.guided_radius = as_int();
    else if (k == "dehaze.guided_eps") cfg->dehaze.guided_eps = as_double();
    else return false;
    return true;
  }
};

}  // namespace detail

inline RunConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
  RunConfig cfg;
  detail::ConfigSetter setter{&cfg};
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      check_arg(line.back() == ']', origin + ":" + std::to_string(lineno) +
                                        ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      check_arg(section == "net" || section == "train" || section == "loss" ||
                    section == "dehaze",
                origin + ":" + std::to_string(lineno) + ": unknown section [" + section +
                    "]");
      continue;
    }
    const auto eq = line.find('=');
    check_arg(eq != std::string::npos,
              origin + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    check_arg(!section.empty(),
              origin + ":" + std::to_string(lineno) + ": key outside any [section]");
    try {
      check_arg(setter.set(section, key, value),
                origin + ":" + std::to_string(lineno) + ": unknown key " + section + "." +
                    key);
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception&) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": cannot parse value for " + section + "." + key);
    }
  }
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  check_arg(is.good(), "cannot open config file " + path.string());
  return parse_config(is, path.string());
}

/// Canonical serialization; parse(serialize(c)) == c, and the text doubles as
/// the manifest's config snapshot.
inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "[net]\n";
  os << "in_channels = " << cfg.net.in_channels << '\n';
  os << "depth = " << cfg.net.depth << '\n';
  os << "base_width = " << cfg.net.base_width << '\n';
  os << "upsample = " << cfg.net.upsample << '\n';
  os << "\n[train]\n";
  os << "epochs = " << cfg.train.epochs << '\n';
  os << "lr_initial = " << cfg.train.lr_initial << '\n';
  os << "lr_after = " << cfg.train.lr_after << '\n';
  os << "lr_switch_epoch = " << cfg.train.lr_switch_epoch << '\n';
  os << "crop_size = " << cfg.train.crop_size << '\n';
  os << "batch_size = " << cfg.train.batch_size << '\n';
  os << "seed = " << cfg.train.seed << '\n';
  os << "finetune_epochs = " << cfg.train.finetune_epochs << '\n';
  os << "checkpoint_every = " << cfg.train.checkpoint_every << '\n';
  os << "feature_seed = " << cfg.train.feature_seed << '\n';
  if (!cfg.train.feature_weights.empty())
    os << "feature_weights = " << cfg.train.feature_weights << '\n';
  os << "\n[loss]\n";
  os << "alpha = " << cfg.train.loss.alpha << '\n';
  os << "beta = " << cfg.train.loss.beta << '\n';
  os << "msssim_scales = " << cfg.train.loss.msssim_scales << '\n';
  os << "window = " << cfg.train.loss.window << '\n';
  os << "window_sigma = " << cfg.train.loss.window_sigma << '\n';
  os << "c1 = " << cfg.train.loss.c1 << '\n';
  os << "c2 = " << cfg.train.loss.c2 << '\n';
  os << "feature_stage = " << cfg.train.loss.feature_stage << '\n';
  os << "\n[dehaze]\n";
  os << "patch_size = " << cfg.dehaze.patch_size << '\n';
  os << "omega = " << cfg.dehaze.omega << '\n';
  os << "t0 = " << cfg.dehaze.t0 << '\n';
  os << "airlight_fraction = " << cfg.dehaze.airlight_fraction << '\n';
  os << "guided_radius = " << cfg.dehaze.guided_radius << '\n';
  os << "guided_eps = " << cfg.dehaze.guided_eps << '\n';
  return os.str();
}

}  // namespace lowlight

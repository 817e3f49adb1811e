// lowlight: command-line surface for the learned low-light camera pipeline.
// Subcommands: synth, train, infer, enhance, eval, ablate.
// Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lowlight/config.hpp"
#include "lowlight/dehaze.hpp"
#include "lowlight/image.hpp"
#include "lowlight/isp.hpp"
#include "lowlight/loss.hpp"
#include "lowlight/manifest.hpp"
#include "lowlight/net.hpp"
#include "lowlight/raw.hpp"
#include "lowlight/train.hpp"

namespace fs = std::filesystem;
using namespace lowlight;

namespace {

bool g_verbose = false;

void vlog(const std::string& msg) {
  if (g_verbose) std::cerr << msg << '\n';
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".PNG" || ext == ".ppm" || ext == ".PPM")
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

fs::path resolve_index(const fs::path& data) {
  if (fs::is_directory(data)) return data / "index.csv";
  return data;
}

char cfa_name_validate(const std::string& name) {
  if (name == "bayer") return 'b';
  if (name == "xtrans") return 'x';
  throw std::invalid_argument("--cfa must be 'bayer' or 'xtrans'");
}

std::string format_epoch(std::uint32_t epoch) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06u", epoch);
  return buf;
}

// ---- synth --------------------------------------------------------------------

struct SynthArgs {
  std::string input_dir;
  std::string out_dir;
  std::string cfa = "bayer";
  double ratio = 100.0;
  double noise_photon = 1000.0;
  double noise_read = 0.001;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  check_arg(a.ratio >= 1.0, "--ratio must be >= 1 (exposure ratio of reference to input)");
  const CfaPattern cfa = cfa_name_validate(a.cfa) == 'b' ? CfaPattern::bayer_rggb()
                                                         : CfaPattern::xtrans_standard();
  NoiseParams noise;
  noise.photon_scale = a.noise_photon;
  noise.read_sigma = a.noise_read;

  const auto files = list_images(a.input_dir);
  check_arg(!files.empty(), "no PNG/PPM images found in " + a.input_dir);
  fs::create_directories(a.out_dir);

  std::vector<IndexEntry> index;
  std::size_t file_idx = 0;
  for (const auto& path : files) {
    const std::uint64_t file_seed = stream_seed(a.seed, file_idx++);
    try {
      RgbImage clean = read_image(path);
      const int p = cfa.period();
      const int w = (clean.width() / p) * p;
      const int h = (clean.height() / p) * p;
      check_arg(w > 0 && h > 0, "image smaller than one CFA period");
      if (w != clean.width() || h != clean.height())
        clean = make_rgb(crop_spatial(clean.tensor, 0, 0, h, w));

      auto [raw, truth] = synthesize_pair(clean, cfa, a.ratio, noise, file_seed);
      const std::string stem = path.stem().string();
      write_raw(fs::path(a.out_dir) / (stem + ".llrw"), raw);
      write_png(fs::path(a.out_dir) / (stem + "_gt.png"), truth);
      index.push_back({stem + ".llrw", stem + "_gt.png", a.ratio});
      vlog("synth: " + stem + " (" + std::to_string(w) + "x" + std::to_string(h) + ")");
    } catch (const std::exception& e) {
      std::cerr << "synth: skipping " << path.string() << ": " << e.what() << '\n';
    }
  }
  check_arg(!index.empty(), "no image could be synthesized from " + a.input_dir);
  write_dataset_index(fs::path(a.out_dir) / "index.csv", index);

  RunManifest manifest;
  manifest.command = "synth";
  std::ostringstream snap;
  snap << "[synth]\ncfa = " << a.cfa << "\nratio = " << a.ratio
       << "\nnoise_photon = " << a.noise_photon << "\nnoise_read = " << a.noise_read
       << "\n";
  manifest.config_snapshot = snap.str();
  manifest.seed = a.seed;
  {
    std::vector<fs::path> produced = {fs::path(a.out_dir) / "index.csv"};
    for (const auto& e : index) {
      produced.push_back(fs::path(a.out_dir) / e.raw);
      produced.push_back(fs::path(a.out_dir) / e.truth);
      manifest.artifacts.push_back(e.raw);
      manifest.artifacts.push_back(e.truth);
    }
    manifest.artifacts.push_back("index.csv");
    manifest.dataset_fingerprint = fingerprint_files(produced);
  }
  manifest.save(fs::path(a.out_dir) / "manifest.json");
  std::cout << "synthesized " << index.size() << " pair(s) into " << a.out_dir << '\n';
  return 0;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
  bool finetune = false;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : parse_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.net.validate();
  cfg.train.validate();

  auto [dataset, fingerprint] = load_dataset(resolve_index(a.data));
  // validate config/dataset compatibility before any artifact is produced
  detail::validate_dataset(dataset, cfg.net, cfg.train);

  RunManifest manifest;
  manifest.command = "train";
  manifest.config_snapshot = serialize_config(cfg);
  manifest.seed = cfg.train.seed;
  manifest.dataset_fingerprint = fingerprint;
  const std::string tag = manifest.short_hash();

  fs::create_directories(a.out);
  const auto ckpt_path = [&](std::uint32_t epoch) {
    return fs::path(a.out) / ("ckpt-" + tag + "-e" + format_epoch(epoch) + ".llck");
  };

  TrainState state;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    check_arg(ck.params.spec == cfg.net,
              "checkpoint spec does not match the config (checkpoint: in_channels=" +
                  std::to_string(ck.params.spec.in_channels) +
                  " depth=" + std::to_string(ck.params.spec.depth) +
                  " base_width=" + std::to_string(ck.params.spec.base_width) +
                  " upsample=" + std::to_string(ck.params.spec.upsample) + ")");
    state.params = std::move(ck.params);
    state.adam = AdamState{std::move(ck.moments), AdamConfig{}};
    state.epoch = static_cast<int>(ck.epoch);
    vlog("resuming from epoch " + std::to_string(state.epoch));
  } else {
    state.params = build_net(cfg.net, cfg.train.seed);
    state.adam = AdamState::fresh(state.params);
    state.epoch = 0;
  }

  RunManifest* manifest_ptr = &manifest;
  const CheckpointSink sink = [&, manifest_ptr](const NetParams& p, std::uint32_t epoch,
                                                const AdamMoments& m) {
    const auto path = ckpt_path(epoch);
    save_checkpoint(path, p, epoch, m);
    manifest_ptr->artifacts.push_back(path.filename().string());
    vlog("checkpoint: " + path.string());
  };

  TrainResult result = train_from(std::move(state), dataset, cfg.train, cfg.net, sink);
  if (g_verbose && !result.history.empty())
    vlog("final training loss: " + std::to_string(result.history.back().total));

  if (a.finetune && cfg.train.finetune_epochs > 0) {
    vlog("contrast fine-tuning for " + std::to_string(cfg.train.finetune_epochs) +
         " epoch(s)");
    result = finetune_contrast(std::move(result), dataset, cfg.train, cfg.net,
                               cfg.dehaze, sink);
  }

  const fs::path loss_path = fs::path(a.out) / ("loss-" + tag + ".csv");
  write_loss_history(loss_path, result.history);
  manifest.artifacts.push_back(loss_path.filename().string());
  manifest.save(fs::path(a.out) / "manifest.json");
  std::cout << "trained to epoch " << result.next_epoch << "; checkpoints in " << a.out
            << '\n';
  return 0;
}

// ---- infer --------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint;
  std::string raw;
  std::string out;
  std::string reference;
  double amplify_factor = 0.0;  // 0: derive from exposure metadata
  bool png16 = false;
};

int run_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const RawFrame frame = read_raw(a.raw);

  const bool bayer = frame.cfa.type == CfaType::Bayer;
  const int expected = bayer ? 4 : 9;
  check_arg(ck.params.spec.in_channels == expected,
            std::string("CFA mismatch: raw frame is ") + (bayer ? "Bayer" : "X-Trans") +
                " (packs to " + std::to_string(expected) +
                " channels) but checkpoint expects in_channels=" +
                std::to_string(ck.params.spec.in_channels));

  double amp = a.amplify_factor;
  if (amp <= 0.0) {
    check_arg(frame.exposure_s > 0.0,
              "no --amplify given and the raw frame has no usable exposure time");
    amp = 1.0 / frame.exposure_s;  // reference exposure convention: 1 s
    vlog("amplification from exposure metadata: " + std::to_string(amp));
  }

  const PackedRaw packed = pack_raw(frame);
  const Tensor out = net_forward(ck.params, amplify(packed, amp));
  const RgbImage img = make_rgb(clamped01(out));
  write_png(a.out, img, a.png16 ? 16 : 8);

  if (!a.reference.empty()) {
    const RgbImage ref = read_image(a.reference);
    std::cout << "PSNR: " << psnr_db(img.tensor, ref.tensor) << " dB\n";
  }
  vlog("wrote " + a.out);
  return 0;
}

// ---- enhance ------------------------------------------------------------------

struct EnhanceArgs {
  std::string in;
  std::string out;
  std::string histograms;
  DehazeParams params;
};

int run_enhance(const EnhanceArgs& a) {
  const RgbImage input = read_image(a.in);
  a.params.validate();
  DehazeInfo info;
  const RgbImage output = enhance_contrast(input, a.params, &info);
  if (info.airlight_fallback)
    std::cerr << "enhance: degenerate atmospheric light, fell back to 1.0\n";
  write_image(a.out, output);

  if (!a.histograms.empty()) {
    std::array<std::size_t, 256> before{}, after{};
    const std::size_t plane = static_cast<std::size_t>(input.height()) * input.width();
    auto bin_of = [](double v) {
      const int b = static_cast<int>(clamp01(v) * 256.0);
      return static_cast<std::size_t>(b > 255 ? 255 : b);
    };
    const auto& bd = input.tensor.data();
    const auto& ad = output.tensor.data();
    for (std::size_t i = 0; i < plane; ++i) {
      before[bin_of((bd[i] + bd[plane + i] + bd[2 * plane + i]) / 3.0)]++;
      after[bin_of((ad[i] + ad[plane + i] + ad[2 * plane + i]) / 3.0)]++;
    }
    std::ofstream os(a.histograms);
    check_arg(os.good(), "cannot open " + a.histograms + " for writing");
    os << "bin,before,after\n";
    for (int b = 0; b < 256; ++b)
      os << b << ',' << before[static_cast<std::size_t>(b)] << ','
         << after[static_cast<std::size_t>(b)] << '\n';
  }
  vlog("wrote " + a.out);
  return 0;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
  std::string pred_dir;
  std::string ref_dir;
  std::string out = "-";
  int msssim_scales = 3;
};

int run_eval(const EvalArgs& a) {
  const auto preds = list_images(a.pred_dir);
  check_arg(!preds.empty(), "no images found in " + a.pred_dir);

  LossConfig cfg;
  cfg.msssim_scales = a.msssim_scales;

  std::ostringstream csv;
  csv.precision(10);
  csv << "name,psnr,ssim,msssim\n";
  std::vector<std::string> skipped;
  double sum_psnr = 0, sum_ssim = 0, sum_msssim = 0;
  std::size_t count = 0;
  for (const auto& pred_path : preds) {
    const fs::path ref_path = fs::path(a.ref_dir) / pred_path.filename();
    if (!fs::exists(ref_path)) {
      skipped.push_back(pred_path.filename().string());
      continue;
    }
    const RgbImage pred = read_image(pred_path);
    const RgbImage ref = read_image(ref_path);
    const double p = psnr_db(pred.tensor, ref.tensor);
    const double s = ssim(pred.tensor, ref.tensor, cfg).value();
    const double ms = ms_ssim(pred.tensor, ref.tensor, cfg).value();
    csv << pred_path.filename().string() << ',' << p << ',' << s << ',' << ms << '\n';
    sum_psnr += p;
    sum_ssim += s;
    sum_msssim += ms;
    ++count;
  }
  for (const auto& entry : fs::directory_iterator(a.ref_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext != ".png" && ext != ".ppm") continue;
    if (!fs::exists(fs::path(a.pred_dir) / entry.path().filename()))
      skipped.push_back(entry.path().filename().string());
  }
  check_arg(count > 0, "no filename-paired images between the two directories");
  csv << "mean," << sum_psnr / static_cast<double>(count) << ','
      << sum_ssim / static_cast<double>(count) << ','
      << sum_msssim / static_cast<double>(count) << '\n';

  if (a.out == "-") {
    std::cout << csv.str();
  } else {
    std::ofstream os(a.out);
    check_arg(os.good(), "cannot open " + a.out + " for writing");
    os << csv.str();
  }
  if (!skipped.empty()) {
    std::sort(skipped.begin(), skipped.end());
    skipped.erase(std::unique(skipped.begin(), skipped.end()), skipped.end());
    for (const auto& name : skipped) std::cerr << "eval: unpaired, skipped: " << name << '\n';
    return 1;  // partial evaluation
  }
  return 0;
}

// ---- ablate -------------------------------------------------------------------

struct AblateArgs {
  std::string data;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_ablate(const AblateArgs& a) {
  RunConfig base = a.config.empty() ? RunConfig{} : parse_config(a.config);
  if (a.seed) base.train.seed = *a.seed;
  auto [dataset, fingerprint] = load_dataset(resolve_index(a.data));
  detail::validate_dataset(dataset, base.net, base.train);

  const double alpha = base.train.loss.alpha;
  const double beta = base.train.loss.beta;
  struct Variant {
    const char* name;
    double a;
    double b;
  };
  const Variant variants[7] = {
      {"l1", 1.0, 1.0},        {"msssim", 1.0, 0.0},      {"pix", 1.0, beta},
      {"feat", 0.0, beta},     {"feat_l1", alpha, 1.0},   {"feat_msssim", alpha, 0.0},
      {"final", alpha, beta},
  };

  fs::create_directories(a.out);
  std::ostringstream csv;
  csv.precision(10);
  csv << "config,psnr\n";
  for (const Variant& v : variants) {
    TrainConfig cfg = base.train;
    cfg.loss.alpha = v.a;
    cfg.loss.beta = v.b;
    const TrainResult run = train(dataset, cfg, base.net);
    double sum = 0.0;
    for (const TrainSample& s : dataset) {
      const Tensor pred =
          clamped01(net_forward(run.params, amplify(pack_raw(s.raw), s.amplification)));
      sum += psnr_db(pred, s.target);
    }
    const double mean_psnr = sum / static_cast<double>(dataset.size());
    csv << v.name << ',' << mean_psnr << '\n';
    std::cout << v.name << ": " << mean_psnr << " dB\n";
  }

  RunManifest manifest;
  manifest.command = "ablate";
  manifest.config_snapshot = serialize_config(base);
  manifest.seed = base.train.seed;
  manifest.dataset_fingerprint = fingerprint;
  const fs::path csv_path =
      fs::path(a.out) / ("ablation-" + manifest.short_hash() + ".csv");
  {
    std::ofstream os(csv_path);
    check_arg(os.good(), "cannot open " + csv_path.string() + " for writing");
    os << csv.str();
  }
  manifest.artifacts.push_back(csv_path.filename().string());
  manifest.save(fs::path(a.out) / "manifest.json");
  std::cout << "wrote " << csv_path.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lowlight: learned camera pipeline for extreme low-light imaging"};
  app.require_subcommand(1);
  app.add_flag("--verbose", g_verbose, "verbose progress output");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand(
      "synth", "synthesize paired low-light raw frames from clean images");
  synth_cmd->add_option("--input-dir", synth.input_dir, "directory of clean PNG/PPM images")
      ->required()
      ->check(CLI::ExistingDirectory);
  synth_cmd->add_option("--out-dir", synth.out_dir, "output dataset directory")->required();
  synth_cmd->add_option("--cfa", synth.cfa, "bayer or xtrans");
  synth_cmd->add_option("--ratio", synth.ratio, "exposure ratio (reference / input), >= 1");
  synth_cmd->add_option("--noise-photon", synth.noise_photon,
                        "full-scale photon count for shot noise (0 disables)");
  synth_cmd->add_option("--noise-read", synth.noise_read, "read-noise sigma, normalized");
  synth_cmd->add_option("--seed", synth.seed, "synthesis seed");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train the restoration network");
  train_cmd->add_option("--data", train_args.data, "dataset index.csv (or its directory)")
      ->required();
  train_cmd->add_option("--config", train_args.config, "run configuration file")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "output directory")->required();
  train_cmd->add_option("--resume", train_args.resume, "checkpoint to resume from")
      ->check(CLI::ExistingFile);
  train_cmd->add_flag("--finetune", train_args.finetune,
                      "after training, fine-tune on contrast-enhanced ground truth");
  std::uint64_t train_seed = 0;
  auto* train_seed_opt =
      train_cmd->add_option("--seed", train_seed, "override the config seed");

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "restore an sRGB image from a raw frame");
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "trained LLCK checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--raw", infer.raw, "LLRW raw frame")
      ->required()
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--out", infer.out, "output PNG path")->required();
  infer_cmd->add_option("--amplify", infer.amplify_factor,
                        "amplification factor (default: from exposure metadata)");
  infer_cmd->add_option("--reference", infer.reference, "ground truth for PSNR report")
      ->check(CLI::ExistingFile);
  infer_cmd->add_flag("--png16", infer.png16, "write 16-bit PNG");

  EnhanceArgs enhance;
  auto* enhance_cmd =
      app.add_subcommand("enhance", "contrast improvement (invert, dehaze, invert)");
  enhance_cmd->add_option("--in", enhance.in, "input image")
      ->required()
      ->check(CLI::ExistingFile);
  enhance_cmd->add_option("--out", enhance.out, "output image")->required();
  enhance_cmd->add_option("--patch-size", enhance.params.patch_size, "dark-channel window");
  enhance_cmd->add_option("--omega", enhance.params.omega, "haze retention factor");
  enhance_cmd->add_option("--t0", enhance.params.t0, "transmission floor");
  enhance_cmd->add_option("--airlight-fraction", enhance.params.airlight_fraction,
                          "fraction of brightest dark-channel pixels");
  enhance_cmd->add_option("--guided-radius", enhance.params.guided_radius,
                          "guided-filter radius at 512 px");
  enhance_cmd->add_option("--guided-eps", enhance.params.guided_eps, "guided-filter epsilon");
  enhance_cmd->add_option("--emit-histograms", enhance.histograms,
                          "write before/after lightness histograms CSV");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM/MS-SSIM over paired directories");
  eval_cmd->add_option("--pred-dir", eval_args.pred_dir, "predictions directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--ref-dir", eval_args.ref_dir, "references directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", eval_args.out, "metrics CSV path ('-' for stdout)");
  eval_cmd->add_option("--msssim-scales", eval_args.msssim_scales, "MS-SSIM scale count");

  AblateArgs ablate;
  auto* ablate_cmd =
      app.add_subcommand("ablate", "train the 7 loss variants and report PSNR per variant");
  ablate_cmd->add_option("--data", ablate.data, "dataset index.csv (or its directory)")
      ->required();
  ablate_cmd->add_option("--config", ablate.config, "base run configuration file")
      ->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ablate.out, "output directory")->required();
  std::uint64_t ablate_seed = 0;
  auto* ablate_seed_opt =
      ablate_cmd->add_option("--seed", ablate_seed, "override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (train_seed_opt->count() > 0) train_args.seed = train_seed;
  if (ablate_seed_opt->count() > 0) ablate.seed = ablate_seed;

  try {
    if (app.got_subcommand(synth_cmd)) return run_synth(synth);
    if (app.got_subcommand(train_cmd)) return run_train(train_args);
    if (app.got_subcommand(infer_cmd)) return run_infer(infer);
    if (app.got_subcommand(enhance_cmd)) return run_enhance(enhance);
    if (app.got_subcommand(eval_cmd)) return run_eval(eval_args);
    if (app.got_subcommand(ablate_cmd)) return run_ablate(ablate);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

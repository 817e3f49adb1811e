#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lowlight/dehaze.hpp"
#include "lowlight/image.hpp"
#include "lowlight/manifest.hpp"
#include "lowlight/raw.hpp"

using namespace lowlight;
namespace fs = std::filesystem;

namespace {

struct Cmd {
  int exit_code = -1;
  std::string out;
  std::string err;
};

Cmd run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out_file = fs::temp_directory_path() / ("lowlight_cli_out_" +
                                                          std::to_string(counter) + ".txt");
  const fs::path err_file = fs::temp_directory_path() / ("lowlight_cli_err_" +
                                                          std::to_string(counter) + ".txt");
  ++counter;
  const std::string cmd = std::string(LOWLIGHT_CLI_PATH) + " " + args + " >" +
                          out_file.string() + " 2>" + err_file.string();
  const int rc = std::system(cmd.c_str());
  Cmd result;
  result.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
  };
  result.out = slurp(out_file);
  result.err = slurp(err_file);
  fs::remove(out_file);
  fs::remove(err_file);
  return result;
}

std::string slurp_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lowlight_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RgbImage test_image(int w, int h, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  const double ph = rng.uniform();
  Tensor t({1, 3, h, w});
  auto& d = t.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fy = (y + 0.5) / h, fx = (x + 0.5) / w;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      d[0 * plane + i] = scale * (0.5 + 0.3 * std::sin(2 * kPi * (fx + ph)));
      d[1 * plane + i] = scale * (0.5 + 0.3 * std::cos(2 * kPi * (fy + ph)));
      d[2 * plane + i] = scale * (0.4 + 0.2 * std::sin(2 * kPi * (fx + fy)));
    }
  return make_rgb(std::move(t));
}

void write_desk_config(const fs::path& path, int epochs, bool pure_l1 = true) {
  std::ofstream os(path);
  os << "[net]\nin_channels = 4\ndepth = 2\nbase_width = 4\nupsample = 2\n";
  os << "[train]\nepochs = " << epochs
     << "\nlr_initial = 1e-3\nlr_after = 1e-4\nlr_switch_epoch = " << (epochs / 2)
     << "\ncrop_size = 16\nseed = 7\ncheckpoint_every = 2\n";
  if (pure_l1)
    os << "[loss]\nalpha = 1.0\nbeta = 1.0\n";
  else
    os << "[loss]\nalpha = 0.9\nbeta = 0.99\nmsssim_scales = 1\nwindow = 5\n";
}

const fs::path& synth_dataset() {
  static const fs::path dir = [] {
    const fs::path in = scratch_dir("synth_in");
    for (int i = 0; i < 3; ++i)
      write_png(in / ("img" + std::to_string(i) + ".png"), test_image(16, 16, 100 + static_cast<std::uint64_t>(i)));
    const fs::path out = scratch_dir("synth_out");
    const Cmd r = run_cli("synth --input-dir " + in.string() + " --out-dir " + out.string() +
                          " --ratio 8 --noise-photon 50000 --noise-read 0.0002 --seed 5");
    REQUIRE(r.exit_code == 0);
    return out;
  }();
  return dir;
}

}  // namespace

TEST_CASE("cli: synth writes the pair files, the index and a manifest") {
  const fs::path& out = synth_dataset();
  int llrw = 0, gt = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().extension() == ".llrw") ++llrw;
    if (e.path().filename().string().find("_gt.png") != std::string::npos) ++gt;
  }
  CHECK(llrw == 3);
  CHECK(gt == 3);
  CHECK(fs::exists(out / "index.csv"));
  CHECK(fs::exists(out / "manifest.json"));

  const RunManifest manifest = RunManifest::load(out / "manifest.json");
  CHECK(manifest.command == "synth");
  CHECK(manifest.artifacts.size() == 7);  // 3 pairs + index
}

TEST_CASE("cli: synth is byte-deterministic per seed") {
  const fs::path in = scratch_dir("synth_det_in");
  write_png(in / "one.png", test_image(16, 16, 55));
  const fs::path a = scratch_dir("synth_det_a");
  const fs::path b = scratch_dir("synth_det_b");
  const std::string args = " --ratio 4 --seed 21 --input-dir " + in.string();
  REQUIRE(run_cli("synth" + args + " --out-dir " + a.string()).exit_code == 0);
  REQUIRE(run_cli("synth" + args + " --out-dir " + b.string()).exit_code == 0);
  CHECK(slurp_bytes(a / "one.llrw") == slurp_bytes(b / "one.llrw"));
  CHECK(slurp_bytes(a / "one_gt.png") == slurp_bytes(b / "one_gt.png"));
}

TEST_CASE("cli: synth validates the exposure ratio") {
  const fs::path in = scratch_dir("synth_ratio_in");
  write_png(in / "one.png", test_image(8, 8, 1));
  const fs::path out = scratch_dir("synth_ratio_out");
  const Cmd r = run_cli("synth --input-dir " + in.string() + " --out-dir " + out.string() +
                        " --ratio 0.5");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find(">= 1") != std::string::npos);
}

TEST_CASE("cli: synth skips unreadable files but continues") {
  const fs::path in = scratch_dir("synth_skip_in");
  write_png(in / "good.png", test_image(16, 16, 2));
  std::ofstream(in / "bad.png") << "not a png";
  const fs::path out = scratch_dir("synth_skip_out");
  const Cmd r = run_cli("synth --input-dir " + in.string() + " --out-dir " + out.string() +
                        " --ratio 2");
  CHECK(r.exit_code == 0);
  CHECK(r.err.find("skipping") != std::string::npos);
  CHECK(fs::exists(out / "good.llrw"));
}

TEST_CASE("cli: train produces checkpoints, loss history and manifest") {
  const fs::path& data = synth_dataset();
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_train.cfg";
  write_desk_config(cfgfile, 4);
  const fs::path out = scratch_dir("train_out");
  const Cmd r = run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                        " --out " + out.string());
  REQUIRE(r.exit_code == 0);

  const RunManifest manifest = RunManifest::load(out / "manifest.json");
  bool has_loss = false, has_final = false;
  for (const auto& a : manifest.artifacts) {
    if (a.find("loss-") == 0) has_loss = true;
    if (a.find("e000004.llck") != std::string::npos) has_final = true;
    CHECK(a.find(manifest.short_hash()) != std::string::npos);  // artifacts reference the hash
  }
  CHECK(has_loss);
  CHECK(has_final);

  // loss CSV has the documented header and epochs*pairs rows
  fs::path loss_csv;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().filename().string().find("loss-") == 0) loss_csv = e.path();
  REQUIRE(!loss_csv.empty());
  std::ifstream is(loss_csv);
  std::string header;
  std::getline(is, header);
  CHECK(header == "epoch,iter,l1,msssim_loss,feature_loss,total");
  int rows = 0;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) ++rows;
  CHECK(rows == 4 * 3);
}

TEST_CASE("cli: train rejects a config/dataset CFA mismatch before training") {
  const fs::path& data = synth_dataset();  // Bayer
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_mismatch.cfg";
  {
    std::ofstream os(cfgfile);
    os << "[net]\nin_channels = 9\nupsample = 3\ndepth = 2\nbase_width = 4\n";
    os << "[train]\nepochs = 1\ncrop_size = 15\nlr_switch_epoch = 0\n";
  }
  const fs::path out = scratch_dir("train_mismatch_out");
  const Cmd r = run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                        " --out " + out.string());
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("does not match the dataset CFA") != std::string::npos);
  CHECK(!fs::exists(out / "manifest.json"));  // nothing produced
}

TEST_CASE("cli: train without --data prints usage and exits nonzero") {
  const Cmd r = run_cli("train --out /tmp/x");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("--data") != std::string::npos);
}

TEST_CASE("cli: resume reproduces the uninterrupted run bit-exactly") {
  const fs::path& data = synth_dataset();
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_resume.cfg";
  write_desk_config(cfgfile, 4);  // checkpoint_every = 2

  const fs::path full = scratch_dir("resume_full");
  REQUIRE(run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                  " --out " + full.string())
              .exit_code == 0);

  const fs::path part = scratch_dir("resume_part");
  REQUIRE(run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                  " --out " + part.string())
              .exit_code == 0);
  // find the mid-run checkpoint and resume from it into a third directory
  fs::path mid;
  for (const auto& e : fs::directory_iterator(part))
    if (e.path().filename().string().find("e000002.llck") != std::string::npos)
      mid = e.path();
  REQUIRE(!mid.empty());

  const fs::path resumed = scratch_dir("resume_tail");
  REQUIRE(run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                  " --out " + resumed.string() + " --resume " + mid.string())
              .exit_code == 0);

  fs::path final_full, final_resumed;
  for (const auto& e : fs::directory_iterator(full))
    if (e.path().filename().string().find("e000004.llck") != std::string::npos)
      final_full = e.path();
  for (const auto& e : fs::directory_iterator(resumed))
    if (e.path().filename().string().find("e000004.llck") != std::string::npos)
      final_resumed = e.path();
  REQUIRE(!final_full.empty());
  REQUIRE(!final_resumed.empty());
  CHECK(slurp_bytes(final_full) == slurp_bytes(final_resumed));
}

TEST_CASE("cli: infer restores an image at the raw frame's resolution") {
  const fs::path& data = synth_dataset();
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_infer.cfg";
  write_desk_config(cfgfile, 2);
  const fs::path train_out = scratch_dir("infer_train");
  REQUIRE(run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                  " --out " + train_out.string())
              .exit_code == 0);
  fs::path ckpt;
  for (const auto& e : fs::directory_iterator(train_out))
    if (e.path().filename().string().find("e000002.llck") != std::string::npos)
      ckpt = e.path();
  REQUIRE(!ckpt.empty());

  const fs::path out_png = train_out / "restored.png";
  const Cmd r = run_cli("infer --checkpoint " + ckpt.string() + " --raw " +
                        (data / "img0.llrw").string() + " --amplify 8 --out " +
                        out_png.string() + " --reference " + (data / "img0_gt.png").string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("PSNR:") != std::string::npos);

  const RgbImage restored = read_png(out_png);
  const RawFrame raw = read_raw(data / "img0.llrw");
  CHECK(restored.width() == raw.width);
  CHECK(restored.height() == raw.height);
}

TEST_CASE("cli: infer amplification raises output brightness monotonically") {
  const fs::path& data = synth_dataset();
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_amp.cfg";
  write_desk_config(cfgfile, 2);
  const fs::path train_out = scratch_dir("amp_train");
  REQUIRE(run_cli("train --data " + data.string() + " --config " + cfgfile.string() +
                  " --out " + train_out.string())
              .exit_code == 0);
  fs::path ckpt;
  for (const auto& e : fs::directory_iterator(train_out))
    if (e.path().extension() == ".llck") ckpt = e.path();
  REQUIRE(!ckpt.empty());

  const fs::path low = train_out / "low.png";
  const fs::path high = train_out / "high.png";
  REQUIRE(run_cli("infer --checkpoint " + ckpt.string() + " --raw " +
                  (data / "img1.llrw").string() + " --amplify 4 --out " + low.string())
              .exit_code == 0);
  REQUIRE(run_cli("infer --checkpoint " + ckpt.string() + " --raw " +
                  (data / "img1.llrw").string() + " --amplify 16 --out " + high.string())
              .exit_code == 0);
  CHECK(mean_lightness(read_png(high)) > mean_lightness(read_png(low)));
}

TEST_CASE("cli: infer names both sides of a CFA mismatch") {
  const fs::path& data = synth_dataset();  // Bayer raws
  // X-Trans checkpoint
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_xt.cfg";
  {
    std::ofstream os(cfgfile);
    os << "[net]\nin_channels = 9\nupsample = 3\ndepth = 2\nbase_width = 4\n";
    os << "[train]\nepochs = 1\ncrop_size = 18\nlr_switch_epoch = 0\nseed = 3\n";
    os << "[loss]\nalpha = 1.0\nbeta = 1.0\n";
  }
  const fs::path xin = scratch_dir("xt_in");
  write_png(xin / "x.png", test_image(18, 18, 9));
  const fs::path xdata = scratch_dir("xt_data");
  REQUIRE(run_cli("synth --input-dir " + xin.string() + " --out-dir " + xdata.string() +
                  " --cfa xtrans --ratio 2 --seed 4")
              .exit_code == 0);
  const fs::path xtrain = scratch_dir("xt_train");
  REQUIRE(run_cli("train --data " + xdata.string() + " --config " + cfgfile.string() +
                  " --out " + xtrain.string())
              .exit_code == 0);
  fs::path xckpt;
  for (const auto& e : fs::directory_iterator(xtrain))
    if (e.path().extension() == ".llck") xckpt = e.path();
  REQUIRE(!xckpt.empty());

  const Cmd r = run_cli("infer --checkpoint " + xckpt.string() + " --raw " +
                        (data / "img0.llrw").string() + " --out /tmp/nope.png");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("Bayer") != std::string::npos);
  CHECK(r.err.find("in_channels=9") != std::string::npos);
}

TEST_CASE("cli: enhance brightens a dark image and emits histograms") {
  const fs::path dir = scratch_dir("enhance");
  const RgbImage dark = test_image(48, 48, 77, 0.35);
  write_png(dir / "dark.png", dark);

  const fs::path hist = dir / "hist.csv";
  const Cmd r = run_cli("enhance --in " + (dir / "dark.png").string() + " --out " +
                        (dir / "bright.png").string() + " --emit-histograms " +
                        hist.string());
  REQUIRE(r.exit_code == 0);
  CHECK(mean_lightness(read_png(dir / "bright.png")) >
        mean_lightness(read_png(dir / "dark.png")));

  std::ifstream is(hist);
  std::string header;
  std::getline(is, header);
  CHECK(header == "bin,before,after");
  std::size_t sum_before = 0, sum_after = 0;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    sum_before += std::stoull(line.substr(c1 + 1, c2 - c1 - 1));
    sum_after += std::stoull(line.substr(c2 + 1));
  }
  CHECK(sum_before == 48 * 48);
  CHECK(sum_after == 48 * 48);
}

TEST_CASE("cli: enhance with omega 0 returns the input byte-for-byte") {
  const fs::path dir = scratch_dir("enhance_omega0");
  write_png(dir / "in.png", test_image(24, 24, 88, 0.6));
  const Cmd r = run_cli("enhance --in " + (dir / "in.png").string() + " --out " +
                        (dir / "out.png").string() + " --omega 0");
  REQUIRE(r.exit_code == 0);
  CHECK(slurp_bytes(dir / "in.png") == slurp_bytes(dir / "out.png"));
}

TEST_CASE("cli: eval emits the fixed column order and flags unpaired files") {
  const fs::path pred = scratch_dir("eval_pred");
  const fs::path ref = scratch_dir("eval_ref");
  const RgbImage a = test_image(48, 48, 91);
  write_png(pred / "a.png", a);
  write_png(ref / "a.png", a);
  write_png(pred / "only_pred.png", a);

  const fs::path csv = fs::temp_directory_path() / "lowlight_eval.csv";
  const Cmd r = run_cli("eval --pred-dir " + pred.string() + " --ref-dir " + ref.string() +
                        " --out " + csv.string());
  CHECK(r.exit_code == 1);  // partial: one unpaired file
  CHECK(r.err.find("only_pred.png") != std::string::npos);

  std::ifstream is(csv);
  std::string header, row, mean_row;
  std::getline(is, header);
  std::getline(is, row);
  std::getline(is, mean_row);
  CHECK(header == "name,psnr,ssim,msssim");
  CHECK(row.find("a.png,99,") == 0);        // identical pair hits the PSNR cap
  CHECK(mean_row.find("mean,99,") == 0);
  CHECK(row.find(",1,1") != std::string::npos);  // ssim and msssim are exactly 1
}

TEST_CASE("cli: eval PSNR matches the closed form for a known offset") {
  const fs::path pred = scratch_dir("evalk_pred");
  const fs::path ref = scratch_dir("evalk_ref");
  Tensor rt = Tensor::full({1, 3, 48, 48}, 51.0 / 255.0);
  Tensor pt = Tensor::full({1, 3, 48, 48}, 77.0 / 255.0);  // offset 26/255
  write_png(ref / "a.png", make_rgb(std::move(rt)));
  write_png(pred / "a.png", make_rgb(std::move(pt)));

  const Cmd r = run_cli("eval --pred-dir " + pred.string() + " --ref-dir " + ref.string());
  REQUIRE(r.exit_code == 0);
  const double d = 26.0 / 255.0;
  const double expect = -10.0 * std::log10(d * d);
  std::istringstream is(r.out);
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  const double got = std::stod(row.substr(row.find(',') + 1));
  CHECK(got == Catch::Approx(expect).epsilon(1e-9));
}

TEST_CASE("cli: ablate writes seven deterministic rows") {
  const fs::path& data = synth_dataset();
  const fs::path cfgfile = fs::temp_directory_path() / "lowlight_cli_ablate.cfg";
  {
    std::ofstream os(cfgfile);
    os << "[net]\nin_channels = 4\ndepth = 2\nbase_width = 4\nupsample = 2\n";
    os << "[train]\nepochs = 1\nlr_switch_epoch = 0\ncrop_size = 16\nseed = 13\n";
    os << "[loss]\nmsssim_scales = 1\nwindow = 5\n";
  }
  const fs::path out_a = scratch_dir("ablate_a");
  const Cmd ra = run_cli("ablate --data " + data.string() + " --config " +
                         cfgfile.string() + " --out " + out_a.string());
  REQUIRE(ra.exit_code == 0);

  fs::path csv_a;
  for (const auto& e : fs::directory_iterator(out_a))
    if (e.path().extension() == ".csv") csv_a = e.path();
  REQUIRE(!csv_a.empty());

  std::ifstream is(csv_a);
  std::string header;
  std::getline(is, header);
  CHECK(header == "config,psnr");
  std::vector<std::string> names;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) names.push_back(line.substr(0, line.find(',')));
  const std::vector<std::string> want = {"l1",      "msssim",      "pix",  "feat",
                                         "feat_l1", "feat_msssim", "final"};
  CHECK(names == want);

  const fs::path out_b = scratch_dir("ablate_b");
  const Cmd rb = run_cli("ablate --data " + data.string() + " --config " +
                         cfgfile.string() + " --out " + out_b.string());
  REQUIRE(rb.exit_code == 0);
  fs::path csv_b;
  for (const auto& e : fs::directory_iterator(out_b))
    if (e.path().extension() == ".csv") csv_b = e.path();
  CHECK(slurp_bytes(csv_a) == slurp_bytes(csv_b));
}

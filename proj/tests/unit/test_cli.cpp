#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <fstream>
#include <map>
#include <sstream>

#include "../support/fixtures.hpp"
#include "mmc/cli.hpp"
#include "mmc/errors.hpp"

using namespace mmc;
using namespace mmc::testing;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mmc");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative path -> contents, for whole-directory comparisons.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

const std::vector<std::string> kSmall = {"--set", "n_train=30", "--set", "n_meta=3", "--set", "n_test=4",
                                         "--set", "rows=16",    "--set", "cols=16",  "--set", "nuclei_min=1", "--set", "nuclei_max=3",
                                         "--set", "radius_max=4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

const std::vector<std::string> kTinyTrain = {"--set", "seg_levels=1",     "--set", "seg_channels=4",
                                             "--set", "total_epochs=2",   "--set", "alpha_drop_epoch=1",
                                             "--set", "batch_size=8",     "--set", "main_optimizer=adam",
                                             "--set", "overlay_count=2",  "--set", "checkpoint_every=1"};

// History rows without the wall-clock column.
std::vector<std::string> history_without_time(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line.substr(0, line.rfind(',')));
  return out;
}

std::string mean_row(const fs::path& metrics, const std::string& split) {
  std::ifstream in(metrics);
  std::string line;
  while (std::getline(in, line))
    if (line.find("," + split + ",MEAN,") != std::string::npos) return line.substr(line.find(",MEAN,"));
  return "";
}

}  // namespace

TEST_CASE("config: defaults, files, overrides and unknown keys") {
  TempDir dir("mmc_cli_config");
  cli::RunConfig cfg;
  CHECK(cfg.get("alpha") == "0.001");
  CHECK(cfg.get("beta") == "1e-04");
  CHECK(cfg.get("total_epochs") == "60");
  CHECK(cfg.get("checkpoint_every") == "10");
  CHECK(cfg.train().alpha == 1e-3);

  {
    std::ofstream f(dir.path / "a.cfg");
    f << "# comment\n\n  alpha = 0.01   # trailing\nnoise_kind=bbox\n";
  }
  cfg.load_file(dir.path / "a.cfg");
  CHECK(cfg.train().alpha == 0.01);
  CHECK(cfg.noise().kind == NoiseKind::bbox);

  // The resolved text reads back to the same settings.
  cfg.write(dir.path / "resolved.cfg");
  cli::RunConfig again;
  again.load_file(dir.path / "resolved.cfg");
  CHECK(again.resolved_text() == cfg.resolved_text());

  {
    std::ofstream f(dir.path / "bad.cfg");
    f << "alpha = 0.01\nalpah = 0.02\n";
  }
  try {
    cfg.load_file(dir.path / "bad.cfg");
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("alpah") != std::string::npos);
  }
  CHECK_THROWS_AS(cfg.set_assignment("no equals sign"), ConfigError);
  cfg.set("alpha", "1e-3x");
  CHECK_THROWS_AS(cfg.train(), ConfigError);
  cfg.set("alpha", "1e-3");
  cfg.set("cnet_variant", "k9");
  CHECK_THROWS_WITH_AS(cfg.train(), doctest::Contains("cnet_variant"), ConfigError);
  cfg.set("cnet_variant", "k3k5k1");
  cfg.set("noise_p", "1.5");
  CHECK_THROWS_AS(cfg.noise(), ConfigError);
}

TEST_CASE("synth is byte-reproducible") {
  TempDir dir("mmc_cli_synth");
  const auto a = dir.path / "data", b = dir.path / "other";
  REQUIRE(run_cli(with({"synth", "--seed", "7", "--out", a.string()}, kSmall)) == cli::kOk);
  const auto first = snapshot(a);
  CHECK(first.count("meta.json"));
  CHECK(first.count("synth_config.txt"));
  fs::remove_all(a);
  REQUIRE(run_cli(with({"synth", "--seed", "7", "--out", a.string()}, kSmall)) == cli::kOk);
  CHECK(snapshot(a) == first);

  // Another directory differs only in the recorded output path.
  REQUIRE(run_cli(with({"synth", "--seed", "7", "--out", b.string()}, kSmall)) == cli::kOk);
  auto other = snapshot(b);
  auto mine = first;
  other.erase("synth_config.txt");
  mine.erase("synth_config.txt");
  CHECK(other == mine);

  // A non-empty output directory is refused; a different seed differs.
  CHECK(run_cli(with({"synth", "--seed", "7", "--out", a.string()}, kSmall)) == cli::kConfig);
  fs::remove_all(b);
  REQUIRE(run_cli(with({"synth", "--seed", "8", "--out", b.string()}, kSmall)) == cli::kOk);
  CHECK(slurp(b / "meta.json") != slurp(a / "meta.json"));
}

TEST_CASE("corrupt records dilation draws and only adds files") {
  TempDir dir("mmc_cli_corrupt");
  const auto data = dir.path / "data", noisy = dir.path / "noisy";
  REQUIRE(run_cli(with({"synth", "--seed", "3", "--out", data.string()}, kSmall)) == cli::kOk);
  const auto before = snapshot(data);

  REQUIRE(run_cli({"corrupt", "--data", data.string(), "--out", noisy.string(), "--kind", "dilation", "--p", "0.4"}) ==
          cli::kOk);
  CHECK(snapshot(data) == before);  // source untouched

  const auto after = snapshot(noisy);
  for (const auto& [name, bytes] : before) {
    REQUIRE(after.count(name));
    CHECK(after.at(name) == bytes);  // existing files unchanged
  }
  const auto manifest = nlohmann::json::parse(slurp(noisy / "noise_manifest.json"));
  CHECK(manifest["kind"] == "dilation");
  CHECK(manifest["p"] == 0.4);
  const DatasetSplits loaded = load_dataset(noisy);
  REQUIRE(manifest["samples"].size() == loaded.train.size());
  int draws = 0;
  for (std::size_t i = 0; i < loaded.train.size(); ++i) {
    const auto& s = manifest["samples"][i];
    const int n = static_cast<int>(s["kept"].size() + s["removed"].size());
    CHECK(static_cast<int>(s["removed"].size()) == deletion_count(0.4, n));
    for (const auto& d : s["draws"]) {
      CHECK(d[1].get<int>() >= 1);
      CHECK(d[1].get<int>() <= 5);
      ++draws;
    }
    CHECK(loaded.train[i].noisy_mask.has_value());
  }
  CHECK(draws > 0);
  CHECK_FALSE(loaded.meta.front().noisy_mask.has_value());

  // A second corruption of the same directory is refused.
  CHECK(run_cli({"corrupt", "--data", noisy.string(), "--kind", "bbox"}) == cli::kData);
  // In place corruption adds files next to the untouched originals.
  REQUIRE(run_cli({"corrupt", "--data", data.string(), "--kind", "bbox", "--p", "0.2"}) == cli::kOk);
  const auto in_place = snapshot(data);
  for (const auto& [name, bytes] : before) CHECK(in_place.at(name) == bytes);
}

TEST_CASE("train, eval and error exit codes") {
  TempDir dir("mmc_cli_train");
  const auto data = dir.path / "data", runs = dir.path / "runs";
  REQUIRE(run_cli(with({"synth", "--seed", "5", "--out", data.string()}, kSmall)) == cli::kOk);
  REQUIRE(run_cli({"corrupt", "--data", data.string(), "--kind", "partial"}) == cli::kOk);

  const auto train = [&](const std::string& method, const std::string& name, std::vector<std::string> extra = {}) {
    auto args = with({"train", "--data", data.string(), "--runs", runs.string(), "--method", method, "--name", name},
                     kTinyTrain);
    return run_cli(with(args, extra));
  };
  REQUIRE(train("mmc", "a") == cli::kOk);
  const auto a = runs / "a";
  for (const char* f : {"config.txt", "history.csv", "metrics.csv", "final.seg.ckpt", "final.cnet.ckpt",
                        "checkpoints/epoch_0001.seg.ckpt", "checkpoints/epoch_0002.cnet.ckpt"})
    CHECK(fs::exists(a / f));
  CHECK(slurp(a / "config.txt").find("method = mmc\n") != std::string::npos);
  CHECK(slurp(a / "config.txt").find("run_name = a\n") != std::string::npos);
  int overlays = 0;
  for (const auto& e : fs::directory_iterator(a / "overlays")) {
    const auto img = read_pgm8(e.path());
    CHECK(img.rows == 16);
    CHECK(img.cols == 3 * 16 + 4);
    ++overlays;
  }
  CHECK(overlays == 2);
  CHECK(mean_row(a / "metrics.csv", "test").size() > 0);
  CHECK(slurp(a / "metrics.csv").find("mmc,partial,0.4,0,test,") != std::string::npos);

  // Same inputs, same history (wall time aside).
  REQUIRE(train("mmc", "b") == cli::kOk);
  CHECK(history_without_time(a / "history.csv") == history_without_time(runs / "b" / "history.csv"));

  // eval of the final checkpoint reproduces the training report.
  REQUIRE(run_cli({"eval", "--data", data.string(), "--runs", runs.string(), "--checkpoint",
                   (a / "final.seg.ckpt").string(), "--name", "ev", "--method", "mmc"}) == cli::kOk);
  CHECK(mean_row(runs / "ev" / "metrics.csv", "test") == mean_row(a / "metrics.csv", "test"));

  for (const char* m : {"noisy", "clean", "finetune"}) {
    CAPTURE(m);
    CHECK(train(m, m) == cli::kOk);
  }
  const auto ft = history_without_time(runs / "finetune" / "history.csv");
  CHECK(std::any_of(ft.begin(), ft.end(), [](const std::string& l) { return l.find(",finetune,") != std::string::npos; }));

  CHECK(train("mmc", "x", {"--set", "bogus=1"}) == cli::kConfig);
  CHECK(train("sideways", "x") == cli::kConfig);
  CHECK(train("mmc", "x", {"--set", "alpha=fast"}) == cli::kConfig);
  CHECK(train("mmc", "x", {"--set", "n_meta_batch=2"}) == cli::kConfig);
  CHECK(run_cli({"train", "--data", (dir.path / "nowhere").string()}) == cli::kData);
  CHECK(run_cli({"eval", "--data", data.string(), "--checkpoint", (a / "final.cnet.ckpt").string()}) == cli::kData);
  CHECK(run_cli({"frobnicate"}) == cli::kConfig);

  // A blown-up learning rate diverges: exit 4 with a dump.
  CHECK(train("noisy", "boom", {"--set", "alpha=1e300", "--set", "main_optimizer=sgd"}) == cli::kNumerical);
  CHECK(fs::exists(runs / "boom" / "divergence" / "batch.ckpt"));
}

TEST_CASE("train refuses an oversized meta split") {
  TempDir dir("mmc_cli_meta");
  const auto data = dir.path / "data";
  REQUIRE(run_cli({"synth", "--out", data.string(), "--set", "n_train=20", "--set", "n_meta=5", "--set", "n_test=2",
                   "--set", "rows=16", "--set", "cols=16", "--set", "nuclei_min=1", "--set", "nuclei_max=2", "--set", "radius_max=4"}) ==
          cli::kOk);
  REQUIRE(run_cli({"corrupt", "--data", data.string()}) == cli::kOk);
  CHECK(run_cli(with({"train", "--data", data.string(), "--runs", (dir.path / "runs").string()}, kTinyTrain)) ==
        cli::kConfig);
}

TEST_CASE("gradcheck passes on a fresh build") {
  CHECK(run_cli({"gradcheck", "--seeds", "2"}) == cli::kOk);
  CHECK(run_cli({"gradcheck", "--seeds", "0"}) == cli::kConfig);
}

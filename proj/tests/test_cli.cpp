#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mlmm/artifacts.hpp"
#include "mlmm/config.hpp"
#include "mlmm/csv.hpp"

using namespace mlmm;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(MLMM_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return -1;
  std::string out;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe) != nullptr) out += buf;
  const int status = pclose(pipe);
  if (output != nullptr) *output = out;
  return WEXITSTATUS(status);
}

std::string tiny_config(const fs::path& dir, std::uint64_t seed) {
  StudyConfig cfg;
  cfg.grid.n = {40, 80};
  cfg.grid.b1 = {0, 0.3};
  cfg.grid.prop_treated = {0.5};
  cfg.grid.b2 = {0.3, 0.6};
  cfg.grid.b3 = {0};
  cfg.reps = 12;
  cfg.seed = seed;
  cfg.out_dir = (dir / "out").string();
  const std::string path = (dir / "study.cfg").string();
  write_text_atomic(path, serialize_study_config(cfg));
  return path;
}

}  // namespace

TEST(Config, RoundTripsLosslessly) {
  StudyConfig cfg;
  cfg.grid.n = {100, 300, 500};
  cfg.grid.b1 = {0, 0.2, 0.4};
  cfg.grid.prop_treated = {0.5, 0.7, 0.9};
  cfg.grid.b2 = {0.3, 0.5, 0.7};
  cfg.grid.b3 = {0, 0.25, 0.5};
  cfg.reps = 100;
  cfg.seed = 987654321;
  cfg.out_dir = "somewhere";
  cfg.bootstrap_B = 400;
  const std::string text = serialize_study_config(cfg);
  const StudyConfig back = parse_study_config(text);
  EXPECT_EQ(serialize_study_config(back), text);
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_EQ(back.grid.b3, cfg.grid.b3);
  EXPECT_EQ(back.bootstrap_B, 400);
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_THROW(parse_study_config("n = 100\nbogus_key = 3\n"), std::invalid_argument);
}

TEST(Config, MalformedLineRejected) {
  EXPECT_THROW(parse_study_config("n 100\n"), std::invalid_argument);
  EXPECT_THROW(parse_study_config("reps =\n"), std::invalid_argument);
}

TEST(Config, ReferenceConfigParses) {
  const StudyConfig cfg =
      parse_study_config(read_text(std::string(MLMM_CONFIG_DIR) + "/reference_study.cfg"));
  EXPECT_EQ(expand_grid(cfg.grid).size(), 243u);
  EXPECT_EQ(cfg.reps, 100);
}

TEST(Cli, EndToEndPipeline) {
  const fs::path dir = fs::path(testing::TempDir()) / "mlmm_cli_e2e";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = tiny_config(dir, 555);

  std::string out;
  ASSERT_EQ(run_cli("run --config " + cfg + " --threads 2", &out), 0) << out;
  const std::string est = (dir / "out" / "estimates.csv").string();
  ASSERT_TRUE(fs::exists(est));
  const CsvTable table = read_csv(est);
  EXPECT_EQ(table.rows.size(), 8u * 12u * 3u);
  EXPECT_EQ(table.header, estimates_columns());

  // determinism: same config, fresh directory, same bytes
  const std::string hash1 = file_hash(est);
  ASSERT_EQ(run_cli("run --config " + cfg + " --out " + (dir / "out2").string() + " --threads 4",
                    &out),
            0)
      << out;
  EXPECT_EQ(file_hash((dir / "out2" / "estimates.csv").string()), hash1);

  ASSERT_EQ(run_cli("aggregate --estimates " + est, &out), 0) << out;
  ASSERT_TRUE(fs::exists(dir / "out" / "aggregates.csv"));
  EXPECT_EQ(read_csv((dir / "out" / "aggregates.csv").string()).rows.size(), 24u);

  ASSERT_EQ(run_cli("fit --estimates " + est + " --preset 3 --metric power", &out), 0) << out;
  const std::string fit_path = (dir / "out" / "fit_3_power.json").string();
  ASSERT_TRUE(fs::exists(fit_path));
  const auto doc = fit_document_from_json(nlohmann::json::parse(read_text(fit_path)));
  EXPECT_EQ(doc.n_clusters, 4);
  EXPECT_EQ(doc.n_obs, 12);

  ASSERT_EQ(run_cli("fit --estimates " + est + " --preset 2 --metric power", &out), 0) << out;
  const std::string fit2 = (dir / "out" / "fit_2_power.json").string();
  ASSERT_EQ(run_cli("eb --fit " + fit2, &out), 0) << out;
  ASSERT_TRUE(fs::exists(dir / "out" / "eb.csv"));

  ASSERT_EQ(run_cli("report --fit " + fit2 + " --fit " + fit_path, &out), 0) << out;
  ASSERT_TRUE(fs::exists(dir / "out" / "conjoint.csv"));
  ASSERT_TRUE(fs::exists(dir / "out" / "summary.md"));
  const CsvTable conjoint = read_csv((dir / "out" / "conjoint.csv").string());
  EXPECT_GT(conjoint.rows.size(), 0u);

  ASSERT_EQ(run_cli("bootstrap --estimates " + est +
                        " --bootstrap-level record --B 30 --metric power --seed 9",
                    &out),
            0)
      << out;
  ASSERT_TRUE(fs::exists(dir / "out" / "bootstrap.csv"));
}

TEST(Cli, ManifestMismatchRefusedWithoutForce) {
  const fs::path dir = fs::path(testing::TempDir()) / "mlmm_cli_manifest";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = tiny_config(dir, 777);
  std::string out;
  ASSERT_EQ(run_cli("run --config " + cfg, &out), 0) << out;
  const std::string est = (dir / "out" / "estimates.csv").string();

  // tamper with the estimates file
  std::ofstream f(est, std::ios::app);
  f << "\n";
  f.close();

  EXPECT_NE(run_cli("fit --estimates " + est + " --preset 3 --metric power", &out), 0);
  EXPECT_NE(out.find("manifest"), std::string::npos);
  EXPECT_EQ(run_cli("fit --estimates " + est + " --preset 3 --metric power --force", &out), 0)
      << out;
}

TEST(Cli, InvalidConfigGivesDiagnostics) {
  const fs::path dir = fs::path(testing::TempDir()) / "mlmm_cli_bad";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string path = (dir / "bad.cfg").string();
  write_text_atomic(path, "n = 100\nwat = 1\n");
  std::string out;
  EXPECT_NE(run_cli("run --config " + path, &out), 0);
  EXPECT_NE(out.find("line 2"), std::string::npos);
  EXPECT_NE(out.find("wat"), std::string::npos);
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "segmob/pipeline.hpp"
#include "segmob/synth.hpp"

using namespace segmob;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Every file under root except the timing manifest, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  }
  return out;
}

std::size_t data_rows(const fs::path& csv) {
  std::ifstream is(csv);
  std::string line;
  std::size_t n = 0;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    ++n;
  }
  return n;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SEGMOB_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testutil::TempDir;
    synth::SynthSpec s;
    s.n_users = 300;
    s.n_regions = 40;
    s.n_days = 28;
    s.visits_per_day = 1.0;
    s.seed = 3;
    s.start_date = parse_date("2020-03-02");
    s.window_days = 7;
    s.schedule = {{{"BL", s.start_date, s.start_date + 13}, 0.3}, {{"L", s.start_date + 14, s.start_date + 27}, 0.7}};
    files_ = new synth::CityFiles(synth::write_city(synth::generate_city(s), dir_->path() / "city"));
  }
  static void TearDownTestSuite() {
    delete files_;
    delete dir_;
  }

  static pipeline::Options opts(const fs::path& out, int threads = 1) {
    pipeline::Options o;
    o.config_path = files_->run_config;
    o.output_root = out;
    o.threads = threads;
    return o;
  }
  static fs::path fresh(const std::string& name) {
    const auto p = dir_->path() / name;
    fs::remove_all(p);
    return p;
  }

  static testutil::TempDir* dir_;
  static synth::CityFiles* files_;
};

testutil::TempDir* PipelineTest::dir_ = nullptr;
synth::CityFiles* PipelineTest::files_ = nullptr;

}  // namespace

TEST_F(PipelineTest, ProducesFullTree) {
  const auto out = fresh("full");
  pipeline::Pipeline(opts(out)).run();
  for (const char* f : {"provenance.json", "manifest.json", "ingest/summary.json", "infer/homes.csv", "infer/visits.csv",
                        "infer/qa.json", "label/users.csv", "label/places.csv", "matrices/index.json",
                        "matrices/M_all_BL.csv", "matrices/M_exclude_home_L.csv", "matrices/S_all_BL-L.csv",
                        "entropy/entropy_long.csv", "entropy/window_means.csv", "entropy/summary.json",
                        "stats/regression.json", "stats/kruskal.json", "stats/kruskal_table.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  for (auto s : pipeline::kStages) EXPECT_TRUE(fs::exists(out / pipeline::stage_name(s) / "stage.json"));

  // every CSV carries the provenance line
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (e.path().extension() != ".csv" || e.path().parent_path().filename() == "shards") continue;
    EXPECT_EQ(slurp(e.path()).rfind("# segmob ", 0), 0u) << e.path();
  }
  const auto summary = nlohmann::json::parse(slurp(out / "ingest/summary.json"));
  EXPECT_EQ(summary["trajectories"]["rejected"], 0);
  EXPECT_EQ(summary["ses_regions"], 40);

  // planted mixing shows up in the per-period matrices
  const auto m = nlohmann::json::parse(slurp(out / "matrices/M_exclude_home_L.json"));
  EXPECT_NEAR(m["r"].get<double>(), 0.7, 0.05);
  const auto bl = nlohmann::json::parse(slurp(out / "matrices/M_exclude_home_BL.json"));
  EXPECT_NEAR(bl["r"].get<double>(), 0.3, 0.05);
}

TEST_F(PipelineTest, DeterministicAcrossThreadCounts) {
  const auto a = fresh("t1"), b = fresh("t3");
  pipeline::Pipeline(opts(a, 1)).run();
  pipeline::Pipeline(opts(b, 3)).run();
  const auto ta = tree(a), tb = tree(b);
  ASSERT_EQ(ta.size(), tb.size());
  for (const auto& [k, v] : ta) EXPECT_TRUE(tb.count(k) && tb.at(k) == v) << k;
}

TEST_F(PipelineTest, ResumeMatchesColdRun) {
  const auto cold = fresh("cold"), warm = fresh("warm");
  pipeline::Pipeline(opts(cold)).run();
  pipeline::Pipeline(opts(warm)).run();
  fs::remove_all(warm / "entropy");
  fs::remove_all(warm / "stats");
  pipeline::Pipeline(opts(warm)).run();
  EXPECT_EQ(tree(cold), tree(warm));
  const auto manifest = nlohmann::json::parse(slurp(warm / "manifest.json"));
  EXPECT_EQ(manifest["stages"]["ingest"]["status"], "resumed");
  EXPECT_EQ(manifest["stages"]["entropy"]["status"], "ran");
}

TEST_F(PipelineTest, StageRequiresPrerequisite) {
  const auto out = fresh("partial");
  auto o = opts(out);
  o.only = pipeline::Stage::matrices;
  try {
    pipeline::Pipeline(o).run();
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("label"), std::string::npos);
  }
  o.only = pipeline::Stage::ingest;
  pipeline::Pipeline(o).run();
  EXPECT_TRUE(fs::exists(out / "ingest/stage.json"));
  EXPECT_FALSE(fs::exists(out / "infer"));
  o.only = pipeline::Stage::infer;
  EXPECT_NO_THROW(pipeline::Pipeline(o).run());
}

TEST_F(PipelineTest, EmitPlotsTables) {
  const auto out = fresh("plots");
  pipeline::Pipeline p(opts(out));
  p.run();
  const auto files = pipeline::emit_plots(out);
  EXPECT_FALSE(files.heatmaps.empty());
  EXPECT_FALSE(files.entropy.empty());
  EXPECT_FALSE(files.regression.empty());
  EXPECT_FALSE(files.kruskal.empty());
  const std::size_t n_filters = p.config().filters.size();
  EXPECT_EQ(data_rows(out / "plots/heatmaps.csv"), 100u * 2 * n_filters);
  EXPECT_EQ(data_rows(out / "plots/residual_isolation.csv"), n_filters);
  ASSERT_EQ(files.r_series.size(), n_filters);
  const auto wins = windows(parse_date("2020-03-02"), parse_date("2020-03-29"), 7, 1);
  for (const auto& f : files.r_series) EXPECT_EQ(data_rows(f), wins.size()) << f;

  fs::remove_all(out / "entropy");
  try {
    pipeline::emit_plots(out);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("entropy"), std::string::npos);
  }
}

TEST_F(PipelineTest, LenientSkipsMalformedRows) {
  const auto city = dir_->path() / "bad_city";
  fs::remove_all(city);
  fs::copy(files_->run_config.parent_path(), city);
  {
    std::ofstream os(city / "trajectories.csv", std::ios::app);
    os << "u99999,not_a_number,0,1,2\n";
  }
  pipeline::Options o;
  o.config_path = city / "run.conf";
  o.output_root = fresh("strict");
  EXPECT_THROW(pipeline::Pipeline(o).run(), Error);
  o.output_root = fresh("lenient");
  o.lenient = true;
  pipeline::Pipeline(o).run();
  const auto summary = nlohmann::json::parse(slurp(*o.output_root / "ingest/summary.json"));
  EXPECT_EQ(summary["trajectories"]["rejected"], 1);
}

TEST_F(PipelineTest, CliHonoursSegmobOut) {
  const auto env_out = fresh("env_out");
  ::setenv("SEGMOB_OUT", env_out.c_str(), 1);
  EXPECT_EQ(run_cli("run --threads 2 --config " + files_->run_config.string()), 0);
  EXPECT_TRUE(fs::exists(env_out / "stats/regression.json"));
  EXPECT_EQ(run_cli("emit-plots"), 0);
  EXPECT_TRUE(fs::exists(env_out / "plots/kruskal.csv"));
  const auto flag_out = fresh("flag_out");
  EXPECT_EQ(run_cli("run --stage ingest --out " + flag_out.string() + " --config " + files_->run_config.string()), 0);
  EXPECT_TRUE(fs::exists(flag_out / "ingest/stage.json"));
  EXPECT_FALSE(fs::exists(env_out / "plots/none"));
  ::unsetenv("SEGMOB_OUT");

  EXPECT_NE(run_cli("run --stage stats --out " + fresh("nostats").string() + " --config " +
                    files_->run_config.string()),
            0);
  EXPECT_NE(run_cli("run --stage bogus --config " + files_->run_config.string()), 0);
  EXPECT_EQ(run_cli("suggest-breakpoints --config " + files_->run_config.string()), 0);
  const auto synth_out = fresh("synth_cli");
  EXPECT_EQ(run_cli("synth --config " + std::string(SEGMOB_SOURCE_DIR) + "/configs/synth_city.conf --seed 9 --out " +
                    synth_out.string()),
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp(synth_out / "truth.json"))["seed"], 9);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "aunet/commands.hpp"

using namespace aunet;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "aunet_test_cli" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RunConfig smoke(const fs::path& root) {
  RunConfig c;
  c.seed = 3;
  c.paths.data_dir = (root / "data").string();
  c.paths.run_dir = (root / "run").string();
  c.model.depth = 2;
  c.model.base_channels = 4;
  c.train.epochs = 3;
  c.train.crop = {16, 16, 16};
  c.val_count = 1;
  c.n_train = 3;
  c.n_test = 2;
  c.synth.dims = {24, 24, 24};
  c.synth.large_radius = {4.0, 6.0};
  c.synth.small_radius = {1.5, 2.5};
  c.synth.distractor_count = 1;
  c.validate();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
  const RunConfig c;
  const RunConfig back = from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(from_json(nlohmann::json{{"modle", {{"depth", 3}}}}), ConfigError);
  EXPECT_THROW(from_json(nlohmann::json{{"model", {{"dept", 3}}}}), ConfigError);
  EXPECT_THROW(from_json(nlohmann::json{{"version", 99}}), ConfigError);
  EXPECT_THROW(from_json(nlohmann::json{{"model", {{"depth", "four"}}}}), ConfigError);
}

TEST(Config, OverridesWinOverFile) {
  const fs::path d = fresh_dir("config");
  {
    std::ofstream out(d / "c.json");
    out << R"({"version": 1, "model": {"depth": 3}, "train": {"epochs": 7}})";
  }
  const RunConfig c = load_run_config((d / "c.json").string(), {{"train.epochs", "2"}, {"paths.run_dir", "out dir"}});
  EXPECT_EQ(c.model.depth, 3u);
  EXPECT_EQ(c.train.epochs, 2u);
  EXPECT_EQ(c.paths.run_dir, "out dir");
  EXPECT_THROW(load_run_config((d / "c.json").string(), {{"train.bogus", "1"}}), ConfigError);
  EXPECT_THROW(load_run_config((d / "missing.json").string(), {}), IoError);
}

TEST(Config, CrossFieldValidation) {
  RunConfig c;
  c.model.n_classes = 2;
  EXPECT_THROW(c.validate(), ConfigError);  // synth still has three classes
  c = {};
  c.train.crop = {20, 20, 20};
  EXPECT_THROW(c.validate(), ConfigError);  // not divisible by 8
}

TEST(Synth, DeterministicExceptTimestamp) {
  const fs::path a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
  RunConfig ca = smoke(a), cb = smoke(b);
  const auto m = cmd::synth(ca);
  cmd::synth(cb);
  EXPECT_EQ(m.train.size(), 3u);
  EXPECT_EQ(m.test.size(), 2u);
  for (const auto& sub : {"train", "test"}) {
    for (const auto& e : fs::directory_iterator(a / "data" / sub)) {
      EXPECT_EQ(slurp(e.path()), slurp(b / "data" / sub / e.path().filename())) << e.path();
    }
  }
  auto ja = nlohmann::json::parse(slurp(a / "data" / "manifest.json"));
  auto jb = nlohmann::json::parse(slurp(b / "data" / "manifest.json"));
  ja.erase("created");
  jb.erase("created");
  EXPECT_EQ(ja, jb);
  for (const auto& n : m.test) EXPECT_NO_THROW(read_labels(cmd::label_stem(a / "data" / "test", n).string()));
}

TEST(Synth, EmptyTrainList) {
  const fs::path d = fresh_dir("synth_empty");
  RunConfig c = smoke(d);
  c.n_train = 0;
  EXPECT_TRUE(cmd::synth(c).train.empty());
  EXPECT_TRUE(cmd::read_manifest(c.paths.data_dir).train.empty());
}

TEST(Train, LogLinesResumeAndCheckpoints) {
  const fs::path d = fresh_dir("train");
  RunConfig c = smoke(d);
  cmd::synth(c);
  std::ostringstream quiet;
  const auto s1 = cmd::train_cmd(c, false, quiet);
  EXPECT_EQ(s1.last_epoch, 3u);
  EXPECT_EQ(lines(d / "run" / "train_log.jsonl"), 3u);
  EXPECT_TRUE(fs::exists(d / "run" / "best.ckpt"));
  const LoadedCheckpoint last = load_checkpoint((d / "run" / "last.ckpt").string());
  EXPECT_EQ(last.progress.step, s1.step);
  EXPECT_FALSE(last.progress.adam_m.empty());

  c.train.epochs = 5;
  const auto s2 = cmd::train_cmd(c, true, quiet);
  EXPECT_EQ(s2.last_epoch, 5u);
  EXPECT_EQ(s2.step, s1.step * 5 / 3);
  EXPECT_EQ(lines(d / "run" / "train_log.jsonl"), 5u);

  // resuming matches one uninterrupted run
  const fs::path e = fresh_dir("train_straight");
  RunConfig straight = smoke(e);
  straight.train.epochs = 5;
  cmd::synth(straight);
  cmd::train_cmd(straight, false, quiet);
  EXPECT_EQ(slurp(e / "run" / "train_log.jsonl"), slurp(d / "run" / "train_log.jsonl"));
  EXPECT_EQ(slurp(e / "run" / "last.ckpt"), slurp(d / "run" / "last.ckpt"));
}

TEST(Train, ValidationSplitIsSeededAndDisjoint) {
  const std::vector<std::string> names{"a", "b", "c", "d", "e"};
  const auto [fit, val] = cmd::validation_split(names, 2, 1);
  EXPECT_EQ(fit.size(), 3u);
  EXPECT_EQ(val.size(), 2u);
  for (const auto& v : val) EXPECT_EQ(std::count(fit.begin(), fit.end(), v), 0);
  EXPECT_EQ(cmd::validation_split(names, 2, 1), cmd::validation_split(names, 2, 1));
  EXPECT_THROW(cmd::validation_split(names, 5, 1), ConfigError);
}

TEST(Eval, ReportsMismatchAndPairedTest) {
  const fs::path d = fresh_dir("eval");
  RunConfig c = smoke(d);
  cmd::synth(c);
  std::ostringstream quiet;
  cmd::train_cmd(c, false, quiet);
  c.paths.checkpoint = (d / "run" / "best.ckpt").string();
  const auto r = cmd::eval_cmd(c);
  EXPECT_EQ(r.target_dsc.at("A").size(), 2u);
  EXPECT_EQ(lines(d / "run" / "eval_report.jsonl"), 2u * 2 + 2);  // volume records + summaries

  RunConfig wrong = c;
  wrong.model.base_channels = 2;
  try {
    cmd::eval_cmd(wrong);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.base_channels"), std::string::npos);
  }

  // attention_enabled may differ between A and B
  RunConfig plain = smoke(fresh_dir("eval_plain"));
  plain.paths.data_dir = c.paths.data_dir;
  plain.model.attention_enabled = false;
  cmd::train_cmd(plain, false, quiet);
  c.paths.checkpoint_b = (fs::path(plain.paths.run_dir) / "best.ckpt").string();
  const auto ab = cmd::eval_cmd(c);
  std::size_t paired = 0;
  for (const auto& l : ab.lines) paired += l.find("\"paired_test\"") != std::string::npos;
  EXPECT_EQ(paired, 2u);
}

TEST(Eval, TruthAsPredictionScoresOne) {
  SyntheticSpec s;
  s.seed = 3;
  const auto g = generate_synthetic(s);
  for (const auto& m : evaluate_all(g.labels, g.labels, 3)) {
    EXPECT_EQ(m.dsc, 1.0);
    EXPECT_EQ(m.precision, 1.0);
    EXPECT_EQ(m.recall, 1.0);
    ASSERT_TRUE(m.s2s_mm.has_value());
    EXPECT_EQ(*m.s2s_mm, 0.0);
  }
}

TEST(Eval, VolumeOrderDoesNotChangeSummary) {
  const fs::path d = fresh_dir("eval_order");
  RunConfig c = smoke(d);
  c.n_test = 3;
  cmd::synth(c);
  Network net = Network::build(c.model, 1);
  Dataset test = cmd::load_samples(fs::path(c.paths.data_dir) / "test", cmd::read_manifest(c.paths.data_dir).test);
  const auto a = cmd::evaluate_models(c, {{"A", &net}}, test);
  std::reverse(test.begin(), test.end());
  const auto b = cmd::evaluate_models(c, {{"A", &net}}, test);
  auto summaries = [](const cmd::EvalResult& r) {
    std::vector<std::string> out;
    for (const auto& l : r.lines)
      if (l.find("\"summary\"") != std::string::npos) out.push_back(l);
    return out;
  };
  EXPECT_EQ(summaries(a), summaries(b));
}

TEST(ExportAttention, PassThroughMapsAndRatio) {
  const fs::path d = fresh_dir("export");
  RunConfig c;
  c.model.n_gates = 2;
  c.paths.output = (d / "maps").string();
  SyntheticSpec s;
  s.seed = 8;
  const auto g = generate_synthetic(s);
  write_volume((d / "img").string(), g.image);
  write_labels((d / "lab").string(), g.labels);
  Network net = Network::build(c.model, 2);
  save_checkpoint((d / "m.ckpt").string(), net);
  c.paths.checkpoint = (d / "m.ckpt").string();
  c.paths.volume = (d / "img").string();
  c.paths.labels = (d / "lab").string();
  const auto maps = cmd::export_attention_cmd(c);
  ASSERT_EQ(maps.size(), net.gate_count() * c.model.n_gates);
  for (const auto& m : maps) {
    const Volume v = read_volume(m.stem);
    for (double a : v.data) EXPECT_NEAR(a, 0.9525741268224334, 1e-7);  // stored as f32
    ASSERT_TRUE(m.fg_bg_ratio.has_value());
    EXPECT_NEAR(*m.fg_bg_ratio, 1.0, 1e-12);
    EXPECT_TRUE(read_volume_extra(m.stem).contains("fg_bg_ratio"));
  }
  c.paths.volume = (d / "odd").string();
  write_volume(c.paths.volume, Volume({12, 16, 16}, {1, 1, 1}));
  EXPECT_THROW(cmd::export_attention_cmd(c), DimensionError);
}

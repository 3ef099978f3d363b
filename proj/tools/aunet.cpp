// aunet: synthetic data, training, evaluation, attention export and
// verification from one binary. Settings come from a JSON config file; any
// key can be overridden with --section.key value.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "aunet/commands.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides parse_overrides(const std::vector<std::string>& extras) {
  Overrides out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw aunet::ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw aunet::ConfigError("override --" + key + " needs a value");
      value = extras[++i];
    }
    if (key.find('.') == std::string::npos && key != "seed") {
      throw aunet::ConfigError("unknown option --" + key + " (config overrides look like --section.key value)");
    }
    out.emplace_back(key, value);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cmd = aunet::cmd;
  CLI::App app{"Attention U-Net desk-scale toolkit"};
  app.require_subcommand(1);
  std::string config_path, dump_config;
  bool resume = false;

  auto add = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("-c,--config", config_path, "JSON config file");
    s->allow_extras();
    return s;
  };
  CLI::App* synth = add("synth", "generate the synthetic train/test volumes and manifest");
  CLI::App* train = add("train", "train a model; writes best.ckpt, last.ckpt and train_log.jsonl");
  train->add_flag("--resume", resume, "continue from run_dir/last.ckpt");
  CLI::App* eval = add("eval", "evaluate one or two checkpoints on the test split");
  CLI::App* exp = add("export-attention", "write every attention map of one volume");
  CLI::App* ver = add("verify", "run the gradient, oracle and invariant checks");
  CLI::App* show = add("config", "print the merged, validated config");
  (void)show;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? cmd::kExitOk : cmd::kExitUsage;
  }
  CLI::App* sub = app.get_subcommands().front();

  try {
    const aunet::RunConfig c = aunet::load_run_config(config_path, parse_overrides(sub->remaining()));
    if (sub == synth) {
      const auto m = cmd::synth(c);
      std::cout << "wrote " << m.train.size() << " train and " << m.test.size() << " test volumes to "
                << c.paths.data_dir << "\n";
    } else if (sub == train) {
      const auto s = cmd::train_cmd(c, resume);
      std::cout << "epoch " << s.last_epoch << ", step " << s.step << ", best epoch " << s.best_epoch << " (score "
                << s.best_score << ") in " << c.paths.run_dir << "\n";
    } else if (sub == eval) {
      const auto r = cmd::eval_cmd(c);
      for (const auto& l : r.lines) {
        if (l.find("\"type\":\"volume\"") == std::string::npos) std::cout << l << "\n";
      }
    } else if (sub == exp) {
      for (const auto& m : cmd::export_attention_cmd(c)) {
        std::cout << m.stem;
        if (m.fg_bg_ratio) std::cout << "  fg/bg ratio " << *m.fg_bg_ratio;
        std::cout << "\n";
      }
    } else if (sub == ver) {
      const auto r = cmd::verify_cmd(c);
      std::cout << r.to_text() << r.checks.size() - r.failures() << "/" << r.checks.size() << " checks passed\n";
      if (!r.all_passed()) return cmd::kExitVerify;
    } else {
      std::cout << aunet::to_json(c).dump(2) << "\n";
    }
  } catch (const aunet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cmd::kExitConfig;
  } catch (const aunet::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return cmd::kExitIo;
  } catch (const aunet::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return cmd::kExitIo;
  } catch (const aunet::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return cmd::kExitNumerical;
  } catch (const aunet::DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return cmd::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cmd::kExitUsage;
  }
  return cmd::kExitOk;
}

// Command-line front end. One flat config file drives every subcommand;
// --set overrides individual keys. Exit codes: 0 ok, 2 config error,
// 3 undefined metric, 4 training divergence, 1 anything else.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relctr/config.hpp"
#include "relctr/errors.hpp"
#include "relctr/train.hpp"

namespace {

relctr::cfg::KeyValues load_config(const std::string& path,
                                   const std::vector<std::string>& sets) {
  relctr::cfg::KeyValues kv;
  if (!path.empty()) kv = relctr::cfg::KeyValues::from_file(path);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw relctr::ConfigError("--set expects key=value, got: " + s);
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relevance-aware CTR training workbench"};
  app.require_subcommand(1);
  app.fallthrough(true);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "flat key=value config file");
  app.add_option("--set", overrides, "override a key: --set key=value (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic search log");
  auto* pre = app.add_subcommand("pretrain-encoder",
                                 "distillation + relevance SFT for the text encoder");
  auto* trn = app.add_subcommand("train", "train the rank model, write report + checkpoint");
  auto* evl = app.add_subcommand("eval", "evaluate a saved model checkpoint");
  auto* swp = app.add_subcommand("sweep", "grid over debias.p1 x debias.p2, emits CSV");
  auto* abl = app.add_subcommand("ablate",
                                 "toggle mining / debias / pretrained encoder");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto kv = load_config(config_path, overrides);
    const auto ec = relctr::train::parse_experiment_config(kv);
    if (gen->parsed()) {
      const auto g = relctr::train::generate_all(ec);
      std::cout << "samples=" << g.samples << " exposed=" << g.exposed
                << " clicks=" << g.clicks << " full_rows=" << g.full_rows
                << " full_clicks=" << g.full_clicks
                << " behaviors=" << g.behaviors << "\n";
    } else if (pre->parsed()) {
      std::cout << relctr::train::run_pretrain(ec).dump(2) << "\n";
    } else if (trn->parsed()) {
      std::cout << relctr::train::run_experiment(ec).dump(2) << "\n";
    } else if (evl->parsed()) {
      std::cout << relctr::train::run_experiment(ec, /*eval_only=*/true).dump(2)
                << "\n";
    } else if (swp->parsed()) {
      std::cout << relctr::train::run_sweep(ec);
    } else if (abl->parsed()) {
      std::cout << relctr::train::run_ablate(ec).dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return relctr::exit_code_for(e);
  }
  return 0;
}

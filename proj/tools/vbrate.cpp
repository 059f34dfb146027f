// Command-line front end for the experiment drivers.
//
// Exit codes: 0 success, 2 invalid input or config, 3 numeric failure.

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "vbrate/vbrate.hpp"

namespace {

using Driver = std::function<vbrate::ExperimentOutput(const vbrate::ExperimentConfig&)>;

const std::map<std::string, std::pair<std::string, Driver>>& commands() {
  static const std::map<std::string, std::pair<std::string, Driver>> table{
      {"divcheck", {"divergence chain and Renyi monotonicity on random pairs", vbrate::divcheck}},
      {"gsm-rate", {"sequence-model risk versus n with exponent fit", vbrate::gsm_rate}},
      {"gsm-dim", {"mean k-tilde versus n with exponent fit", vbrate::gsm_dim}},
      {"gsm-lower", {"risk under the spike adversary", vbrate::gsm_lower}},
      {"trunc-curve", {"rate exponent curve of the truncated posterior", vbrate::trunc_curve}},
      {"pc-compare", {"piecewise constant: mean-field versus Markov chain", vbrate::pc_compare}},
      {"mix-fit", {"mixture CAVI with selection of k", vbrate::mix_fit}},
      {"expfam-fit", {"exponential family Gaussian mean-field fits", vbrate::expfam_fit}},
  };
  return table;
}

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "csv";
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational Bayes rate experiments"};
  app.require_subcommand(1);
  Options opt;
  std::string chosen;
  for (const auto& [name, entry] : commands()) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", opt.config, "JSON experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "master seed, overrides the config");
    sub->add_option("--out", opt.out, "output path, overrides the config; - for stdout");
    sub->add_option("--format", opt.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    sub->callback([&chosen, name = name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    vbrate::ExperimentConfig config = vbrate::load_config(opt.config);
    if (app.get_subcommand(chosen)->count("--seed")) config.master_seed = opt.seed;
    const std::string path = !opt.out.empty() ? opt.out : config.output;
    const auto format = vbrate::parse_format(opt.format);
    const auto result = commands().at(chosen).second(config);
    vbrate::write_text(path, vbrate::render(result, format));
  } catch (const vbrate::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const vbrate::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const vbrate::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// styleshift command line: data preparation, GAN training, adapted dataset generation,
// classifier training, evaluation and reporting.

#include "styleshift/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace ss = styleshift;

namespace {

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  bool deterministic = false;
  int epoch = 0;
  std::vector<std::string> overrides;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Experiment configuration file")->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seeds, "Run only these seeds (repeatable)");
  app->add_flag("--deterministic", c.deterministic, "Single-threaded, bit-reproducible execution");
  app->add_option("--epoch", c.epoch, "GAN checkpoint epoch used to generate adapted datasets")->check(CLI::PositiveNumber);
  app->add_option("--set", c.overrides, "Override a config key (key=value, repeatable)");
  app->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
}

ss::ExperimentConfig load_config(const Common& c) {
  auto flat = ss::FlatConfig::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::runtime_error("--set expects key=value, got " + kv);
    flat.set(ss::trim(kv.substr(0, eq)), ss::trim(kv.substr(eq + 1)));
  }
  if (!c.seeds.empty()) {
    std::string s;
    for (auto seed : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(seed);
    flat.set("seeds", s);
  }
  if (c.deterministic) flat.set("deterministic", "true");
  if (c.epoch > 0) {
    flat.set("gan.checkpoint_epoch", std::to_string(c.epoch));
    flat.set("gan.mix_epochs", "");
  }
  return ss::ExperimentConfig::from_flat(flat);
}

int run_until(const Common& c, ss::Stage until) {
  const auto cfg = load_config(c);
  const auto matrix = ss::run_experiment(cfg, {until, c.verbose});
  if (matrix) std::cout << ss::render_report(*matrix, ss::ReportFormat::markdown);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"styleshift: style-adapted datasets and self-ensembling classifiers"};
  app.require_subcommand(1);

  std::string root, domain, out;
  double fraction = 1.0;
  std::uint64_t subsample_seed = 0;
  auto* ingest = app.add_subcommand("ingest", "Index root/<domain>/<class>/<image> into a manifest");
  ingest->add_option("--root", root, "Dataset root")->required()->check(CLI::ExistingDirectory);
  ingest->add_option("--domain", domain, "Domain directory under the root")->required();
  ingest->add_option("--out", out, "Manifest path (.tsv)")->required();
  ingest->add_option("--fraction", fraction, "Per-class subsample fraction")->check(CLI::Range(0.0, 1.0));
  ingest->add_option("--seed", subsample_seed, "Subsample seed");

  std::vector<std::string> styles{"A", "B", "C"};
  ss::SyntheticSpec spec;
  std::uint64_t synth_seed = 7;
  auto* synth = app.add_subcommand("synth", "Render synthetic shape domains");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--styles", styles, "Styles to render")->delimiter(',');
  synth->add_option("--k", spec.k, "Number of classes");
  synth->add_option("--n", spec.n_per_class, "Images per class");
  synth->add_option("--resolution", spec.resolution, "Image side length");
  synth->add_option("--seed", synth_seed, "Render seed");

  Common common;
  const std::vector<std::pair<std::string, ss::Stage>> stages{{"train-gan", ss::Stage::train_gan},
                                                              {"generate", ss::Stage::generate},
                                                              {"train-clf", ss::Stage::train_clf},
                                                              {"evaluate", ss::Stage::evaluate},
                                                              {"run", ss::Stage::report}};
  std::vector<std::pair<CLI::App*, ss::Stage>> stage_cmds;
  for (const auto& [name, stage] : stages) {
    auto* cmd = app.add_subcommand(name, name == "run" ? "Run the full pipeline and print the markdown report"
                                                       : "Run the pipeline up to and including " + name);
    add_common(cmd, common);
    stage_cmds.emplace_back(cmd, stage);
  }

  std::string matrix_path, format = "markdown", config_path;
  auto* report = app.add_subcommand("report", "Render a transfer matrix as csv or markdown");
  report->add_option("--matrix", matrix_path, "matrix.json written by a finished run")->check(CLI::ExistingFile);
  report->add_option("--config", config_path, "Locate matrix.json through a configuration")->check(CLI::ExistingFile);
  report->add_option("--format", format, "csv or markdown");
  report->add_option("--out", out, "Output file (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      auto m = ss::ingest(root, domain);
      if (fraction < 1.0) m = ss::subsample(m, fraction, subsample_seed);
      ss::save_manifest(m, out);
      std::cout << m.records.size() << " records, k=" << m.k << " -> " << out << '\n';
      return 0;
    }
    if (*synth) {
      spec.validate();
      for (const auto& s : styles) {
        const auto m = ss::make_synthetic_domain(synth_seed, spec, ss::parse_synthetic_style(s), out);
        const auto mp = ss::fs::path(out) / (s + ".tsv");
        ss::save_manifest(m, mp);
        std::cout << m.records.size() << " records -> " << mp.string() << '\n';
      }
      return 0;
    }
    if (*report) {
      ss::fs::path path = matrix_path;
      if (path.empty()) {
        if (config_path.empty()) throw std::runtime_error("report needs --matrix or --config");
        path = ss::ExperimentConfig::from_flat(ss::FlatConfig::load(config_path)).output_dir / "matrix.json";
      }
      const auto m = ss::transfer_matrix_from_json(nlohmann::json::parse(ss::read_file(path)));
      const auto text = ss::render_report(m, format);
      if (out.empty()) std::cout << text;
      else ss::atomic_write(out, text);
      return 0;
    }
    for (const auto& [cmd, stage] : stage_cmds)
      if (*cmd) return run_until(common, stage);
  } catch (const ss::StageError& e) {
    std::cerr << "styleshift: stage " << ss::to_string(e.stage()) << " failed: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "styleshift: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

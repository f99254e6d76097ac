// Command-line front end: adaptive ground-state runs and the linear-model
// validation oracle.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "ksflow/driver.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ksflow: adaptive finite-element Kohn-Sham ground states via "
               "an orthonormality-preserving gradient flow"};
  app.require_subcommand(1);

  CLI::App* run_cmd = app.add_subcommand("run", "execute a ground-state run");
  std::string config_arg;
  int maxrefine_override = -1;
  bool oracle_linear = false;
  bool export_density = false;
  bool export_indicator = false;
  std::string indicator_mode;
  std::string outdir;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;

  run_cmd->add_option("--config", config_arg,
                      "config file path or builtin name "
                      "(he, h2, h2_paper, lih, harmonic_n1, harmonic_n2)")
      ->required();
  run_cmd->add_option("--maxrefine", maxrefine_override,
                      "override the number of refinement levels");
  run_cmd->add_flag("--oracle-linear", oracle_linear,
                    "validate the flow against a dense eigensolver "
                    "(requires hartree/xc disabled in the config)");
  run_cmd->add_flag("--export-density", export_density,
                    "write per-level density VTK files");
  run_cmd->add_flag("--export-indicator", export_indicator,
                    "write per-level indicator CSV files");
  run_cmd->add_option("--indicator-mode", indicator_mode,
                      "error indicator variant: literal|zz");
  run_cmd->add_option("--outdir", outdir, "output directory");
  run_cmd
      ->add_option("--seed", seed, "random seed for the initial orbitals")
      ->each([&](const std::string&) { seed_given = true; });
  run_cmd->add_flag("--deterministic", deterministic,
                    "byte-reproducible outputs (zeroes wall times)");

  CLI11_PARSE(app, argc, argv);

  try {
    ksflow::RunConfig cfg = ksflow::load_config(config_arg);
    if (maxrefine_override >= 0) cfg.maxrefine = maxrefine_override;
    if (export_density) cfg.export_density = true;
    if (export_indicator) cfg.export_indicator = true;
    if (!indicator_mode.empty()) {
      if (indicator_mode == "literal")
        cfg.indicator_mode = ksflow::IndicatorMode::Literal;
      else if (indicator_mode == "zz")
        cfg.indicator_mode = ksflow::IndicatorMode::ZZ;
      else
        throw ksflow::ConfigError("--indicator-mode must be literal|zz");
    }
    if (!outdir.empty()) cfg.outdir = outdir;
    if (seed_given) cfg.seed = seed;
    if (deterministic) cfg.deterministic = true;

    if (oracle_linear) {
      ksflow::LinearOracleReport rep = ksflow::run_linear_oracle(cfg);
      std::printf("linear oracle: dofs=%d steps=%d residual=%.3e\n", rep.dofs,
                  rep.steps, rep.residual);
      std::printf("  flow energy      %.12f\n", rep.flow_energy);
      std::printf("  eigensolver sum  %.12f\n", rep.eig_energy);
      std::printf("  relative gap     %.3e\n", rep.rel_gap);
      std::printf("  subspace angle   %.3e\n", rep.subspace_angle);
      return 0;
    }

    ksflow::RunSummary s = ksflow::run(cfg);
    std::printf("%s: %s\n", cfg.name.c_str(), s.termination.c_str());
    for (const ksflow::LevelRecord& L : s.levels)
      std::printf(
          "  level %d: dofs=%d tets=%d steps=%d E=%.8f residual=%.3e\n",
          L.level, L.dofs, L.tets, L.steps, L.energy.total, L.residual);
    if (!s.levels.empty())
      std::printf("final energy %.8f (outputs in %s)\n", s.final_energy,
                  cfg.outdir.c_str());
    return s.exit_code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

// condatlas: phantom generation, training, atlas emission, registration,
// evaluation and trajectory reports.
//
// Exit codes: 0 success, 2 bad flags or configuration, 3 I/O failure,
// 4 training aborted on a non-finite loss, 1 anything else.

#include <condatlas/config.hpp>
#include <condatlas/dataset.hpp>
#include <condatlas/metrics.hpp>
#include <condatlas/phantom.hpp>
#include <condatlas/train.hpp>
#include <condatlas/trajectory.hpp>
#include <condatlas/vvol_io.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace condatlas;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitDiverged = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Run {
  TrainConfig cfg;
  ParamStore params;
};

// A checkpoint is read together with the config.txt written next to it.
Run load_run(const fs::path& checkpoint) {
  const auto cfg_path = checkpoint.parent_path() / kConfigName;
  if (!fs::exists(cfg_path)) throw CheckpointError(CheckpointErrorCode::io, "missing " + cfg_path.string());
  Run r;
  r.cfg = load_config(cfg_path);
  r.params = load_checkpoint(checkpoint, param_layout(r.cfg.arch));
  return r;
}

Condition condition_arg(const TrainConfig& cfg, double raw) {
  try {
    return Condition::from_raw(raw, cfg.raw_min, cfg.raw_max);
  } catch (const std::out_of_range& e) {
    throw UsageError(e.what());
  }
}

void print_metric_row(const EvalRow& row) {
  std::cout << csv::format_row(report_header()) << csv::format_row(report_row(row));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional atlas learning on synthetic phantoms"};
  app.require_subcommand(1);

  // phantom
  auto* ph = app.add_subcommand("phantom", "Generate a phantom dataset with manifest");
  std::string ph_out;
  DatasetOptions ph_opt;
  bool ph_imbalanced = false, ph_random_test = false;
  std::vector<int> ph_grid{24, 24, 24};
  ph->add_option("--out", ph_out, "Output directory")->required();
  ph->add_option("--n-train", ph_opt.n_train, "Training subjects")->capture_default_str()->check(CLI::NonNegativeNumber);
  ph->add_option("--n-test", ph_opt.n_test, "Test subjects")->capture_default_str()->check(CLI::NonNegativeNumber);
  ph->add_option("--seed", ph_opt.seed, "Master seed")->capture_default_str();
  ph->add_option("--raw-min", ph_opt.raw_min, "Lowest raw condition")->capture_default_str();
  ph->add_option("--raw-max", ph_opt.raw_max, "Highest raw condition")->capture_default_str();
  ph->add_option("--grid", ph_grid, "Grid extents nx ny nz")->expected(3)->capture_default_str();
  ph->add_flag("--imbalanced", ph_imbalanced, "Skew training conditions towards raw-min");
  ph->add_flag("--random-test", ph_random_test, "Draw test conditions at random instead of two per bin");

  // train
  auto* tr = app.add_subcommand("train", "Train generator, registration and discriminator");
  std::string tr_config, tr_data, tr_out, tr_resume;
  bool tr_no_disc = false;
  int tr_threads = 0;
  tr->add_option("--config", tr_config, "Config file (key = value); defaults if omitted")->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--resume", tr_resume, "Continue from this checkpoint");
  tr->add_option("--threads", tr_threads, "Worker threads (overrides config)")->check(CLI::PositiveNumber);
  tr->add_flag("--no-disc", tr_no_disc, "Disable the discriminator (lambda_disc = 0, no D-steps)");

  // atlas
  auto* at = app.add_subcommand("atlas", "Emit the template and label map at a condition");
  std::string at_ckpt, at_out;
  double at_raw = 0.0;
  at->add_option("--checkpoint", at_ckpt, "Checkpoint file")->required();
  at->add_option("--a-raw", at_raw, "Raw condition")->required();
  at->add_option("--out", at_out, "Output prefix")->required();

  // register
  auto* rg = app.add_subcommand("register", "Register the atlas to one subject");
  std::string rg_ckpt, rg_subject, rg_labels, rg_out;
  double rg_raw = 0.0;
  rg->add_option("--checkpoint", rg_ckpt, "Checkpoint file")->required();
  rg->add_option("--subject", rg_subject, "Subject image .vvol")->required();
  rg->add_option("--a-raw", rg_raw, "Raw condition of the subject")->required();
  rg->add_option("--labels", rg_labels, "Truth labels for metrics (default: sibling _lab.vvol if present)");
  rg->add_option("--out", rg_out, "Output prefix")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the test split");
  std::string ev_ckpt, ev_data, ev_out, ev_split = "test";
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Report CSV path")->required();
  ev->add_option("--split", ev_split, "Manifest split to score")->capture_default_str()->check(CLI::IsMember({"train", "test"}));

  // trajectory
  auto* tj = app.add_subcommand("trajectory", "Volumetric growth trajectories");
  std::string tj_ckpt, tj_data, tj_out;
  int tj_degree = 2;
  tj->add_option("--checkpoint", tj_ckpt, "Checkpoint file")->required();
  tj->add_option("--data", tj_data, "Dataset directory")->required();
  tj->add_option("--out", tj_out, "Output directory")->required();
  tj->add_option("--degree", tj_degree, "Polynomial degree")->capture_default_str()->check(CLI::Range(1, 4));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*ph) {
      ph_opt.distribution = ph_imbalanced ? ConditionDistribution::imbalanced : ConditionDistribution::uniform;
      ph_opt.test_two_per_bin = !ph_random_test;
      ph_opt.spec.dims = {ph_grid[0], ph_grid[1], ph_grid[2]};
      if (!ph_opt.spec.dims.valid()) throw UsageError("grid extents must be positive");
      if (!(ph_opt.raw_max > ph_opt.raw_min)) throw UsageError("--raw-max must exceed --raw-min");
      const Manifest m = make_dataset(ph_out, ph_opt);
      std::cout << "wrote " << m.split("train").size() << " training and " << m.split("test").size()
                << " test phantoms (" << to_string(ph_opt.spec.dims) << ") to " << ph_out << "\n";
    } else if (*tr) {
      TrainConfig cfg;
      try {
        if (!tr_config.empty()) cfg = load_config(tr_config);
        if (tr_no_disc) cfg.weights.disc = 0.0;
        if (tr_threads > 0) cfg.threads = tr_threads;
        cfg.data_dir = tr_data;
        cfg.out_dir = tr_out;
        cfg.validate();
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const Manifest m = read_manifest(tr_data);
      FitOptions opt;
      opt.out_dir = tr_out;
      opt.resume_from = tr_resume;
      opt.on_epoch = [&](const EpochLog& e) {
        std::cout << "epoch " << e.epoch << "/" << cfg.schedule.epochs << "  L_img " << e.losses.img << "  L_seg "
                  << e.losses.seg << "  L_reg " << e.losses.reg << "  L_adv_g " << e.losses.adv_g << "  L_adv_d "
                  << e.losses.adv_d << "  (" << e.wall_seconds << " s)" << std::endl;
      };
      const FitResult r = fit(cfg, m, opt);
      std::cout << "done: " << r.g_steps << " G-steps, " << r.d_steps << " D-steps; checkpoint "
                << (fs::path(tr_out) / kCheckpointName).string() << "\n";
    } else if (*at) {
      const Run run = load_run(at_ckpt);
      const Condition c = condition_arg(run.cfg, at_raw);
      const TemplateOutput t = generate_template(run.params, run.cfg.arch, c.normalized);
      write_vvol(at_out + "_img.vvol", t.image);
      write_vvol(at_out + "_lab.vvol", t.labels);
      std::cout << "atlas at a_raw " << c.raw << " (a_norm " << c.normalized << ") written to " << at_out
                << "_{img,lab}.vvol\n";
    } else if (*rg) {
      const Run run = load_run(rg_ckpt);
      const Condition c = condition_arg(run.cfg, rg_raw);
      const Volume3D subject = read_image(rg_subject);
      if (!(subject.dims == run.cfg.arch.dims)) {
        throw UsageError("subject dims " + to_string(subject.dims) + " do not match checkpoint grid " +
                         to_string(run.cfg.arch.dims));
      }
      const auto t0 = std::chrono::steady_clock::now();
      const Registration r = register_subject(run.params, run.cfg.arch, subject, c.normalized);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_vvol(rg_out + "_warped_img.vvol", r.warped_template);
      write_vvol(rg_out + "_warped_lab.vvol", r.warped_labels);
      write_vvol(rg_out + "_velocity.vvol", r.velocity);
      write_vvol(rg_out + "_displacement.vvol", r.displacement);
      if (rg_labels.empty()) {
        try {
          const auto sib = label_path_for(rg_subject);
          if (fs::exists(sib)) rg_labels = sib;
        } catch (const std::invalid_argument&) {
        }
      }
      if (!rg_labels.empty()) {
        EvalRow row = evaluate_subject(rg_subject, c.raw, r, read_labels(rg_labels));
        row.seconds = secs;
        print_metric_row(row);
      } else {
        const auto js = jacobian_stats(jacobian_det(r.displacement));
        std::cout << "jac_pos_frac " << js.positive_fraction << "  def_norm " << deformation_norm(r.displacement)
                  << "  (no truth labels; overlap metrics skipped)\n";
      }
      std::cerr << "inference wall time " << secs << " s\n";
    } else if (*ev) {
      const Run run = load_run(ev_ckpt);
      const EvalReport rep = evaluate(run.params, run.cfg, read_manifest(ev_data), ev_split);
      write_report(rep, ev_out);
      const auto summary = summarize(rep);
      for (const auto& [name, a] : summary) {
        if (name == "dsc_mean" || name == "hd95_mean" || name == "jac_pos_frac" || name == "def_norm" || name == "efc") {
          std::cout << name << " " << a.mean << " +- " << a.std << "\n";
        }
      }
      std::cout << rep.rows.size() << " subjects; report " << ev_out << "\n";
    } else if (*tj) {
      const Run run = load_run(tj_ckpt);
      const auto results = trajectory_analysis(run.params, run.cfg, read_manifest(tj_data), tj_degree);
      write_trajectory_report(results, run.cfg, tj_out);
      for (const auto& r : results) {
        std::cout << kTissueNames[r.label] << ": slope " << r.slope << " cm3/unit, RMSE atlas " << r.rmse_atlas
                  << ", RMSE pred " << r.rmse_pred << "\n";
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const VvolError& e) {
    std::cerr << "volume I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const csv::CsvError& e) {
    std::cerr << "CSV error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

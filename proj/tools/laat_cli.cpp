// laat: anchor diagnostics, anchor expansion, adversarial training and
// robust zero-/few-shot evaluation from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "laat/laat.hpp"

namespace {

using laat::io::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit(const json& j, const std::string& path) {
  const std::string text = laat::io::dump17(j);
  std::cout << text;
  if (!path.empty()) laat::io::write_text(path, text);
}

json cos_stats_json(const laat::AnchorSet& a) {
  const auto st = laat::compute_cos_stats(a);
  return {{"num_anchors", a.size()},
          {"dim", a.dim()},
          {"source", a.source()},
          {"mean_offdiag_cos", st.mean_offdiag_cos},
          {"max_offdiag_cos", st.max_offdiag_cos},
          {"min_offdiag_cos", st.min_offdiag_cos}};
}

void print_cos_table(const std::string& title, const laat::AnchorSet& a) {
  const auto st = laat::compute_cos_stats(a);
  std::printf("%-28s N=%-5zu n=%-5zu mean=%.4f  max=%.4f  min=%.4f\n", title.c_str(), a.size(),
              a.dim(), st.mean_offdiag_cos, st.max_offdiag_cos, st.min_offdiag_cos);
}

/// Anchors restricted to the dataset's classes, in dataset order.
laat::Tensor anchors_for(const laat::Dataset& d, const laat::AnchorSet& anchors) {
  return anchors.subset(d.labels).vectors();
}

/// Runs a config step, turning validation failures into usage errors.
template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void check_model_fits(const laat::Mlp& m, const laat::Dataset& d, const laat::AnchorSet& a) {
  if (m.input_dim() != d.dim) throw std::invalid_argument("model input dim does not match dataset");
  if (m.output_dim() != a.dim()) throw std::invalid_argument("model output dim does not match anchors");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"laat - anchor expansion and anchor-aligned adversarial training"};
  app.require_subcommand(1);

  // ---- anchors ------------------------------------------------------------------
  auto* anchors_cmd = app.add_subcommand("anchors", "anchor-set diagnostics and transforms");
  anchors_cmd->require_subcommand(1);

  std::string stats_file;
  bool stats_json = false, stats_expand = false;
  auto* stats = anchors_cmd->add_subcommand("stats", "cosine-similarity statistics");
  stats->add_option("file", stats_file, "anchor file")->required();
  stats->add_flag("--json", stats_json, "print JSON instead of a table");
  stats->add_flag("--with-expansion", stats_expand, "also report statistics after expansion");

  std::string expand_in, expand_out, expand_fit;
  auto* expand_cmd = anchors_cmd->add_subcommand("expand", "fit the expansion and apply it");
  expand_cmd->add_option("in", expand_in, "input anchor file")->required();
  expand_cmd->add_option("out", expand_out, "output anchor file")->required();
  expand_cmd->add_option("--fit-on", expand_fit, "fit the expansion on these (training) anchors");

  std::size_t mmc_classes = 0, mmc_dim = 0;
  std::string mmc_out;
  auto* mmc = anchors_cmd->add_subcommand("mmc", "regular-simplex (MMC) anchors");
  mmc->add_option("--classes", mmc_classes, "number of classes")->required();
  mmc->add_option("--dim", mmc_dim, "embedding dimension")->required();
  mmc->add_option("out", mmc_out, "output anchor file")->required();

  std::string ranks_file, ranks_groups;
  auto* ranks = anchors_cmd->add_subcommand("ranks", "semantic-consistency rank metrics");
  ranks->add_option("file", ranks_file, "anchor file")->required();
  ranks->add_option("--groups", ranks_groups, "label -> group mapping file")->required();

  // ---- train --------------------------------------------------------------------
  std::string train_config, train_anchors, train_out, train_curve, train_data;
  std::optional<std::uint64_t> train_seed;
  auto* train = app.add_subcommand("train", "adversarially train an encoder");
  train->add_option("--config", train_config, "JSON training config")->required();
  train->add_option("--anchors", train_anchors, "anchor file (used as-is)")->required();
  train->add_option("--out", train_out, "output model manifest")->required();
  train->add_option("--curve", train_curve, "learning-curve CSV")->required();
  train->add_option("--data", train_data, "dataset file (overrides config 'data')");
  train->add_option("--seed", train_seed, "training seed (overrides config)");

  // ---- attack -------------------------------------------------------------------
  std::string atk_model, atk_anchors, atk_data, atk_preset = "pgd20", atk_report;
  std::optional<double> atk_eps, atk_step;
  std::optional<int> atk_steps;
  bool atk_random = false;
  std::uint64_t atk_seed = 0;
  auto* attack = app.add_subcommand("attack", "robust accuracy under one attack");
  attack->add_option("--model", atk_model, "model manifest")->required();
  attack->add_option("--anchors", atk_anchors, "anchor file")->required();
  attack->add_option("--data", atk_data, "dataset file (test split is attacked)")->required();
  attack->add_option("--preset", atk_preset, "attack preset")
      ->check(CLI::IsMember({"fgsm", "pgd20", "cw30", "pgd-train", "pgd2"}));
  attack->add_option("--epsilon", atk_eps, "l-inf radius");
  attack->add_option("--steps", atk_steps, "iterations");
  attack->add_option("--step-size", atk_step, "step size");
  attack->add_flag("--random-start", atk_random, "uniform random start in the ball");
  attack->add_option("--seed", atk_seed, "seed");
  attack->add_option("--report", atk_report, "also write the JSON report here");

  // ---- eval ---------------------------------------------------------------------
  std::string ev_model, ev_anchors, ev_data, ev_report, ev_csv, ev_mode = "auto";
  std::size_t ev_nway = 0, ev_kshot = 0, ev_tasks = 2000, ev_queries = 15;
  double ev_beta = 2.0;
  std::uint64_t ev_seed = 0;
  std::vector<std::string> ev_attacks = {"fgsm", "pgd20", "cw30"};
  auto* eval = app.add_subcommand("eval", "clean and robust accuracy, whole split or N-way tasks");
  eval->add_option("--model", ev_model, "model manifest")->required();
  eval->add_option("--anchors", ev_anchors, "anchor file (expanded anchors for novel classes)")->required();
  eval->add_option("--data", ev_data, "dataset file (test split is evaluated)")->required();
  eval->add_option("--n-way", ev_nway, "classes per task (0 = whole split)");
  eval->add_option("--k-shot", ev_kshot, "support images per class (0 = zero-shot)");
  eval->add_option("--tasks", ev_tasks, "number of sampled tasks");
  eval->add_option("--queries", ev_queries, "query images per class");
  eval->add_option("--beta", ev_beta, "text-anchor weight for blended anchors");
  eval->add_option("--mode", ev_mode, "anchor mode")->check(CLI::IsMember({"auto", "text", "image", "blended"}));
  eval->add_option("--attacks", ev_attacks, "attack presets")->delimiter(',');
  eval->add_option("--seed", ev_seed, "seed");
  eval->add_option("--report", ev_report, "also write the JSON report here");
  eval->add_option("--csv", ev_csv, "write a CSV summary here");

  // ---- synth-data ---------------------------------------------------------------
  std::size_t sd_classes = 10, sd_dim = 32, sd_per_class = 140, sd_anchor_dim = 16;
  double sd_spread = 0.1, sd_cap = 0.6;
  std::uint64_t sd_seed = 0;
  std::string sd_out, sd_anchors_out;
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic blob dataset");
  synth->add_option("--classes", sd_classes, "number of classes");
  synth->add_option("--dim", sd_dim, "input dimension");
  synth->add_option("--spread", sd_spread, "per-coordinate noise std");
  synth->add_option("--samples-per-class", sd_per_class, "samples per class (train + test)");
  synth->add_option("--seed", sd_seed, "seed");
  synth->add_option("--out", sd_out, "output dataset file")->required();
  synth->add_option("--anchors-out", sd_anchors_out,
                    "also write clustered anchors tied to the classes (semantic task)");
  synth->add_option("--anchor-dim", sd_anchor_dim, "anchor dimension for --anchors-out");
  synth->add_option("--cap", sd_cap, "anchor cap half-angle in radians for --anchors-out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (stats->parsed()) {
      const auto f = laat::io::load_anchor_file(stats_file);
      if (stats_json) {
        json j = {{"anchors", cos_stats_json(f.anchors)}};
        if (stats_expand) {
          const auto model = laat::fit_expansion(f.anchors);
          j["expanded"] = cos_stats_json(laat::expand(f.anchors, model));
          j["phi0"] = model.phi0;
        }
        emit(j, "");
      } else {
        print_cos_table("anchors", f.anchors);
        if (stats_expand) {
          const auto model = laat::fit_expansion(f.anchors);
          print_cos_table("after expansion", laat::expand(f.anchors, model));
          std::printf("phi0 = %.6f rad\n", model.phi0);
        }
      }
    } else if (expand_cmd->parsed()) {
      auto f = laat::io::load_anchor_file(expand_in);
      const laat::AnchorSet fit_set =
          expand_fit.empty() ? f.anchors : laat::io::load_anchor_file(expand_fit).anchors;
      const auto model = laat::fit_expansion(fit_set);
      laat::io::AnchorFile out{laat::expand(f.anchors, model), f.prompt, true, model};
      laat::io::save_anchor_file(expand_out, out);
      json j = {{"before", cos_stats_json(f.anchors)},
                {"after", cos_stats_json(out.anchors)},
                {"phi0", model.phi0},
                {"fit_on", expand_fit.empty() ? expand_in : expand_fit},
                {"out", expand_out}};
      emit(j, "");
    } else if (mmc->parsed()) {
      laat::io::AnchorFile out{laat::generate_mmc_anchors(mmc_classes, mmc_dim), "", false, {}};
      laat::io::save_anchor_file(mmc_out, out);
      json j = {{"classes", mmc_classes}, {"dim", mmc_dim}, {"out", mmc_out}};
      if (mmc_classes >= 2) j["stats"] = cos_stats_json(out.anchors);
      emit(j, "");
    } else if (ranks->parsed()) {
      const auto f = laat::io::load_anchor_file(ranks_file);
      const auto m = laat::rank_metrics(f.anchors, laat::io::load_group_map(ranks_groups));
      emit(laat::io::rank_metrics_to_json(m), "");
    } else if (train->parsed()) {
      const json config = laat::io::parse_json(laat::io::read_text(train_config), train_config);
      auto job = as_usage([&] { return laat::io::train_job_from_json(config); });
      if (!train_data.empty()) job.data = train_data;
      if (train_seed) job.train.seed = *train_seed;
      if (job.data.empty()) throw UsageError("no dataset: pass --data or set 'data' in the config");
      const auto data = laat::io::load_dataset(job.data);
      const auto anchors = laat::io::load_anchor_file(train_anchors).anchors;
      laat::Mlp model({data.dim, job.hidden, anchors.dim()}, job.init_seed);
      const auto curve = laat::train(model, data, anchors, job.train);
      laat::io::save_model(train_out, model);
      laat::io::write_text(train_curve, laat::io::format_curve_csv(curve));
      json j = {{"config", laat::io::train_job_to_json(job)},
                {"anchors", train_anchors},
                {"model", train_out},
                {"curve", train_curve}};
      if (!curve.empty()) {
        j["final"] = {{"train_loss", curve.back().train_loss},
                      {"clean_acc", curve.back().clean_acc},
                      {"robust_acc", curve.back().robust_acc}};
      }
      emit(j, "");
    } else if (attack->parsed()) {
      const auto cfg = as_usage([&] {
        auto c = laat::presets::by_name(atk_preset);
        if (atk_eps) c.epsilon = *atk_eps;
        if (atk_steps) c.steps = *atk_steps;
        if (atk_step) c.step_size = *atk_step;
        if (atk_random) c.random_start = true;
        c.validate();
        return c;
      });
      const auto model = laat::io::load_model(atk_model);
      const auto data = laat::io::load_dataset(atk_data);
      const auto anchors = laat::io::load_anchor_file(atk_anchors).anchors;
      check_model_fits(model, data, anchors);
      const auto rep = laat::evaluate(model, anchors_for(data, anchors), data.test, {cfg}, atk_seed);
      json j = laat::io::report_to_json(rep);
      j["preset"] = atk_preset;
      j["model"] = atk_model;
      j["anchors"] = atk_anchors;
      emit(j, atk_report);
    } else if (eval->parsed()) {
      std::vector<laat::AttackConfig> attacks;
      for (const auto& name : ev_attacks) attacks.push_back(as_usage([&] { return laat::presets::by_name(name); }));
      const auto model = laat::io::load_model(ev_model);
      const auto data = laat::io::load_dataset(ev_data);
      const auto anchors = laat::io::load_anchor_file(ev_anchors).anchors;
      check_model_fits(model, data, anchors);
      const laat::Tensor a = anchors_for(data, anchors);
      laat::EvalReport rep;
      if (ev_nway == 0) {
        rep = laat::evaluate(model, a, data.test, attacks, ev_seed);
      } else {
        laat::AnchorMode mode = laat::AnchorMode::Text;
        if (ev_mode == "image") mode = laat::AnchorMode::Image;
        else if (ev_mode == "blended") mode = laat::AnchorMode::Blended;
        else if (ev_mode == "auto" && ev_kshot > 0) mode = laat::AnchorMode::Blended;
        if (mode != laat::AnchorMode::Text && ev_kshot == 0) {
          throw UsageError("image/blended anchors need --k-shot >= 1");
        }
        const auto tasks = laat::sample_nway_tasks(data.test, data.num_classes(), ev_nway, ev_kshot,
                                                   ev_tasks, ev_seed, ev_queries);
        rep = laat::evaluate_tasks(model, a, data.test, tasks, mode, ev_beta, attacks, ev_seed);
      }
      json j = laat::io::report_to_json(rep);
      j["model"] = ev_model;
      j["anchors"] = ev_anchors;
      emit(j, ev_report);
      if (!ev_csv.empty()) laat::io::write_text(ev_csv, laat::io::format_report_csv(rep));
    } else if (synth->parsed()) {
      json prov = {{"classes", sd_classes}, {"dim", sd_dim}, {"spread", sd_spread},
                   {"samples_per_class", sd_per_class}, {"seed", sd_seed}};
      if (sd_anchors_out.empty()) {
        const auto d = laat::make_synthetic_dataset(sd_classes, sd_dim, sd_per_class, sd_spread, sd_seed);
        laat::io::save_dataset(sd_out, d, prov);
      } else {
        laat::SemanticTaskConfig c;
        c.num_classes = sd_classes;
        c.input_dim = sd_dim;
        c.anchor_dim = sd_anchor_dim;
        c.spread = sd_spread;
        c.cap_half_angle = sd_cap;
        c.test_per_class = std::max<std::size_t>(1, sd_per_class / 4);
        if (sd_per_class <= c.test_per_class) throw UsageError("--samples-per-class too small");
        c.train_per_class = sd_per_class - c.test_per_class;
        c.seed = sd_seed;
        const auto task = laat::make_semantic_task(c);
        prov["anchor_dim"] = sd_anchor_dim;
        prov["cap"] = sd_cap;
        laat::io::save_dataset(sd_out, task.data, prov);
        laat::io::save_anchor_file(sd_anchors_out, {task.text_anchors, "", false, {}});
      }
      emit({{"out", sd_out}, {"provenance", prov}}, "");
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

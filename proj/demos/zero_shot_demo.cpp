// Trains an encoder against expanded anchors on 10 base classes of a
// synthetic task, then classifies 10 unseen classes zero-shot and with
// 1-shot blended anchors.
//
//   ./zero_shot_demo [epochs]

#include <cstdio>
#include <cstdlib>

#include "laat/laat.hpp"

int main(int argc, char** argv) {
  using namespace laat;
  const int epochs = argc > 1 ? std::atoi(argv[1]) : 40;

  SemanticTaskConfig tc;
  tc.num_classes = 20;
  const SemanticTask task = make_semantic_task(tc);
  const std::vector<std::string> base(task.data.labels.begin(), task.data.labels.begin() + 10);
  const std::vector<std::string> novel(task.data.labels.begin() + 10, task.data.labels.end());

  // Fit on base anchors only; novel anchors reuse the same mapping.
  const ExpansionModel model = fit_expansion(task.text_anchors.subset(base));
  const AnchorSet expanded = expand(task.text_anchors, model);
  const auto before = compute_cos_stats(task.text_anchors.subset(base));
  const auto after = compute_cos_stats(expanded.subset(base));
  std::printf("base anchors: mean CoS %.3f -> %.3f after expansion (phi0 = %.3f rad)\n",
              before.mean_offdiag_cos, after.mean_offdiag_cos, model.phi0);

  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.lr_decay_epochs = {epochs / 2, 3 * epochs / 4};
  cfg.curve_samples = 100;
  Mlp net({tc.input_dim, {128, 128}, tc.anchor_dim}, 1);
  const LearningCurve curve = train(net, task.data.filter_classes(base), expanded.subset(base), cfg);
  for (const auto& p : curve)
    if (p.epoch % 10 == 0 || p.epoch == epochs)
      std::printf("epoch %3d  loss %.4f  clean %.3f  pgd20 %.3f\n", p.epoch, p.train_loss,
                  p.clean_acc, p.robust_acc);

  const Split novel_test = task.data.filter_classes(novel).test;
  const Tensor novel_anchors = expanded.subset(novel).vectors();
  for (std::size_t k : {0, 1}) {
    const auto tasks = sample_nway_tasks(novel_test, novel.size(), 5, k, 300, 7);
    const EvalReport rep = evaluate_tasks(net, novel_anchors, novel_test, tasks,
                                          k ? AnchorMode::Blended : AnchorMode::Text, 2.0,
                                          {presets::fgsm(), presets::pgd20()});
    std::printf("novel 5-way %zu-shot (%s): clean %.3f +- %.3f  fgsm %.3f  pgd20 %.3f\n", k,
                rep.anchor_mode.c_str(), rep.clean_acc, rep.ci95.at("clean"),
                rep.robust_acc.at("fgsm"), rep.robust_acc.at("pgd20"));
  }

  const auto x = novel_test.x.gather_rows(std::vector<std::size_t>{0});
  std::printf("first novel test image (%s) predicted as %s\n",
              novel[novel_test.y[0]].c_str(),
              zero_shot_predict(net, expanded.subset(novel), x).c_str());
}

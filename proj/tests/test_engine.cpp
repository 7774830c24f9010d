#include "support.hpp"

#include <cnsg/engine.hpp>
#include <cnsg/report.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace cnsg;
using cnsg::testing::max_abs_diff;
using cnsg::testing::model_distance;
using cnsg::testing::small_config;
namespace fs = std::filesystem;

namespace {

const synth::Dataset& small_data() {
  static const synth::Dataset ds = synth::generate_dataset(small_config().data.spec);
  return ds;
}

const std::vector<synth::VideoSample>& source_train() { return small_data().domain("daylight").train; }

}  // namespace

TEST(PolyLr, Schedule) {
  EXPECT_DOUBLE_EQ(engine::poly_lr(0.01, 0, 100, 0.9), 0.01);
  EXPECT_NEAR(engine::poly_lr(0.01, 50, 100, 0.9), 0.01 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_DOUBLE_EQ(engine::poly_lr(0.01, 100, 100, 0.9), 0.0);
  EXPECT_DOUBLE_EQ(engine::poly_lr(0.01, 150, 100, 0.9), 0.0);
}

TEST(Metrics, MiouByHand) {
  // rows = ground truth, cols = prediction
  auto c = torch::tensor({3, 1, 0, 2, 4, 0, 0, 0, 0}, torch::kLong).view({3, 3});
  auto r = engine::miou(c);
  EXPECT_NEAR(r.iou[0], 3.0 / (4 + 5 - 3), 1e-12);
  EXPECT_NEAR(r.iou[1], 4.0 / (6 + 5 - 4), 1e-12);
  EXPECT_FALSE(r.counted[2]);
  EXPECT_TRUE(std::isnan(r.iou[2]));
  EXPECT_NEAR(r.miou, (0.5 + 4.0 / 7.0) / 2.0, 1e-12);
}

TEST(Metrics, PredictedButAbsentClassHurtsOthersOnly) {
  auto c = torch::tensor({5, 5, 0, 0}, torch::kLong).view({2, 2});
  auto r = engine::miou(c);
  EXPECT_FALSE(r.counted[1]);
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
}

TEST(Metrics, RejectsEmptyOrNegative) {
  EXPECT_THROW(engine::miou(torch::zeros({2, 2}, torch::kLong)), Error);
  EXPECT_THROW(engine::miou(torch::tensor({1, -1, 0, 1}, torch::kLong).view({2, 2})), Error);
  EXPECT_THROW(engine::miou(torch::zeros({2, 3}, torch::kLong)), ShapeError);
}

TEST(Metrics, ConfusionSkipsIgnore) {
  auto conf = torch::zeros({3, 3}, torch::kLong);
  auto gt = torch::tensor(std::vector<int64_t>{0, 1, 2, kIgnoreIndex, 1});
  auto pred = torch::tensor({0, 2, 2, 1, 1}, torch::kLong);
  engine::accumulate_confusion(conf, pred, gt, 3);
  EXPECT_EQ(conf.sum().item<int64_t>(), 4);
  EXPECT_EQ(conf[1][2].item<int64_t>(), 1);
  EXPECT_EQ(conf[1][1].item<int64_t>(), 1);
}

TEST(Metrics, PerfectPredictionScoresOne) {
  auto conf = torch::zeros({4, 4}, torch::kLong);
  auto gt = torch::randint(0, 4, {50}, torch::kLong);
  engine::accumulate_confusion(conf, gt, gt, 4);
  EXPECT_DOUBLE_EQ(engine::miou(conf).miou, 1.0);
}

TEST(Trainer, BatchesAreStateless) {
  auto cfg = small_config();
  engine::Trainer a(cfg, &source_train()), b(cfg, &source_train());
  a.step();
  a.step();
  for (int64_t it : {0, 5, 17}) EXPECT_EQ(a.batch_samples(it), b.batch_samples(it));
  cfg.seed = 1;
  engine::Trainer c(cfg, &source_train());
  bool differs = false;
  for (int64_t it = 0; it < 4; ++it) differs |= c.batch_samples(it) != b.batch_samples(it);
  EXPECT_TRUE(differs);
}

TEST(Trainer, RunsAreBitwiseRepeatable) {
  auto cfg = small_config();
  engine::Trainer a(cfg, &source_train()), b(cfg, &source_train());
  std::ostringstream la, lb;
  a.run(&la);
  b.run(&lb);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(model_distance(a.model(), b.model()), 0.0);
}

TEST(Trainer, LogRecordsAreNdjson) {
  auto cfg = small_config();
  cfg.train.iterations = 3;
  engine::Trainer t(cfg, &source_train());
  std::ostringstream os;
  t.run(&os);
  std::istringstream is(os.str());
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("iter").get<int>(), n);
    for (const char* k : {"L_s", "L_cls", "L_sca", "lr"}) EXPECT_TRUE(j.contains(k));
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  auto cfg = small_config();
  const auto path = fs::temp_directory_path() / ("cnsg_resume_" + std::to_string(::getpid()) + ".pt");
  engine::Trainer full(cfg, &source_train());
  full.run();

  engine::Trainer first(cfg, &source_train());
  for (int i = 0; i < 3; ++i) first.step();
  first.save(path);
  engine::Trainer second(cfg, &source_train());
  second.load(path);
  EXPECT_EQ(second.iteration(), 3);
  second.run();
  EXPECT_LE(model_distance(full.model(), second.model()), 1e-5);
  fs::remove(path);
}

TEST(Trainer, CheckpointFromDifferentConfigIsRejected) {
  auto cfg = small_config();
  const auto path = fs::temp_directory_path() / ("cnsg_ck_" + std::to_string(::getpid()) + ".pt");
  engine::Trainer t(cfg, &source_train());
  t.step();
  t.save(path);
  cfg.alpha = 0.5;
  engine::Trainer other(cfg, &source_train());
  EXPECT_THROW(other.load(path), Error);
  fs::remove(path);
}

TEST(Trainer, LoadedCheckpointEvaluatesIdentically) {
  auto cfg = small_config();
  const auto path = fs::temp_directory_path() / ("cnsg_eval_" + std::to_string(::getpid()) + ".pt");
  engine::Trainer t(cfg, &source_train());
  t.run();
  t.save(path);
  auto ck = engine::load_checkpoint(path);
  EXPECT_EQ(ck.iteration, cfg.train.iterations);
  EXPECT_EQ(config::config_hash(ck.config), config::config_hash(cfg));
  const auto& eval = small_data().domain("fog").eval;
  EXPECT_TRUE(torch::equal(engine::confusion_for(t.model(), eval, cfg), engine::confusion_for(ck.model, eval, cfg)));
  fs::remove(path);
  EXPECT_THROW(engine::load_checkpoint(path), Error);
}

TEST(Trainer, BankReplaysFromCentroidStream) {
  auto cfg = small_config();
  cfg.train.log_centroids = true;
  engine::Trainer t(cfg, &source_train());
  t.run();
  const auto& stream = t.centroid_stream();
  ASSERT_FALSE(stream.empty());
  const int64_t n = cfg.model.num_classes, k = cfg.model.feature_channels();
  auto replay = torch::zeros({n, k}, torch::kDouble);
  std::vector<bool> seen(static_cast<size_t>(n), false);
  for (const auto& rec : stream) {
    auto v = torch::tensor(rec.values, torch::kDouble);
    if (!seen[static_cast<size_t>(rec.class_id)]) {
      replay[rec.class_id] = v;
      seen[static_cast<size_t>(rec.class_id)] = true;
    } else {
      replay[rec.class_id] = cfg.ema_lambda * replay[rec.class_id] + (1.0 - cfg.ema_lambda) * v;
    }
  }
  for (int64_t c = 0; c < n; ++c) {
    ASSERT_EQ(seen[static_cast<size_t>(c)], t.model()->bank.is_initialized(c));
    if (seen[static_cast<size_t>(c)]) EXPECT_LE(max_abs_diff(replay[c], t.model()->bank.row(c)), 1e-5);
  }
}

TEST(Trainer, LossTermsFollowSwitches) {
  auto cfg = small_config();
  cfg.loss.use_nsca = false;
  auto samples = std::vector<const synth::VideoSample*>{&source_train()[0], &source_train()[1]};
  auto batch = engine::make_batch(samples, 0.0, 0);
  auto model = engine::build_model(cfg);
  auto [off, f1] = engine::total_loss(model, batch, cfg, true);
  EXPECT_FALSE(off.has_sca);
  EXPECT_TRUE(off.has_cls);
  EXPECT_NEAR(off.total.item<double>(), off.l_s + off.l_cls, 1e-5);
  cfg.loss.use_nsca = true;
  cfg.loss.w_sca = 2.0;
  auto [on, f2] = engine::total_loss(model, batch, cfg, false);
  if (on.has_sca) EXPECT_NEAR(on.total.item<double>(), on.l_s + on.l_cls + 2.0 * on.l_sca, 1e-5);
}

TEST(Trainer, NonFiniteLossIsReported) {
  auto cfg = small_config();
  auto bad = source_train();
  for (auto& s : bad) s.frame_curr = torch::full_like(s.frame_curr, NAN);
  engine::Trainer t(cfg, &bad);
  try {
    t.step();
    FAIL() << "expected TrainingDiverged";
  } catch (const engine::TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch seeds"), std::string::npos);
  }
}

TEST(Trainer, EmptyTrainingSetIsRejected) {
  std::vector<synth::VideoSample> none;
  EXPECT_THROW(engine::Trainer(small_config(), &none), Error);
}

TEST(Evaluate, ReportsEveryRequestedDomain) {
  auto cfg = small_config();
  engine::Trainer t(cfg, &source_train());
  t.run();
  auto rep = engine::evaluate(t.model(), small_data(), engine::unseen_domains(cfg), cfg, nullptr);
  ASSERT_EQ(rep.domains.size(), 3u);
  double sum = 0.0;
  for (const auto& d : rep.domains) {
    EXPECT_GE(d.metrics.miou, 0.0);
    EXPECT_LE(d.metrics.miou, 1.0);
    sum += d.metrics.miou;
  }
  EXPECT_NEAR(rep.average, sum / 3.0, 1e-12);
  ASSERT_TRUE(rep.unseen_average.has_value());
  EXPECT_NEAR(*rep.unseen_average, rep.average, 1e-12);

  auto all = engine::evaluate(t.model(), small_data(), small_data().domain_names(), cfg, nullptr);
  ASSERT_EQ(all.domains.size(), 4u);
  EXPECT_EQ(all.source_domain, cfg.data.source_domain);
  EXPECT_NEAR(*all.unseen_average, rep.average, 1e-12);
  auto only_source = engine::evaluate(t.model(), small_data(), {cfg.data.source_domain}, cfg, nullptr);
  EXPECT_FALSE(only_source.unseen_average.has_value());
  EXPECT_THROW(engine::evaluate(t.model(), small_data(), {"snow"}, cfg, nullptr), Error);
}

TEST(Experiments, CellsAreMemoised) {
  auto cfg = small_config();
  cfg.train.iterations = 2;
  engine::CellRunner runner(small_data());
  auto a = runner.run(cfg);
  auto b = runner.run(cfg);
  EXPECT_FALSE(a.error.has_value());
  EXPECT_EQ(a.seconds, b.seconds);
  EXPECT_EQ(a.domain_miou, b.domain_miou);
}

TEST(Experiments, AblationAndSweepShapes) {
  auto cfg = small_config();
  cfg.train.iterations = 2;
  cfg.experiment.seeds = {0, 1};
  engine::CellRunner runner(small_data());
  auto table = engine::ablate(cfg, runner);
  ASSERT_EQ(table.rows.size(), 4u);
  EXPECT_EQ(table.rows[0].variant, "baseline");
  EXPECT_FALSE(table.rows[0].use_nsfr);
  EXPECT_EQ(table.rows[3].cells.size(), 2u);
  EXPECT_EQ(table.rows[3].average.count, 2);
  auto curve = engine::alpha_sweep(cfg, {0.0, 0.3}, runner);
  ASSERT_EQ(curve.points.size(), 2u);
  // alpha = 0.3 with NSFR+NSCA is the full ablation cell: memoised, identical.
  EXPECT_EQ(curve.at(0.3).cells[0].config_hash, table.row("+NSFR+NSCA").cells[0].config_hash);
  EXPECT_THROW(curve.at(0.5), Error);
  EXPECT_THROW(engine::alpha_sweep(cfg, {1.5}, runner), ShapeError);

  auto tj = report::to_json(table);
  auto text = report::ablation_text(tj);
  EXPECT_NE(text.find("+NSFR+NSCA"), std::string::npos);
  EXPECT_NE(report::ablation_csv(tj).find("baseline,0,0,average"), std::string::npos);
  auto svg = report::sweep_svg(report::to_json(curve));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
}

TEST(Experiments, SeedStatsUsePopulationDeviation) {
  auto s = engine::seed_stats({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_NEAR(s.stddev, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_EQ(engine::seed_stats({}).count, 0);
}

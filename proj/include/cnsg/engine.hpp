#pragma once

// Training, evaluation and the experiment runners.
//
// Training objective per batch of frame pairs:
//   L = w_s * L_s + w_cls * L_cls + w_sca * L_sca
// L_s is the fused-prediction cross-entropy on frame t, L_cls the centroid
// classification loss over both frames, L_sca the non-salient centroid
// alignment between frames t-1 and t.
//
// Batches are drawn statelessly from (run seed, iteration), so a resumed run
// sees exactly the batches an uninterrupted one would.

#include <cnsg/alignment.hpp>
#include <cnsg/config.hpp>
#include <cnsg/dataset.hpp>
#include <cnsg/segnet.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace cnsg::engine {

using config::RunConfig;
using nlohmann::json;
using synth::VideoSample;

struct TrainingDiverged : Error {
  using Error::Error;
};

struct Batch {
  torch::Tensor frames_prev;  // [B, 3, H, W]
  torch::Tensor frames_curr;
  torch::Tensor labels_prev;  // [B, H, W]
  torch::Tensor labels_curr;
  torch::Tensor flow;         // [B, 2, H, W]
  std::vector<uint64_t> seeds;
};

/// Stack samples into a batch, applying one photometric augmentation per pair.
inline Batch make_batch(const std::vector<const VideoSample*>& samples, double augment_strength,
                        uint64_t augment_seed, torch::Dtype dtype = torch::kFloat) {
  std::vector<torch::Tensor> fp, fc, lp, lc, fl;
  Batch b;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    auto [prev, curr] = synth::augment_pair(s.frame_prev, s.frame_curr, synth::mix_seed(augment_seed, i),
                                            augment_strength);
    fp.push_back(prev);
    fc.push_back(curr);
    lp.push_back(s.label_prev);
    lc.push_back(s.label_curr);
    fl.push_back(s.flow);
    b.seeds.push_back(s.seed);
  }
  b.frames_prev = torch::stack(fp).to(dtype);
  b.frames_curr = torch::stack(fc).to(dtype);
  b.labels_prev = torch::stack(lp);
  b.labels_curr = torch::stack(lc);
  b.flow = torch::stack(fl).to(dtype);
  return b;
}

struct LossBreakdown {
  torch::Tensor total;
  double l_s = 0.0;
  double l_cls = 0.0;
  double l_sca = 0.0;
  bool has_cls = false;
  bool has_sca = false;
  torch::Tensor l_s_t, l_cls_t, l_sca_t;  // graph-connected terms (undefined when absent)
};

inline torch::Tensor classification_term(const std::vector<segnet::FrameAnalysis>& frames,
                                         const cam::CentroidClassifier& classifier) {
  std::vector<torch::Tensor> per_frame;
  for (const auto& f : frames) {
    std::vector<std::pair<int64_t, torch::Tensor>> pairs;
    for (int64_t n = 0; n < static_cast<int64_t>(f.class_centroids.size()); ++n)
      if (f.class_centroids[static_cast<size_t>(n)].defined())
        pairs.emplace_back(n, f.class_centroids[static_cast<size_t>(n)]);
    if (!pairs.empty()) per_frame.push_back(cam::classification_loss(pairs, classifier));
  }
  if (per_frame.empty()) return {};
  return torch::stack(per_frame).mean();
}

inline torch::Tensor alignment_term(const std::vector<segnet::FrameAnalysis>& prev,
                                    const std::vector<segnet::FrameAnalysis>& curr, int64_t channels,
                                    const torch::TensorOptions& options) {
  std::vector<torch::Tensor> per_pair;
  for (size_t i = 0; i < prev.size(); ++i) {
    auto a = alignment::make_frame_centroids(prev[i].ns_centroids, channels, options);
    auto b = alignment::make_frame_centroids(curr[i].ns_centroids, channels, options);
    if (alignment::shared_classes(a, b).empty()) continue;
    per_pair.push_back(alignment::nsca_loss(a, b));
  }
  if (per_pair.empty()) return {};
  return torch::stack(per_pair).mean();
}

/// Forward a batch and compose the objective. `update_bank` folds the batch's
/// non-salient centroids into the prototype bank before the reasoning pass.
inline std::pair<LossBreakdown, segnet::PairForward> total_loss(segnet::SegModel& model, const Batch& batch,
                                                                const RunConfig& cfg, bool update_bank) {
  segnet::ForwardOptions opt;
  opt.use_nsfr = cfg.loss.use_nsfr;
  opt.alpha = cfg.alpha;
  opt.update_bank = update_bank;
  opt.analyse_prev = true;
  auto fwd = model->forward_pair(batch.frames_prev, batch.frames_curr, batch.flow, batch.labels_prev,
                                 batch.labels_curr, opt);
  LossBreakdown out;
  out.l_s_t = segnet::segmentation_loss_from_logits(fwd.logits, batch.labels_curr);
  out.total = cfg.loss.w_s * out.l_s_t;
  out.l_s = out.l_s_t.item<double>();

  std::vector<segnet::FrameAnalysis> both = fwd.prev;
  both.insert(both.end(), fwd.curr.begin(), fwd.curr.end());
  out.l_cls_t = classification_term(both, model->cam_classifier);
  if (out.l_cls_t.defined()) {
    out.has_cls = true;
    out.l_cls = out.l_cls_t.item<double>();
    out.total = out.total + cfg.loss.w_cls * out.l_cls_t;
  }
  if (cfg.loss.use_nsca) {
    out.l_sca_t = alignment_term(fwd.prev, fwd.curr, model->config().feature_channels(), fwd.logits.options());
    if (out.l_sca_t.defined()) {
      out.has_sca = true;
      out.l_sca = out.l_sca_t.item<double>();
      out.total = out.total + cfg.loss.w_sca * out.l_sca_t;
    }
  }
  return {std::move(out), std::move(fwd)};
}

inline double poly_lr(double base, int64_t iter, int64_t total, double power) {
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(std::max<int64_t>(total, 1));
  return base * std::pow(std::max(frac, 0.0), power);
}

struct LogRecord {
  int64_t iter = 0;
  double l_s = 0, l_cls = 0, l_sca = 0, total = 0, lr = 0;
};

inline json to_json(const LogRecord& r) {
  return json{{"iter", r.iter}, {"L_s", r.l_s}, {"L_cls", r.l_cls}, {"L_sca", r.l_sca}, {"lr", r.lr}};
}

/// One entry per ema_update call, in update order.
struct CentroidRecord {
  int64_t iter = 0;
  int64_t class_id = 0;
  std::vector<double> values;
};

inline segnet::SegModel build_model(const RunConfig& cfg) {
  torch::manual_seed(cfg.seed);
  return segnet::SegModel(cfg.model, cfg.ema_lambda);
}

class Trainer {
 public:
  Trainer(RunConfig cfg, const std::vector<VideoSample>* train_set)
      : cfg_(std::move(cfg)), train_set_(train_set), model_(build_model(cfg_)) {
    if (train_set_ == nullptr || train_set_->empty()) throw Error("train: empty training set");
    optimizer_ = std::make_unique<torch::optim::SGD>(
        model_->parameters(), torch::optim::SGDOptions(cfg_.optimizer.lr)
                                  .momentum(cfg_.optimizer.momentum)
                                  .weight_decay(cfg_.optimizer.weight_decay));
  }

  segnet::SegModel& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  int64_t iteration() const { return iter_; }
  bool done() const { return iter_ >= cfg_.train.iterations; }
  const std::vector<CentroidRecord>& centroid_stream() const { return centroids_; }

  std::vector<const VideoSample*> batch_samples(int64_t iter) const {
    std::vector<const VideoSample*> out;
    const auto n = static_cast<uint64_t>(train_set_->size());
    for (int64_t j = 0; j < cfg_.train.batch_size; ++j) {
      const uint64_t key = synth::mix_seed(cfg_.seed, static_cast<uint64_t>(iter * cfg_.train.batch_size + j));
      out.push_back(&(*train_set_)[static_cast<size_t>(key % n)]);
    }
    return out;
  }

  /// One SGD step. Throws TrainingDiverged on a non-finite loss.
  LogRecord step() {
    model_->train();
    const double lr = poly_lr(cfg_.optimizer.lr, iter_, cfg_.train.iterations, cfg_.optimizer.poly_power);
    for (auto& group : optimizer_->param_groups())
      static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);

    auto samples = batch_samples(iter_);
    auto batch = make_batch(samples, cfg_.train.augment_strength,
                            synth::mix_seed(cfg_.seed ^ 0xA0A0ull, static_cast<uint64_t>(iter_)));
    optimizer_->zero_grad();
    auto [loss, fwd] = total_loss(model_, batch, cfg_, /*update_bank=*/true);
    if (!std::isfinite(loss.total.item<double>())) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << iter_ << " (L_s=" << loss.l_s << ", L_cls=" << loss.l_cls
         << ", L_sca=" << loss.l_sca << "); batch seeds:";
      for (auto s : batch.seeds) os << ' ' << s;
      throw TrainingDiverged(os.str());
    }
    if (cfg_.train.log_centroids) record_centroids(fwd);
    loss.total.backward();
    optimizer_->step();

    LogRecord rec{iter_, loss.l_s, loss.l_cls, loss.l_sca, loss.total.item<double>(), lr};
    ++iter_;
    return rec;
  }

  /// Run to completion, streaming NDJSON records to `log` when given.
  void run(std::ostream* log = nullptr, const std::function<void(const LogRecord&)>& on_step = {}) {
    while (!done()) {
      auto rec = step();
      if (log && (rec.iter % std::max<int64_t>(cfg_.train.log_every, 1) == 0 || done()))
        *log << to_json(rec).dump() << '\n';
      if (on_step) on_step(rec);
    }
  }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  void record_centroids(const segnet::PairForward& fwd) {
    // Mirrors the update order inside SegModel::forward_pair.
    for (size_t i = 0; i < fwd.prev.size(); ++i) {
      for (const auto* frame : {&fwd.prev[i], &fwd.curr[i]}) {
        for (int64_t n = 0; n < static_cast<int64_t>(frame->ns_centroids.size()); ++n) {
          const auto& c = frame->ns_centroids[static_cast<size_t>(n)];
          if (!c.defined()) continue;
          auto d = c.detach().to(torch::kDouble).contiguous();
          centroids_.push_back({iter_, n, std::vector<double>(d.data_ptr<double>(), d.data_ptr<double>() + d.numel())});
        }
      }
    }
  }

  RunConfig cfg_;
  const std::vector<VideoSample>* train_set_;
  segnet::SegModel model_;
  std::unique_ptr<torch::optim::SGD> optimizer_;
  int64_t iter_ = 0;
  std::vector<CentroidRecord> centroids_;
};

// Checkpoint: a torch serialization archive with
//   model/...          every named parameter and buffer of SegModel
//   bank/prototypes    [N, K] prototype bank
//   bank/initialized   [N] bool
//   meta/iteration     int64 scalar, the next iteration to run
//   meta/config        effective config JSON (string)
//   meta/config_hash   digest of meta/config (string)
//   optimizer/...      SGD momentum buffers
//   rng/torch          CPU generator state
inline void save_model_state(torch::serialize::OutputArchive& archive, const segnet::SegModel& model) {
  torch::serialize::OutputArchive model_archive;
  model->save(model_archive);
  archive.write("model", model_archive);
  archive.write("bank/prototypes", model->bank.prototypes);
  std::vector<uint8_t> init(model->bank.initialized.begin(), model->bank.initialized.end());
  archive.write("bank/initialized", torch::tensor(std::vector<int64_t>(init.begin(), init.end())));
}

inline void load_model_state(torch::serialize::InputArchive& archive, segnet::SegModel& model) {
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  model->load(model_archive);
  torch::Tensor protos, init;
  archive.read("bank/prototypes", protos);
  archive.read("bank/initialized", init);
  model->bank.prototypes = protos.clone();
  auto acc = init.to(torch::kLong).contiguous();
  for (int64_t i = 0; i < acc.numel(); ++i) model->bank.initialized[static_cast<size_t>(i)] = acc[i].item<int64_t>() != 0;
}

inline void Trainer::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  save_model_state(archive, model_);
  const auto cfg_json = config::to_json(cfg_);
  archive.write("meta/iteration", torch::tensor(iter_));
  archive.write("meta/config", c10::IValue(cfg_json.dump()));
  archive.write("meta/config_hash", c10::IValue(config::config_hash(cfg_json)));
  torch::serialize::OutputArchive optim_archive;
  optimizer_->save(optim_archive);
  archive.write("optimizer", optim_archive);
  archive.write("rng/torch", torch::globalContext().defaultGenerator(torch::kCPU).get_state());
  archive.save_to(path.string());
}

inline void Trainer::load(const std::filesystem::path& path) {
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue hash;
  archive.read("meta/config_hash", hash);
  if (hash.toStringRef() != config::config_hash(cfg_))
    throw Error(path.string() + ": checkpoint was written by a different config (hash " + hash.toStringRef() + ")");
  load_model_state(archive, model_);
  torch::Tensor it;
  archive.read("meta/iteration", it);
  iter_ = it.item<int64_t>();
  torch::serialize::InputArchive optim_archive;
  archive.read("optimizer", optim_archive);
  optimizer_->load(optim_archive);
  torch::Tensor rng;
  archive.read("rng/torch", rng);
  auto gen = torch::globalContext().defaultGenerator(torch::kCPU);
  gen.set_state(rng);
}

struct LoadedCheckpoint {
  RunConfig config;
  json config_json;
  segnet::SegModel model{nullptr};
  int64_t iteration = 0;
};

/// Rebuild the model described by a checkpoint's embedded config and load its weights.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(path.string() + ": checkpoint not found");
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue cfg_text;
  archive.read("meta/config", cfg_text);
  LoadedCheckpoint out;
  out.config_json = json::parse(cfg_text.toStringRef());
  out.config = config::resolve(out.config_json);
  out.model = segnet::SegModel(out.config.model, out.config.ema_lambda);
  load_model_state(archive, out.model);
  torch::Tensor it;
  archive.read("meta/iteration", it);
  out.iteration = it.item<int64_t>();
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  std::vector<double> iou;        // per class; NaN when the class has no ground truth
  std::vector<bool> counted;      // class has >= 1 ground-truth pixel
  double miou = 0.0;
  torch::Tensor confusion;        // [N, N] int64, rows = ground truth, cols = prediction
};

/// IoU_n = C[n,n] / (row_n + col_n - C[n,n]); the mean skips classes without ground truth.
inline MetricsReport miou(const torch::Tensor& confusion) {
  detail::require(confusion.dim() == 2 && confusion.size(0) == confusion.size(1), "miou: confusion must be square");
  auto c = confusion.to(torch::kDouble);
  if (c.sum().item<double>() <= 0.0) throw Error("miou: confusion matrix is all zero");
  if ((c < 0).any().item<bool>()) throw Error("miou: confusion matrix has negative entries");
  MetricsReport r;
  r.confusion = confusion.to(torch::kLong);
  const int64_t n = c.size(0);
  auto rows = c.sum(1), cols = c.sum(0), diag = c.diagonal();
  double total = 0.0;
  int64_t counted = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double gt = rows[i].item<double>();
    const double inter = diag[i].item<double>();
    const double uni = gt + cols[i].item<double>() - inter;
    r.counted.push_back(gt > 0);
    r.iou.push_back(uni > 0 ? inter / uni : std::nan(""));
    if (gt > 0) {
      total += inter / uni;
      ++counted;
    }
  }
  r.miou = total / static_cast<double>(counted);
  return r;
}

/// Accumulate conf[gt, pred] over labelled pixels.
inline void accumulate_confusion(torch::Tensor& confusion, const torch::Tensor& pred, const torch::Tensor& label,
                                 int64_t num_classes, int64_t ignore_index = kIgnoreIndex) {
  auto keep = label != ignore_index;
  auto idx = label.masked_select(keep) * num_classes + pred.masked_select(keep);
  confusion += torch::bincount(idx.reshape({-1}), {}, num_classes * num_classes).view({num_classes, num_classes});
}

inline segnet::ForwardOptions eval_options(const RunConfig& cfg) {
  segnet::ForwardOptions opt;
  opt.use_nsfr = cfg.loss.use_nsfr;
  opt.alpha = cfg.alpha;
  return opt;
}

/// Loss-free evaluation over frame pairs; prediction is scored against frame t labels.
inline torch::Tensor confusion_for(segnet::SegModel& model, const std::vector<VideoSample>& samples,
                                   const RunConfig& cfg, int64_t batch_size = 8) {
  torch::NoGradGuard no_grad;
  model->eval();
  const int64_t n = model->config().num_classes;
  auto confusion = torch::zeros({n, n}, torch::kLong);
  const auto dtype = model->cam_classifier->weight.scalar_type();
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    std::vector<const VideoSample*> chunk;
    for (size_t i = start; i < std::min(samples.size(), start + static_cast<size_t>(batch_size)); ++i)
      chunk.push_back(&samples[i]);
    auto batch = make_batch(chunk, 0.0, 0, dtype);
    auto fwd = model->forward_pair(batch.frames_prev, batch.frames_curr, batch.flow, std::nullopt, std::nullopt,
                                   eval_options(cfg));
    accumulate_confusion(confusion, fwd.logits.argmax(1), batch.labels_curr, n);
  }
  return confusion;
}

struct DomainMetrics {
  std::string domain;
  MetricsReport metrics;
};

struct EvaluationReport {
  std::vector<DomainMetrics> domains;
  double average = 0.0;  // arithmetic mean of per-domain mIoU
  std::string source_domain;
  std::optional<double> unseen_average;  // same, excluding the source domain
};

inline EvaluationReport evaluate(segnet::SegModel& model, const synth::Dataset& data,
                                 const std::vector<std::string>& domains, const RunConfig& cfg,
                                 std::ostream* warn = &std::cerr) {
  EvaluationReport rep;
  double sum = 0.0;
  for (const auto& name : domains) {
    const auto& split = data.domain(name);
    if (split.eval.empty()) {
      if (warn) *warn << "warning: domain '" << name << "' has no evaluation samples, skipped\n";
      continue;
    }
    rep.domains.push_back({name, miou(confusion_for(model, split.eval, cfg))});
    sum += rep.domains.back().metrics.miou;
  }
  if (!rep.domains.empty()) rep.average = sum / static_cast<double>(rep.domains.size());
  rep.source_domain = cfg.data.source_domain;
  double unseen = 0.0;
  int64_t n_unseen = 0;
  for (const auto& d : rep.domains)
    if (d.domain != rep.source_domain) unseen += d.metrics.miou, ++n_unseen;
  if (n_unseen > 0) rep.unseen_average = unseen / static_cast<double>(n_unseen);
  return rep;
}

inline std::vector<std::string> unseen_domains(const RunConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& d : cfg.data.spec.domains)
    if (d != cfg.data.source_domain) out.push_back(d);
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

struct CellResult {
  std::string config_hash;
  uint64_t seed = 0;
  std::map<std::string, double> domain_miou;
  double average = 0.0;
  double seconds = 0.0;
  std::optional<std::string> error;
};

/// Train one model from scratch and evaluate it on the unseen domains.
/// Results are memoised by config hash so shared cells run once.
class CellRunner {
 public:
  explicit CellRunner(const synth::Dataset& data, std::ostream* progress = nullptr)
      : data_(data), progress_(progress) {}

  CellResult run(const RunConfig& cfg) {
    const auto hash = config::config_hash(cfg);
    if (auto it = cache_.find(hash); it != cache_.end()) return it->second;
    CellResult r;
    r.config_hash = hash;
    r.seed = cfg.seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Trainer trainer(cfg, &data_.domain(cfg.data.source_domain).train);
      trainer.run();
      auto rep = evaluate(trainer.model(), data_, unseen_domains(cfg), cfg, progress_);
      for (const auto& d : rep.domains) r.domain_miou[d.domain] = d.metrics.miou;
      r.average = rep.average;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress_) {
      *progress_ << "  cell " << hash << " seed=" << cfg.seed << " nsfr=" << cfg.loss.use_nsfr
                 << " nsca=" << cfg.loss.use_nsca << " alpha=" << cfg.alpha << " -> ";
      if (r.error)
        *progress_ << "FAILED: " << *r.error;
      else
        *progress_ << "avg mIoU " << r.average;
      *progress_ << " (" << r.seconds << " s)" << std::endl;
    }
    cache_[hash] = r;
    return r;
  }

 private:
  const synth::Dataset& data_;
  std::ostream* progress_;
  std::map<std::string, CellResult> cache_;
};

struct SeedStats {
  double mean = 0.0;
  double stddev = 0.0;  // population deviation over seeds
  int64_t count = 0;
};

inline SeedStats seed_stats(const std::vector<double>& v) {
  SeedStats s;
  s.count = static_cast<int64_t>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size()));
  return s;
}

struct AblationRow {
  std::string variant;
  bool use_nsfr = false;
  bool use_nsca = false;
  std::vector<CellResult> cells;                 // one per seed
  std::map<std::string, SeedStats> per_domain;   // over successful seeds
  SeedStats average;
};

struct AblationTable {
  std::vector<std::string> domains;  // unseen domains, column order
  std::vector<AblationRow> rows;     // baseline, +NSCA, +NSFR, +NSFR+NSCA
  std::string base_config_hash;
  double margin = 0.005;             // required gain in mIoU (0.5 points)

  const AblationRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.variant == name) return r;
    throw Error("ablation table has no row '" + name + "'");
  }
  bool nsfr_beats_baseline() const { return row("+NSFR").average.mean >= row("baseline").average.mean + margin; }
  bool full_beats_baseline() const {
    return row("+NSFR+NSCA").average.mean >= row("baseline").average.mean + margin;
  }
};

inline void summarise(AblationRow& row, const std::vector<std::string>& domains) {
  std::vector<double> avgs;
  std::map<std::string, std::vector<double>> per;
  for (const auto& c : row.cells) {
    if (c.error) continue;
    avgs.push_back(c.average);
    for (const auto& d : domains)
      if (auto it = c.domain_miou.find(d); it != c.domain_miou.end()) per[d].push_back(it->second);
  }
  row.average = seed_stats(avgs);
  for (const auto& d : domains) row.per_domain[d] = seed_stats(per[d]);
}

inline AblationTable ablate(const RunConfig& base, CellRunner& runner) {
  AblationTable table;
  table.domains = unseen_domains(base);
  table.base_config_hash = config::config_hash(base);
  const std::vector<std::tuple<std::string, bool, bool>> variants{
      {"baseline", false, false}, {"+NSCA", false, true}, {"+NSFR", true, false}, {"+NSFR+NSCA", true, true}};
  for (const auto& [name, nsfr, nsca] : variants) {
    AblationRow row{name, nsfr, nsca, {}, {}, {}};
    for (auto seed : base.experiment.seeds) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.loss.use_nsfr = nsfr;
      cfg.loss.use_nsca = nsca;
      row.cells.push_back(runner.run(cfg));
    }
    summarise(row, table.domains);
    table.rows.push_back(std::move(row));
  }
  return table;
}

struct SweepPoint {
  double alpha = 0.0;
  std::vector<CellResult> cells;
  SeedStats average;
};

struct SweepCurve {
  std::vector<SweepPoint> points;
  std::string base_config_hash;

  const SweepPoint& at(double alpha) const {
    for (const auto& p : points)
      if (std::abs(p.alpha - alpha) < 1e-12) return p;
    throw Error("sweep has no point at alpha=" + std::to_string(alpha));
  }
};

/// One model per (alpha, seed) with the reasoning path enabled.
inline SweepCurve alpha_sweep(const RunConfig& base, const std::vector<double>& alphas, CellRunner& runner) {
  SweepCurve curve;
  curve.base_config_hash = config::config_hash(base);
  for (double a : alphas) {
    detail::require(a >= 0.0 && a <= 1.0, "alpha_sweep: alpha must lie in [0, 1]");
    SweepPoint p{a, {}, {}};
    std::vector<double> avgs;
    for (auto seed : base.experiment.seeds) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.alpha = a;
      cfg.loss.use_nsfr = true;
      auto r = runner.run(cfg);
      if (!r.error) avgs.push_back(r.average);
      p.cells.push_back(std::move(r));
    }
    p.average = seed_stats(avgs);
    curve.points.push_back(std::move(p));
  }
  return curve;
}

}  // namespace cnsg::engine

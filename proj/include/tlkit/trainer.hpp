#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tlkit/model.hpp"
#include "tlkit/scoremap.hpp"
#include "tlkit/synth.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

struct TrainConfig {
  int batch_size = 64;
  double weight_decay = 0.05;
  double warmup_epochs = 5.0;
  int epochs = 20;
  double min_lr = 1e-5;
  double beta = 0.5;
  double participation_rate = 1.0;
  bool mixtoken_enabled = true;
  bool cutmix_baseline = false;
  bool token_labeling_enabled = true;
  bool mixup_enabled = false;  // config toggle only; must stay false
  double stoch_depth_rate = 0.1;
  double clip_norm = 0.0;  // 0 disables clipping
  double crop_scale_lo = 0.4;
  double crop_scale_hi = 1.0;
  double erase_prob = 0.25;
  uint64_t seed = 0;

  // Linear scaling rule: 1e-3 * batch/640 under token labeling, the
  // 1e-3 * batch/1024 rule otherwise.
  double base_lr() const {
    const double denom = token_labeling_enabled ? 640.0 : 1024.0;
    return 1e-3 * double(batch_size) / denom;
  }

  void validate() const;
  static TrainConfig load(const std::string& path);
  static TrainConfig from_text(const std::string& text);
};

// Linear warmup 0 -> base_lr over warmup_epochs, then cosine decay to min_lr
// at `epochs`. `epoch` is real-valued progress.
double lr_at(const TrainConfig& config, double epoch);

// ---------------------------------------------------------------------------
// Score-map access
// ---------------------------------------------------------------------------

class ScoremapStore {
 public:
  virtual ~ScoremapStore() = default;

  // Loads (or computes) and caches maps for the given sample ids. Called once
  // before training; afterwards dense_for is read-only and thread-safe.
  virtual void prepare(const std::vector<int64_t>& ids) = 0;
  virtual const DenseScoreMap& dense_for(int64_t sample_id) const = 0;
};

// TLSM files under a directory, located through its manifest.
class TlsmDirectoryStore : public ScoremapStore {
 public:
  explicit TlsmDirectoryStore(const std::string& dir);

  void prepare(const std::vector<int64_t>& ids) override;
  const DenseScoreMap& dense_for(int64_t sample_id) const override;

 private:
  std::string dir_;
  std::vector<std::pair<int64_t, std::string>> manifest_;  // id -> relative path
  std::vector<std::pair<int64_t, DenseScoreMap>> cache_;
};

// Computes oracle maps on demand; used by tests and in-process experiments.
class OracleStore : public ScoremapStore {
 public:
  OracleStore(const DatasetSpec& spec, int topk);

  void prepare(const std::vector<int64_t>& ids) override;
  const DenseScoreMap& dense_for(int64_t sample_id) const override;

 private:
  DatasetSpec spec_;
  int topk_;
  std::vector<std::pair<int64_t, DenseScoreMap>> cache_;
};

// ---------------------------------------------------------------------------
// Dataset cache: generated samples held in memory for the run
// ---------------------------------------------------------------------------

struct DatasetCache {
  DatasetSpec spec;
  std::vector<SynthSample> train_samples;  // ids 0..train-1
  std::vector<SynthSample> val_samples;    // ids train..train+val-1
  ScoremapStore* store = nullptr;          // non-owning; required for labeling

  static DatasetCache build(const DatasetSpec& spec);
  int64_t val_id_base() const { return spec.samples_train; }
};

// ---------------------------------------------------------------------------
// Training / evaluation entry points
// ---------------------------------------------------------------------------

struct TrainResult {
  std::string metrics_log;  // lines: epoch\tstep\tl_cls\tl_tl\tl_total\tlr
  std::string checkpoint_path;
};

TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                        const DatasetCache& data, const std::string& out_dir);

double evaluate_top1(const VitParams<float>& params,
                     const std::vector<SynthSample>& split);

// Writes TLSM files plus a manifest for every sample of the dataset.
void annotate_dataset(const DatasetSpec& spec, const std::string& out_dir, int topk);

struct AbResult {
  std::vector<uint64_t> seeds;
  std::vector<double> top1_with;
  std::vector<double> top1_without;
  double mean_with = 0;
  double mean_without = 0;
  double median_delta = 0;
  std::string report;
};

// Paired runs: per seed, the same data and init with token labeling on/off.
AbResult run_ab(const ModelConfig& model_cfg, const TrainConfig& base_cfg,
                const DatasetCache& data, int num_seeds, const std::string& out_dir);

}  // namespace tlkit

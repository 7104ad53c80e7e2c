#include "tlkit/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tlkit/checkpoint.hpp"
#include "tlkit/config.hpp"
#include "tlkit/losses.hpp"
#include "tlkit/mixtoken.hpp"
#include "tlkit/optim.hpp"
#include "tlkit/threading.hpp"
#include "tlkit/train_graph.hpp"

namespace fs = std::filesystem;

namespace tlkit {

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (warmup_epochs < 0.0 || warmup_epochs >= double(epochs)) {
    throw ConfigError("warmup_epochs must lie in [0, epochs)");
  }
  if (min_lr <= 0.0) throw ConfigError("min_lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (beta < 0.0) throw ConfigError("beta must be nonnegative");
  if (participation_rate <= 0.0 || participation_rate > 1.0) {
    throw ConfigError("participation_rate must lie in (0, 1]");
  }
  if (mixtoken_enabled && cutmix_baseline) {
    throw ConfigError("mixtoken_enabled and cutmix_baseline are mutually exclusive");
  }
  if (mixup_enabled) {
    throw ConfigError("mixup_enabled: MixUp is not implemented; the toggle must stay false");
  }
  if (stoch_depth_rate < 0.0 || stoch_depth_rate > 1.0) {
    throw ConfigError("stoch_depth_rate must lie in [0,1]");
  }
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be nonnegative");
  if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0)) {
    throw ConfigError("crop scale range must lie in (0,1]");
  }
  if (erase_prob < 0.0 || erase_prob > 1.0) {
    throw ConfigError("erase_prob must lie in [0,1]");
  }
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  const KvConfig kv = KvConfig::parse(text);
  TrainConfig c;
  c.batch_size = int(kv.get_int("batch_size", c.batch_size));
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.warmup_epochs = kv.get_double("warmup_epochs", c.warmup_epochs);
  c.epochs = int(kv.get_int("epochs", c.epochs));
  c.min_lr = kv.get_double("min_lr", c.min_lr);
  c.beta = kv.get_double("beta", c.beta);
  c.participation_rate = kv.get_double("participation_rate", c.participation_rate);
  c.mixtoken_enabled = kv.get_bool("mixtoken_enabled", c.mixtoken_enabled);
  c.cutmix_baseline = kv.get_bool("cutmix_baseline", c.cutmix_baseline);
  c.token_labeling_enabled =
      kv.get_bool("token_labeling_enabled", c.token_labeling_enabled);
  c.mixup_enabled = kv.get_bool("mixup_enabled", c.mixup_enabled);
  c.stoch_depth_rate = kv.get_double("stoch_depth_rate", c.stoch_depth_rate);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.crop_scale_lo = kv.get_double("crop_scale_lo", c.crop_scale_lo);
  c.crop_scale_hi = kv.get_double("crop_scale_hi", c.crop_scale_hi);
  c.erase_prob = kv.get_double("erase_prob", c.erase_prob);
  c.seed = uint64_t(kv.get_int("seed", int64_t(c.seed)));
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open train config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

double lr_at(const TrainConfig& config, double epoch) {
  const double base = config.base_lr();
  if (epoch < config.warmup_epochs) {
    return base * (epoch / config.warmup_epochs);
  }
  const double t = (epoch - config.warmup_epochs) /
                   (double(config.epochs) - config.warmup_epochs);
  const double w = 0.5 * (1.0 + std::cos(M_PI * std::min(t, 1.0)));
  // Written as a convex blend so both endpoints are exact.
  return base * w + config.min_lr * (1.0 - w);
}

// ---------------------------------------------------------------------------
// Score-map stores
// ---------------------------------------------------------------------------

namespace {

const DenseScoreMap& find_map(const std::vector<std::pair<int64_t, DenseScoreMap>>& cache,
                              int64_t id, const char* who) {
  auto it = std::lower_bound(
      cache.begin(), cache.end(), id,
      [](const std::pair<int64_t, DenseScoreMap>& a, int64_t b) { return a.first < b; });
  if (it == cache.end() || it->first != id) {
    throw TrainingError(std::string(who) + ": no score map for sample " +
                        std::to_string(id));
  }
  return it->second;
}

}  // namespace

TlsmDirectoryStore::TlsmDirectoryStore(const std::string& dir) : dir_(dir) {
  const fs::path manifest = fs::path(dir_) / "manifest.tsv";
  std::ifstream in(manifest);
  if (!in) {
    throw TrainingError("score-map store: missing manifest " + manifest.string());
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) {
      throw FormatError("manifest line lacks two tabs: " + line, 0);
    }
    manifest_.emplace_back(int64_t(std::stoll(line.substr(0, t1))),
                           line.substr(t1 + 1, t2 - t1 - 1));
  }
  std::sort(manifest_.begin(), manifest_.end());
}

void TlsmDirectoryStore::prepare(const std::vector<int64_t>& ids) {
  cache_.clear();
  cache_.resize(ids.size());
  std::vector<std::string> paths(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    auto it = std::lower_bound(manifest_.begin(), manifest_.end(),
                               std::make_pair(ids[i], std::string()));
    if (it == manifest_.end() || it->first != ids[i]) {
      throw TrainingError("score-map store: sample " + std::to_string(ids[i]) +
                          " missing from manifest");
    }
    paths[i] = (fs::path(dir_) / it->second).string();
  }
  parallel_for(int64_t(ids.size()), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      std::ifstream f(paths[size_t(i)], std::ios::binary);
      if (!f) {
        throw TrainingError("score-map store: cannot open " + paths[size_t(i)]);
      }
      std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
      cache_[size_t(i)] = {ids[size_t(i)], densify(decode_file(bytes))};
    }
  });
  std::sort(cache_.begin(), cache_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
}

const DenseScoreMap& TlsmDirectoryStore::dense_for(int64_t id) const {
  return find_map(cache_, id, "tlsm store");
}

OracleStore::OracleStore(const DatasetSpec& spec, int topk) : spec_(spec), topk_(topk) {}

void OracleStore::prepare(const std::vector<int64_t>& ids) {
  cache_.clear();
  cache_.resize(ids.size());
  parallel_for(int64_t(ids.size()), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const SynthSample s = generate_sample(spec_, ids[size_t(i)]);
      DenseScoreMap dense =
          oracle_scoremap(s, spec_.scoremap_grid, spec_.scoremap_grid, spec_.num_classes);
      if (topk_ > 0 && topk_ < spec_.num_classes) {
        dense = densify(sparsify_topk(dense, topk_));  // storage quantization parity
      }
      cache_[size_t(i)] = {ids[size_t(i)], std::move(dense)};
    }
  });
  std::sort(cache_.begin(), cache_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
}

const DenseScoreMap& OracleStore::dense_for(int64_t id) const {
  return find_map(cache_, id, "oracle store");
}

// ---------------------------------------------------------------------------
// Dataset cache
// ---------------------------------------------------------------------------

DatasetCache DatasetCache::build(const DatasetSpec& spec) {
  spec.validate();
  DatasetCache cache;
  cache.spec = spec;
  cache.train_samples.resize(size_t(spec.samples_train));
  cache.val_samples.resize(size_t(spec.samples_val));
  parallel_for(spec.samples_train, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      cache.train_samples[size_t(i)] = generate_sample(spec, i);
    }
  });
  parallel_for(spec.samples_val, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      cache.val_samples[size_t(i)] = generate_sample(spec, spec.samples_train + i);
    }
  });
  return cache;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

namespace {

struct Batch {
  TensorF images;        // [B,3,S,S]
  TensorF cls_labels;    // [B,K]
  TensorF token_labels;  // [B,N,K] (empty when labeling off)
};

// Augments one sample and aligns its token labels through the recorded crop.
void assemble_one(const DatasetCache& data, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, int64_t sample_id, int epoch,
                  bool want_token_labels, float* img_out, float* cls_out,
                  float* tok_out) {
  const SynthSample& sample = data.train_samples[size_t(sample_id)];
  RngState rng(RngState::mix(RngState::mix(RngState::mix(cfg.seed, 0x61756721ull),
                                           uint64_t(epoch)),
                             uint64_t(sample_id)));
  AugRecord rec;
  TensorF img = random_resized_crop_aligned(sample, cfg.crop_scale_lo, cfg.crop_scale_hi,
                                            0.75, 4.0 / 3.0, model_cfg.image_size, rng,
                                            rec);
  if (rng.uniform() < 0.5) hflip_aligned(img, rec);
  random_erase(img, cfg.erase_prob, rng, rec);

  std::copy(img.data(), img.data() + img.numel(), img_out);

  const int k = model_cfg.num_classes;
  std::fill(cls_out, cls_out + k, 0.0f);
  cls_out[sample.class_label] = 1.0f;

  if (want_token_labels) {
    const int g = model_cfg.grid_side();
    const Tensor<double> labels =
        align_crop(data.store->dense_for(sample_id), rec.crop, g);
    for (int64_t i = 0; i < labels.numel(); ++i) tok_out[i] = float(labels[i]);
  }
}

// Token-grid mask induced by a pixel-space mask: a token flips to the partner
// when more than half of its pixel cell is cut.
MixMask token_mask_from_pixel_mask(const MixMask& px, int grid) {
  MixMask tok;
  tok.grid_side = grid;
  tok.lambda_drawn = px.lambda_drawn;
  tok.mask.assign(size_t(grid) * size_t(grid), 1);
  const int s = px.grid_side;
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      int zeros = 0, total = 0;
      for (int y = r * s / grid; y < (r + 1) * s / grid; ++y) {
        for (int x = c * s / grid; x < (c + 1) * s / grid; ++x) {
          ++total;
          if (px.at(y, x) == 0) ++zeros;
        }
      }
      if (2 * zeros > total) tok.mask[size_t(r) * size_t(grid) + size_t(c)] = 0;
    }
  }
  int64_t ones = 0;
  for (uint8_t v : tok.mask) ones += v;
  tok.mean = double(ones) / double(tok.mask.size());
  return tok;
}

void mix_labels_inplace(Batch& batch, const std::vector<int>& perm, const MixMask& tok_mask,
                        double cls_mean, bool token_labeling) {
  const int bsz = batch.cls_labels.dim(0);
  const int k = batch.cls_labels.dim(1);
  TensorF cls_mixed(batch.cls_labels.shape());
  for (int b = 0; b < bsz; ++b) {
    const float* own = &batch.cls_labels.at(b, 0);
    const float* other = &batch.cls_labels.at(perm[size_t(b)], 0);
    for (int j = 0; j < k; ++j) {
      cls_mixed.at(b, j) =
          float(cls_mean) * own[j] + float(1.0 - cls_mean) * other[j];
    }
  }
  batch.cls_labels = std::move(cls_mixed);
  if (!token_labeling) return;
  const int n = batch.token_labels.dim(1);
  TensorF tok_mixed(batch.token_labels.shape());
  for (int b = 0; b < bsz; ++b) {
    for (int i = 0; i < n; ++i) {
      const int src = tok_mask.mask[size_t(i)] ? b : perm[size_t(b)];
      const float* row = &batch.token_labels.at(src, i, 0);
      float* dst = &tok_mixed.at(b, i, 0);
      std::copy(row, row + k, dst);
    }
  }
  batch.token_labels = std::move(tok_mixed);
}

std::string format_metrics_line(int epoch, int step, float l_cls, float l_tl,
                                float l_total, double lr) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d\t%d\t%.9g\t%.9g\t%.9g\t%.9g", epoch, step,
                double(l_cls), double(l_tl), double(l_total), lr);
  return std::string(buf);
}

}  // namespace

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& train_cfg_in,
                        const DatasetCache& data, const std::string& out_dir) {
  model_cfg.validate();
  TrainConfig cfg = train_cfg_in;
  cfg.validate();
  if (!cfg.token_labeling_enabled) cfg.beta = 0.0;
  if (cfg.token_labeling_enabled && data.store == nullptr) {
    throw TrainingError("token labeling requires a score-map store");
  }
  if (model_cfg.num_classes != data.spec.num_classes) {
    throw ConfigError("model num_classes does not match the dataset");
  }
  const int n_train = int(data.train_samples.size());
  if (n_train < cfg.batch_size) {
    throw ConfigError("batch_size exceeds the training split");
  }

  fs::create_directories(out_dir);
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.tlck").string();
  const std::string metrics_path = (fs::path(out_dir) / "metrics.tsv").string();

  // Stochastic depth is a training-time knob; the model carries the rate used.
  ModelConfig effective_cfg = model_cfg;
  effective_cfg.stoch_depth_rate = cfg.stoch_depth_rate;

  VitParams<float> params = build_model<float>(effective_cfg, cfg.seed);
  AdamWState<float> opt_state = AdamWState<float>::init(params);
  RngState train_rng(RngState::mix(cfg.seed, 0x7472616ull));

  const int bsz = cfg.batch_size;
  const int steps_per_epoch = n_train / bsz;
  const int s = effective_cfg.image_size;
  const int n_tokens = effective_cfg.token_count();
  const int k = effective_cfg.num_classes;
  const int grid = effective_cfg.grid_side();

  std::string metrics;
  metrics.reserve(size_t(steps_per_epoch) * size_t(cfg.epochs) * 48);
  int global_step = 0;

  auto flush_metrics = [&] {
    std::ofstream f(metrics_path, std::ios::binary | std::ios::trunc);
    f << metrics;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = train_rng.permutation(n_train);
    for (int step = 0; step < steps_per_epoch; ++step) {
      Batch batch;
      batch.images = TensorF({bsz, 3, s, s});
      batch.cls_labels = TensorF({bsz, k});
      const bool want_tok = cfg.token_labeling_enabled;
      if (want_tok) batch.token_labels = TensorF({bsz, n_tokens, k});

      const int* ids = order.data() + int64_t(step) * bsz;
      const int64_t img_stride = int64_t(3) * s * s;
      parallel_for(bsz, [&](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          assemble_one(data, effective_cfg, cfg, ids[b], epoch, want_tok,
                       batch.images.data() + b * img_stride,
                       &batch.cls_labels.at(int(b), 0),
                       want_tok ? &batch.token_labels.at(int(b), 0, 0) : nullptr);
        }
      });

      // Serial draw order: mixing, stochastic depth, participation.
      LossGraphSpec<float> gspec;
      MixMask mask;
      if (cfg.mixtoken_enabled) {
        mask = sample_mask(grid, train_rng);
        gspec.mix_perm = train_rng.permutation(bsz);
        gspec.mix_mask = &mask;
        mix_labels_inplace(batch, gspec.mix_perm, mask, mask.mean, want_tok);
      } else if (cfg.cutmix_baseline) {
        const MixMask px_mask = sample_mask(s, train_rng);
        const std::vector<int> perm = train_rng.permutation(bsz);
        // Pixel-space mixing happens before the embedding, outside the graph.
        TensorF mixed(batch.images.shape());
        const float* src_all = batch.images.data();
        float* dst_all = mixed.data();
        for (int b = 0; b < bsz; ++b) {
          for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < s; ++y) {
              for (int x = 0; x < s; ++x) {
                const int src_b = px_mask.at(y, x) ? b : perm[size_t(b)];
                const int64_t off = (int64_t(c) * s + y) * s + x;
                dst_all[(int64_t(b) * 3) * s * s + off] =
                    src_all[(int64_t(src_b) * 3) * s * s + off];
              }
            }
          }
        }
        batch.images = std::move(mixed);
        mix_labels_inplace(batch, perm, token_mask_from_pixel_mask(px_mask, grid),
                           px_mask.mean, want_tok);
      }
      gspec.drops = draw_block_drops(effective_cfg, train_rng, true);
      if (want_tok) {
        gspec.participation =
            sample_participation(n_tokens, cfg.participation_rate, train_rng);
      }
      gspec.images = std::move(batch.images);
      gspec.cls_labels = std::move(batch.cls_labels);
      gspec.token_labels = std::move(batch.token_labels);
      gspec.beta = float(cfg.beta);
      gspec.token_labeling = want_tok;

      Tape<float> tape;
      LossGraphResult<float> loss = build_loss_graph(tape, params, gspec);
      const float l_total = loss.l_total.value()[0];
      const float l_cls = loss.l_cls.value()[0];
      const float l_tl = want_tok ? loss.l_tl.value()[0] : 0.0f;
      if (!std::isfinite(double(l_total))) {
        flush_metrics();
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) +
                            " step " + std::to_string(step) +
                            "; last good checkpoint: " + ckpt_path);
      }
      tape.backward(loss.l_total);

      std::vector<TensorF> grads;
      grads.reserve(loss.leaves.named.size());
      for (const auto& [name, var] : loss.leaves.named) {
        const TensorF& g = var.grad();
        grads.push_back(g.empty() ? TensorF(var.value().shape()) : g);
      }
      if (cfg.clip_norm > 0.0) {
        double norm_sq = 0.0;
        for (const auto& g : grads) {
          for (int64_t i = 0; i < g.numel(); ++i) norm_sq += double(g[i]) * double(g[i]);
        }
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg.clip_norm) {
          const float scale = float(cfg.clip_norm / norm);
          for (auto& g : grads) {
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
          }
        }
      }

      const double progress = double(epoch) + double(step) / double(steps_per_epoch);
      const double lr = lr_at(cfg, progress);
      adamw_step(params, grads, opt_state, float(lr), float(cfg.weight_decay));

      metrics += format_metrics_line(epoch, global_step, l_cls, l_tl, l_total, lr);
      metrics += "\n";
      ++global_step;
    }
    save_checkpoint(params, ckpt_path);
    flush_metrics();
  }

  TrainResult result;
  result.metrics_log = std::move(metrics);
  result.checkpoint_path = ckpt_path;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double evaluate_top1(const VitParams<float>& params,
                     const std::vector<SynthSample>& split) {
  if (split.empty()) throw UsageError("evaluate_top1: empty split");
  const ModelConfig& cfg = params.config;
  const int k = cfg.num_classes;
  const int s = cfg.image_size;
  const int bsz = int(std::min<size_t>(64, split.size()));
  RngState rng(0);  // eval mode draws nothing
  int64_t correct = 0;
  for (size_t start = 0; start < split.size(); start += size_t(bsz)) {
    const int cur = int(std::min(split.size() - start, size_t(bsz)));
    TensorF images({cur, 3, s, s});
    for (int b = 0; b < cur; ++b) {
      const SynthSample& sample = split[start + size_t(b)];
      TensorF img = sample.image;
      if (img.dim(1) != s || img.dim(2) != s) img = resize_bilinear(img, s, s);
      std::copy(img.data(), img.data() + img.numel(),
                images.data() + int64_t(b) * 3 * s * s);
    }
    const ForwardResult<float> out = model_forward(params, images, rng, false);
    for (int b = 0; b < cur; ++b) {
      const float* logits = &out.cls_logits.at(b, 0);
      int arg = 0;
      for (int j = 1; j < k; ++j) {
        if (logits[j] > logits[arg]) arg = j;  // ties keep the smaller index
      }
      if (arg == split[start + size_t(b)].class_label) ++correct;
    }
  }
  return double(correct) / double(split.size());
}

// ---------------------------------------------------------------------------
// Annotation
// ---------------------------------------------------------------------------

void annotate_dataset(const DatasetSpec& spec, const std::string& out_dir, int topk) {
  spec.validate();
  if (topk < 1 || topk > spec.num_classes) {
    throw ConfigError("topk must lie in [1, num_classes]");
  }
  fs::create_directories(out_dir);
  const int64_t total = int64_t(spec.samples_train) + spec.samples_val;
  std::vector<int> labels(size_t(total));
  // Each worker owns its output files; the manifest is written once at the
  // end by this thread.
  parallel_for(total, [&](int64_t i0, int64_t i1) {
    for (int64_t id = i0; id < i1; ++id) {
      const SynthSample sample = generate_sample(spec, id);
      labels[size_t(id)] = sample.class_label;
      const DenseScoreMap dense =
          oracle_scoremap(sample, spec.scoremap_grid, spec.scoremap_grid, spec.num_classes);
      const std::vector<uint8_t> bytes = encode_file(sparsify_topk(dense, topk));
      const std::string path =
          (fs::path(out_dir) / ("sm_" + std::to_string(id) + ".tlsm")).string();
      std::ofstream f(path, std::ios::binary | std::ios::trunc);
      if (!f) throw IoError("cannot write score map: " + path);
      f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    }
  });
  std::ofstream manifest(fs::path(out_dir) / "manifest.tsv",
                         std::ios::binary | std::ios::trunc);
  if (!manifest) throw IoError("cannot write manifest in " + out_dir);
  for (int64_t id = 0; id < total; ++id) {
    manifest << id << "\tsm_" << id << ".tlsm\t" << labels[size_t(id)] << "\n";
  }
}

// ---------------------------------------------------------------------------
// Paired A/B experiment
// ---------------------------------------------------------------------------

AbResult run_ab(const ModelConfig& model_cfg, const TrainConfig& base_cfg,
                const DatasetCache& data, int num_seeds, const std::string& out_dir) {
  if (num_seeds < 1) throw ConfigError("ab needs at least one seed");
  AbResult r;
  std::ostringstream report;
  for (int i = 0; i < num_seeds; ++i) {
    const uint64_t seed = base_cfg.seed + uint64_t(i);
    TrainConfig with_cfg = base_cfg;
    with_cfg.seed = seed;
    with_cfg.token_labeling_enabled = true;
    TrainConfig without_cfg = base_cfg;
    without_cfg.seed = seed;
    without_cfg.token_labeling_enabled = false;
    without_cfg.beta = 0.0;

    const std::string with_dir =
        (fs::path(out_dir) / ("seed" + std::to_string(i)) / "with_tl").string();
    const std::string without_dir =
        (fs::path(out_dir) / ("seed" + std::to_string(i)) / "without_tl").string();

    TrainResult with_run = train_model(model_cfg, with_cfg, data, with_dir);
    TrainResult without_run = train_model(model_cfg, without_cfg, data, without_dir);

    const double acc_with =
        evaluate_top1(load_checkpoint(with_run.checkpoint_path), data.val_samples);
    const double acc_without =
        evaluate_top1(load_checkpoint(without_run.checkpoint_path), data.val_samples);
    r.seeds.push_back(seed);
    r.top1_with.push_back(acc_with);
    r.top1_without.push_back(acc_without);
    char line[160];
    std::snprintf(line, sizeof(line),
                  "seed=%" PRIu64 " with_tl=%.4f without_tl=%.4f delta=%+.4f", seed,
                  acc_with, acc_without, acc_with - acc_without);
    report << line << "\n";
  }
  for (size_t i = 0; i < r.top1_with.size(); ++i) {
    r.mean_with += r.top1_with[i];
    r.mean_without += r.top1_without[i];
  }
  r.mean_with /= double(num_seeds);
  r.mean_without /= double(num_seeds);
  std::vector<double> deltas;
  for (size_t i = 0; i < r.top1_with.size(); ++i) {
    deltas.push_back(r.top1_with[i] - r.top1_without[i]);
  }
  std::sort(deltas.begin(), deltas.end());
  r.median_delta = deltas.size() % 2 == 1
                       ? deltas[deltas.size() / 2]
                       : 0.5 * (deltas[deltas.size() / 2 - 1] + deltas[deltas.size() / 2]);
  char tail[256];
  std::snprintf(tail, sizeof(tail),
                "mean with_tl=%.4f without_tl=%.4f median_delta=%+.4f", r.mean_with,
                r.mean_without, r.median_delta);
  report << tail << "\n";
  r.report = report.str();
  return r;
}

}  // namespace tlkit

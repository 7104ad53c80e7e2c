#include "tlkit/model.hpp"

#include <cstdio>
#include <sstream>

#include "tlkit/config.hpp"

namespace tlkit {

void ModelConfig::validate() const {
  if (depth < 0) throw ConfigError("depth must be nonnegative");
  if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
  if (num_heads < 1) throw ConfigError("num_heads must be positive");
  if (embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim (" + std::to_string(embed_dim) +
                      ") must be divisible by num_heads (" + std::to_string(num_heads) +
                      ")");
  }
  if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
  if (residual_scale <= 0.0) throw ConfigError("residual_scale must be positive");
  if (stoch_depth_rate < 0.0 || stoch_depth_rate > 1.0) {
    throw ConfigError("stoch_depth_rate must lie in [0,1]");
  }
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (image_size < 1) throw ConfigError("image_size must be positive");
  if (patch_convs.empty()) throw ConfigError("patch_convs must not be empty");
  for (size_t i = 0; i < patch_convs.size(); ++i) {
    const auto& pc = patch_convs[i];
    const std::string tag = "patch_convs[" + std::to_string(i) + "]";
    if (pc.filters < 1) throw ConfigError(tag + ": filters must be positive");
    if (pc.stride < 1) throw ConfigError(tag + ": stride must be positive");
    if (pc.kernel < pc.stride) throw ConfigError(tag + ": kernel must be >= stride");
    if (pc.stride == 1 && pc.kernel % 2 == 0) {
      throw ConfigError(tag + ": stride-1 convs need an odd kernel");
    }
  }
  if (patch_convs.back().filters != embed_dim) {
    throw ConfigError("patch_convs: last filters must equal embed_dim");
  }
  if (image_size % stride_product() != 0) {
    throw ConfigError("patch_convs: stride product must divide image_size");
  }
}

int64_t param_count(const ModelConfig& config) {
  config.validate();
  const int64_t d = config.embed_dim;
  const int64_t e = config.mlp_hidden();
  const int64_t n = config.token_count();
  const int64_t k = config.num_classes;

  int64_t total = 0;
  int64_t in_ch = 3;
  for (const auto& pc : config.patch_convs) {
    total += int64_t(pc.kernel) * pc.kernel * in_ch * pc.filters + pc.filters;
    in_ch = pc.filters;
  }
  total += d;            // class token
  total += (n + 1) * d;  // positions
  const int64_t per_block = 2 * d            // ln1
                            + d * 3 * d + 3 * d  // qkv
                            + d * d + d          // proj
                            + 2 * d              // ln2
                            + d * e + e          // fc1
                            + e * d + d;         // fc2
  total += per_block * config.depth;
  total += 2 * d;  // final norm
  const int64_t head = d * k + k;
  total += config.shared_head ? head : 2 * head;
  return total;
}

std::string ModelConfig::serialize() const {
  std::ostringstream out;
  out << "depth=" << depth << "\n";
  out << "embed_dim=" << embed_dim << "\n";
  out << "mlp_ratio=" << mlp_ratio << "\n";
  out << "num_heads=" << num_heads << "\n";
  out << "patch_convs=";
  for (size_t i = 0; i < patch_convs.size(); ++i) {
    if (i) out << ",";
    out << patch_convs[i].kernel << ":" << patch_convs[i].stride << ":"
        << patch_convs[i].filters;
  }
  out << "\n";
  out << "residual_scale=" << residual_scale << "\n";
  out << "stoch_depth_rate=" << stoch_depth_rate << "\n";
  out << "num_classes=" << num_classes << "\n";
  out << "image_size=" << image_size << "\n";
  out << "shared_head=" << (shared_head ? "true" : "false") << "\n";
  return out.str();
}

namespace {

std::vector<PatchConvSpec> parse_patch_convs(const std::string& text) {
  std::vector<PatchConvSpec> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    PatchConvSpec pc;
    if (std::sscanf(item.c_str(), "%d:%d:%d", &pc.kernel, &pc.stride, &pc.filters) != 3) {
      throw ConfigError("patch_convs: expected k:s:f triples, got '" + item + "'");
    }
    out.push_back(pc);
  }
  return out;
}

ModelConfig config_from_kv(const KvConfig& kv) {
  ModelConfig c;
  c.depth = int(kv.get_int("depth"));
  c.embed_dim = int(kv.get_int("embed_dim"));
  c.mlp_ratio = kv.get_double("mlp_ratio", 3.0);
  c.num_heads = int(kv.get_int("num_heads"));
  if (kv.has("patch_convs")) {
    c.patch_convs = parse_patch_convs(kv.get_str("patch_convs"));
  } else {
    c.patch_convs = ModelConfig::default_patch_stack(c.embed_dim);
  }
  c.residual_scale = kv.get_double("residual_scale", 2.0);
  c.stoch_depth_rate = kv.get_double("stoch_depth_rate", 0.1);
  c.num_classes = int(kv.get_int("num_classes"));
  c.image_size = int(kv.get_int("image_size"));
  c.shared_head = kv.get_bool("shared_head", false);
  c.validate();
  return c;
}

}  // namespace

ModelConfig ModelConfig::deserialize(const std::string& text) {
  return config_from_kv(KvConfig::parse(text));
}

ModelConfig parse_model_config_file(const std::string& path) {
  return config_from_kv(KvConfig::load(path));
}

}  // namespace tlkit

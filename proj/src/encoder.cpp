#include "dspast/encoder.hpp"

namespace dspast {

void EncoderConfig::validate() const {
  if (embed_dim % 3 != 0)
    throw ConfigError("embed_dim must be divisible by 3 for the one-third projection");
  if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (input_frames % patch_size != 0 || input_mels % patch_size != 0)
    throw ConfigError("patch_size must divide input_frames and input_mels");
  if (mode == ModelMode::kDspast && n_features != 6)
    throw ConfigError("dspast mode expects 6 stacked features");
  if (mode == ModelMode::kSpatialast && n_features != 4)
    throw ConfigError("spatialast mode expects 4 stacked features");
  if (n_cls_tokens != 3) throw ConfigError("the architecture uses exactly 3 CLS tokens");
  if (depth < 1 || heads < 1 || n_event_classes < 1) throw ConfigError("bad architecture sizes");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
}

ConfigCounts count_for_config(const EncoderConfig& cfg) {
  const std::int64_t d = cfg.embed_dim;
  const std::int64_t c = cfg.n_features;
  ConfigCounts out;

  if (cfg.use_feature_attention) {
    // bn gamma/beta + two CxC dense layers with bias.
    out.attention_per_branch = 2 * c + 2 * (c * c + c);
  }
  // conv 3x3 C->C with bias, then a 1-channel batchnorm.
  out.fusion_per_branch = c * c * 9 + c + 2;
  out.cls_per_branch = cfg.n_cls_tokens * d;
  if (cfg.use_projection) out.projection_per_branch = (d / 3) * d + d / 3;

  const std::int64_t head_in =
      (cfg.head_input == HeadInput::kClsMeanPostProjection && cfg.use_projection &&
       cfg.mode == ModelMode::kDspast)
          ? d / 3
          : d;
  const std::int64_t sed = head_in * cfg.n_event_classes + cfg.n_event_classes;
  auto cosine_head = [&](std::int64_t k) {
    return cfg.head_kind == HeadKind::kAdaCos ? head_in * k : head_in * k + k;
  };
  out.heads_total = sed + cosine_head(cfg.n_distance_bins) + cosine_head(cfg.n_azimuth_classes) +
                    cosine_head(cfg.n_elevation_classes);

  const std::int64_t patch = cfg.patch_size * cfg.patch_size * d + d;
  const std::int64_t pos = static_cast<std::int64_t>(cfg.n_patches()) * d;
  const std::int64_t per_block = 2 * d                    // ln1
                                 + 3 * d * d + 3 * d      // qkv
                                 + d * d + d              // proj
                                 + 2 * d                  // ln2
                                 + 4 * d * d + 4 * d      // mlp in
                                 + 4 * d * d + d;         // mlp out
  out.shared_trunk = patch + pos + cfg.depth * per_block + 2 * d;

  const std::int64_t n_br = cfg.n_branches();
  out.total = out.shared_trunk + out.heads_total +
              n_br * (out.attention_per_branch + out.fusion_per_branch + out.cls_per_branch +
                      out.projection_per_branch);
  return out;
}

}  // namespace dspast

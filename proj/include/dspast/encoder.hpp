#pragma once

// The DSpAST encoder: three task branches (SED, DP, DOAE), each holding a
// feature attention module, a fusion block, CLS tokens, an output projection
// and a task head, over a patch-embedding convolution and transformer that
// are shared across branches. A single-branch configuration with attention
// and projection disabled is the SpatialAST baseline.

#include <optional>
#include <string>
#include <vector>

#include "dspast/nn.hpp"

namespace dspast {

enum class ModelMode { kDspast, kSpatialast };
enum class HeadKind { kAdaCos, kSoftmaxCe };
enum class HeadInput { kClsMeanPreProjection, kClsMeanPostProjection };

struct EncoderConfig {
  int n_features = 6;  // C
  int embed_dim = 768;
  int depth = 12;
  int heads = 12;
  int patch_size = 16;
  int n_cls_tokens = 3;
  int n_event_classes = 355;
  int n_distance_bins = 21;
  int n_azimuth_classes = 360;
  int n_elevation_classes = 180;
  int input_frames = 1024;  // T
  int input_mels = 128;     // M
  ModelMode mode = ModelMode::kDspast;
  HeadKind head_kind = HeadKind::kAdaCos;
  HeadInput head_input = HeadInput::kClsMeanPreProjection;
  // Reduction switches: a single-branch model with attention off and
  // projection off reproduces the SpatialAST forward exactly.
  bool use_feature_attention = true;
  bool use_projection = true;
  double dropout = 0.0;

  int n_time_patches() const { return input_frames / patch_size; }
  int n_freq_patches() const { return input_mels / patch_size; }
  int n_patches() const { return n_time_patches() * n_freq_patches(); }
  int n_branches() const { return mode == ModelMode::kDspast ? 3 : 1; }

  void validate() const;
};

inline const std::vector<std::string>& branch_names_dspast() {
  static const std::vector<std::string> names = {"sed", "dp", "doae"};
  return names;
}

template <typename T>
struct FeatureAttention {
  BatchNormLayer<T> bn;
  LinearLayer<T> fc0, fc1;

  static FeatureAttention create(ParamStore<T>& store, const std::string& prefix, int channels,
                                 std::uint64_t seed) {
    FeatureAttention m;
    m.bn = BatchNormLayer<T>::create(store, prefix + "/bn", channels, false);
    // hidden width = C; with C = 6 a bottleneck would be meaningless.
    m.fc0 = LinearLayer<T>::create(store, prefix + "/fc0", channels, channels, false, seed);
    m.fc1 = LinearLayer<T>::create(store, prefix + "/fc1", channels, channels, false, seed);
    return m;
  }

  // x [B, C, T, M] -> mask [B, C], every entry strictly in (0, 1).
  Var<T> forward(Tape<T>& tape, Var<T> x, bool train) const {
    const Shape& s = x.val().shape;
    Var<T> pooled = mean_lastdim(reshape(x, {s[0], s[1], s[2] * s[3]}));  // [B, C]
    Var<T> h = bn.forward(tape, pooled, train);
    h = relu(fc0.forward(tape, h));
    return sigmoid(fc1.forward(tape, h));
  }
};

template <typename T>
struct FusionBlock {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  static FusionBlock create(ParamStore<T>& store, const std::string& prefix, int channels,
                            std::uint64_t seed) {
    FusionBlock f;
    f.conv = Conv2dLayer<T>::create(store, prefix + "/conv", channels, channels, 3, 1, 1, false, seed);
    f.bn = BatchNormLayer<T>::create(store, prefix + "/bn", 1, false);
    return f;
  }

  // conv 3x3 (C -> C, same padding), mean over C, batchnorm, GELU.
  Var<T> forward(Tape<T>& tape, Var<T> x, bool train) const {
    const Shape& s = x.val().shape;
    Var<T> y = conv.forward(tape, x);                                // [B, C, T, M]
    y = mean_axis1(reshape(y, {s[0], s[1], s[2] * s[3]}));           // [B, T*M]
    y = reshape(y, {s[0], std::int64_t{1}, s[2], s[3]});             // [B, 1, T, M]
    y = bn.forward(tape, y, train);
    return gelu(y);
  }
};

template <typename T>
struct TaskHead {
  HeadKind kind = HeadKind::kAdaCos;
  LinearLayer<T> lin;            // softmax-CE / BCE heads
  Parameter<T>* adacos_w = nullptr;  // [K, D_in]
  Parameter<T>* adacos_scale = nullptr;  // buffer holding the dynamic s

  static TaskHead create_linear(ParamStore<T>& store, const std::string& prefix, std::int64_t in,
                                std::int64_t classes, std::uint64_t seed) {
    TaskHead h;
    h.kind = HeadKind::kSoftmaxCe;
    h.lin = LinearLayer<T>::create(store, prefix, in, classes, false, seed);
    return h;
  }

  static TaskHead create_adacos(ParamStore<T>& store, const std::string& prefix, std::int64_t in,
                                std::int64_t classes, std::uint64_t seed) {
    TaskHead h;
    h.kind = HeadKind::kAdaCos;
    h.adacos_w = store.create(prefix + "/w", {classes, in}, false);
    init_trunc_normal(h.adacos_w, seed);
    h.adacos_scale = store.create(prefix + "/scale", {1}, false, /*trainable=*/false);
    h.adacos_scale->value.v[0] =
        static_cast<T>(std::sqrt(2.0) * std::log(static_cast<double>(classes) - 1.0));
    return h;
  }

  // AdaCos heads emit cosine similarities; CE heads emit plain logits.
  Var<T> forward(Tape<T>& tape, Var<T> embedding) const {
    if (kind == HeadKind::kAdaCos) {
      Var<T> wn = normalize_rows(tape.leaf(*adacos_w));
      return matmul(normalize_rows(embedding), permute(wn, {1, 0}));
    }
    return lin.forward(tape, embedding);
  }
};

// Branch-exclusive parameter set. The SED branch owns only a SED head, the
// DP branch a distance head, the DOAE branch azimuth + elevation heads. In
// SpatialAST mode the single branch owns all four.
template <typename T>
struct Branch {
  std::string name;
  std::optional<FeatureAttention<T>> attention;
  FusionBlock<T> fusion;
  Parameter<T>* cls_tokens = nullptr;  // [3, D]
  std::optional<LinearLayer<T>> projection;  // D -> D/3
  std::optional<TaskHead<T>> head_sed;
  std::optional<TaskHead<T>> head_dist;
  std::optional<TaskHead<T>> head_az;
  std::optional<TaskHead<T>> head_el;
};

template <typename T>
struct SharedTrunk {
  Conv2dLayer<T> patch_embed;          // 1 -> D, kernel = stride = patch
  Parameter<T>* pos_embed = nullptr;   // [P, D]
  std::vector<TransformerBlock<T>> blocks;
  LayerNormLayer<T> final_ln;
};

// Output of one branch pass through the shared trunk.
template <typename T>
struct BranchOutput {
  Var<T> mask;       // [B, C]; invalid when attention is off
  Var<T> cls_out;    // [B, 3, D]
  Var<T> cls_mean;   // [B, D]
  Var<T> tokens;     // [B, 3+P', D or D/3] (projected when enabled)
};

template <typename T>
struct ForwardOptions {
  bool train = false;
  // Kept patch sequence positions (original grid indices); empty = keep all.
  std::vector<std::int64_t> kept_patches;
  bool compute_sed = true;
  bool compute_dp = true;
  bool compute_doae = true;
  bool need_tokens = true;
};

template <typename T>
struct ModelOutput {
  Var<T> logits_sed;   // [B, n_event]; BCE-with-logits head
  Var<T> logits_dist;  // [B, n_dist]; cosines under AdaCos
  Var<T> logits_az;
  Var<T> logits_el;
  Var<T> export_tokens;          // [B, 3+P', D]
  std::vector<Var<T>> masks;     // one per active branch with attention
  std::vector<std::string> mask_branches;
};

template <typename T>
class DspastModel {
 public:
  DspastModel(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
  }

  const EncoderConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const std::vector<Branch<T>>& branches() const { return branches_; }
  SharedTrunk<T>& trunk() { return trunk_; }

  // One branch through the shared trunk.
  BranchOutput<T> branch_forward(Tape<T>& tape, Var<T> x, const Branch<T>& br,
                                 const ForwardOptions<T>& opts) const {
    const Shape& s = x.val().shape;
    if (s.size() != 4 || s[1] != cfg_.n_features || s[2] != cfg_.input_frames || s[3] != cfg_.input_mels)
      throw ShapeError("branch_forward: expected [B," + std::to_string(cfg_.n_features) + "," +
                       std::to_string(cfg_.input_frames) + "," + std::to_string(cfg_.input_mels) +
                       "], got " + shape_str(s));
    const std::int64_t b = s[0];

    BranchOutput<T> out;
    Var<T> xm = x;
    if (br.attention.has_value()) {
      out.mask = br.attention->forward(tape, x, opts.train);
      xm = mul_channel_gate(x, out.mask);
    }
    Var<T> fused = br.fusion.forward(tape, xm, opts.train);  // [B, 1, T, M]

    Var<T> patches = trunk_.patch_embed.forward(tape, fused);  // [B, D, T/p, M/p]
    const std::int64_t d = cfg_.embed_dim;
    const std::int64_t p = cfg_.n_patches();
    patches = permute(reshape(patches, {b, d, p}), {0, 2, 1});  // [B, P, D]
    patches = add_bcast_rows(patches, tape.leaf(*trunk_.pos_embed));
    if (!opts.kept_patches.empty()) patches = gather_axis1(patches, opts.kept_patches);

    Var<T> cls = broadcast_rows(tape.leaf(*br.cls_tokens), b);  // [B, 3, D]
    Var<T> seq = concat_axis1<T>({cls, patches});
    for (const auto& blk : trunk_.blocks) seq = blk.forward(tape, seq);
    seq = trunk_.final_ln.forward(tape, seq);

    const std::int64_t seq_len = seq.val().shape[1];
    out.cls_out = gather_axis1(seq, {0, 1, 2});
    out.cls_mean = mean_axis1(out.cls_out);
    if (br.projection.has_value()) {
      Var<T> flat = reshape(seq, {b * seq_len, d});
      out.tokens = reshape(br.projection->forward(tape, flat), {b, seq_len, d / 3});
    } else {
      out.tokens = seq;
    }
    return out;
  }

  ModelOutput<T> forward(Tape<T>& tape, const Tensor<T>& stack_batch, const ForwardOptions<T>& opts) const {
    Var<T> x = tape.constant(stack_batch);
    ModelOutput<T> out;
    if (cfg_.mode == ModelMode::kSpatialast) {
      const Branch<T>& br = branches_[0];
      BranchOutput<T> bo = branch_forward(tape, x, br, opts);
      if (bo.mask.valid()) {
        out.masks.push_back(bo.mask);
        out.mask_branches.push_back(br.name);
      }
      // One head per task on its own CLS token.
      Var<T> cls_sed = reshape(gather_axis1(bo.cls_out, {0}), {stack_batch.dim(0), cfg_.embed_dim});
      Var<T> cls_dp = reshape(gather_axis1(bo.cls_out, {1}), {stack_batch.dim(0), cfg_.embed_dim});
      Var<T> cls_doae = reshape(gather_axis1(bo.cls_out, {2}), {stack_batch.dim(0), cfg_.embed_dim});
      if (opts.compute_sed) out.logits_sed = br.head_sed->forward(tape, cls_sed);
      if (opts.compute_dp) out.logits_dist = br.head_dist->forward(tape, cls_dp);
      if (opts.compute_doae) {
        out.logits_az = br.head_az->forward(tape, cls_doae);
        out.logits_el = br.head_el->forward(tape, cls_doae);
      }
      if (opts.need_tokens) out.export_tokens = bo.tokens;
      return out;
    }

    // DSpAST: per-branch pipelines; export token j is the concatenation of
    // the three projected token-j vectors, restoring width D.
    std::vector<Var<T>> branch_tokens;
    for (std::size_t bi = 0; bi < branches_.size(); ++bi) {
      const Branch<T>& br = branches_[bi];
      const bool want = (bi == 0 && opts.compute_sed) || (bi == 1 && opts.compute_dp) ||
                        (bi == 2 && opts.compute_doae) || opts.need_tokens;
      if (!want) {
        branch_tokens.push_back(Var<T>{});
        continue;
      }
      BranchOutput<T> bo = branch_forward(tape, x, br, opts);
      if (bo.mask.valid()) {
        out.masks.push_back(bo.mask);
        out.mask_branches.push_back(br.name);
      }
      Var<T> head_in = bo.cls_mean;
      if (cfg_.head_input == HeadInput::kClsMeanPostProjection && br.projection.has_value())
        head_in = br.projection->forward(tape, bo.cls_mean);
      if (bi == 0 && opts.compute_sed) out.logits_sed = br.head_sed->forward(tape, head_in);
      if (bi == 1 && opts.compute_dp) out.logits_dist = br.head_dist->forward(tape, head_in);
      if (bi == 2 && opts.compute_doae) {
        out.logits_az = br.head_az->forward(tape, head_in);
        out.logits_el = br.head_el->forward(tape, head_in);
      }
      branch_tokens.push_back(bo.tokens);
    }
    if (opts.need_tokens) {
      std::vector<Var<T>> parts;
      for (auto& t : branch_tokens) parts.push_back(t);
      out.export_tokens = concat_lastdim(parts);
    }
    return out;
  }

 private:
  void build(std::uint64_t seed) {
    const int d = cfg_.embed_dim;
    const bool is_dspast = cfg_.mode == ModelMode::kDspast;

    trunk_.patch_embed = Conv2dLayer<T>::create(store_, "shared/patch_embed", 1, d, cfg_.patch_size,
                                                cfg_.patch_size, 0, /*shared=*/true, seed);
    trunk_.pos_embed = store_.create("shared/pos_embed", {cfg_.n_patches(), d}, true);
    init_trunc_normal(trunk_.pos_embed, seed);
    for (int i = 0; i < cfg_.depth; ++i)
      trunk_.blocks.push_back(TransformerBlock<T>::create(store_, "shared/block" + std::to_string(i), d,
                                                          cfg_.heads, /*shared=*/true, seed));
    trunk_.final_ln = LayerNormLayer<T>::create(store_, "shared/final_ln", d, /*shared=*/true);

    auto make_head = [&](const std::string& prefix, std::int64_t classes, bool cosine) {
      const std::int64_t in =
          cfg_.head_input == HeadInput::kClsMeanPostProjection && cfg_.use_projection && is_dspast ? d / 3 : d;
      return cosine && cfg_.head_kind == HeadKind::kAdaCos
                 ? TaskHead<T>::create_adacos(store_, prefix, in, classes, seed)
                 : TaskHead<T>::create_linear(store_, prefix, in, classes, seed);
    };

    if (is_dspast) {
      for (const std::string& name : branch_names_dspast()) {
        Branch<T> br;
        br.name = name;
        const std::string prefix = "branch/" + name;
        if (cfg_.use_feature_attention)
          br.attention = FeatureAttention<T>::create(store_, prefix + "/attention", cfg_.n_features, seed);
        br.fusion = FusionBlock<T>::create(store_, prefix + "/fusion", cfg_.n_features, seed);
        br.cls_tokens = store_.create(prefix + "/cls_tokens", {cfg_.n_cls_tokens, d}, false);
        init_trunc_normal(br.cls_tokens, seed);
        if (cfg_.use_projection)
          br.projection = LinearLayer<T>::create(store_, prefix + "/projection", d, d / 3, false, seed);
        if (name == "sed") br.head_sed = TaskHead<T>::create_linear(store_, prefix + "/head_sed",
                                                                    head_in_dim(), cfg_.n_event_classes, seed);
        if (name == "dp") br.head_dist = make_head(prefix + "/head_dist", cfg_.n_distance_bins, true);
        if (name == "doae") {
          br.head_az = make_head(prefix + "/head_az", cfg_.n_azimuth_classes, true);
          br.head_el = make_head(prefix + "/head_el", cfg_.n_elevation_classes, true);
        }
        branches_.push_back(std::move(br));
      }
    } else {
      Branch<T> br;
      br.name = "trunk";
      const std::string prefix = "branch/trunk";
      if (cfg_.use_feature_attention)
        br.attention = FeatureAttention<T>::create(store_, prefix + "/attention", cfg_.n_features, seed);
      br.fusion = FusionBlock<T>::create(store_, prefix + "/fusion", cfg_.n_features, seed);
      br.cls_tokens = store_.create(prefix + "/cls_tokens", {cfg_.n_cls_tokens, d}, false);
      init_trunc_normal(br.cls_tokens, seed);
      if (cfg_.use_projection)
        br.projection = LinearLayer<T>::create(store_, prefix + "/projection", d, d / 3, false, seed);
      br.head_sed = TaskHead<T>::create_linear(store_, prefix + "/head_sed", d, cfg_.n_event_classes, seed);
      br.head_dist = make_head(prefix + "/head_dist", cfg_.n_distance_bins, true);
      br.head_az = make_head(prefix + "/head_az", cfg_.n_azimuth_classes, true);
      br.head_el = make_head(prefix + "/head_el", cfg_.n_elevation_classes, true);
      branches_.push_back(std::move(br));
    }
  }

  std::int64_t head_in_dim() const {
    return cfg_.head_input == HeadInput::kClsMeanPostProjection && cfg_.use_projection &&
                   cfg_.mode == ModelMode::kDspast
               ? cfg_.embed_dim / 3
               : cfg_.embed_dim;
  }

  EncoderConfig cfg_;
  ParamStore<T> store_;
  SharedTrunk<T> trunk_;
  std::vector<Branch<T>> branches_;
};

// ---- parameter accounting ----

struct ParamCountItem {
  std::string name;
  std::int64_t count = 0;
  bool shared = false;
};

struct ParamCountReport {
  std::vector<ParamCountItem> items;  // every trainable parameter tensor
  std::int64_t total = 0;
  std::int64_t shared_total = 0;
  std::vector<std::pair<std::string, std::int64_t>> per_branch_exclusive;
  // Overhead of branch duplication (attention + fusion + CLS across branches
  // minus the baseline's single fusion + CLS) relative to the baseline total.
  std::int64_t duplication_overhead = 0;
  std::int64_t baseline_total = 0;
  double overhead_ratio_vs_baseline = 0.0;
  // Reported separately: projections and heads are accounted outside the
  // duplication overhead (see docs).
  std::int64_t projection_total = 0;
  std::int64_t head_total = 0;
};

// Formula-based counts per group for a config; cross-checked against live
// models in the tests.
struct ConfigCounts {
  std::int64_t attention_per_branch = 0;
  std::int64_t fusion_per_branch = 0;
  std::int64_t cls_per_branch = 0;
  std::int64_t projection_per_branch = 0;
  std::int64_t heads_total = 0;
  std::int64_t shared_trunk = 0;
  std::int64_t total = 0;
};
ConfigCounts count_for_config(const EncoderConfig& cfg);

template <typename T>
ParamCountReport count_params(const DspastModel<T>& model) {
  ParamCountReport r;
  std::vector<std::pair<std::string, std::int64_t>> per_branch;
  for (const auto& p : model.params().all()) {
    if (!p->trainable) continue;
    const std::int64_t n = p->value.numel();
    r.items.push_back({p->name, n, p->shared});
    r.total += n;
    if (p->shared) r.shared_total += n;
    if (p->name.rfind("branch/", 0) == 0) {
      const std::string branch = p->name.substr(7, p->name.find('/', 7) - 7);
      bool found = false;
      for (auto& [name, count] : per_branch)
        if (name == branch) { count += n; found = true; }
      if (!found) per_branch.emplace_back(branch, n);
    }
    if (p->name.find("/projection/") != std::string::npos) r.projection_total += n;
    if (p->name.find("/head_") != std::string::npos) r.head_total += n;
  }
  r.per_branch_exclusive = per_branch;

  const EncoderConfig& cfg = model.config();
  EncoderConfig baseline = cfg;
  baseline.mode = ModelMode::kSpatialast;
  baseline.n_features = 4;
  baseline.use_feature_attention = false;
  baseline.use_projection = false;
  const ConfigCounts base = count_for_config(baseline);
  const ConfigCounts mine = count_for_config(cfg);
  const std::int64_t n_br = cfg.n_branches();
  r.duplication_overhead = n_br * (mine.attention_per_branch + mine.fusion_per_branch + mine.cls_per_branch) -
                           (base.fusion_per_branch + base.cls_per_branch);
  r.baseline_total = base.total;
  r.overhead_ratio_vs_baseline =
      static_cast<double>(r.duplication_overhead) / static_cast<double>(base.total);
  return r;
}

}  // namespace dspast

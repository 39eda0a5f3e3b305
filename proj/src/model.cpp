#include "egmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace egmt {

void ModelConfig::validate() const {
  if (shallow_channels < 2 || shallow_channels % 2) throw std::invalid_argument("shallow_channels must be even and >= 2");
  if (heads < 1 || shallow_channels % heads) throw std::invalid_argument("shallow_channels must be divisible by heads");
  if (patch < 1) throw std::invalid_argument("patch must be >= 1");
  if (ffn_expansion < 1) throw std::invalid_argument("ffn_expansion must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask_ratio must lie in [0, 1)");
  if (num_labels < 1) throw std::invalid_argument("num_labels must be >= 1");
}

namespace {

using IndexMap = std::shared_ptr<const std::vector<Index>>;

std::string mod(Modality m) { return std::string(modality_name(m)); }

// C×H×W -> (H·W)×C with rows in raster order.
IndexMap raster_tokens(Index c, Index h, Index w) {
  auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c * h * w));
  for (Index p = 0; p < h * w; ++p) {
    for (Index k = 0; k < c; ++k) (*idx)[static_cast<std::size_t>(p * c + k)] = k * h * w + p;
  }
  return idx;
}

// C×H×W -> (nW·P²)×C, rows grouped by non-overlapping P×P window (window-major, raster inside).
IndexMap window_tokens(Index c, Index h, Index w, Index patch) {
  const Index wx = w / patch;
  auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c * h * w));
  Index row = 0;
  for (Index win = 0; win < (h / patch) * wx; ++win) {
    const Index y0 = (win / wx) * patch, x0 = (win % wx) * patch;
    for (Index py = 0; py < patch; ++py) {
      for (Index px = 0; px < patch; ++px, ++row) {
        const Index pixel = (y0 + py) * w + x0 + px;
        for (Index k = 0; k < c; ++k) (*idx)[static_cast<std::size_t>(row * c + k)] = k * h * w + pixel;
      }
    }
  }
  return idx;
}

// Window tokens (nW·P²)×C -> channel rows (nW·C)×P² (a transpose inside every window).
IndexMap window_channels(Index c, Index windows, Index area) {
  auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c * windows * area));
  for (Index win = 0; win < windows; ++win) {
    for (Index k = 0; k < c; ++k) {
      for (Index p = 0; p < area; ++p) {
        (*idx)[static_cast<std::size_t>((win * c + k) * area + p)] = (win * area + p) * c + k;
      }
    }
  }
  return idx;
}

IndexMap inverse(const IndexMap& perm) {
  auto inv = std::make_shared<std::vector<Index>>(perm->size());
  for (std::size_t i = 0; i < perm->size(); ++i) (*inv)[static_cast<std::size_t>((*perm)[i])] = static_cast<Index>(i);
  return inv;
}

template <typename Scalar>
void require_map(const Var<Scalar>& x, const char* what) {
  if (x.shape().size() != 3) throw std::invalid_argument(std::string(what) + ": expected a C x H x W map");
}

template <typename Scalar>
void require_windows(const Var<Scalar>& x, const ModelConfig& cfg, const char* what) {
  require_map(x, what);
  if (x.shape()[1] % cfg.patch || x.shape()[2] % cfg.patch) {
    throw std::invalid_argument(std::string(what) + ": extents " + shape_string(x.shape()) +
                                " are not multiples of the window size " + std::to_string(cfg.patch));
  }
  if (x.shape()[0] != cfg.shallow_channels) throw std::invalid_argument(std::string(what) + ": channel count mismatch");
}

// FFN with residual, then layer norm over channels: LN(r + W2·gelu(W1·r + b1) + b2).
template <typename Scalar>
Var<Scalar> feed_forward_norm(const BoundParams<Scalar>& p, const std::string& prefix, const Var<Scalar>& r,
                              const ModelConfig& cfg) {
  const Var<Scalar> b1 = p[prefix + ".ffn.b1"], b2 = p[prefix + ".ffn.b2"];
  Var<Scalar> h = ad::gelu(ad::linear(r, p[prefix + ".ffn.w1"], &b1));
  Var<Scalar> f = ad::linear(h, p[prefix + ".ffn.w2"], &b2);
  return ad::layer_norm(ad::add(r, f), p[prefix + ".norm.gain"], p[prefix + ".norm.bias"],
                        static_cast<Scalar>(cfg.norm_eps));
}

template <typename Scalar>
Var<Scalar> canonical_entities(const Var<Scalar>& entities) {
  const auto order = canonical_row_order(entities.value());
  const Index e = entities.shape()[0];
  const Index d = entities.value().size() / e;
  auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(e * d));
  for (Index r = 0; r < e; ++r) {
    for (Index k = 0; k < d; ++k) (*idx)[static_cast<std::size_t>(r * d + k)] = order[static_cast<std::size_t>(r)] * d + k;
  }
  return ad::gather(entities, IndexMap(idx), {e, d});
}

template <typename Scalar>
void add_block(ParameterSet<Scalar>& ps, const std::string& prefix, Index c, Index hidden, Rng& rng,
               bool with_qkv, bool with_q_only) {
  auto proj = [&](Index rows, Index cols) {
    Tensor<Scalar> t({rows, cols});
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.truncated_normal(0.02));
    return t;
  };
  if (with_qkv || with_q_only) ps.add(prefix + ".wq", proj(c, c));
  if (with_qkv) {
    ps.add(prefix + ".wk", proj(c, c));
    ps.add(prefix + ".wv", proj(c, c));
  }
  ps.add(prefix + ".ffn.w1", proj(c, hidden));
  ps.add(prefix + ".ffn.b1", Tensor<Scalar>({hidden}));
  ps.add(prefix + ".ffn.w2", proj(hidden, c));
  ps.add(prefix + ".ffn.b2", Tensor<Scalar>({c}));
  ps.add(prefix + ".norm.gain", Tensor<Scalar>::constant({c}, Scalar(1)));
  ps.add(prefix + ".norm.bias", Tensor<Scalar>({c}));
}

}  // namespace

template <typename Scalar>
std::vector<Index> canonical_row_order(const Tensor<Scalar>& m) {
  const Index rows = m.dim(0);
  const Index d = m.size() / rows;
  std::vector<Index> order(static_cast<std::size_t>(rows));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    const Scalar* ra = m.ptr() + a * d;
    const Scalar* rb = m.ptr() + b * d;
    return std::lexicographical_compare(ra, ra + d, rb, rb + d);
  });
  return order;
}

template <typename Scalar>
ParameterSet<Scalar> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index c = cfg.shallow_channels;
  const Index hidden = c * cfg.ffn_expansion;
  ParameterSet<Scalar> ps;
  auto conv = [&](const std::string& name, Index cout, Index cin, Index k) {
    // He-scaled truncated normal for convolutions.
    const double sigma = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    Tensor<Scalar> w({cout, cin, k, k});
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(rng.truncated_normal(sigma));
    ps.add(name + ".weight", std::move(w));
    ps.add(name + ".bias", Tensor<Scalar>({cout}));
  };
  auto dense = [&](const std::string& name, Index rows, Index cols) {
    Tensor<Scalar> w({rows, cols});
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(rng.truncated_normal(0.02));
    ps.add(name + ".weight", std::move(w));
    ps.add(name + ".bias", Tensor<Scalar>({cols}));
  };

  for (const char* m : {"ir", "vi"}) {
    conv(std::string("encoder.") + m + ".conv1", c, 1, 3);
    conv(std::string("encoder.") + m + ".conv2", c, c, 3);
  }
  for (const char* m : {"ir", "vi"}) add_block(ps, std::string("mca.") + m, c, hidden, rng, true, false);
  for (const char* m : {"ir", "vi"}) add_block(ps, std::string("msa.") + m, c, hidden, rng, true, false);
  dense("entity_align", kEmbeddingDim, c);
  for (const char* name : {"cgha.en.wk", "cgha.en.wv"}) {
    Tensor<Scalar> w({c, c});
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(rng.truncated_normal(0.02));
    ps.add(name, std::move(w));
  }
  for (const char* m : {"ir", "vi"}) {
    add_block(ps, std::string("cgha.") + m + ".stage1", c, hidden, rng, false, true);
    add_block(ps, std::string("cgha.") + m + ".stage2", c, hidden, rng, true, false);
  }
  const auto plan = cfg.reconstructor_plan();
  conv("recon.conv1", plan[0].second, plan[0].first, 3);
  conv("recon.conv2", plan[1].second, plan[1].first, 3);
  conv("recon.conv3", plan[2].second, plan[2].first, 1);
  dense("classifier.entity", kEmbeddingDim, cfg.shared_channels());
  dense("classifier.fc", cfg.shared_channels(), cfg.num_labels);
  ps.add("task.w", Tensor<Scalar>({2}));
  return ps;
}

template <typename Scalar>
BoundParams<Scalar>::BoundParams(Tape<Scalar>& tape, const ParameterSet<Scalar>& params, bool requires_grad)
    : tape_(&tape) {
  for (const auto& e : params) {
    index_.emplace(e.name, vars_.size());
    vars_.emplace_back(e.name, tape.leaf(e.value, requires_grad));
  }
}

template <typename Scalar>
Var<Scalar> BoundParams<Scalar>::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return vars_[it->second].second;
}

template <typename Scalar>
ParameterSet<Scalar> BoundParams<Scalar>::gradients() const {
  ParameterSet<Scalar> out;
  for (const auto& [name, var] : vars_) out.add(name, tape_->grad(var));
  return out;
}

template <typename Scalar>
Var<Scalar> encode_shallow(const BoundParams<Scalar>& p, const Var<Scalar>& image, Modality modality,
                           const ModelConfig& cfg) {
  require_map(image, "encode_shallow");
  if (image.shape()[0] != 1) throw std::invalid_argument("encode_shallow: expected a single-channel image");
  if (image.shape()[1] % cfg.patch || image.shape()[2] % cfg.patch) {
    throw std::invalid_argument("encode_shallow: extents " + shape_string(image.shape()) + " are not multiples of " +
                                std::to_string(cfg.patch));
  }
  const std::string pre = "encoder." + mod(modality);
  const auto slope = static_cast<Scalar>(cfg.leaky_slope);
  const Var<Scalar> b1 = p[pre + ".conv1.bias"], b2 = p[pre + ".conv2.bias"];
  Var<Scalar> h = ad::leaky_relu(ad::conv2d(image, p[pre + ".conv1.weight"], &b1, 1, Padding::Reflect), slope);
  return ad::leaky_relu(ad::conv2d(h, p[pre + ".conv2.weight"], &b2, 1, Padding::Reflect), slope);
}

template <typename Scalar>
std::pair<BlockOutput<Scalar>, BlockOutput<Scalar>> channel_cross_attention(const BoundParams<Scalar>& p,
                                                                            const Var<Scalar>& ir, const Var<Scalar>& vi,
                                                                            const ModelConfig& cfg,
                                                                            const AttentionProbe<Scalar>* probe) {
  require_windows(ir, cfg, "channel_cross_attention");
  require_windows(vi, cfg, "channel_cross_attention");
  if (ir.shape() != vi.shape()) throw std::invalid_argument("channel_cross_attention: modality shapes differ");
  const Index c = ir.shape()[0], h = ir.shape()[1], w = ir.shape()[2];
  const Index area = cfg.patch * cfg.patch;
  const Index windows = (h / cfg.patch) * (w / cfg.patch);
  const auto to_tokens = window_tokens(c, h, w, cfg.patch);
  const auto from_tokens = inverse(to_tokens);
  const auto to_channels = window_channels(c, windows, area);
  const auto from_channels = inverse(to_channels);
  const Shape token_shape{h * w, c}, channel_shape{windows * c, area};

  const Var<Scalar> x_ir = ad::gather(ir, to_tokens, token_shape);
  const Var<Scalar> x_vi = ad::gather(vi, to_tokens, token_shape);
  auto branch = [&](const Var<Scalar>& self, const Var<Scalar>& other, const std::string& m, const std::string& o) {
    // Queries from this modality; keys and values from the other one, each with its own projections.
    Var<Scalar> q = ad::gather(ad::linear(self, p["mca." + m + ".wq"]), to_channels, channel_shape);
    Var<Scalar> k = ad::gather(ad::linear(other, p["mca." + o + ".wk"]), to_channels, channel_shape);
    Var<Scalar> v = ad::gather(ad::linear(other, p["mca." + o + ".wv"]), to_channels, channel_shape);
    Var<Scalar> a = ad::attention(q, k, v, windows * cfg.heads, Index{1}, Scalar(1) / std::sqrt(static_cast<Scalar>(area)),
                                  "mca." + m, probe);
    Var<Scalar> r = ad::add(self, ad::gather(a, from_channels, token_shape));
    Var<Scalar> y = feed_forward_norm(p, "mca." + m, r, cfg);
    return BlockOutput<Scalar>{ad::gather(y, from_tokens, ir.shape()), ad::gather(r, from_tokens, ir.shape())};
  };
  return {branch(x_ir, x_vi, "ir", "vi"), branch(x_vi, x_ir, "vi", "ir")};
}

template <typename Scalar>
BlockOutput<Scalar> token_self_attention(const BoundParams<Scalar>& p, const Var<Scalar>& x, Modality modality,
                                         const ModelConfig& cfg, const AttentionProbe<Scalar>* probe) {
  require_windows(x, cfg, "token_self_attention");
  const Index c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const Index windows = (h / cfg.patch) * (w / cfg.patch);
  const auto to_tokens = window_tokens(c, h, w, cfg.patch);
  const auto from_tokens = inverse(to_tokens);
  const std::string pre = "msa." + mod(modality);

  const Var<Scalar> t = ad::gather(x, to_tokens, {h * w, c});
  Var<Scalar> a = ad::attention(ad::linear(t, p[pre + ".wq"]), ad::linear(t, p[pre + ".wk"]), ad::linear(t, p[pre + ".wv"]),
                                windows, cfg.heads, Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.head_dim())), pre, probe);
  Var<Scalar> r = ad::add(t, a);
  Var<Scalar> y = feed_forward_norm(p, pre, r, cfg);
  return {ad::gather(y, from_tokens, x.shape()), ad::gather(r, from_tokens, x.shape())};
}

template <typename Scalar>
CghaOutput<Scalar> cgha(const BoundParams<Scalar>& p, const Var<Scalar>& x, const Var<Scalar>& entities,
                        Modality modality, const ModelConfig& cfg, const AttentionProbe<Scalar>* probe) {
  require_map(x, "cgha");
  if (entities.shape().size() != 2 || entities.shape()[0] < 1) throw std::invalid_argument("cgha: at least one entity is required");
  if (entities.shape()[1] != kEmbeddingDim) throw std::invalid_argument("cgha: entity features must be 768-dimensional");
  const Index c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (c != cfg.shallow_channels) throw std::invalid_argument("cgha: channel count mismatch");
  const auto to_tokens = raster_tokens(c, h, w);
  const auto from_tokens = inverse(to_tokens);
  const std::string pre = "cgha." + mod(modality);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.head_dim()));

  const Var<Scalar> align_bias = p["entity_align.bias"];
  const Var<Scalar> aligned = ad::linear(canonical_entities(entities), p["entity_align.weight"], &align_bias);
  const Var<Scalar> tokens = ad::gather(x, to_tokens, {h * w, c});

  // Visual tokens query the entities.
  Var<Scalar> context = ad::attention(ad::linear(tokens, p[pre + ".stage1.wq"]), ad::linear(aligned, p["cgha.en.wk"]),
                                      ad::linear(aligned, p["cgha.en.wv"]), Index{1}, cfg.heads, scale, pre + ".stage1", probe);
  Var<Scalar> guided = feed_forward_norm(p, pre + ".stage1", ad::add(tokens, context), cfg);

  // Entity-guided tokens query the visual tokens.
  Var<Scalar> back = ad::attention(ad::linear(guided, p[pre + ".stage2.wq"]), ad::linear(tokens, p[pre + ".stage2.wk"]),
                                   ad::linear(tokens, p[pre + ".stage2.wv"]), Index{1}, cfg.heads, scale, pre + ".stage2", probe);
  Var<Scalar> out = feed_forward_norm(p, pre + ".stage2", ad::add(guided, back), cfg);
  return {ad::gather(guided, from_tokens, x.shape()), ad::gather(out, from_tokens, x.shape()), context};
}

template <typename Scalar>
Var<Scalar> assemble_shared(const Var<Scalar>& ir, const Var<Scalar>& vi) {
  if (ir.shape() != vi.shape()) throw std::invalid_argument("assemble_shared: branch shapes differ");
  return ad::concat0(ir, vi);
}

template <typename Scalar>
Var<Scalar> reconstruct(const BoundParams<Scalar>& p, const Var<Scalar>& shared, const ModelConfig& cfg) {
  require_map(shared, "reconstruct");
  if (shared.shape()[0] != cfg.shared_channels()) throw std::invalid_argument("reconstruct: expected shared channel count");
  const auto slope = static_cast<Scalar>(cfg.leaky_slope);
  const Var<Scalar> b1 = p["recon.conv1.bias"], b2 = p["recon.conv2.bias"], b3 = p["recon.conv3.bias"];
  Var<Scalar> h = ad::leaky_relu(ad::conv2d(shared, p["recon.conv1.weight"], &b1, 1, Padding::Reflect), slope);
  h = ad::leaky_relu(ad::conv2d(h, p["recon.conv2.weight"], &b2, 1, Padding::Reflect), slope);
  return ad::conv2d(h, p["recon.conv3.weight"], &b3, 1, Padding::Reflect);
}

template <typename Scalar>
Var<Scalar> classify(const BoundParams<Scalar>& p, const Var<Scalar>& shared, const Var<Scalar>* entities,
                     const ModelConfig& cfg, bool training, Rng* rng) {
  require_map(shared, "classify");
  Var<Scalar> modulated = shared;
  if (entities) {
    const Var<Scalar> bias = p["classifier.entity.bias"];
    Var<Scalar> projected = ad::linear(canonical_entities(*entities), p["classifier.entity.weight"], &bias);
    if (training && cfg.mask_ratio > 0.0) {
      if (!rng) throw std::invalid_argument("classify: training mask needs an Rng");
      // Each scalar of the projected entity matrix is dropped independently; survivors are not rescaled.
      Tensor<Scalar> keep(projected.shape());
      for (Index i = 0; i < keep.size(); ++i) keep[i] = rng->bernoulli(cfg.mask_ratio) ? Scalar(0) : Scalar(1);
      projected = ad::mul(projected, p.tape().constant(std::move(keep)));
    }
    modulated = ad::mul_channels(shared, ad::mean_rows(projected));
  }
  const Var<Scalar> fc_bias = p["classifier.fc.bias"];
  Var<Scalar> pooled = ad::reshape(ad::max_pool_global(modulated), {1, shared.shape()[0]});
  Var<Scalar> logits = ad::linear(pooled, p["classifier.fc.weight"], &fc_bias);
  return ad::reshape(ad::sigmoid(logits), {cfg.num_labels});
}

template <typename Scalar>
ForwardTrace<Scalar> forward_full(const BoundParams<Scalar>& p, const Tensor<Scalar>& ir, const Tensor<Scalar>& vi,
                                  const Tensor<Scalar>& entities, const ModelConfig& cfg, bool training, Rng* rng,
                                  const AttentionProbe<Scalar>* probe) {
  cfg.validate();
  if (ir.shape() != vi.shape()) throw std::invalid_argument("forward_full: ir/vi extents differ");
  Tape<Scalar>& tape = p.tape();
  ForwardTrace<Scalar> t;
  t.shallow_ir = encode_shallow(p, tape.constant(ir), Modality::Ir, cfg);
  t.shallow_vi = encode_shallow(p, tape.constant(vi), Modality::Vi, cfg);

  t.channel_ir = t.shallow_ir;
  t.channel_vi = t.shallow_vi;
  if (cfg.use_ca) {
    auto [a, b] = channel_cross_attention(p, t.shallow_ir, t.shallow_vi, cfg, probe);
    t.channel_ir = a.output;
    t.channel_vi = b.output;
  }
  t.token_ir = t.channel_ir;
  t.token_vi = t.channel_vi;
  if (cfg.use_ta) {
    t.token_ir = token_self_attention(p, t.channel_ir, Modality::Ir, cfg, probe).output;
    t.token_vi = token_self_attention(p, t.channel_vi, Modality::Vi, cfg, probe).output;
  }
  t.interacted_ir = t.token_ir;
  t.interacted_vi = t.token_vi;
  Var<Scalar> ent;
  if (cfg.use_text) ent = tape.constant(entities);
  if (cfg.use_text && cfg.use_cgha) {
    auto a = cgha(p, t.token_ir, ent, Modality::Ir, cfg, probe);
    auto b = cgha(p, t.token_vi, ent, Modality::Vi, cfg, probe);
    t.entity_guided_ir = a.entity_guided;
    t.entity_guided_vi = b.entity_guided;
    t.interacted_ir = a.output;
    t.interacted_vi = b.output;
  }
  t.shared = assemble_shared(t.interacted_ir, t.interacted_vi);
  t.fused = reconstruct(p, t.shared, cfg);
  t.probabilities = classify(p, t.shared, cfg.use_text ? &ent : nullptr, cfg, training, rng);
  return t;
}

#define EGMT_INSTANTIATE_MODEL(S)                                                                                      \
  template std::vector<Index> canonical_row_order<S>(const Tensor<S>&);                                               \
  template ParameterSet<S> init_params<S>(const ModelConfig&, Rng&);                                                   \
  template class BoundParams<S>;                                                                                       \
  template Var<S> encode_shallow<S>(const BoundParams<S>&, const Var<S>&, Modality, const ModelConfig&);               \
  template std::pair<BlockOutput<S>, BlockOutput<S>> channel_cross_attention<S>(                                       \
      const BoundParams<S>&, const Var<S>&, const Var<S>&, const ModelConfig&, const AttentionProbe<S>*);               \
  template BlockOutput<S> token_self_attention<S>(const BoundParams<S>&, const Var<S>&, Modality, const ModelConfig&,  \
                                                  const AttentionProbe<S>*);                                            \
  template CghaOutput<S> cgha<S>(const BoundParams<S>&, const Var<S>&, const Var<S>&, Modality, const ModelConfig&,    \
                                 const AttentionProbe<S>*);                                                             \
  template Var<S> assemble_shared<S>(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> reconstruct<S>(const BoundParams<S>&, const Var<S>&, const ModelConfig&);                            \
  template Var<S> classify<S>(const BoundParams<S>&, const Var<S>&, const Var<S>*, const ModelConfig&, bool, Rng*);    \
  template ForwardTrace<S> forward_full<S>(const BoundParams<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                           const ModelConfig&, bool, Rng*, const AttentionProbe<S>*);

EGMT_INSTANTIATE_MODEL(float)
EGMT_INSTANTIATE_MODEL(double)
EGMT_INSTANTIATE_MODEL(long double)

}  // namespace egmt

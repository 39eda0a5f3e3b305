#include "egmt/trainer.hpp"

#include "egmt/losses.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace egmt {

using nlohmann::json;

template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state, const ParameterSet<Scalar>& grads,
               const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient set does not match parameters");
  for (const auto& g : grads) {
    if (!g.value.all_finite()) throw NumericError("non-finite gradient in " + g.name);
  }
  if (state.m.size() == 0) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, t));
  const Scalar lr = static_cast<Scalar>(cfg.lr), eps = static_cast<Scalar>(cfg.eps);
  auto& pe = params.entries();
  for (std::size_t i = 0; i < pe.size(); ++i) {
    const auto& g = grads.entries()[i];
    if (g.name != pe[i].name || g.value.shape() != pe[i].value.shape()) {
      throw std::invalid_argument("adam_step: gradient layout differs at " + pe[i].name);
    }
    auto m = state.m.entries()[i].value.data().array();
    auto v = state.v.entries()[i].value.data().array();
    const auto ga = g.value.data().array();
    m = b1 * m + (Scalar(1) - b1) * ga;
    v = b2 * v + (Scalar(1) - b2) * ga.square();
    pe[i].value.data().array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

template <typename Scalar>
double clip_gradients(ParameterSet<Scalar>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) sq += g.value.data().template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar s = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads) g.value.data() *= s;
  }
  return norm;
}

template void adam_step<float>(ParameterSet<float>&, AdamState<float>&, const ParameterSet<float>&, const TrainConfig&);
template void adam_step<double>(ParameterSet<double>&, AdamState<double>&, const ParameterSet<double>&,
                                const TrainConfig&);
template double clip_gradients<float>(ParameterSet<float>&, double);
template double clip_gradients<double>(ParameterSet<double>&, double);

// ---- checkpoints ----

namespace {

constexpr char kCheckpointMagic[4] = {'E', 'G', 'C', 'K'};
constexpr std::uint64_t kMaskStream = 0x6d61736bULL;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

const char* kGroups[3] = {"param", "adam_m", "adam_v"};

}  // namespace

Checkpoint initial_checkpoint(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.train.validate();
  Checkpoint c;
  c.config = cfg;
  Rng init(cfg.train.seed);
  c.state.params = init_params<float>(cfg.model, init);
  c.state.adam = AdamState<float>::zeros_like(c.state.params);
  c.state.rng = Rng::derive(cfg.train.seed, kMaskStream);
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string blob;
  json tensors = json::array();
  const ParameterSet<float>* sets[3] = {&ckpt.state.params, &ckpt.state.adam.m, &ckpt.state.adam.v};
  for (int g = 0; g < 3; ++g) {
    for (const auto& e : *sets[g]) {
      std::ostringstream os;
      write_egt1(os, e.value);
      const std::string bytes = os.str();
      tensors.push_back({{"name", e.name},
                         {"group", kGroups[g]},
                         {"offset", blob.size()},
                         {"length", bytes.size()},
                         {"shape", e.value.shape()}});
      blob += bytes;
    }
  }
  json manifest = {{"format", "EGCK"},
                   {"version", 1},
                   {"config", to_json(ckpt.config)},
                   {"step", ckpt.state.step},
                   {"adam_step", ckpt.state.adam.step},
                   {"rng", ckpt.state.rng.state()},
                   {"tensors", std::move(tensors)}};
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, 4);
  put_u64(out, text.size());
  out += text;
  out += blob;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw DataError("not an EGCK checkpoint");
  }
  const std::uint64_t len = get_u64(bytes, 4);
  if (len > bytes.size() - 12) throw DataError("checkpoint manifest truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(12, len));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint manifest malformed: ") + e.what());
  }
  const std::string_view blob = bytes.substr(12 + len);

  Checkpoint c;
  try {
    if (manifest.at("format") != "EGCK" || manifest.at("version") != 1) throw DataError("unsupported checkpoint version");
    c.config = run_config_from_json(manifest.at("config"));
    c.state.step = manifest.at("step").get<Index>();
    c.state.adam.step = manifest.at("adam_step").get<Index>();
    c.state.rng.set_state(manifest.at("rng").get<std::string>());
    ParameterSet<float>* sets[3] = {&c.state.params, &c.state.adam.m, &c.state.adam.v};
    for (const auto& t : manifest.at("tensors")) {
      const std::string group = t.at("group").get<std::string>();
      int g = 0;
      while (g < 3 && group != kGroups[g]) ++g;
      if (g == 3) throw DataError("checkpoint tensor has unknown group " + group);
      const auto off = t.at("offset").get<std::size_t>(), n = t.at("length").get<std::size_t>();
      if (off > blob.size() || n > blob.size() - off) throw DataError("checkpoint tensor " + t.at("name").get<std::string>() + " out of range");
      std::istringstream is(std::string(blob.substr(off, n)));
      Tensor<float> value = read_egt1(is);
      if (value.shape() != t.at("shape").get<Shape>()) throw DataError("checkpoint tensor shape mismatch");
      sets[g]->add(t.at("name").get<std::string>(), std::move(value));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint manifest incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }

  // Names and shapes must match what the stored configuration builds.
  Rng scratch(0);
  const ParameterSet<float> layout = init_params<float>(c.config.model, scratch);
  for (const ParameterSet<float>* set : {&c.state.params, &c.state.adam.m, &c.state.adam.v}) {
    if (set->size() != layout.size()) throw DataError("checkpoint tensor count does not match the model");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& a = set->entries()[i];
      const auto& b = layout.entries()[i];
      if (a.name != b.name || a.value.shape() != b.value.shape()) throw DataError("checkpoint tensor " + a.name + " does not match the model");
    }
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

// ---- training ----

std::string loss_csv_header() { return "step,L_total,L_fus,L_int,L_edge,L_ssim,L_cla,lambda1,lambda2,w1,w2"; }

std::string loss_csv_row(const LossRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step),
                r.total, r.fusion, r.intensity, r.edge, r.ssim, r.classification, r.lambda1, r.lambda2, r.w1, r.w2);
  return buf;
}

Tensor<float> entity_input(const ImagePairSample& sample, const ModelConfig& cfg) {
  if (!cfg.use_text) return Tensor<float>({1, kEmbeddingDim});
  try {
    return stack_entity_features(sample.annotation);
  } catch (const AnnotationError& e) {
    throw DataError(sample.id + ": " + e.what());
  }
}

SampleStep sample_gradients(const ParameterSet<float>& params, const ImagePairSample& sample, const RunConfig& cfg,
                            Rng& rng) {
  Tape<float> tape;
  BoundParams<float> p(tape, params, true);
  const ForwardTrace<float> tr = forward_full(p, sample.ir, sample.vi_y, entity_input(sample, cfg.model), cfg.model,
                                              true, &rng);
  const bool multi_task = cfg.train.multi_task && cfg.model.use_text;
  const LossBreakdown<float> lb =
      total_loss(tr.fused, tr.probabilities, tape.constant(sample.ir), tape.constant(sample.vi_y), sample.label,
                 p["task.w"], cfg.train.fusion, cfg.train.focal, static_cast<float>(cfg.train.tau), multi_task);
  tape.backward(lb.total);

  SampleStep s;
  s.grads = p.gradients();
  LossRecord& r = s.losses;
  r.total = lb.total.value()[0];
  r.fusion = lb.fusion;
  r.intensity = lb.intensity;
  r.edge = lb.edge;
  r.ssim = lb.ssim;
  r.classification = lb.classification;
  r.lambda1 = lb.lambda1;
  r.lambda2 = lb.lambda2;
  return s;
}

template <typename Scalar>
Objective<Scalar> sample_objective(const ImagePairSample& sample, const RunConfig& cfg) {
  const Tensor<Scalar> ir = sample.ir.cast<Scalar>();
  const Tensor<Scalar> vi = sample.vi_y.cast<Scalar>();
  const Tensor<Scalar> ent = entity_input(sample, cfg.model).cast<Scalar>();
  const bool multi_task = cfg.train.multi_task && cfg.model.use_text;
  return [=](const ParameterSet<Scalar>& params, ParameterSet<Scalar>* grad) {
    Tape<Scalar> tape;
    BoundParams<Scalar> p(tape, params, grad != nullptr);
    const ForwardTrace<Scalar> tr = forward_full(p, ir, vi, ent, cfg.model, false, nullptr);
    const LossBreakdown<Scalar> lb =
        total_loss(tr.fused, tr.probabilities, tape.constant(ir), tape.constant(vi), sample.label, p["task.w"],
                   cfg.train.fusion, cfg.train.focal, static_cast<Scalar>(cfg.train.tau), multi_task);
    if (grad) {
      tape.backward(lb.total);
      *grad = p.gradients();
    }
    return lb.total.value()[0];
  };
}

template Objective<float> sample_objective<float>(const ImagePairSample&, const RunConfig&);
template Objective<double> sample_objective<double>(const ImagePairSample&, const RunConfig&);
template Objective<long double> sample_objective<long double>(const ImagePairSample&, const RunConfig&);

TrainResult train(const std::vector<ImagePairSample>& samples, Checkpoint start, const TrainOptions& options) {
  TrainResult result;
  result.final = std::move(start);
  RunConfig& cfg = result.final.config;
  TrainState& state = result.final.state;
  cfg.model.validate();
  cfg.train.validate();
  if (samples.empty()) throw DataError("no training samples");

  if (state.step == 0 && cfg.train.class_weights_from_data && cfg.train.multi_task && cfg.model.use_text) {
    std::vector<LabelVector> labels;
    for (const auto& s : samples) labels.push_back(s.label);
    cfg.train.focal.class_weights = class_weights_from_labels(labels);
  }

  const Index n = static_cast<Index>(samples.size());
  const Index per_epoch = (n + cfg.train.batch - 1) / cfg.train.batch;
  const Index total = cfg.train.max_steps > 0 ? cfg.train.max_steps : cfg.train.epochs * per_epoch;

  std::ofstream csv;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto path = options.out_dir / "loss_log.csv";
    if (state.step == 0) {
      csv.open(path, std::ios::trunc);
      csv << loss_csv_header() << '\n';
    } else {
      csv.open(path, std::ios::app);
    }
    if (!csv) throw DataError("cannot write " + path.string());
  }

  Index cached_epoch = -1;
  std::vector<std::vector<Index>> batches;
  for (Index s = state.step; s < total; ++s) {
    const Index epoch = s / per_epoch;
    if (epoch != cached_epoch) {
      batches = epoch_batches(n, cfg.train.batch, cfg.train.seed, static_cast<std::uint64_t>(epoch));
      cached_epoch = epoch;
    }
    const auto& batch = batches[static_cast<std::size_t>(s % per_epoch)];

    ParameterSet<float> grads = state.params.zeros_like();
    LossRecord rec;
    for (Index idx : batch) {
      SampleStep one = sample_gradients(state.params, samples[static_cast<std::size_t>(idx)], cfg, state.rng);
      for (std::size_t i = 0; i < grads.size(); ++i) grads.entries()[i].value.data() += one.grads.entries()[i].value.data();
      rec.total += one.losses.total;
      rec.fusion += one.losses.fusion;
      rec.intensity += one.losses.intensity;
      rec.edge += one.losses.edge;
      rec.ssim += one.losses.ssim;
      rec.classification += one.losses.classification;
      rec.lambda1 = one.losses.lambda1;
      rec.lambda2 = one.losses.lambda2;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& g : grads) g.value.data() *= static_cast<float>(inv);
    for (double* v : {&rec.total, &rec.fusion, &rec.intensity, &rec.edge, &rec.ssim, &rec.classification}) *v *= inv;
    const Tensor<float>& w = state.params["task.w"];
    rec.w1 = w[0];
    rec.w2 = w[1];

    if (cfg.train.clip_norm > 0) clip_gradients(grads, cfg.train.clip_norm);
    adam_step(state.params, state.adam, grads, cfg.train);
    state.step = s + 1;
    rec.step = state.step;

    result.log.push_back(rec);
    if (csv.is_open()) csv << loss_csv_row(rec) << '\n' << std::flush;
    if (options.on_step) options.on_step(rec);
    if (!options.out_dir.empty() && cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0) {
      save_checkpoint(options.out_dir / ("checkpoint_step" + std::to_string(state.step) + ".egck"), result.final);
    }
  }
  if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "checkpoint.egck", result.final);
  return result;
}

std::vector<ImagePairSample> load_training_samples(const DatasetManifest& manifest, const LabelVocabulary& vocab,
                                                   const DataConfig& cfg) {
  std::vector<ImagePairSample> out;
  for (const auto& entry : manifest.entries) {
    for (auto& crop : crop_sliding(load_pair(entry, vocab), cfg.crop, cfg.stride)) out.push_back(std::move(crop));
  }
  return out;
}

// ---- inference ----

Inference infer(const ParameterSet<float>& params, const ModelConfig& cfg, const Tensor<float>& ir,
                const Tensor<float>& vi, const Tensor<float>& entities) {
  if (ir.shape() != vi.shape() || ir.rank() != 3 || ir.dim(0) != 1) throw DataError("fuse: expected matching 1×H×W images");
  const Index h = ir.dim(1), w = ir.dim(2);
  const Index ph = (h + cfg.patch - 1) / cfg.patch * cfg.patch, pw = (w + cfg.patch - 1) / cfg.patch * cfg.patch;
  const bool pad = ph != h || pw != w;
  Tape<float> tape;
  BoundParams<float> p(tape, params, false);
  const ForwardTrace<float> tr = forward_full(p, pad ? pad_reflect(ir, ph, pw) : ir, pad ? pad_reflect(vi, ph, pw) : vi,
                                              entities, cfg, false, nullptr);
  Inference out;
  out.fused = pad ? crop(tr.fused.value(), 0, 0, h, w) : tr.fused.value();
  if (!out.fused.all_finite()) throw NumericError("fused image is not finite");
  out.fused.data() = out.fused.data().cwiseMax(0.0f).cwiseMin(1.0f);
  const Tensor<float>& probs = tr.probabilities.value();
  for (std::size_t c = 0; c < kNumLabels; ++c) out.probabilities[c] = probs[static_cast<Index>(c)];
  return out;
}

Tensor<float> fuse_image(const ParameterSet<float>& params, const ModelConfig& cfg, const Tensor<float>& ir,
                         const Tensor<float>& vi, const Tensor<float>& entities) {
  return infer(params, cfg, ir, vi, entities).fused;
}

std::vector<std::filesystem::path> fuse_manifest(const Checkpoint& ckpt, const DatasetManifest& manifest,
                                                 const LabelVocabulary& vocab, const std::filesystem::path& out_dir,
                                                 const FuseOptions& options) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& entry : manifest.entries) {
    const ImagePairSample s = load_pair(entry, vocab);
    const Tensor<float> fused =
        fuse_image(ckpt.state.params, ckpt.config.model, s.ir, s.vi_y, entity_input(s, ckpt.config.model));
    const bool color = options.color && s.vi_cbcr.has_value();
    const auto path = out_dir / (s.id + "_fused.png");
    write_png(path, to_image8(recolor(fused, color ? &*s.vi_cbcr : nullptr)));
    written.push_back(path);
  }
  return written;
}

}  // namespace egmt

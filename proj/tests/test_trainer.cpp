#include "test_util.hpp"

#include "egmt/config.hpp"
#include "egmt/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace egmt;
using egmt::test::fixture;
using egmt::test::scratch_dir;

namespace {

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const LabelVocabulary& vocab() {
  static const LabelVocabulary v = load_vocabulary(fixture("vocab.json"));
  return v;
}

const std::vector<ImagePairSample>& patches() {
  static const std::vector<ImagePairSample> s = load_training_samples(load_manifest(fixture("manifest.json")), vocab(), {32, 32});
  return s;
}

RunConfig short_config(Index steps) {
  RunConfig cfg = load_run_config(fixture("config_short.json"));
  cfg.train.max_steps = steps;
  return cfg;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

}  // namespace

TEST_CASE("adam matches a scalar reference") {
  // Minimise sum w^2 from a fixed start; reference is the textbook update on each scalar.
  TrainConfig cfg;
  cfg.lr = 0.05;
  ParameterSet<double> params;
  params.add("a", Tensor<double>({3}, Vector<double>{{0.5, -1.25, 2.0}}));
  params.add("b", Tensor<double>({1, 2}, Vector<double>{{-0.3, 0.0}}));
  std::vector<double> w = {0.5, -1.25, 2.0, -0.3, 0.0}, m(5, 0.0), v(5, 0.0);
  AdamState<double> state;
  for (int t = 1; t <= 10; ++t) {
    ParameterSet<double> grads = params.zeros_like();
    for (auto& g : grads) g.value.data() = 2.0 * params[g.name].data();
    adam_step(params, state, grads, cfg);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = 2 * w[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mhat = m[i] / (1 - std::pow(0.9, t)), vhat = v[i] / (1 - std::pow(0.999, t));
      w[i] -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
    }
  }
  CHECK(state.step == 10);
  const std::vector<double> got = {params["a"][0], params["a"][1], params["a"][2], params["b"][0], params["b"][1]};
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(got[i] - w[i]) < 1e-10);
}

TEST_CASE("adam rejects non-finite gradients and names the tensor") {
  ParameterSet<float> params;
  params.add("encoder.ir.conv1.weight", Tensor<float>::constant({2}, 1.0f));
  params.add("task.w", Tensor<float>({2}));
  const ParameterSet<float> before = params;
  ParameterSet<float> grads = params.zeros_like();
  grads["task.w"][1] = std::nanf("");
  AdamState<float> state;
  try {
    adam_step(params, state, grads, TrainConfig{});
    FAIL("non-finite gradient accepted");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("task.w") != std::string::npos);
  }
  CHECK(params == before);
  CHECK(state.step == 0);
}

TEST_CASE("gradient clipping") {
  ParameterSet<double> g;
  g.add("x", Tensor<double>({2}, Vector<double>{{3.0, 4.0}}));
  CHECK(clip_gradients(g, 10.0) == doctest::Approx(5.0));
  CHECK(g["x"][0] == 3.0);
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(5.0));
  CHECK(g["x"][0] == doctest::Approx(0.6));
  CHECK(g["x"][1] == doctest::Approx(0.8));
}

TEST_CASE("checkpoint round trip is byte identical") {
  const auto dir = scratch_dir("trainer_ckpt");
  const TrainResult r = train({patches().begin(), patches().begin() + 2}, initial_checkpoint(short_config(2)));
  save_checkpoint(dir / "a.egck", r.final);
  const Checkpoint loaded = load_checkpoint(dir / "a.egck");
  save_checkpoint(dir / "b.egck", loaded);
  CHECK(file_bytes(dir / "a.egck") == file_bytes(dir / "b.egck"));
  CHECK(loaded.config == r.final.config);
  CHECK(loaded.state.params == r.final.state.params);
  CHECK(loaded.state.adam == r.final.state.adam);
  CHECK(loaded.state.step == 2);

  const std::string bytes = encode_checkpoint(r.final);
  CHECK_THROWS_AS(decode_checkpoint("EGCX" + bytes.substr(4)), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), DataError);
  // A checkpoint cannot load into a different architecture.
  Checkpoint other = r.final;
  other.config.model.shallow_channels = 16;
  CHECK_THROWS(decode_checkpoint(encode_checkpoint(other)));
}

TEST_CASE("training is deterministic and resumable") {
  const auto dir = scratch_dir("trainer_det");
  const RunConfig cfg = short_config(4);
  train(patches(), initial_checkpoint(cfg), {dir / "a", {}});
  train(patches(), initial_checkpoint(cfg), {dir / "b", {}});
  CHECK(file_bytes(dir / "a/checkpoint.egck") == file_bytes(dir / "b/checkpoint.egck"));
  CHECK(file_bytes(dir / "a/loss_log.csv") == file_bytes(dir / "b/loss_log.csv"));

  // Two steps, then two more from the saved checkpoint, equal four straight steps.
  train(patches(), initial_checkpoint(short_config(2)), {dir / "c", {}});
  Checkpoint mid = load_checkpoint(dir / "c/checkpoint.egck");
  mid.config.train.max_steps = 4;
  train(patches(), mid, {dir / "c", {}});
  CHECK(file_bytes(dir / "c/checkpoint.egck") == file_bytes(dir / "a/checkpoint.egck"));
  CHECK(file_bytes(dir / "c/loss_log.csv") == file_bytes(dir / "a/loss_log.csv"));

  RunConfig reseeded = cfg;
  reseeded.train.seed = 1;
  train(patches(), initial_checkpoint(reseeded), {dir / "d", {}});
  CHECK(file_bytes(dir / "d/checkpoint.egck") != file_bytes(dir / "a/checkpoint.egck"));
}

TEST_CASE("loss log rows") {
  const auto dir = scratch_dir("trainer_log");
  std::vector<LossRecord> seen;
  const TrainResult r = train(patches(), initial_checkpoint(short_config(3)), {dir, [&](const LossRecord& l) { seen.push_back(l); }});
  REQUIRE(seen.size() == 3);
  std::ifstream in(dir / "loss_log.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == loss_csv_header());
  Index rows = 0;
  while (std::getline(in, line)) {
    const auto f = csv_fields(line);
    REQUIRE(f.size() == 11);
    CHECK(std::stoll(f[0]) == ++rows);
    CHECK(std::abs(std::stod(f[7]) + std::stod(f[8]) - 1.0) < 1e-6);
    // L_fus = L_int + 15 L_edge + 5 L_ssim.
    CHECK(std::stod(f[2]) == doctest::Approx(std::stod(f[3]) + 15 * std::stod(f[4]) + 5 * std::stod(f[5])).epsilon(1e-5));
  }
  CHECK(rows == 3);
  CHECK(r.log[0].lambda1 == doctest::Approx(0.5));
  CHECK(r.log[0].classification > 0.0);
}

TEST_CASE("disabling text guidance forces single-task weights") {
  RunConfig cfg = short_config(2);
  apply_ablation(cfg, "ti");
  const TrainResult r = train({patches().begin(), patches().begin() + 4}, initial_checkpoint(cfg));
  for (const auto& l : r.log) {
    CHECK(l.lambda1 == 1.0);
    CHECK(l.lambda2 == 0.0);
    CHECK(l.total == doctest::Approx(l.fusion).epsilon(1e-6));
  }
  // The classifier branch receives no gradient.
  Rng rng(0);
  const SampleStep s = sample_gradients(r.final.state.params, patches()[0], cfg, rng);
  for (const auto& g : s.grads) {
    if (g.name.rfind("classifier.", 0) == 0 || g.name == "task.w") CHECK(g.value.data().cwiseAbs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("every ablation combination trains and fuses") {
  const char* names[5] = {"ca", "ta", "cgha", "mt", "ti"};
  const std::vector<ImagePairSample> two(patches().begin(), patches().begin() + 2);
  for (int mask = 0; mask < 32; ++mask) {
    RunConfig cfg = short_config(1);
    cfg.train.batch = 2;
    std::string label;
    for (int k = 0; k < 5; ++k) {
      if (mask & (1 << k)) {
        apply_ablation(cfg, names[k]);
        label += std::string(names[k]) + " ";
      }
    }
    INFO("ablated: ", label);
    TrainResult r;
    REQUIRE_NOTHROW(r = train(two, initial_checkpoint(cfg)));
    CHECK(std::isfinite(r.log.back().total));
    const Inference out = infer(r.final.state.params, cfg.model, two[0].ir, two[0].vi_y, entity_input(two[0], cfg.model));
    CHECK(out.fused.shape() == two[0].ir.shape());
    CHECK(out.fused.all_finite());
  }
  CHECK_THROWS_AS([] {
    RunConfig cfg;
    apply_ablation(cfg, "xyz");
  }(), ConfigError);
}

TEST_CASE("fusing twice writes identical files") {
  const auto dir = scratch_dir("trainer_fuse");
  const Checkpoint ckpt = train(patches(), initial_checkpoint(short_config(2))).final;
  const DatasetManifest m = load_manifest(fixture("manifest.json"));
  const auto a = fuse_manifest(ckpt, m, vocab(), dir / "a");
  const auto b = fuse_manifest(ckpt, m, vocab(), dir / "b", {true});
  const auto c = fuse_manifest(ckpt, m, vocab(), dir / "c");
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].filename().string() == entry_stem(m.entries[i]) + "_fused.png");
    CHECK(file_bytes(a[i]) == file_bytes(c[i]));
    const Image8 img = read_image(a[i]);
    CHECK(img.height == 32);
    CHECK(img.width == 32);
    CHECK(img.channels == 1);
  }
  // Color output needs visible chroma; pair_07 has an RGB visible image.
  CHECK(read_image(b[7]).channels == 3);
}

TEST_CASE("padded inference equals the cropped forward pass on padded input") {
  RunConfig cfg = short_config(1);
  const Checkpoint ckpt = initial_checkpoint(cfg);
  const ImagePairSample& s = patches()[3];
  Rng rng(5);
  const Tensor<float> ir = pad_reflect(s.ir, 40, 36), vi = pad_reflect(s.vi_y, 40, 36);
  const Tensor<float> ent = entity_input(s, cfg.model);

  const Tensor<float> got = fuse_image(ckpt.state.params, cfg.model, ir, vi, ent);
  REQUIRE(got.shape() == Shape{1, 40, 36});

  Tape<float> tape;
  BoundParams<float> p(tape, ckpt.state.params, false);
  const ForwardTrace<float> tr =
      forward_full(p, pad_reflect(ir, 48, 48), pad_reflect(vi, 48, 48), ent, cfg.model, false, nullptr);
  Tensor<float> expected = crop(tr.fused.value(), 0, 0, 40, 36);
  expected.data() = expected.data().cwiseMax(0.0f).cwiseMin(1.0f);
  CHECK(got == expected);

  // On the 16 grid nothing is padded.
  Tape<float> t2;
  BoundParams<float> p2(t2, ckpt.state.params, false);
  Tensor<float> direct = forward_full(p2, s.ir, s.vi_y, ent, cfg.model, false, nullptr).fused.value();
  direct.data() = direct.data().cwiseMax(0.0f).cwiseMin(1.0f);
  CHECK(fuse_image(ckpt.state.params, cfg.model, s.ir, s.vi_y, ent) == direct);
}

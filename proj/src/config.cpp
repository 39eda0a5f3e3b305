#include "egmt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace egmt {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key \"" + key + "\" in " + section);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j[key].get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
  }
}

std::string focal_form_name(FocalForm f) { return f == FocalForm::Standard ? "standard" : "verbatim"; }

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  if (max_steps < 0 || checkpoint_every < 0) throw ConfigError("step counts must be non-negative");
  if (clip_norm < 0) throw ConfigError("clip_norm must be non-negative");
  fusion.validate();
  focal.validate();
}

json to_json(const ModelConfig& c) {
  return {{"shallow_channels", c.shallow_channels}, {"patch", c.patch},           {"heads", c.heads},
          {"ffn_expansion", c.ffn_expansion},       {"num_labels", c.num_labels}, {"mask_ratio", c.mask_ratio},
          {"leaky_slope", c.leaky_slope},           {"norm_eps", c.norm_eps},     {"use_ca", c.use_ca},
          {"use_ta", c.use_ta},                     {"use_cgha", c.use_cgha},     {"use_text", c.use_text},
          {"head_dim", c.head_dim()},
          {"reconstructor", json::array({json::array({c.reconstructor_plan()[0].first, c.reconstructor_plan()[0].second}),
                                         json::array({c.reconstructor_plan()[1].first, c.reconstructor_plan()[1].second}),
                                         json::array({c.reconstructor_plan()[2].first, c.reconstructor_plan()[2].second})})}};
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"max_steps", c.max_steps},
          {"multi_task", c.multi_task},
          {"clip_norm", c.clip_norm},
          {"tau", c.tau},
          {"class_weights_from_data", c.class_weights_from_data},
          {"fusion",
           {{"alpha", {c.fusion.alpha_int, c.fusion.alpha_edge, c.fusion.alpha_ssim}},
            {"ssim_window", c.fusion.ssim_window},
            {"ssim_sigma", c.fusion.ssim_sigma},
            {"ssim_c1", c.fusion.ssim_c1},
            {"ssim_c2", c.fusion.ssim_c2}}},
          {"focal",
           {{"gamma", c.focal.gamma},
            {"class_weights", c.focal.class_weights},
            {"form", focal_form_name(c.focal.form)},
            {"clamp", c.focal.clamp}}}};
}

json to_json(const DataConfig& c) { return {{"crop", c.crop}, {"stride", c.stride}}; }

json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  reject_unknown(j,
                 {"shallow_channels", "patch", "heads", "ffn_expansion", "num_labels", "mask_ratio", "leaky_slope",
                  "norm_eps", "use_ca", "use_ta", "use_cgha", "use_text", "head_dim", "reconstructor"},
                 "model");
  read(j, "shallow_channels", c.shallow_channels);
  read(j, "patch", c.patch);
  read(j, "heads", c.heads);
  read(j, "ffn_expansion", c.ffn_expansion);
  read(j, "num_labels", c.num_labels);
  read(j, "mask_ratio", c.mask_ratio);
  read(j, "leaky_slope", c.leaky_slope);
  read(j, "norm_eps", c.norm_eps);
  read(j, "use_ca", c.use_ca);
  read(j, "use_ta", c.use_ta);
  read(j, "use_cgha", c.use_cgha);
  read(j, "use_text", c.use_text);
  // Derived entries are accepted so a printed configuration can be fed back, but must agree.
  if (j.contains("head_dim") && j["head_dim"] != json(c.head_dim())) throw ConfigError("head_dim disagrees with channels/heads");
  if (j.contains("reconstructor") && j["reconstructor"] != to_json(c)["reconstructor"]) {
    throw ConfigError("reconstructor plan is fixed by shallow_channels");
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.num_labels != static_cast<Index>(kNumLabels)) throw ConfigError("num_labels must be 9");
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j,
                 {"lr", "beta1", "beta2", "eps", "epochs", "batch", "seed", "checkpoint_every", "max_steps", "multi_task",
                  "clip_norm", "tau", "class_weights_from_data", "fusion", "focal"},
                 "train");
  read(j, "lr", c.lr);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read(j, "epochs", c.epochs);
  read(j, "batch", c.batch);
  read(j, "seed", c.seed);
  read(j, "checkpoint_every", c.checkpoint_every);
  read(j, "max_steps", c.max_steps);
  read(j, "multi_task", c.multi_task);
  read(j, "clip_norm", c.clip_norm);
  read(j, "tau", c.tau);
  read(j, "class_weights_from_data", c.class_weights_from_data);
  if (j.contains("fusion")) {
    const json& f = j["fusion"];
    reject_unknown(f, {"alpha", "ssim_window", "ssim_sigma", "ssim_c1", "ssim_c2"}, "train.fusion");
    if (f.contains("alpha")) {
      std::array<double, 3> a{};
      read(f, "alpha", a);
      c.fusion.alpha_int = a[0];
      c.fusion.alpha_edge = a[1];
      c.fusion.alpha_ssim = a[2];
    }
    read(f, "ssim_window", c.fusion.ssim_window);
    read(f, "ssim_sigma", c.fusion.ssim_sigma);
    read(f, "ssim_c1", c.fusion.ssim_c1);
    read(f, "ssim_c2", c.fusion.ssim_c2);
  }
  if (j.contains("focal")) {
    const json& f = j["focal"];
    reject_unknown(f, {"gamma", "class_weights", "form", "clamp"}, "train.focal");
    read(f, "gamma", c.focal.gamma);
    read(f, "class_weights", c.focal.class_weights);
    read(f, "clamp", c.focal.clamp);
    if (f.contains("form")) {
      const std::string form = f["form"].get<std::string>();
      if (form == "standard") {
        c.focal.form = FocalForm::Standard;
      } else if (form == "verbatim") {
        c.focal.form = FocalForm::Verbatim;
      } else {
        throw ConfigError("focal form must be standard or verbatim");
      }
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

DataConfig data_config_from_json(const json& j, DataConfig c) {
  reject_unknown(j, {"crop", "stride"}, "data");
  read(j, "crop", c.crop);
  read(j, "stride", c.stride);
  if (c.crop < 16 || c.crop % 16) throw ConfigError("crop must be a positive multiple of 16");
  if (c.stride < 1) throw ConfigError("stride must be >= 1");
  return c;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  reject_unknown(j, {"model", "train", "data"}, "config");
  if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model);
  if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
  if (j.contains("data")) c.data = data_config_from_json(j["data"], c.data);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return run_config_from_json(json::parse(ss.str()));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
}

void apply_ablation(RunConfig& cfg, const std::string& name) {
  if (name == "ca") {
    cfg.model.use_ca = false;
  } else if (name == "ta") {
    cfg.model.use_ta = false;
  } else if (name == "cgha") {
    cfg.model.use_cgha = false;
  } else if (name == "mt") {
    cfg.train.multi_task = false;
  } else if (name == "ti" || name == "ent") {
    cfg.model.use_text = false;
  } else {
    throw ConfigError("unknown ablation \"" + name + "\" (expected ca, ta, cgha, mt, ti)");
  }
}

}  // namespace egmt

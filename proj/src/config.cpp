#include "mrcnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

using ordered_json = nlohmann::ordered_json;

namespace mrc {

namespace {

void reject_unknown(const ordered_json& j, const std::set<std::string>& known,
                    const std::string& section) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key))
      throw ConfigError("config: unknown field '" + key + "' in section '" + section +
                        "'");
  }
}

template <typename V>
void get_if(const ordered_json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.preset = "desk";
  c.model.backbone.stem_channels = 32;
  c.model.cf = 64;
  c.train.epochs = 60;
  c.data.image_size = 64;
  return c;
}

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.preset = "paper";
  c.model.backbone.stem_channels = 32;
  c.model.cf = 64;
  c.train.epochs = 300;
  c.data.image_size = 640;
  return c;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  reject_unknown(j, {"preset", "backbone", "aspn", "head", "train", "data", "single_conv"},
                 "(root)");

  std::string preset = j.value("preset", std::string("desk"));
  ExperimentConfig c;
  if (preset == "desk")
    c = desk();
  else if (preset == "paper")
    c = paper();
  else
    throw ConfigError("config: unknown preset '" + preset + "'");

  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    reject_unknown(b,
                   {"c0", "blocks_per_stage", "dca_groups", "split_ratio", "expansion",
                    "bn_momentum", "bn_eps", "gn_eps"},
                   "backbone");
    get_if(b, "c0", c.model.backbone.stem_channels);
    get_if(b, "blocks_per_stage", c.model.backbone.blocks_per_stage);
    get_if(b, "dca_groups", c.model.backbone.dca_groups);
    get_if(b, "split_ratio", c.model.backbone.split_ratio);
    get_if(b, "expansion", c.model.backbone.expansion);
    get_if(b, "bn_momentum", c.model.backbone.bn_momentum);
    get_if(b, "bn_eps", c.model.backbone.bn_eps);
    get_if(b, "gn_eps", c.model.backbone.gn_eps);
  }
  if (j.contains("aspn")) {
    const auto& a = j.at("aspn");
    reject_unknown(
        a, {"cf", "attention", "lssm_kernel", "se_reduction", "sge_groups", "caa_kernel"},
        "aspn");
    get_if(a, "cf", c.model.cf);
    if (a.contains("attention"))
      c.model.attention.kind = parse_attention_kind(a.at("attention").get<std::string>());
    get_if(a, "lssm_kernel", c.model.attention.lssm_kernel);
    get_if(a, "se_reduction", c.model.attention.se_reduction);
    get_if(a, "sge_groups", c.model.attention.sge_groups);
    get_if(a, "caa_kernel", c.model.attention.caa_kernel);
  }
  if (j.contains("head")) {
    const auto& h = j.at("head");
    reject_unknown(h, {"num_classes", "score_threshold", "nms_iou", "lambda_reg"}, "head");
    get_if(h, "num_classes", c.model.head.num_classes);
    get_if(h, "score_threshold", c.model.head.score_threshold);
    get_if(h, "nms_iou", c.model.head.nms_iou);
    get_if(h, "lambda_reg", c.model.head.lambda_reg);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t,
                   {"batch_size", "epochs", "lr", "beta1", "beta2", "weight_decay", "eps",
                    "seed", "augment_hflip", "augment_vflip"},
                   "train");
    get_if(t, "batch_size", c.train.batch_size);
    get_if(t, "epochs", c.train.epochs);
    get_if(t, "lr", c.train.lr);
    get_if(t, "beta1", c.train.beta1);
    get_if(t, "beta2", c.train.beta2);
    get_if(t, "weight_decay", c.train.weight_decay);
    get_if(t, "eps", c.train.eps);
    get_if(t, "seed", c.train.seed);
    get_if(t, "augment_hflip", c.train.augment_hflip);
    get_if(t, "augment_vflip", c.train.augment_vflip);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"image_size", "count", "train_frac", "seed"}, "data");
    get_if(d, "image_size", c.data.image_size);
    get_if(d, "count", c.data.count);
    get_if(d, "train_frac", c.data.train_frac);
    get_if(d, "seed", c.data.seed);
  }
  if (j.contains("single_conv")) {
    const auto& s = j.at("single_conv");
    reject_unknown(s, {"cin", "cout", "k", "stride", "pad", "bias", "h", "w"},
                   "single_conv");
    c.single_conv.present = true;
    get_if(s, "cin", c.single_conv.cin);
    get_if(s, "cout", c.single_conv.cout);
    get_if(s, "k", c.single_conv.k);
    get_if(s, "stride", c.single_conv.stride);
    get_if(s, "pad", c.single_conv.pad);
    get_if(s, "bias", c.single_conv.bias);
    get_if(s, "h", c.single_conv.h);
    get_if(s, "w", c.single_conv.w);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return from_json_text(buf.str());
}

std::string ExperimentConfig::to_json_text() const {
  ordered_json j;
  j["preset"] = preset;
  j["backbone"] = {{"c0", model.backbone.stem_channels},
                   {"blocks_per_stage", model.backbone.blocks_per_stage},
                   {"dca_groups", model.backbone.dca_groups},
                   {"split_ratio", model.backbone.split_ratio},
                   {"expansion", model.backbone.expansion},
                   {"bn_momentum", model.backbone.bn_momentum},
                   {"bn_eps", model.backbone.bn_eps},
                   {"gn_eps", model.backbone.gn_eps}};
  j["aspn"] = {{"cf", model.cf},
               {"attention", attention_kind_name(model.attention.kind)},
               {"lssm_kernel", model.attention.lssm_kernel},
               {"se_reduction", model.attention.se_reduction},
               {"sge_groups", model.attention.sge_groups},
               {"caa_kernel", model.attention.caa_kernel}};
  j["head"] = {{"num_classes", model.head.num_classes},
               {"score_threshold", model.head.score_threshold},
               {"nms_iou", model.head.nms_iou},
               {"lambda_reg", model.head.lambda_reg}};
  j["train"] = {{"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"lr", train.lr},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"weight_decay", train.weight_decay},
                {"eps", train.eps},
                {"seed", train.seed},
                {"augment_hflip", train.augment_hflip},
                {"augment_vflip", train.augment_vflip}};
  j["data"] = {{"image_size", data.image_size},
               {"count", data.count},
               {"train_frac", data.train_frac},
               {"seed", data.seed}};
  if (single_conv.present) {
    j["single_conv"] = {{"cin", single_conv.cin}, {"cout", single_conv.cout},
                        {"k", single_conv.k},     {"stride", single_conv.stride},
                        {"pad", single_conv.pad}, {"bias", single_conv.bias},
                        {"h", single_conv.h},     {"w", single_conv.w}};
  }
  return j.dump(2);
}

}  // namespace mrc

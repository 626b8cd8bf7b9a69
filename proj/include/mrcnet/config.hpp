#pragma once

#include <string>

#include "mrcnet/data.hpp"
#include "mrcnet/detect.hpp"
#include "mrcnet/optim.hpp"

namespace mrc {

struct TrainConfig {
  i64 batch_size = 16;
  i64 epochs = 300;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double eps = 1e-8;
  u64 seed = 0;
  bool augment_hflip = true;
  bool augment_vflip = true;

  AdamWConfig adamw() const { return {lr, beta1, beta2, eps, weight_decay}; }

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (epochs < 0) throw ConfigError("train: negative epoch count");
    adamw().validate();
  }
};

// One JSON document with sections backbone / aspn / head / train / data; every
// field optional with defaults taken from the named preset ("desk" unless the
// file says otherwise). Unknown fields are rejected. The optional single_conv
// section switches the cost-table CLI to a one-layer demo model.
struct SingleConvDemo {
  bool present = false;
  i64 cin = 2, cout = 4, k = 3;
  int stride = 1, pad = 1;
  bool bias = true;
  i64 h = 8, w = 8;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig data;
  SingleConvDemo single_conv;
  std::string preset = "desk";

  static ExperimentConfig desk();
  static ExperimentConfig paper();
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  std::string to_json_text() const;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }
};

}  // namespace mrc

#pragma once

// Triplet ranking training of the full descriptor model, hard-triplet mining,
// SGD with momentum, and a classification warm-up of the backbone.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "deepir/dataset.hpp"
#include "deepir/model.hpp"

namespace deepir {

// Backbone plus a whitened PCA layer fitted on the region vectors of `data`
// (images resized to larger side `side`).
RmacModel init_pca_model(BackboneParams backbone, const LabeledSet& data, const GridConfig& grid,
                         std::size_t out_dim, std::size_t side);

// ½ max(0, m + |q - d+|² - |q - d-|²).
double triplet_loss(const Tensor& q, const Tensor& dpos, const Tensor& dneg, double margin);

struct TripletGrads {
  Tensor q, pos, neg;
};

// Sub-gradients of the active branch: (d- - d+, d+ - q, q - d-).
TripletGrads triplet_subgradients(const Tensor& q, const Tensor& dpos, const Tensor& dneg);

// Indices into the sample list the pool was mined from.
struct Triplet {
  std::size_t query = 0, positive = 0, negative = 0;
  double loss = 0.0;
};

class TripletPool {
 public:
  TripletPool() = default;
  explicit TripletPool(std::vector<std::vector<Triplet>> per_query);

  // True when no triplet anywhere has positive loss.
  bool converged() const { return active_queries_.empty(); }
  std::size_t active_queries() const { return active_queries_.size(); }
  const std::vector<Triplet>& kept(std::size_t query) const { return per_query_[query]; }

  // Uniform over queries that have candidates, then uniform over the kept list.
  Triplet sample(std::mt19937_64& rng) const;

 private:
  std::vector<std::vector<Triplet>> per_query_;
  std::vector<std::size_t> active_queries_;
};

// Enumerates every (query, positive, negative) and keeps per query the
// `keep` largest-loss triplets with positive loss (ties: lower indices first).
TripletPool mine_from_descriptors(const std::vector<Tensor>& descriptors,
                                  const std::vector<int>& labels, std::size_t keep, double margin);

struct SgdConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-5;
};

struct ParamRef {
  std::string name;
  Tensor* value;
  const Tensor* grad;
  double lr_scale = 1.0;
};

struct OptimizerState {
  std::vector<Tensor> velocity;  // one per parameter, created on first use
};

// v <- momentum v - lr s (g + wd p); p <- p + v, with s the parameter's
// lr_scale. Validates every gradient first and throws std::domain_error
// naming the first non-finite tensor, leaving parameters untouched.
void sgd_update(const std::vector<ParamRef>& params, OptimizerState& state, const SgdConfig& cfg);
// PCA-layer parameters use lr_scale = head_lr_scale.
void sgd_update(RmacModel& model, const RmacModel& grads, OptimizerState& state,
                const SgdConfig& cfg, double head_lr_scale = 1.0);

enum class UpdateMode { joint, single_stream };

UpdateMode parse_update_mode(const std::string& name);

struct TrainConfig {
  double margin = 0.1;
  SgdConfig sgd;
  std::size_t batch_size = 16;
  std::size_t pool_size = 200;       // N
  std::size_t refresh_every = 64;    // k
  std::size_t keep_per_query = 25;
  std::size_t iterations = 200;
  double head_lr_scale = 1.0;        // learning-rate multiplier of the PCA layer
  double crop_fraction = 0.05;       // max share removed per side by augmentation
  std::size_t image_side = 128;      // larger side after augmentation
  std::uint64_t seed = 0;
};

struct TraceRow {
  std::size_t iteration = 0;
  double mean_loss = 0.0;
  double active_fraction = 0.0;
};

struct TrainResult {
  RmacModel model;
  std::vector<TraceRow> trace;
  std::size_t refreshes = 0;
  bool stopped_converged = false;  // pool had no active triplet right after a refresh
};

// Images in `data` are used as stored; augmentation crops and resizes them per
// triplet. Throws std::invalid_argument for fewer than two classes.
TrainResult train_rank(const LabeledSet& data, RmacModel model, const TrainConfig& cfg,
                       UpdateMode mode);

// "iter\tmean_loss\tactive_fraction" per line.
std::string format_loss_trace(const std::vector<TraceRow>& trace);

// Random crop keeping at least (1 - fraction) of each side, resized so the
// larger side equals `side`.
Image augment_crop(const Image& image, double fraction, std::size_t side, std::mt19937_64& rng);

struct ClassifyConfig {
  SgdConfig sgd{.learning_rate = 1e-2, .momentum = 0.9, .weight_decay = 5e-5};
  std::size_t batch_size = 16;
  std::size_t iterations = 200;
  std::size_t crop = 64;
  std::size_t lr_drop_at = 0;  // iteration at which lr is multiplied by lr_drop; 0 disables
  double lr_drop = 0.1;
  std::uint64_t seed = 0;
};

struct ClassifyTraceRow {
  std::size_t iteration = 0;
  double mean_loss = 0.0;
  double batch_accuracy = 0.0;
};

struct ClassifyResult {
  BackboneParams backbone;
  std::vector<ClassifyTraceRow> trace;
  double train_accuracy = 0.0;  // centre crops of every training image after training
};

// Softmax cross-entropy of a zero-initialized linear head over mean-pooled
// backbone features of random crops. The head is dropped afterwards.
ClassifyResult train_classification(const LabeledSet& data, BackboneParams backbone,
                                    const ClassifyConfig& cfg);

// Cross-entropy of logits against `label`; also returns d loss / d logits.
double softmax_cross_entropy(std::span<const double> logits, std::size_t label,
                             std::span<double> grad_logits);

}  // namespace deepir

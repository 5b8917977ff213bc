#include "deepir/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace deepir {

RmacModel init_pca_model(BackboneParams backbone, const LabeledSet& data, const GridConfig& grid,
                         std::size_t out_dim, std::size_t side) {
  std::vector<std::vector<Tensor>> per_image(data.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < data.size(); ++i) {
    per_image[i] = region_vectors(backbone, grid, resize_larger_side(data.images[i], side));
  }
  std::vector<Tensor> all;
  for (auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
  RmacModel model{std::move(backbone), {}, grid};
  model.pca = pca_init(all, out_dim);
  return model;
}

double triplet_loss(const Tensor& q, const Tensor& dpos, const Tensor& dneg, double margin) {
  require_same_shape(q, dpos, "triplet_loss");
  require_same_shape(q, dneg, "triplet_loss");
  double dp = 0.0, dn = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    dp += (q[i] - dpos[i]) * (q[i] - dpos[i]);
    dn += (q[i] - dneg[i]) * (q[i] - dneg[i]);
  }
  return 0.5 * std::max(0.0, margin + dp - dn);
}

TripletGrads triplet_subgradients(const Tensor& q, const Tensor& dpos, const Tensor& dneg) {
  require_same_shape(q, dpos, "triplet_subgradients");
  require_same_shape(q, dneg, "triplet_subgradients");
  TripletGrads g{Tensor::zeros_like(q), Tensor::zeros_like(q), Tensor::zeros_like(q)};
  for (std::size_t i = 0; i < q.size(); ++i) {
    g.q[i] = dneg[i] - dpos[i];
    g.pos[i] = dpos[i] - q[i];
    g.neg[i] = q[i] - dneg[i];
  }
  return g;
}

TripletPool::TripletPool(std::vector<std::vector<Triplet>> per_query)
    : per_query_(std::move(per_query)) {
  for (std::size_t i = 0; i < per_query_.size(); ++i) {
    if (!per_query_[i].empty()) active_queries_.push_back(i);
  }
}

Triplet TripletPool::sample(std::mt19937_64& rng) const {
  if (converged()) throw std::logic_error("sampling from a converged triplet pool");
  std::uniform_int_distribution<std::size_t> pick_q(0, active_queries_.size() - 1);
  const auto& list = per_query_[active_queries_[pick_q(rng)]];
  std::uniform_int_distribution<std::size_t> pick_t(0, list.size() - 1);
  return list[pick_t(rng)];
}

TripletPool mine_from_descriptors(const std::vector<Tensor>& descriptors,
                                  const std::vector<int>& labels, std::size_t keep, double margin) {
  const std::size_t n = descriptors.size();
  if (labels.size() != n) throw DimensionError("mine: descriptor and label counts differ");
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    throw std::invalid_argument("mine: need at least two classes");
  }
  // Squared distances, computed once.
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < descriptors[i].size(); ++k) {
        const double d = descriptors[i][k] - descriptors[j][k];
        s += d * d;
      }
      dist[i * n + j] = dist[j * n + i] = s;
    }
  }
  std::vector<std::vector<Triplet>> per_query(n);
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<Triplet> active;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == q || labels[p] != labels[q]) continue;
      for (std::size_t ng = 0; ng < n; ++ng) {
        if (labels[ng] == labels[q]) continue;
        const double loss = 0.5 * std::max(0.0, margin + dist[q * n + p] - dist[q * n + ng]);
        if (loss > 0.0) active.push_back({q, p, ng, loss});
      }
    }
    const std::size_t k = std::min(keep, active.size());
    std::partial_sort(active.begin(), active.begin() + static_cast<std::ptrdiff_t>(k), active.end(),
                      [](const Triplet& a, const Triplet& b) {
                        if (a.loss != b.loss) return a.loss > b.loss;
                        if (a.positive != b.positive) return a.positive < b.positive;
                        return a.negative < b.negative;
                      });
    active.resize(k);
    per_query[q] = std::move(active);
  }
  return TripletPool(std::move(per_query));
}

void sgd_update(const std::vector<ParamRef>& params, OptimizerState& state, const SgdConfig& cfg) {
  for (const auto& p : params) {
    require_same_shape(*p.value, *p.grad, ("sgd_update " + p.name).c_str());
    if (!p.grad->all_finite()) throw std::domain_error("non-finite gradient in " + p.name);
  }
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(Tensor::zeros_like(*p.value));
  }
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_update: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& v = state.velocity[i];
    Tensor& w = *params[i].value;
    const Tensor& g = *params[i].grad;
    require_same_shape(v, w, ("sgd_update velocity " + params[i].name).c_str());
    const double lr = cfg.learning_rate * params[i].lr_scale;
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = cfg.momentum * v[k] - lr * (g[k] + cfg.weight_decay * w[k]);
      w[k] += v[k];
    }
  }
}

void sgd_update(RmacModel& model, const RmacModel& grads, OptimizerState& state,
                const SgdConfig& cfg, double head_lr_scale) {
  std::vector<ParamRef> refs;
  for_each_parameter(model, [&](const std::string& name, Tensor& t) {
    refs.push_back({name, &t, nullptr, name.starts_with("pca.") ? head_lr_scale : 1.0});
  });
  std::size_t i = 0;
  for_each_parameter(grads, [&](const std::string&, const Tensor& t) { refs.at(i++).grad = &t; });
  if (i != refs.size()) throw DimensionError("sgd_update: gradient layout differs from model");
  sgd_update(refs, state, cfg);
}

UpdateMode parse_update_mode(const std::string& name) {
  if (name == "joint") return UpdateMode::joint;
  if (name == "single_stream") return UpdateMode::single_stream;
  throw std::invalid_argument("unknown update mode '" + name + "' (joint|single_stream)");
}

Image augment_crop(const Image& image, double fraction, std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, fraction);
  const double w = static_cast<double>(image.width());
  const double h = static_cast<double>(image.height());
  const auto left = static_cast<std::size_t>(u(rng) * w);
  const auto right = static_cast<std::size_t>(u(rng) * w);
  const auto top = static_cast<std::size_t>(u(rng) * h);
  const auto bottom = static_cast<std::size_t>(u(rng) * h);
  const Image c = crop(image, left, top, image.width() - right, image.height() - bottom);
  return resize_larger_side(c, side);
}

namespace {

void scale_all(RmacModel& grads, double factor) {
  for_each_parameter(grads, [&](const std::string&, Tensor& t) { t *= factor; });
}

std::vector<Tensor> describe_all(const RmacModel& model, const LabeledSet& data,
                                 const std::vector<std::size_t>& indices, std::size_t side) {
  std::vector<Tensor> out(indices.size());
  // Each slot is written by one iteration, so the result does not depend on scheduling.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out[i] = describe(model, resize_larger_side(data.images[indices[i]], side));
  }
  return out;
}

}  // namespace

TrainResult train_rank(const LabeledSet& data, RmacModel model, const TrainConfig& cfg,
                       UpdateMode mode) {
  if (data.class_count() < 2) throw std::invalid_argument("train_rank: need at least two classes");
  if (cfg.batch_size == 0 || cfg.refresh_every == 0 || cfg.keep_per_query == 0) {
    throw std::invalid_argument("train_rank: batch_size, refresh_every and keep_per_query must be > 0");
  }
  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  OptimizerState opt;

  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> pool_ids;
  std::vector<int> pool_labels;
  TripletPool pool;

  auto refresh = [&] {
    pool_ids = all;
    if (pool_ids.size() > cfg.pool_size) {
      std::shuffle(pool_ids.begin(), pool_ids.end(), rng);
      pool_ids.resize(cfg.pool_size);
      std::sort(pool_ids.begin(), pool_ids.end());
    }
    pool_labels.clear();
    for (std::size_t i : pool_ids) pool_labels.push_back(data.labels[i]);
    if (std::set<int>(pool_labels.begin(), pool_labels.end()).size() < 2) {
      pool = TripletPool();
      return;
    }
    const auto descs = describe_all(model, data, pool_ids, cfg.image_side);
    pool = mine_from_descriptors(descs, pool_labels, cfg.keep_per_query, cfg.margin);
    ++result.refreshes;
  };

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (it % cfg.refresh_every == 0 || pool.converged()) {
      refresh();
      if (pool.converged()) {
        spdlog::info("train_rank: no active triplet after refresh at iteration {}", it);
        result.stopped_converged = true;
        break;
      }
    }
    RmacModel grads = model.zeros_like();
    double loss_sum = 0.0;
    std::size_t active = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Triplet t = pool.sample(rng);
      const Image qi = augment_crop(data.images[pool_ids[t.query]], cfg.crop_fraction, cfg.image_side, rng);
      const Image pi = augment_crop(data.images[pool_ids[t.positive]], cfg.crop_fraction, cfg.image_side, rng);
      const Image ni = augment_crop(data.images[pool_ids[t.negative]], cfg.crop_fraction, cfg.image_side, rng);
      double loss = 0.0;
      if (mode == UpdateMode::joint) {
        const StreamTrace sq = forward_stream(model, qi);
        const StreamTrace sp = forward_stream(model, pi);
        const StreamTrace sn = forward_stream(model, ni);
        loss = triplet_loss(sq.descriptor(), sp.descriptor(), sn.descriptor(), cfg.margin);
        if (loss > 0.0) {
          const auto g = triplet_subgradients(sq.descriptor(), sp.descriptor(), sn.descriptor());
          backward_stream(sq, g.q, grads);
          backward_stream(sp, g.pos, grads);
          backward_stream(sn, g.neg, grads);
        }
      } else {
        // Only descriptors are kept; each stream is recomputed right before its backward pass.
        const Tensor dq = describe(model, qi);
        const Tensor dp = describe(model, pi);
        const Tensor dn = describe(model, ni);
        loss = triplet_loss(dq, dp, dn, cfg.margin);
        if (loss > 0.0) {
          const auto g = triplet_subgradients(dq, dp, dn);
          backward_stream(forward_stream(model, qi), g.q, grads);
          backward_stream(forward_stream(model, pi), g.pos, grads);
          backward_stream(forward_stream(model, ni), g.neg, grads);
        }
      }
      loss_sum += loss;
      if (loss > 0.0) ++active;
    }
    const double bs = static_cast<double>(cfg.batch_size);
    if (!std::isfinite(loss_sum)) {
      throw std::domain_error("train_rank: non-finite loss at iteration " + std::to_string(it));
    }
    scale_all(grads, 1.0 / bs);
    sgd_update(model, grads, opt, cfg.sgd, cfg.head_lr_scale);
    result.trace.push_back({it, loss_sum / bs, static_cast<double>(active) / bs});
  }
  result.model = std::move(model);
  return result;
}

std::string format_loss_trace(const std::vector<TraceRow>& trace) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& r : trace) {
    out << r.iteration << '\t' << r.mean_loss << '\t' << r.active_fraction << '\n';
  }
  return out.str();
}

double softmax_cross_entropy(std::span<const double> logits, std::size_t label,
                             std::span<double> grad_logits) {
  if (label >= logits.size() || grad_logits.size() != logits.size()) {
    throw DimensionError("softmax_cross_entropy: label or gradient size out of range");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    grad_logits[i] = std::exp(logits[i] - mx) / z - (i == label ? 1.0 : 0.0);
  }
  return std::log(z) + mx - logits[label];
}

namespace {

// Upscales so the shorter side is at least `size`.
Image ensure_min_side(const Image& image, std::size_t size) {
  const std::size_t short_side = std::min(image.height(), image.width());
  if (short_side >= size) return image;
  const double s = static_cast<double>(size) / static_cast<double>(short_side);
  return resize_bilinear(image, static_cast<std::size_t>(std::ceil(image.height() * s)),
                         static_cast<std::size_t>(std::ceil(image.width() * s)));
}

Image random_square_crop(const Image& image, std::size_t size, std::mt19937_64& rng) {
  const Image src = ensure_min_side(image, size);
  std::uniform_int_distribution<std::size_t> ux(0, src.width() - size);
  std::uniform_int_distribution<std::size_t> uy(0, src.height() - size);
  const std::size_t x = ux(rng), y = uy(rng);
  return crop(src, x, y, x + size, y + size);
}

Image centre_crop(const Image& image, std::size_t size) {
  const Image src = ensure_min_side(image, size);
  const std::size_t x = (src.width() - size) / 2, y = (src.height() - size) / 2;
  return crop(src, x, y, x + size, y + size);
}

struct Head {
  Tensor weight;  // K x C
  Tensor bias;    // K
};

// Mean-pools the features and applies the head. Returns pooled features and logits.
std::pair<Tensor, Tensor> head_forward(const Head& head, const Tensor& features) {
  const std::size_t c = features.dim(0), cells = features.dim(1) * features.dim(2);
  Tensor pooled({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < cells; ++i) s += features[ch * cells + i];
    pooled[ch] = s / static_cast<double>(cells);
  }
  const std::size_t k = head.weight.dim(0);
  Tensor logits({k});
  for (std::size_t j = 0; j < k; ++j) {
    double s = head.bias[j];
    for (std::size_t ch = 0; ch < c; ++ch) s += head.weight.at(j, ch) * pooled[ch];
    logits[j] = s;
  }
  return {pooled, logits};
}

}  // namespace

ClassifyResult train_classification(const LabeledSet& data, BackboneParams backbone,
                                    const ClassifyConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("train_classification: empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument("train_classification: batch_size must be > 0");
  std::map<int, std::size_t> class_index;
  for (int l : data.labels) class_index.emplace(l, 0);
  std::size_t next = 0;
  for (auto& [label, idx] : class_index) idx = next++;

  const std::size_t k = class_index.size(), c = backbone.out_channels();
  Head head{Tensor({k, c}), Tensor({k})};
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  OptimizerState opt;
  SgdConfig sgd = cfg.sgd;
  ClassifyResult result;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (cfg.lr_drop_at > 0 && it == cfg.lr_drop_at) sgd.learning_rate *= cfg.lr_drop;
    BackboneParams grads = backbone.zeros_like();
    Head ghead{Tensor::zeros_like(head.weight), Tensor::zeros_like(head.bias)};
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = pick(rng);
      const std::size_t label = class_index.at(data.labels[i]);
      const Image x = random_square_crop(data.images[i], cfg.crop, rng);
      const BackboneTrace trace = backbone_forward(backbone, x);
      const auto [pooled, logits] = head_forward(head, trace.features);
      Tensor gl({k});
      loss_sum += softmax_cross_entropy(logits.values(), label, gl.values());
      const auto best = static_cast<std::size_t>(
          std::max_element(logits.values().begin(), logits.values().end()) -
          logits.values().begin());
      if (best == label) ++correct;

      Tensor gpooled({c});
      for (std::size_t j = 0; j < k; ++j) {
        ghead.bias[j] += gl[j];
        for (std::size_t ch = 0; ch < c; ++ch) {
          ghead.weight.at(j, ch) += gl[j] * pooled[ch];
          gpooled[ch] += gl[j] * head.weight.at(j, ch);
        }
      }
      const std::size_t cells = trace.features.dim(1) * trace.features.dim(2);
      Tensor gfeat = Tensor::zeros_like(trace.features);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = gpooled[ch] / static_cast<double>(cells);
        for (std::size_t p = 0; p < cells; ++p) gfeat[ch * cells + p] = g;
      }
      backbone_backward(backbone, trace, gfeat, grads);
    }
    const double bs = static_cast<double>(cfg.batch_size);
    if (!std::isfinite(loss_sum)) {
      throw std::domain_error("train_classification: non-finite loss at iteration " +
                              std::to_string(it));
    }
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < backbone.layers.size(); ++l) {
      grads.layers[l].weight *= 1.0 / bs;
      grads.layers[l].bias *= 1.0 / bs;
      const std::string p = "backbone.conv" + std::to_string(l);
      refs.push_back({p + ".weight", &backbone.layers[l].weight, &grads.layers[l].weight});
      refs.push_back({p + ".bias", &backbone.layers[l].bias, &grads.layers[l].bias});
    }
    ghead.weight *= 1.0 / bs;
    ghead.bias *= 1.0 / bs;
    refs.push_back({"head.weight", &head.weight, &ghead.weight});
    refs.push_back({"head.bias", &head.bias, &ghead.bias});
    sgd_update(refs, opt, sgd);
    result.trace.push_back({it, loss_sum / bs, static_cast<double>(correct) / bs});
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto trace = backbone_forward(backbone, centre_crop(data.images[i], cfg.crop));
    const auto logits = head_forward(head, trace.features).second;
    const auto best = static_cast<std::size_t>(
        std::max_element(logits.values().begin(), logits.values().end()) - logits.values().begin());
    if (best == class_index.at(data.labels[i])) ++correct;
  }
  result.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  result.backbone = std::move(backbone);
  return result;
}

}  // namespace deepir

#include "deepir/model.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "deepir/binary_io.hpp"

namespace deepir {

void for_each_parameter(RmacModel& model,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < model.backbone.layers.size(); ++i) {
    const std::string p = "backbone.conv" + std::to_string(i);
    fn(p + ".weight", model.backbone.layers[i].weight);
    fn(p + ".bias", model.backbone.layers[i].bias);
  }
  fn("pca.shift", model.pca.shift);
  fn("pca.projection", model.pca.projection);
}

void for_each_parameter(const RmacModel& model,
                        const std::function<void(const std::string&, const Tensor&)>& fn) {
  for_each_parameter(const_cast<RmacModel&>(model),
                     [&](const std::string& n, Tensor& t) { fn(n, t); });
}

std::uint64_t parameter_checksum(const RmacModel& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for_each_parameter(model, [&](const std::string&, const Tensor& t) {
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 1099511628211ULL;
      }
    }
  });
  return h;
}

StreamTrace forward_stream(const RmacModel& model, const Image& image,
                           const std::vector<Region>* regions) {
  StreamTrace s;
  s.model = &model;
  s.backbone = backbone_forward(model.backbone, image);
  const Tensor& fm = s.backbone.features;
  s.regions = regions ? *regions : rigid_grid(fm.dim(2), fm.dim(1), model.grid.levels,
                                               model.grid.overlap);
  s.head = rmac_forward(fm, s.regions, model.pca);
  return s;
}

void backward_stream(const StreamTrace& stream, const Tensor& grad_descriptor, RmacModel& grads) {
  const RmacModel& model = *stream.model;
  Tensor grad_fm = Tensor::zeros_like(stream.backbone.features);
  rmac_backward(stream.head, model.pca, grad_descriptor, grad_fm, grads.pca);
  backbone_backward(model.backbone, stream.backbone, grad_fm, grads.backbone);
}

Tensor describe(const RmacModel& model, const Image& image, const std::vector<Region>* regions) {
  return forward_stream(model, image, regions).head.descriptor;
}

std::vector<Tensor> region_vectors(const BackboneParams& backbone, const GridConfig& grid,
                                   const Image& image) {
  const BackboneTrace trace = backbone_forward(backbone, image);
  const Tensor& fm = trace.features;
  const auto regions = rigid_grid(fm.dim(2), fm.dim(1), grid.levels, grid.overlap);
  const RoiPool pool = roi_max_pool_forward(fm, regions);
  const std::size_t c = fm.dim(0);
  std::vector<Tensor> out;
  out.reserve(regions.size());
  for (std::size_t r = 0; r < regions.size(); ++r) {
    Tensor v({c});
    detail::l2_normalize_forward({pool.pooled.data() + r * c, c}, v.values(), kNormEps);
    out.push_back(std::move(v));
  }
  return out;
}

Tensor sum_and_normalize(std::span<const Tensor> descriptors) {
  if (descriptors.empty()) throw std::invalid_argument("sum_and_normalize: nothing to sum");
  Tensor sum = descriptors.front();
  for (std::size_t i = 1; i < descriptors.size(); ++i) sum += descriptors[i];
  Tensor out = Tensor::zeros_like(sum);
  detail::l2_normalize_forward(sum.values(), out.values(), kNormEps);
  return out;
}

Tensor multires_descriptor(const Image& image, const RmacModel& model,
                           std::span<const std::size_t> scales) {
  if (scales.empty()) throw std::invalid_argument("multires_descriptor: no scales given");
  std::vector<Tensor> per_scale;
  for (std::size_t scale : scales) {
    if (scale < model.backbone.total_stride()) {
      throw DimensionError("multires_descriptor: scale " + std::to_string(scale) +
                           " is below the backbone minimum " +
                           std::to_string(model.backbone.total_stride()));
    }
    per_scale.push_back(describe(model, resize_larger_side(image, scale)));
  }
  return sum_and_normalize(per_scale);
}

namespace {

void write_tensor(BinaryWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

Tensor scalar(double v) { return Tensor::vector({v}); }

}  // namespace

std::string encode_checkpoint(const RmacModel& model) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for (std::size_t i = 0; i < model.backbone.layers.size(); ++i) {
    const auto& l = model.backbone.layers[i];
    const std::string p = "backbone.conv" + std::to_string(i);
    entries.emplace_back(p + ".weight", l.weight);
    entries.emplace_back(p + ".bias", l.bias);
    entries.emplace_back(p + ".stride", scalar(static_cast<double>(l.stride)));
  }
  entries.emplace_back("pca.shift", model.pca.shift);
  entries.emplace_back("pca.projection", model.pca.projection);
  entries.emplace_back("grid.levels", scalar(static_cast<double>(model.grid.levels)));
  entries.emplace_back("grid.overlap", scalar(model.grid.overlap));

  BinaryWriter w;
  w.magic("IRCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) write_tensor(w, name, t);
  return w.buffer();
}

RmacModel decode_checkpoint(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic("IRCK");
  r.expect_version(kCheckpointVersion);
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    Tensor t(shape);
    for (double& v : t.values()) v = r.f64();
    table.emplace(std::move(name), std::move(t));
  }
  r.expect_end();

  auto take = [&](const std::string& name) -> Tensor {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError(source + ": missing tensor '" + name + "'");
    return it->second;
  };
  RmacModel m;
  for (std::size_t i = 0;; ++i) {
    const std::string p = "backbone.conv" + std::to_string(i);
    if (!table.contains(p + ".weight")) break;
    ConvLayer l;
    l.weight = take(p + ".weight");
    l.bias = take(p + ".bias");
    l.stride = static_cast<std::size_t>(take(p + ".stride")[0]);
    if (l.weight.rank() != 4) throw FormatError(source + ": " + p + ".weight must be rank 4");
    l.pad = l.weight.dim(2) / 2;
    m.backbone.layers.push_back(std::move(l));
  }
  m.pca.shift = take("pca.shift");
  m.pca.projection = take("pca.projection");
  m.grid.levels = static_cast<std::size_t>(take("grid.levels")[0]);
  m.grid.overlap = take("grid.overlap")[0];
  if (m.pca.projection.rank() != 2 || m.pca.projection.dim(1) != m.backbone.out_channels()) {
    throw FormatError(source + ": PCA layer does not match backbone channels");
  }
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const RmacModel& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

RmacModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

}  // namespace deepir

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>

#include "deepir/backbone.hpp"
#include "deepir/rmac.hpp"

namespace deepir {

// Backbone + PCA layer + grid settings: everything needed to turn an image
// into a global descriptor. Also reused as the gradient container.
struct RmacModel {
  BackboneParams backbone;
  PcaLayer pca;
  GridConfig grid;

  std::size_t descriptor_dim() const { return pca.out_dim(); }
  RmacModel zeros_like() const { return {backbone.zeros_like(), pca.zeros_like(), grid}; }
};

// Trainable tensors in a fixed order with stable names.
void for_each_parameter(RmacModel& model, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_parameter(const RmacModel& model,
                        const std::function<void(const std::string&, const Tensor&)>& fn);

// Order-sensitive FNV-1a hash over the bytes of every parameter.
std::uint64_t parameter_checksum(const RmacModel& model);

// One stream of the siamese network: activations for a single image.
struct StreamTrace {
  const RmacModel* model = nullptr;  // the shared weights this stream read
  BackboneTrace backbone;
  std::vector<Region> regions;
  RmacTrace head;

  const Tensor& descriptor() const { return head.descriptor; }
};

// Regions default to the model's rigid grid over the feature map.
StreamTrace forward_stream(const RmacModel& model, const Image& image,
                           const std::vector<Region>* regions = nullptr);

// Accumulates parameter gradients of `grad_descriptor . descriptor` into grads.
void backward_stream(const StreamTrace& stream, const Tensor& grad_descriptor, RmacModel& grads);

Tensor describe(const RmacModel& model, const Image& image,
                const std::vector<Region>* regions = nullptr);

// l2-normalized, pre-PCA region vectors of an image (input of pca_init).
std::vector<Tensor> region_vectors(const BackboneParams& backbone, const GridConfig& grid,
                                   const Image& image);

// l2-normalized elementwise sum.
Tensor sum_and_normalize(std::span<const Tensor> descriptors);

// Describes the image resized to each larger-side length, sums and l2-normalizes.
Tensor multires_descriptor(const Image& image, const RmacModel& model,
                           std::span<const std::size_t> scales);

// Checkpoint file: "IRCK", version u32, tensor count u32, then per tensor:
// name (u32 length + UTF-8), rank u32, dims u64..., values f64 little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::string encode_checkpoint(const RmacModel& model);
RmacModel decode_checkpoint(std::string bytes, const std::string& source = "checkpoint");
void save_checkpoint(const std::filesystem::path& path, const RmacModel& model);
RmacModel load_checkpoint(const std::filesystem::path& path);

}  // namespace deepir

#include <filesystem>
#include <random>

#include "deepir/binary_io.hpp"
#include "deepir/model.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deepir;

namespace {

RmacModel small_model() {
  std::mt19937_64 rng(3);
  RmacModel m{init_backbone(7, {.depth = 2, .channels = 6}), {}, {.levels = 2, .overlap = 0.4}};
  m.pca = {testing::random_tensor({6}, rng, 0.0, 0.1), testing::random_tensor({5, 6}, rng)};
  return m;
}

}  // namespace

TEST_CASE("checkpoints round-trip bit-exactly") {
  const RmacModel m = small_model();
  const std::string bytes = encode_checkpoint(m);
  CHECK(bytes.substr(0, 4) == "IRCK");
  const RmacModel back = decode_checkpoint(bytes);
  CHECK(parameter_checksum(back) == parameter_checksum(m));
  CHECK(back.grid.levels == 2);
  CHECK(back.backbone.layers[1].stride == 2);
  CHECK(back.backbone.layers[1].pad == 1);
  CHECK(encode_checkpoint(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "deepir_ckpt_test.irck";
  save_checkpoint(path, m);
  CHECK(parameter_checksum(load_checkpoint(path)) == parameter_checksum(m));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint readers reject bad input") {
  std::string bytes = encode_checkpoint(small_model());
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
}

TEST_CASE("streams read the shared weights") {
  const RmacModel m = small_model();
  std::mt19937_64 rng(4);
  const Image a(testing::random_tensor({3, 20, 24}, rng, 0.0, 1.0));
  const Image b(testing::random_tensor({3, 28, 16}, rng, 0.0, 1.0));
  const auto sa = forward_stream(m, a);
  const auto sb = forward_stream(m, b);
  CHECK(sa.model == &m);
  CHECK(sb.model == &m);
  CHECK(sa.descriptor().size() == 5);
}

TEST_CASE("parameter checksum reacts to any change") {
  RmacModel m = small_model();
  const auto before = parameter_checksum(m);
  m.pca.shift[0] = std::nextafter(m.pca.shift[0], 1.0);
  CHECK(parameter_checksum(m) != before);
}

TEST_CASE("stream gradient matches finite differences on every parameter") {
  RmacModel m = small_model();
  std::mt19937_64 rng(5);
  const Image img(testing::random_tensor({3, 17, 21}, rng, 0.0, 1.0));
  const Tensor up = testing::random_tensor({5}, rng);
  auto grads = m.zeros_like();
  backward_stream(forward_stream(m, img), up, grads);
  auto loss = [&] { return testing::weighted_sum(describe(m, img), up); };

  std::vector<Tensor*> params;
  std::vector<const Tensor*> analytic;
  for_each_parameter(m, [&](const std::string&, Tensor& t) { params.push_back(&t); });
  for_each_parameter(grads, [&](const std::string&, Tensor& t) { analytic.push_back(&t); });
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(testing::max_rel_error(*analytic[i], testing::numeric_gradient(loss, *params[i])) < 1e-5);
  }
}

#include <random>

#include "deepir/kernels.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deepir;
namespace k = deepir::kernels;

TEST_CASE("parallel conv2d matches the serial reference") {
  std::mt19937_64 rng(7);
  for (std::size_t stride : {1u, 2u, 3u}) {
    for (std::size_t pad : {0u, 1u, 2u}) {
      const auto g = k::make_conv_geometry(3, 11, 9, 5, 3, 3, stride, pad);
      const Tensor in = testing::random_tensor({3, 11, 9}, rng);
      const Tensor w = testing::random_tensor({5, 3, 3, 3}, rng);
      const Tensor b = testing::random_tensor({5}, rng);
      Tensor out_ref({g.output_size()});
      Tensor out_par({g.output_size()});
      k::reference::conv2d_forward(g, in.values(), w.values(), b.values(), out_ref.values());
      k::parallel::conv2d_forward(g, in.values(), w.values(), b.values(), out_par.values());
      CHECK(out_ref == out_par);

      const Tensor go = testing::random_tensor({g.output_size()}, rng);
      Tensor gin_ref({g.input_size()}), gw_ref({g.weight_size()}), gb_ref({5});
      Tensor gin_par({g.input_size()}), gw_par({g.weight_size()}), gb_par({5});
      k::reference::conv2d_backward(g, in.values(), w.values(), go.values(), gin_ref.values(),
                                    gw_ref.values(), gb_ref.values());
      k::parallel::conv2d_backward(g, in.values(), w.values(), go.values(), gin_par.values(),
                                   gw_par.values(), gb_par.values());
      CHECK(gw_ref == gw_par);
      CHECK(gb_ref == gb_par);
      // The input gradient is summed in a different grouping (column buffer first).
      for (std::size_t i = 0; i < gin_ref.size(); ++i) {
        CHECK(gin_par[i] == doctest::Approx(gin_ref[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv geometry rejects kernels larger than the padded input") {
  CHECK_THROWS_AS(k::make_conv_geometry(1, 2, 2, 1, 5, 5, 1, 1), DimensionError);
  CHECK_THROWS_AS(k::make_conv_geometry(1, 8, 8, 1, 3, 3, 0, 1), DimensionError);
}

TEST_CASE("scan kernels agree bitwise") {
  std::mt19937_64 rng(3);
  const std::size_t n = 257, d = 13;
  const Tensor rows = testing::random_tensor({n, d}, rng);
  const Tensor q = testing::random_tensor({d}, rng);
  Tensor s_ref({n}), s_par({n});
  k::reference::dot_scan(rows.values(), d, q.values(), s_ref.values());
  k::parallel::dot_scan(rows.values(), d, q.values(), s_par.values());
  CHECK(s_ref == s_par);

  const std::size_t m = 4, ksub = 256;
  std::vector<std::uint8_t> codes(n * m);
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& c : codes) c = static_cast<std::uint8_t>(byte(rng));
  const Tensor tables = testing::random_tensor({m * ksub}, rng);
  k::reference::adc_scan(codes, m, tables.values(), ksub, s_ref.values());
  k::parallel::adc_scan(codes, m, tables.values(), ksub, s_par.values());
  CHECK(s_ref == s_par);

  const Tensor cents = testing::random_tensor({17, d}, rng);
  std::vector<std::uint32_t> l_ref(n), l_par(n);
  Tensor d_ref({n}), d_par({n});
  k::reference::assign_nearest(rows.values(), d, cents.values(), l_ref, d_ref.values());
  k::parallel::assign_nearest(rows.values(), d, cents.values(), l_par, d_par.values());
  CHECK(l_ref == l_par);
  CHECK(d_ref == d_par);
}

TEST_CASE("assign_nearest breaks ties toward the lowest centroid index") {
  const std::vector<double> pts{0.5};
  const std::vector<double> cents{0.0, 1.0};
  std::vector<std::uint32_t> labels(1);
  std::vector<double> dist(1);
  k::parallel::assign_nearest(pts, 1, cents, labels, dist);
  CHECK(labels[0] == 0);
  CHECK(dist[0] == 0.25);
}

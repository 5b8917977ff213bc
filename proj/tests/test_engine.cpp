#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "deepir/binary_io.hpp"
#include "deepir/engine.hpp"
#include "deepir/ops.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deepir;

namespace {

Tensor unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  const std::size_t d = v.size();
  return Tensor({d}, std::move(v));
}

std::vector<Tensor> random_unit(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(d);
    for (double& x : v) x = g(rng);
    out.push_back(unit(std::move(v)));
  }
  return out;
}

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("db" + std::to_string(100000 + i));
  return ids;
}

double naive_dot(const Tensor& a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Full sort of every row by (score desc, id asc).
RankedList naive_search(const RetrievalIndex& index, const Tensor& q) {
  RankedList all;
  for (std::size_t i = 0; i < index.size(); ++i) all.push_back({index.ids[i], naive_dot(q, index.row(i))});
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  return all;
}

Tensor row_tensor(const RetrievalIndex& index, std::size_t i) {
  return Tensor({index.dim()}, {index.row(i).begin(), index.row(i).end()});
}

}  // namespace

TEST_CASE("building indexes") {
  const RetrievalIndex empty = build_index({}, {});
  CHECK(empty.size() == 0);
  CHECK(search(empty, unit({1, 0}), 5).empty());

  const RetrievalIndex three = build_index({unit({1, 0, 0}), unit({0, 1, 0}), unit({0, 0, 1})}, {"a", "b", "c"});
  CHECK(three.size() == 3);
  CHECK(three.dim() == 3);

  std::mt19937_64 rng(1);
  const auto big = random_unit(10000, 64, rng);
  const RetrievalIndex idx = build_index(big, make_ids(10000));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    CHECK(std::abs(std::sqrt(naive_dot(row_tensor(idx, i), idx.row(i))) - 1.0) <= 1e-6);
  }

  CHECK_THROWS_AS(build_index({unit({1, 0}), unit({0, 1})}, {"a", "a"}), std::invalid_argument);
  CHECK_THROWS_AS(build_index({Tensor({2}, {1.0, 1.0})}, {"a"}), std::invalid_argument);
  CHECK_THROWS_AS(build_index({unit({1, 0})}, {"a", "b"}), std::invalid_argument);
  CHECK_THROWS_AS(build_index({unit({1, 0}), unit({0, 1, 0})}, {"a", "b"}), std::invalid_argument);
}

TEST_CASE("search examples") {
  const RetrievalIndex idx = build_index({unit({1, 0, 0}), unit({0, 1, 0}), unit({0, 0, 1})}, {"a", "b", "c"});
  const RankedList r = search(idx, unit({0, 1, 0}));
  REQUIRE(r.size() == 3);
  CHECK(r[0] == Scored{"b", 1.0});
  CHECK(r[1] == Scored{"a", 0.0});  // tie at 0 broken by id
  CHECK(r[2] == Scored{"c", 0.0});
  CHECK(search(idx, unit({0, 1, 0}), 1).size() == 1);
  CHECK_THROWS_AS(search(idx, unit({1, 0})), DimensionError);
}

TEST_CASE("search equals a full-sort oracle and scores stay in [-1, 1]") {
  std::mt19937_64 rng(2);
  const auto rows = random_unit(1000, 32, rng);
  const RetrievalIndex idx = build_index(rows, make_ids(1000));
  for (const Tensor& q : random_unit(20, 32, rng)) {
    const RankedList got = search(idx, q);
    const RankedList want = naive_search(idx, q);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].id == want[i].id);
      CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-12));
      CHECK(std::abs(got[i].score) <= 1.0 + 1e-12);
    }
    const RankedList top = search(idx, q, 10);
    CHECK(RankedList(got.begin(), got.begin() + 10) == top);
  }
  // A database row as query comes first with score 1.
  const RankedList self = search(idx, rows[417]);
  CHECK(self[0].id == idx.ids[417]);
  CHECK(self[0].score == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ties are broken by ascending id regardless of insertion order") {
  const Tensor v = unit({1, 1});
  const RetrievalIndex idx = build_index({v, v, unit({1, 0}), v}, {"z", "m", "q", "a"});
  const RankedList r = search(idx, v);
  CHECK(r[0].id == "a");
  CHECK(r[1].id == "m");
  CHECK(r[2].id == "z");
  CHECK(r[3].id == "q");
  CHECK(search(idx, v) == r);
}

TEST_CASE("query expansion") {
  std::mt19937_64 rng(3);
  const auto rows = random_unit(300, 16, rng);
  const RetrievalIndex idx = build_index(rows, make_ids(300));
  const Tensor q = random_unit(1, 16, rng).front();
  CHECK(query_expansion(idx, q, 0) == search(idx, q));
  CHECK(expand_query(idx, q, 0) == q);

  // Top-1 equal to the query: l2(q + q) is q again.
  const RankedList self = query_expansion(idx, rows[5], 1);
  const RankedList plain = search(idx, rows[5]);
  REQUIRE(self.size() == plain.size());
  for (std::size_t i = 0; i < self.size(); ++i) CHECK(self[i].id == plain[i].id);

  // Oracle: sum of the query and its k best rows from the naive search.
  for (std::size_t k : {1u, 3u, 10u}) {
    const RankedList first = naive_search(idx, q);
    std::vector<double> sum(q.values().begin(), q.values().end());
    for (std::size_t r = 0; r < k; ++r) {
      const auto it = std::find(idx.ids.begin(), idx.ids.end(), first[r].id);
      const auto row = idx.row(static_cast<std::size_t>(it - idx.ids.begin()));
      for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += row[j];
    }
    const Tensor want = unit(sum);
    const Tensor got = expand_query(idx, q, k);
    for (std::size_t j = 0; j < 16; ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-12));
    const RankedList second = query_expansion(idx, q, k);
    const RankedList oracle = naive_search(idx, want);
    for (std::size_t i = 0; i < 20; ++i) CHECK(second[i].id == oracle[i].id);
  }
  CHECK(query_expansion(idx, q, 100000).size() == 300);  // clamped
}

TEST_CASE("database-side augmentation") {
  CHECK(dba_weight(0, 20) == 1.0);
  CHECK(dba_weight(10, 20) == 0.5);
  CHECK(dba_weight(19, 20) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(dba_weight(0, 1) == 1.0);

  std::mt19937_64 rng(4);
  const auto rows = random_unit(200, 12, rng);
  const RetrievalIndex idx = build_index(rows, make_ids(200));
  const RetrievalIndex same = dba_augment(idx, 1);
  CHECK(same.descriptors == idx.descriptors);
  CHECK(same.augmented);
  CHECK(dba_augment(idx, 0).descriptors == idx.descriptors);

  // Oracle: neighbours from a full sort of the original rows, self first.
  const std::size_t k = 7;
  const RetrievalIndex aug = dba_augment(idx, k);
  const RetrievalIndex aug_again = dba_augment(idx, k);
  CHECK(aug.descriptors == aug_again.descriptors);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const RankedList nn = naive_search(idx, rows[i]);
    CHECK(nn[0].id == idx.ids[i]);
    std::vector<double> sum(12, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      const auto it = std::find(idx.ids.begin(), idx.ids.end(), nn[r].id);
      const auto row = idx.row(static_cast<std::size_t>(it - idx.ids.begin()));
      for (std::size_t j = 0; j < 12; ++j) sum[j] += (double(k) - double(r)) / double(k) * row[j];
    }
    const Tensor want = unit(sum);
    double norm = 0.0;
    for (std::size_t j = 0; j < 12; ++j) {
      CHECK(aug.row(i)[j] == doctest::Approx(want[j]).epsilon(1e-12));
      norm += aug.row(i)[j] * aug.row(i)[j];
    }
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-12);
  }
  // Input untouched.
  CHECK(idx.descriptors == build_index(rows, make_ids(200)).descriptors);
}

TEST_CASE("augmentation of a duplicate pair keeps its direction") {
  // Two copies of v and far-away rows: with k = 2 each copy averages v with v.
  const Tensor v = unit({1, 2, 3});
  const RetrievalIndex idx = build_index({v, v, unit({-3, 0, 1}), unit({0, -3, 2})}, {"a", "b", "c", "d"});
  const RetrievalIndex aug = dba_augment(idx, 2);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(aug.row(i)[j] == doctest::Approx(v[j]).epsilon(1e-14));
  }
}

TEST_CASE("max over query variants") {
  std::mt19937_64 rng(5);
  const auto rows = random_unit(400, 10, rng);
  const RetrievalIndex idx = build_index(rows, make_ids(400));
  const auto qs = random_unit(3, 10, rng);
  const RankedList got = max_over_queries(idx, qs);
  RankedList want;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    double best = -2.0;
    for (const auto& q : qs) best = std::max(best, naive_dot(q, idx.row(i)));
    want.push_back({idx.ids[i], best});
  }
  std::sort(want.begin(), want.end(), [](const Scored& a, const Scored& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].id == want[i].id);
    CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-12));
  }
  // Matching only the second variant: ranked by that score.
  const RetrievalIndex two = build_index({unit({1, 0}), unit({0, 1})}, {"x", "y"});
  const RankedList r = max_over_queries(two, {unit({1, 1}), unit({0, 1})});
  CHECK(r[0] == Scored{"y", 1.0});
  CHECK_THROWS_AS(max_over_queries(two, {}), std::invalid_argument);
}

TEST_CASE("rotation search on rotation-invariant content equals plain search") {
  // A radially symmetric image looks the same under quarter turns.
  Image img(33, 33);
  for (std::size_t y = 0; y < 33; ++y) {
    for (std::size_t x = 0; x < 33; ++x) {
      const double r = std::hypot(double(x) - 16.0, double(y) - 16.0);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = 0.5 + 0.4 * std::cos(r * (0.5 + 0.2 * c));
    }
  }
  for (const Image& v : rotation_variants(img)) CHECK(v == img);

  const RmacModel model{init_backbone(0), PcaLayer::identity(32), {}};
  const std::vector<std::size_t> scales{33};
  std::mt19937_64 rng(6);
  std::vector<Tensor> rows = random_unit(20, model.descriptor_dim(), rng);
  rows.push_back(multires_descriptor(img, model, scales));
  const RetrievalIndex idx = build_index(rows, make_ids(21));
  const RankedList rot = rotation_search(idx, img, model, scales);
  const RankedList plain = search(idx, multires_descriptor(img, model, scales));
  CHECK(rot == plain);
}

TEST_CASE("descriptor store round-trip") {
  std::mt19937_64 rng(7);
  const RetrievalIndex idx = build_index(random_unit(50, 8, rng), make_ids(50));
  const RetrievalIndex back = decode_descriptor_store(encode_descriptor_store(idx));
  CHECK(back.descriptors == idx.descriptors);
  CHECK(back.ids == idx.ids);
  CHECK_FALSE(back.augmented);
  const RetrievalIndex aug = dba_augment(idx, 3);
  CHECK(decode_descriptor_store(encode_descriptor_store(aug)).augmented);

  const RetrievalIndex f32 = decode_descriptor_store(encode_descriptor_store(idx, true));
  for (std::size_t i = 0; i < idx.descriptors.size(); ++i) {
    CHECK(f32.descriptors[i] == doctest::Approx(idx.descriptors[i]).epsilon(1e-6));
  }
  std::string bytes = encode_descriptor_store(idx);
  CHECK_THROWS_AS(decode_descriptor_store(bytes.substr(0, bytes.size() - 3)), FormatError);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_descriptor_store(bytes), FormatError);
  CHECK(decode_descriptor_store(encode_descriptor_store(build_index({}, {}))).size() == 0);

  const auto path = std::filesystem::temp_directory_path() / "deepir_engine_test.irds";
  save_descriptor_store(path, idx);
  CHECK(load_descriptor_store(path).descriptors == idx.descriptors);
  std::filesystem::remove(path);
}

TEST_CASE("ranked list text output") {
  CHECK(format_ranked_list("q1", {{"a", 0.5}, {"b", 0.25}}) == "q1\t1\ta\t0.5\nq1\t2\tb\t0.25\n");
}

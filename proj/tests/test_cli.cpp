#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "deepir/binary_io.hpp"
#include "deepir/config.hpp"
#include "deepir/engine.hpp"
#include "deepir/evalbench.hpp"
#include "deepir/pipeline.hpp"

using namespace deepir;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "synthetic": {"classes": 4, "images_per_class": 5, "queries_per_class": 2, "train_classes": 3,
                "train_images_per_class": 5, "noise_per_class": 1, "min_size": 64, "max_size": 80},
  "pca": {"dim": 16, "side": 64},
  "train": {"iterations": 4, "batch_size": 2, "side": 64},
  "extract": {"query_scales": [64], "db_scales": [64]}
})";

void run(const std::string& command, const fs::path& base, std::vector<std::string> sets) {
  for (auto& s : sets) {
    const auto eq = s.find('=');
    const std::string key = s.substr(0, eq);
    if (key != "seed" && key.find('.') == std::string::npos && eq + 1 < s.size()) {
      s = key + "=" + (base / s.substr(eq + 1)).string();
    }
  }
  run_command(command, RunConfig::merge(kTiny, sets));
}

// generate -> clean -> train-rank -> extract -> index -> eval under `base`.
void full_pipeline(const fs::path& base) {
  fs::remove_all(base);
  run("generate", base, {"seed=0", "out=data"});
  run("clean", base, {"manifest=data/manifest.json", "matches=data/matches.jsonl", "out=clean"});
  run("train-rank", base, {"seed=0", "manifest=clean/manifest.json", "out=rank"});
  run("extract", base, {"manifest=clean/manifest.json", "checkpoint=rank/model.irck", "out=ext"});
  run("index", base, {"descriptors=ext/db.irds", "out=idx"});
  run("eval", base, {"manifest=clean/manifest.json", "index=idx/index.irds", "queries=ext/queries.irds", "out=eval"});
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

// Ranked-list lines without the query's own row, ranks dropped.
std::vector<std::string> rows_without_self(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string q, rank, id, score;
  while (std::getline(in, q, '\t') && std::getline(in, rank, '\t') && std::getline(in, id, '\t') &&
         std::getline(in, score)) {
    if (id != q) out.push_back(q + " " + id + " " + score);
  }
  return out;
}

}  // namespace

TEST_CASE("empty config gives pure defaults") {
  const RunConfig defaults;
  CHECK(RunConfig::merge("", {}).to_json() == defaults.to_json());
  CHECK(RunConfig::merge("  \n", {}).to_json() == defaults.to_json());
  CHECK(RunConfig::merge("{}", {}).to_json() == defaults.to_json());
  CHECK(defaults.get_number("train.margin") == 0.5);
  CHECK(defaults.get_count("pca.dim") == 24);
  CHECK(defaults.get_counts("eval.grid_dba") == std::vector<std::size_t>{0, 20});
  CHECK_FALSE(defaults.has("seed"));
  for (const auto& k : config_keys()) CHECK(nearest_key(k.name) == k.name);
}

TEST_CASE("precedence: flags over file over defaults") {
  const std::string file = R"({"train": {"margin": 0.3, "batch_size": 4}, "seed": 7})";
  const RunConfig from_file = RunConfig::merge(file, {});
  CHECK(from_file.get_number("train.margin") == 0.3);
  CHECK(from_file.get_count("train.batch_size") == 4);
  CHECK(from_file.seed() == 7);
  const RunConfig flagged = RunConfig::merge(file, {"train.margin=0.7", "seed=9"});
  CHECK(flagged.get_number("train.margin") == 0.7);
  CHECK(flagged.get_count("train.batch_size") == 4);
  CHECK(flagged.seed() == 9);
  // Flat and nested spellings are equivalent.
  CHECK(RunConfig::merge(R"({"train.margin": 0.3})", {}).to_json() ==
        RunConfig::merge(R"({"train": {"margin": 0.3}})", {}).to_json());
  CHECK(RunConfig::merge("", {"extract.db_scales=64,128,256"}).get_counts("extract.db_scales") ==
        std::vector<std::size_t>{64, 128, 256});
  CHECK(RunConfig::merge("", {"extract.rotations=true"}).get_bool("extract.rotations"));
}

TEST_CASE("unknown keys name the nearest valid key") {
  const std::string msg = error_of([] { RunConfig::merge("", {"margn=0.2"}); });
  CHECK(msg.find("\"margn\"") != std::string::npos);
  CHECK(msg.find("train.margin") != std::string::npos);
  CHECK_THROWS_AS(RunConfig::merge(R"({"train": {"margn": 0.2}})", {}), ConfigError);
  CHECK(nearest_key("trian.lr") == "train.lr");
  CHECK(nearest_key("qe.kk") == "qe.k");
}

TEST_CASE("type mismatches and malformed input") {
  CHECK_THROWS_AS(RunConfig::merge(R"({"train.margin": "x"})", {}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge(R"({"train.batch_size": 1.5})", {}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge(R"({"train.batch_size": -1})", {}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge(R"({"extract.rotations": 1})", {}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge(R"({"extract.db_scales": [64, -1]})", {}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("", {"train.batch_size=-1"}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("", {"train.margin=abc"}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("", {"extract.db_scales=64,,128"}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("", {"extract.rotations=yes"}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("", {"no_equals"}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("[1]", {}), ConfigError);
  CHECK_THROWS_AS(RunConfig::merge("{", {}), ConfigError);
  const std::string msg = error_of([] { RunConfig::merge(R"({"train.margin": "x"})", {}); });
  CHECK(msg.find("train.margin") != std::string::npos);
  CHECK(msg.find("number") != std::string::npos);
}

TEST_CASE("seeds") {
  CHECK_THROWS_AS(RunConfig().seed(), ConfigError);
  CHECK(error_of([] { RunConfig().sub_seed("generate"); }).find("missing seed") != std::string::npos);
  const RunConfig a = RunConfig::merge("", {"seed=3"});
  CHECK(a.sub_seed("generate") == a.sub_seed("generate"));
  CHECK(a.sub_seed("generate") != a.sub_seed("train-rank"));
  CHECK(a.sub_seed("generate") != RunConfig::merge("", {"seed=4"}).sub_seed("generate"));

  const fs::path base = fs::temp_directory_path() / "deepir_cli_seed";
  fs::remove_all(base);
  for (const char* cmd : {"generate", "train-cls", "train-rank", "compress-pq"}) {
    CAPTURE(cmd);
    CHECK(error_of([&] { run_command(cmd, RunConfig::merge("", {"out=" + base.string()})); })
              .find("missing seed") != std::string::npos);
  }
  CHECK_THROWS_AS(run_command("fly", RunConfig()), std::invalid_argument);
  fs::remove_all(base);
}

TEST_CASE("region lists") {
  const RegionList r = parse_region_list("# comment\na\t0 0 10 10\n\na\t5 5 20 30\nb\t1 2 3 4\n");
  REQUIRE(r.size() == 2);
  CHECK(r.at("a").size() == 2);
  CHECK(r.at("b")[0] == BBox{1, 2, 3, 4});
  CHECK_THROWS_AS(parse_region_list("a 0 0 1 1\n"), FormatError);
  CHECK_THROWS_AS(parse_region_list("a\t0 0 1\n"), FormatError);
  CHECK_THROWS_AS(parse_region_list("a\t5 0 1 1\n"), FormatError);
  CHECK_THROWS_AS(parse_region_list("a\t0 0 1 1 9\n"), FormatError);

  // Three stride-2 3x3 convolutions with padding 1: 64 -> 32 -> 16 -> 8 cells.
  const BackboneParams bb = init_backbone(0);
  const auto whole = regions_for_scale(bb, {{0, 0, 128, 128}}, 128, 128, 64, 64);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0] == Region{0, 0, 8, 8});
  const auto left = regions_for_scale(bb, {{0, 0, 64, 128}, {127, 127, 128, 128}}, 128, 128, 64, 64);
  CHECK(left[0] == Region{0, 0, 4, 8});
  CHECK(left[1] == Region{7, 7, 8, 8});
}

TEST_CASE("full pipeline on the synthetic fixture") {
  const fs::path base = fs::temp_directory_path() / "deepir_cli_pipeline";
  full_pipeline(base);
  for (const char* f : {"data/manifest.json", "clean/cleaned.json", "clean/boxes.json", "rank/model.irck",
                        "rank/loss_trace.tsv", "ext/db.irds", "ext/queries.irds", "idx/index.irds",
                        "eval/report.json", "eval/eval_ranked.tsv", "eval/eval.config.json",
                        "rank/train-rank.config.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(base / f));
  }
  // The echo reproduces the effective configuration.
  const RunConfig echoed = RunConfig::merge(read_file(base / "rank/train-rank.config.json"), {});
  CHECK(echoed.seed() == 0);
  CHECK(echoed.get_count("train.iterations") == 4);

  // Eval without QE and DBA ranks exactly like plain search.
  run("search", base, {"index=idx/index.irds", "queries=ext/queries.irds", "search.topk=0", "out=search"});
  run("eval", base, {"manifest=clean/manifest.json", "index=idx/index.irds", "queries=ext/queries.irds",
                     "eval.keep=0", "out=eval_all"});
  CHECK(rows_without_self(read_file(base / "search/ranked.tsv")) ==
        rows_without_self(read_file(base / "eval_all/eval_ranked.tsv")));

  // Extracting inside eval gives the same report as going through the stores.
  run("eval", base, {"manifest=clean/manifest.json", "checkpoint=rank/model.irck", "out=eval_direct"});
  CHECK(read_file(base / "eval_direct/report.json") == read_file(base / "eval/report.json"));

  // Remaining stages.
  run("dba", base, {"index=idx/index.irds", "dba.k=3", "out=dba"});
  CHECK(load_descriptor_store(base / "dba/index_dba.irds").augmented);
  run("compress-pca", base, {"descriptors=idx/index.irds", "queries=ext/queries.irds", "compress.pca_dim=8",
                             "out=pca"});
  CHECK(load_descriptor_store(base / "pca/descriptors_pca.irds").dim() == 8);
  run("compress-pq", base, {"seed=0", "descriptors=idx/index.irds", "pq.m=4", "pq.ksub=8", "out=pq"});
  run("search", base, {"codebook=pq/codebook.irpq", "codes=pq/codes.irpc", "queries=ext/queries.irds",
                       "out=pq_search"});
  run("eval", base, {"manifest=clean/manifest.json", "index=idx/index.irds", "queries=ext/queries.irds",
                     "codebook=pq/codebook.irpq", "out=pq_eval"});
  CHECK_THROWS_AS(run("eval", base, {"manifest=clean/manifest.json", "index=idx/index.irds",
                                     "queries=ext/queries.irds", "codebook=pq/codebook.irpq", "dba.k=3",
                                     "out=bad"}),
                  std::invalid_argument);
  run("eval", base, {"manifest=clean/manifest.json", "index=idx/index.irds", "queries=ext/queries.irds",
                     "eval.grid=true", "eval.grid_max_qe=3", "out=grid"});
  CHECK(read_file(base / "grid/grid.tsv").rfind("k_dba\tk_qe\tmap\n", 0) == 0);

  // Search against an index of another dimension fails with a dimension message.
  const std::string msg = error_of([&] {
    run("search", base, {"index=pca/descriptors_pca.irds", "queries=ext/queries.irds", "out=bad"});
  });
  CHECK(msg.find("dimension") != std::string::npos);

  // Missing inputs.
  CHECK(error_of([&] { run("index", base, {"descriptors=nope.irds", "out=bad"}); }).find("missing input") !=
        std::string::npos);
  fs::remove_all(base);
}

TEST_CASE("region list extraction") {
  const fs::path base = fs::temp_directory_path() / "deepir_cli_regions";
  fs::remove_all(base);
  run("generate", base, {"seed=0", "out=data"});
  run("train-rank", base, {"seed=0", "manifest=data/manifest.json", "train.iterations=1", "out=rank"});
  const Manifest m = load_manifest(base / "data/manifest.json");
  const std::string db_id = m.select("test").back()->id;
  write_file_atomic(base / "regions.txt", db_id + "\t0 0 20 20\n");
  run("extract", base, {"manifest=data/manifest.json", "checkpoint=rank/model.irck", "out=plain"});
  run("extract", base, {"manifest=data/manifest.json", "checkpoint=rank/model.irck", "regions=regions.txt",
                        "out=regions"});
  const RetrievalIndex a = load_descriptor_store(base / "plain/db.irds");
  const RetrievalIndex b = load_descriptor_store(base / "regions/db.irds");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto ra = a.row(i), rb = b.row(i);
    const bool same = std::equal(ra.begin(), ra.end(), rb.begin());
    CHECK(same == (a.ids[i] != db_id));
  }
  fs::remove_all(base);
}

TEST_CASE("pipeline artifacts are byte-identical across runs") {
  const fs::path a = fs::temp_directory_path() / "deepir_cli_det_a";
  const fs::path b = fs::temp_directory_path() / "deepir_cli_det_b";
  full_pipeline(a);
  full_pipeline(b);
  for (const char* f : {"ext/db.irds", "ext/queries.irds", "idx/index.irds", "eval/report.json",
                        "eval/eval_ranked.tsv", "rank/model.irck", "clean/cleaned.json"}) {
    CAPTURE(f);
    CHECK(read_file(a / f) == read_file(b / f));
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("command-line binary exit codes") {
  const fs::path base = fs::temp_directory_path() / "deepir_cli_exit";
  fs::remove_all(base);
  const std::string bin = DEEPIR_CLI;
  auto sh = [&](const std::string& args) { return std::system((bin + " " + args + " > /dev/null 2>&1").c_str()); };
  CHECK(sh("--list-keys") == 0);
  CHECK(sh("generate --out " + (base / "x").string()) != 0);  // no seed
  CHECK(sh("generate --set margn=1 --seed 0 --out " + (base / "x").string()) != 0);
  CHECK(sh("bogus") != 0);
  fs::remove_all(base);
}

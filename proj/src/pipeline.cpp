#include "deepir/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "deepir/binary_io.hpp"
#include "deepir/cleaner.hpp"
#include "deepir/compress.hpp"
#include "deepir/evalbench.hpp"
#include "deepir/synthetic.hpp"
#include "deepir/trainer.hpp"

namespace deepir {

namespace fs = std::filesystem;

namespace {

// Suffixes of the rotated query variants in query stores.
const char* const kRotationSuffix[] = {"", "@r90", "@r270"};

fs::path output_dir(const RunConfig& cfg) {
  const std::string out = cfg.get_text("out");
  if (out.empty()) throw ConfigError("missing output directory: set out=<dir>");
  fs::create_directories(out);
  return out;
}

fs::path input_path(const RunConfig& cfg, const std::string& key) {
  const std::string p = cfg.get_text(key);
  if (p.empty()) throw std::runtime_error("missing input: set " + key + "=<path>");
  if (!fs::exists(p)) throw std::runtime_error("missing input: " + key + " file " + p + " does not exist");
  return p;
}

BackboneConfig backbone_config(const RunConfig& cfg) {
  return {.depth = cfg.get_count("model.depth"), .channels = cfg.get_count("model.channels")};
}

GridConfig grid_config(const RunConfig& cfg) {
  return {.levels = cfg.get_count("grid.levels"), .overlap = cfg.get_number("grid.overlap")};
}

SgdConfig sgd_config(const RunConfig& cfg, const std::string& prefix) {
  return {.learning_rate = cfg.get_number(prefix + ".lr"),
          .momentum = cfg.get_number(prefix + ".momentum"),
          .weight_decay = cfg.get_number(prefix + ".weight_decay")};
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, text);
  spdlog::info("wrote {}", path.string());
}

// Base id and rotation slot of a query-store id.
std::pair<std::string, std::size_t> split_variant(const std::string& id) {
  for (std::size_t r = 1; r < 3; ++r) {
    const std::string suffix = kRotationSuffix[r];
    if (id.size() > suffix.size() && id.ends_with(suffix)) return {id.substr(0, id.size() - suffix.size()), r};
  }
  return {id, 0};
}

// Query descriptors grouped by base id, upright first, in store order.
std::vector<std::pair<std::string, std::vector<Tensor>>> group_queries(const RetrievalIndex& store) {
  std::vector<std::pair<std::string, std::vector<Tensor>>> groups;
  std::map<std::string, std::size_t> slot;
  std::vector<std::vector<std::pair<std::size_t, Tensor>>> parts;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto [base, rot] = split_variant(store.ids[i]);
    auto [it, inserted] = slot.try_emplace(base, groups.size());
    if (inserted) {
      groups.push_back({base, {}});
      parts.emplace_back();
    }
    const auto row = store.row(i);
    parts[it->second].push_back({rot, Tensor({store.dim()}, std::vector<double>(row.begin(), row.end()))});
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::stable_sort(parts[g].begin(), parts[g].end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    if (parts[g].front().first != 0) {
      throw FormatError("query store: " + groups[g].first + " has rotated variants but no upright descriptor");
    }
    for (auto& [rot, t] : parts[g]) groups[g].second.push_back(std::move(t));
  }
  return groups;
}

void check_dims(const RetrievalIndex& db, std::size_t query_dim, const std::string& what) {
  if (db.size() > 0 && query_dim != db.dim()) {
    throw DimensionError(what + ": query dimension " + std::to_string(query_dim) +
                         " differs from index dimension " + std::to_string(db.dim()));
  }
}

void cmd_generate(const RunConfig& cfg) {
  SyntheticConfig s;
  s.classes = cfg.get_count("synthetic.classes");
  s.images_per_class = cfg.get_count("synthetic.images_per_class");
  s.queries_per_class = cfg.get_count("synthetic.queries_per_class");
  s.train_classes = cfg.get_count("synthetic.train_classes");
  s.train_images_per_class = cfg.get_count("synthetic.train_images_per_class");
  s.noise_per_class = cfg.get_count("synthetic.noise_per_class");
  s.min_size = cfg.get_count("synthetic.min_size");
  s.max_size = cfg.get_count("synthetic.max_size");
  s.scale_min = cfg.get_number("synthetic.scale_min");
  s.scale_max = cfg.get_number("synthetic.scale_max");
  s.max_rotation_deg = cfg.get_number("synthetic.max_rotation_deg");
  s.max_offset = cfg.get_number("synthetic.max_offset");
  s.brightness_jitter = cfg.get_number("synthetic.brightness_jitter");
  s.clutter = cfg.get_number("synthetic.clutter");
  s.junk_visibility = cfg.get_number("synthetic.junk_visibility");
  s.db_zoom_min = cfg.get_number("synthetic.db_zoom_min");
  s.db_zoom_max = cfg.get_number("synthetic.db_zoom_max");
  s.seed = cfg.sub_seed("generate");
  const fs::path out = output_dir(cfg);
  const SyntheticDataset data = generate_synthetic(s);
  write_synthetic(data, out);
  spdlog::info("generate: {} images, {} match records into {}", data.images.size(), data.matches.size(),
               out.string());
}

void cmd_clean(const RunConfig& cfg) {
  const Manifest manifest = load_manifest(input_path(cfg, "manifest"));
  const auto records = read_match_records(input_path(cfg, "matches"));
  CleanConfig cc;
  cc.threshold = cfg.get_number("clean.threshold");
  cc.diffusion.alpha = cfg.get_number("clean.alpha");
  cc.diffusion.proposal = parse_box_proposal(cfg.get_text("clean.proposal"));
  cc.diffusion.tol = cfg.get_number("clean.tol");
  cc.diffusion.max_iter = cfg.get_count("clean.max_iter");
  const std::string split = cfg.get_text("clean.split");
  const fs::path out = output_dir(cfg);

  const CleanResult result = clean_collection(manifest, records, cc, split);
  for (const auto& c : result.classes) {
    spdlog::info("clean: class {} kept {}/{} images ({} components, {} sweeps)", c.label, c.retained.size(),
                 c.input_images, c.components, c.sweeps);
  }
  Manifest cleaned = apply_cleaning(manifest, result, split);
  // Entry paths stay valid from the new manifest's directory.
  const fs::path new_root = fs::absolute(out).lexically_normal();
  for (auto& e : cleaned.entries) {
    e.path = fs::absolute(manifest.image_path(e)).lexically_normal().lexically_relative(new_root).generic_string();
  }
  cleaned.root = out;
  write_text(out / "cleaned.json", cleaning_to_json(result));
  write_text(out / "boxes.json", boxes_to_json(result.boxes));
  write_text(out / "manifest.json", manifest_to_json(cleaned));
}

RmacModel start_model(const RunConfig& cfg, const LabeledSet& pca_data) {
  if (!cfg.get_text("checkpoint").empty()) return load_checkpoint(input_path(cfg, "checkpoint"));
  return init_pca_model(init_backbone(cfg.sub_seed("backbone"), backbone_config(cfg)), pca_data,
                        grid_config(cfg), cfg.get_count("pca.dim"), cfg.get_count("pca.side"));
}

void cmd_train_cls(const RunConfig& cfg) {
  const Manifest manifest = load_manifest(input_path(cfg, "manifest"));
  const LabeledSet data = load_labeled_set(manifest, "train", cfg.get_count("cls.side"));
  BackboneParams backbone = cfg.get_text("checkpoint").empty()
                                ? init_backbone(cfg.sub_seed("backbone"), backbone_config(cfg))
                                : load_checkpoint(input_path(cfg, "checkpoint")).backbone;
  ClassifyConfig cc;
  cc.sgd = sgd_config(cfg, "cls");
  cc.batch_size = cfg.get_count("cls.batch_size");
  cc.iterations = cfg.get_count("cls.iterations");
  cc.crop = cfg.get_count("cls.crop");
  cc.lr_drop_at = cfg.get_count("cls.lr_drop_at");
  cc.lr_drop = cfg.get_number("cls.lr_drop");
  cc.seed = cfg.sub_seed("train-cls");
  const fs::path out = output_dir(cfg);

  const ClassifyResult r = train_classification(data, std::move(backbone), cc);
  spdlog::info("train-cls: training accuracy {:.4f} over {} images", r.train_accuracy, data.size());
  const RmacModel model = init_pca_model(r.backbone, data, grid_config(cfg), cfg.get_count("pca.dim"),
                                         cfg.get_count("pca.side"));
  std::ostringstream trace;
  trace.precision(17);
  for (const auto& row : r.trace) trace << row.iteration << '\t' << row.mean_loss << '\t' << row.batch_accuracy << '\n';
  save_checkpoint(out / "model.irck", model);
  write_text(out / "cls_trace.tsv", trace.str());
}

void cmd_train_rank(const RunConfig& cfg) {
  const Manifest manifest = load_manifest(input_path(cfg, "manifest"));
  const LabeledSet data = load_labeled_set(manifest, "train", cfg.get_count("train.side"));
  RmacModel model = start_model(cfg, data);
  TrainConfig tc;
  tc.margin = cfg.get_number("train.margin");
  tc.sgd = sgd_config(cfg, "train");
  tc.batch_size = cfg.get_count("train.batch_size");
  tc.pool_size = cfg.get_count("train.pool_size");
  tc.refresh_every = cfg.get_count("train.refresh_every");
  tc.keep_per_query = cfg.get_count("train.keep");
  tc.iterations = cfg.get_count("train.iterations");
  tc.head_lr_scale = cfg.get_number("train.head_lr_scale");
  tc.crop_fraction = cfg.get_number("train.crop_fraction");
  tc.image_side = cfg.get_count("train.side");
  tc.seed = cfg.sub_seed("train-rank");
  const UpdateMode mode = parse_update_mode(cfg.get_text("train.mode"));
  const fs::path out = output_dir(cfg);

  const TrainResult r = train_rank(data, std::move(model), tc, mode);
  spdlog::info("train-rank: {} iterations, {} mining rounds{}", r.trace.size(), r.refreshes,
               r.stopped_converged ? ", stopped with no active triplet" : "");
  save_checkpoint(out / "model.irck", r.model);
  write_text(out / "loss_trace.tsv", format_loss_trace(r.trace));
}

ExtractOptions extract_options(const RunConfig& cfg) {
  ExtractOptions ex;
  ex.query_scales = cfg.get_counts("extract.query_scales");
  ex.db_scales = cfg.get_counts("extract.db_scales");
  ex.rotations = cfg.get_bool("extract.rotations");
  ex.split = cfg.get_text("extract.split");
  return ex;
}

void cmd_extract(const RunConfig& cfg) {
  const Manifest manifest = load_manifest(input_path(cfg, "manifest"));
  const RmacModel model = load_checkpoint(input_path(cfg, "checkpoint"));
  ExtractOptions ex = extract_options(cfg);
  RegionList regions;
  if (!cfg.get_text("regions").empty()) {
    regions = parse_region_list(read_file(input_path(cfg, "regions")));
    ex.regions = &regions;
  }
  const fs::path out = output_dir(cfg);
  const ExtractedBenchmark bench = extract_benchmark(manifest, model, ex);

  std::vector<Tensor> descs;
  std::vector<std::string> ids;
  for (const auto& q : bench.queries) {
    for (std::size_t r = 0; r < q.descriptors.size(); ++r) {
      descs.push_back(q.descriptors[r]);
      ids.push_back(q.id + kRotationSuffix[r]);
    }
  }
  const bool f32 = cfg.get_bool("store.f32");
  save_descriptor_store(out / "db.irds", bench.db, f32);
  save_descriptor_store(out / "queries.irds", build_index(descs, std::move(ids)), f32);
  spdlog::info("extract: {} database and {} query descriptors of dimension {}", bench.db.size(),
               bench.queries.size(), model.descriptor_dim());
}

void cmd_index(const RunConfig& cfg) {
  const RetrievalIndex index = load_descriptor_store(input_path(cfg, "descriptors"));
  const fs::path out = output_dir(cfg);
  save_descriptor_store(out / "index.irds", index, cfg.get_bool("store.f32"));
  spdlog::info("index: {} rows of dimension {}", index.size(), index.dim());
}

void cmd_dba(const RunConfig& cfg) {
  const RetrievalIndex index = load_descriptor_store(input_path(cfg, "index"));
  if (index.augmented) throw std::runtime_error("dba: index is already augmented");
  const fs::path out = output_dir(cfg);
  save_descriptor_store(out / "index_dba.irds", dba_augment(index, cfg.get_count("dba.k")),
                        cfg.get_bool("store.f32"));
}

std::vector<Tensor> rows_of(const RetrievalIndex& index) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = index.row(i);
    out.push_back(Tensor({index.dim()}, std::vector<double>(r.begin(), r.end())));
  }
  return out;
}

void cmd_compress_pca(const RunConfig& cfg) {
  const RetrievalIndex index = load_descriptor_store(input_path(cfg, "descriptors"));
  const fs::path out = output_dir(cfg);
  const PcaCompressor pca = pca_compress_train(rows_of(index), cfg.get_count("compress.pca_dim"));
  auto project = [&](const RetrievalIndex& in) {
    std::vector<Tensor> projected;
    for (const Tensor& v : rows_of(in)) projected.push_back(pca_project(pca, v));
    return build_index(projected, in.ids);
  };
  write_text(out / "pca.irpp", encode_pca_compressor(pca));
  save_descriptor_store(out / "descriptors_pca.irds", project(index), cfg.get_bool("store.f32"));
  if (!cfg.get_text("queries").empty()) {
    const RetrievalIndex queries = load_descriptor_store(input_path(cfg, "queries"));
    check_dims(index, queries.dim(), "compress-pca");
    save_descriptor_store(out / "queries_pca.irds", project(queries), cfg.get_bool("store.f32"));
  }
}

void cmd_compress_pq(const RunConfig& cfg) {
  const RetrievalIndex index = load_descriptor_store(input_path(cfg, "descriptors"));
  PqTrainConfig pc;
  pc.m = cfg.get_count("pq.m");
  pc.ksub = cfg.get_count("pq.ksub");
  pc.iterations = cfg.get_count("pq.iterations");
  pc.seed = cfg.sub_seed("compress-pq");
  const fs::path out = output_dir(cfg);
  const PqCodebook cb = pq_train(rows_of(index), pc);
  write_text(out / "codebook.irpq", encode_codebook(cb));
  write_text(out / "codes.irpc", encode_code_store(pq_encode_index(index, cb)));
}

void cmd_search(const RunConfig& cfg) {
  const RetrievalIndex queries = load_descriptor_store(input_path(cfg, "queries"));
  const std::size_t topk = cfg.get_count("search.topk");
  const std::size_t k_qe = cfg.get_count("qe.k");
  const bool pq = !cfg.get_text("codebook").empty();
  const fs::path out = output_dir(cfg);

  RetrievalIndex index;
  PqCodebook cb;
  PqCodes codes;
  if (pq) {
    cb = decode_codebook(read_file(input_path(cfg, "codebook")));
    codes = decode_code_store(read_file(input_path(cfg, "codes")));
    if (codes.m != cb.m) throw DimensionError("search: code length differs from the codebook");
    if (queries.size() > 0 && queries.dim() != cb.dim()) {
      throw DimensionError("search: query dimension " + std::to_string(queries.dim()) +
                           " differs from codebook dimension " + std::to_string(cb.dim()));
    }
    if (k_qe > 0) throw std::invalid_argument("search: query expansion over PQ codes is only available in eval");
  } else {
    index = load_descriptor_store(input_path(cfg, "index"));
    check_dims(index, queries.dim(), "search");
  }

  std::string text;
  for (auto& [id, variants] : group_queries(queries)) {
    RankedList ranked;
    if (pq) {
      std::vector<double> best = pq_adc_scores(codes, cb, variants.front());
      for (std::size_t v = 1; v < variants.size(); ++v) {
        const auto s = pq_adc_scores(codes, cb, variants[v]);
        for (std::size_t i = 0; i < best.size(); ++i) best[i] = std::max(best[i], s[i]);
      }
      for (std::size_t i = 0; i < best.size(); ++i) ranked.push_back({codes.ids[i], best[i]});
      std::sort(ranked.begin(), ranked.end(), [](const Scored& a, const Scored& b) {
        return a.score != b.score ? a.score > b.score : a.id < b.id;
      });
      if (topk > 0 && ranked.size() > topk) ranked.resize(topk);
    } else {
      variants.front() = expand_query(index, variants.front(), k_qe);
      ranked = max_over_queries(index, variants, topk);
    }
    text += format_ranked_list(id, ranked);
  }
  write_text(out / "ranked.tsv", text);
}

void cmd_eval(const RunConfig& cfg) {
  const Manifest manifest = load_manifest(input_path(cfg, "manifest"));
  const fs::path out = output_dir(cfg);
  ExtractedBenchmark bench;
  if (!cfg.get_text("index").empty()) {
    bench.protocol = manifest.protocol;
    bench.db = load_descriptor_store(input_path(cfg, "index"));
    const RetrievalIndex store = load_descriptor_store(input_path(cfg, "queries"));
    check_dims(bench.db, store.dim(), "eval");
    std::map<std::string, std::vector<Tensor>> by_id;
    for (auto& [id, variants] : group_queries(store)) by_id[id] = std::move(variants);
    for (const auto* e : manifest.select(cfg.get_text("extract.split"))) {
      if (!e->query) continue;
      const auto it = by_id.find(e->id);
      if (it == by_id.end()) throw std::runtime_error("eval: query " + e->id + " missing from the query store");
      bench.queries.push_back({e->id, it->second, {e->positives.begin(), e->positives.end()},
                               {e->ignores.begin(), e->ignores.end()}});
    }
  } else {
    bench = extract_benchmark(manifest, load_checkpoint(input_path(cfg, "checkpoint")), extract_options(cfg));
  }

  RankOptions ro;
  ro.k_qe = cfg.get_count("qe.k");
  ro.k_dba = cfg.get_count("dba.k");
  ro.keep = cfg.get_count("eval.keep");
  if (bench.db.augmented && ro.k_dba > 0) throw std::runtime_error("eval: index is already augmented");
  PqCodebook cb;
  if (!cfg.get_text("codebook").empty()) {
    cb = decode_codebook(read_file(input_path(cfg, "codebook")));
    ro.pq = &cb;
  }
  const EvalReport report = evaluate(bench, ro);
  spdlog::info("eval: mAP {:.4f}, mean recall@4 {:.4f}, {} queries ({} skipped)", report.map,
               report.mean_recall4, report.queries.size(), report.skipped);

  write_text(out / "report.json", report_to_json(report));
  std::string ranked;
  for (const auto& q : report.queries) ranked += format_ranked_list(q.id, q.ranked);
  write_text(out / "eval_ranked.tsv", ranked);
  if (cfg.get_bool("eval.curves")) {
    fs::create_directories(out / "curves");
    for (const auto& q : report.queries) write_file_atomic(out / "curves" / (q.id + ".tsv"), format_ap_curve(q.curve));
  }
  if (cfg.get_bool("eval.grid")) {
    if (bench.db.augmented) throw std::runtime_error("eval: the grid needs a non-augmented index");
    write_text(out / "grid.tsv",
               format_grid(qe_dba_grid(bench, cfg.get_count("eval.grid_max_qe"), cfg.get_counts("eval.grid_dba"))));
  }
}

using Handler = void (*)(const RunConfig&);

const std::vector<std::pair<std::string, Handler>>& handlers() {
  static const std::vector<std::pair<std::string, Handler>> h = {
      {"generate", cmd_generate},         {"clean", cmd_clean},
      {"train-cls", cmd_train_cls},       {"train-rank", cmd_train_rank},
      {"extract", cmd_extract},           {"index", cmd_index},
      {"dba", cmd_dba},                   {"compress-pca", cmd_compress_pca},
      {"compress-pq", cmd_compress_pq},   {"search", cmd_search},
      {"eval", cmd_eval},
  };
  return h;
}

}  // namespace

const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : handlers()) n.push_back(name);
    return n;
  }();
  return names;
}

void run_command(const std::string& command, const RunConfig& cfg) {
  for (const auto& [name, fn] : handlers()) {
    if (name != command) continue;
    if (command == "generate" || command == "train-cls" || command == "train-rank" || command == "compress-pq") {
      cfg.seed();  // stochastic stages refuse to run without an explicit seed
    }
    fn(cfg);
    const std::string out = cfg.get_text("out");
    if (!out.empty()) write_file_atomic(fs::path(out) / (command + ".config.json"), cfg.to_json());
    return;
  }
  throw std::invalid_argument("unknown command \"" + command + "\"");
}

}  // namespace deepir

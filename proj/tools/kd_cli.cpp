#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "kd/config.hpp"
#include "kd/eval.hpp"
#include "kd/multi_teacher.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliState {
  kd::RunConfig cfg;
  bool quiet = false;

  void log(const std::string& msg) const {
    if (!quiet) std::cout << msg << "\n";
  }
};

std::string req_string(const json& j, const std::string& a, const std::string& b,
                       const std::string& what) {
  if (j.contains(a) && j.at(a).contains(b)) return j.at(a).at(b).get<std::string>();
  throw std::invalid_argument("config: missing " + what + " (" + a + "." + b + ")");
}

int cmd_synth(CliState& st) {
  const json sj = st.cfg.raw.value("synth", json::object());
  const int n_per_site = sj.value("n_per_site", 10);
  const int image_hw = sj.value("image_hw", 96);
  const int seed = sj.value("seed", st.cfg.train.seed);
  std::vector<kd::SiteProfile> profiles =
      sj.contains("sites") ? kd::site_profiles_from_json(sj.at("sites"))
                           : kd::default_site_profiles(sj.value("n_sites", 6));
  const std::string out = sj.value("out_dir", (fs::path(st.cfg.run_dir) / "data").string());
  kd::Manifest m = kd::synthesize_dataset(n_per_site, profiles, seed, out, image_hw);
  st.log("synthesized " + std::to_string(m.records.size()) + " slices across " +
         std::to_string(profiles.size()) + " sites -> " + out + "/manifest.json");
  return 0;
}

int cmd_ingest(CliState& st) {
  const std::string root = req_string(st.cfg.raw, "data", "root", "dataset root");
  kd::Manifest m = kd::ingest_slices(root);
  fs::create_directories(st.cfg.run_dir);
  const std::string out = st.cfg.raw.value("data", json::object())
                              .value("manifest", (fs::path(st.cfg.run_dir) / "manifest.json").string());
  kd::save_manifest(m, out);
  st.log("ingested " + std::to_string(m.records.size()) + " slices -> " + out);
  return 0;
}

int cmd_split(CliState& st, const std::string& ratios_arg) {
  const std::string mp = req_string(st.cfg.raw, "data", "manifest", "manifest path");
  kd::Manifest m = kd::load_manifest(mp);
  const json sj = st.cfg.raw.value("split", json::object());
  kd::SplitRatios r{sj.value("train", 0.8), sj.value("val", 0.05), sj.value("test", 0.15)};
  if (!ratios_arg.empty()) {
    if (std::sscanf(ratios_arg.c_str(), "%lf,%lf,%lf", &r.train, &r.val, &r.test) != 3)
      throw std::invalid_argument("--ratios must be 'train,val,test'");
  }
  const bool by_patient = sj.value("by_patient", true);
  auto parts = kd::split_dataset(m, r, st.cfg.train.seed, by_patient);
  fs::create_directories(st.cfg.run_dir);
  const char* names[3] = {"train", "val", "test"};
  for (int k = 0; k < 3; ++k) {
    const std::string out = (fs::path(st.cfg.run_dir) / (std::string(names[k]) + ".json")).string();
    kd::save_manifest(parts[static_cast<std::size_t>(k)], out);
    st.log(std::string(names[k]) + ": " +
           std::to_string(parts[static_cast<std::size_t>(k)].records.size()) + " slices -> " + out);
  }
  return 0;
}

int cmd_partition(CliState& st) {
  const std::string mp = req_string(st.cfg.raw, "data", "manifest", "manifest path");
  kd::Manifest m = kd::load_manifest(mp);
  kd::SitePairing pairing;
  const json pj = st.cfg.raw.value("partition", json::object());
  if (pj.contains("pairs")) {
    for (const json& p : pj.at("pairs")) pairing.pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  } else {
    pairing.pairs = {{1, 2}, {3, 4}, {5, 6}};
  }
  std::vector<kd::SliceRecord> excluded;
  auto shards = kd::partition_by_sites(m, pairing, &excluded);
  fs::create_directories(st.cfg.run_dir);
  for (std::size_t k = 0; k < shards.size(); ++k) {
    const std::string out =
        (fs::path(st.cfg.run_dir) / ("shard_" + std::to_string(k + 1) + ".json")).string();
    kd::save_manifest(shards[k], out);
    st.log("shard " + std::to_string(k + 1) + " (sites " + std::to_string(pairing.pairs[k].first) +
           "," + std::to_string(pairing.pairs[k].second) + "): " +
           std::to_string(shards[k].records.size()) + " slices -> " + out);
  }
  if (!excluded.empty())
    st.log("excluded " + std::to_string(excluded.size()) + " slices from unlisted sites");
  return 0;
}

kd::Manifest manifest_from_key(const CliState& st, const std::string& key) {
  return kd::load_manifest(req_string(st.cfg.raw, "data", key, key + " path"));
}

void log_result(CliState& st, const kd::TrainResult& r) {
  st.log("best epoch " + std::to_string(r.history.best_epoch) + ", val dice " +
         std::to_string(r.history.epochs[static_cast<std::size_t>(r.history.best_epoch)].val_dice) +
         ", wall time " + std::to_string(r.history.wall_time_s) + "s");
  st.log("checkpoint: " + r.checkpoint_path + "; history: " +
         (fs::path(st.cfg.run_dir) / "history.csv").string());
}

int cmd_train_teacher(CliState& st) {
  kd::Manifest train = manifest_from_key(st, "train_manifest");
  kd::Manifest val = manifest_from_key(st, "val_manifest");
  auto model = kd::build_reference_teacher(st.cfg.teacher_model,
                                           static_cast<unsigned>(st.cfg.train.seed));
  log_result(st, kd::train_teacher(model, train, val, st.cfg.train, st.cfg.run_dir));
  return 0;
}

int cmd_distill_mono(CliState& st) {
  kd::Manifest train = manifest_from_key(st, "train_manifest");
  kd::Manifest val = manifest_from_key(st, "val_manifest");
  if (!st.cfg.raw.contains("teacher_ckpt"))
    throw std::invalid_argument("config: distill-mono needs teacher_ckpt");
  auto student = kd::build_reference_student(st.cfg.student_model,
                                             static_cast<unsigned>(st.cfg.train.seed));
  log_result(st, kd::distill_mono(student, st.cfg.raw.at("teacher_ckpt").get<std::string>(), train,
                                  val, st.cfg.train, st.cfg.run_dir));
  return 0;
}

int cmd_distill_multi(CliState& st) {
  kd::Manifest train = manifest_from_key(st, "train_manifest");
  kd::Manifest val = manifest_from_key(st, "val_manifest");
  if (!st.cfg.raw.contains("teachers"))
    throw std::invalid_argument("config: distill-multi needs a teachers checkpoint list");
  const auto ckpts = st.cfg.raw.at("teachers").get<std::vector<std::string>>();
  auto student = kd::build_reference_student(st.cfg.student_model,
                                             static_cast<unsigned>(st.cfg.train.seed));
  log_result(st, kd::distill_multi(student, ckpts, train, val, st.cfg.train, st.cfg.run_dir));
  return 0;
}

int cmd_evaluate(CliState& st) {
  const std::string ckpt = req_string(st.cfg.raw, "eval", "checkpoint", "checkpoint");
  const std::string mp = st.cfg.raw.at("eval").value(
      "manifest", st.cfg.raw.value("data", json::object()).value("test_manifest", std::string()));
  if (mp.empty()) throw std::invalid_argument("config: evaluate needs eval.manifest or data.test_manifest");
  auto model = kd::load_checkpoint(ckpt);
  kd::EvalResult r = kd::evaluate(*model, kd::load_manifest(mp), st.cfg.train.input_hw,
                                  st.cfg.train.normalization, st.cfg.train.batch_size);
  std::cout << "model: " << r.model_name << "\n"
            << "dice: " << r.mean_dice * 100.0 << "% +- " << r.std_dice << " (n=" << r.n_samples
            << ")\n"
            << "params: " << r.params << "\nflops: " << r.flops << " (2 x MACs at "
            << st.cfg.train.input_hw.first << "x" << st.cfg.train.input_hw.second << ")\n";
  return 0;
}

int cmd_report(CliState& st) {
  if (!st.cfg.raw.contains("report"))
    throw std::invalid_argument("config: report needs a report.entries list");
  std::vector<kd::ReportEntry> entries;
  for (const json& ej : st.cfg.raw.at("report").at("entries")) {
    auto model = kd::load_checkpoint(ej.at("checkpoint").get<std::string>());
    kd::Manifest m = kd::load_manifest(ej.at("manifest").get<std::string>());
    kd::ReportEntry e;
    e.result = kd::evaluate(*model, m, st.cfg.train.input_hw, st.cfg.train.normalization,
                            st.cfg.train.batch_size);
    e.role = ej.value("role", std::string("student"));
    if (ej.contains("baseline_pct")) e.baseline_dice_pct = ej.at("baseline_pct").get<double>();
    entries.push_back(std::move(e));
  }
  fs::create_directories(st.cfg.run_dir);
  std::string table;
  const std::string out = (fs::path(st.cfg.run_dir) / "report.csv").string();
  kd::emit_report(entries, out, &table);
  if (!st.quiet) std::cout << table;
  st.log("report -> " + out);
  return 0;
}

int cmd_overlays(CliState& st) {
  const std::string ckpt = req_string(st.cfg.raw, "overlays", "checkpoint", "checkpoint");
  const std::string mp = req_string(st.cfg.raw, "overlays", "manifest", "manifest");
  kd::Manifest m = kd::load_manifest(mp);
  const int max_count = st.cfg.raw.at("overlays").value("max_count", 0);
  std::vector<kd::SliceRecord> recs = m.records;
  if (max_count > 0 && static_cast<int>(recs.size()) > max_count)
    recs.resize(static_cast<std::size_t>(max_count));
  auto model = kd::load_checkpoint(ckpt);
  const std::string out = (fs::path(st.cfg.run_dir) / "overlays").string();
  kd::export_overlays(*model, recs, out, st.cfg.train.input_hw, st.cfg.train.normalization);
  st.log(std::to_string(recs.size()) + " overlays -> " + out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation workflow for 2D segmentation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ratios_arg;
  std::vector<std::string> overrides;
  int seed = -1;
  bool quiet = false;
  app.add_option("--config", config_path, "run configuration file (JSON)");
  app.add_option("--set", overrides, "dotted key=value config overrides")->take_all();
  app.add_option("--seed", seed, "override train.seed and synth.seed");
  app.add_option("--out-dir", out_dir, "override run_dir");
  app.add_flag("--quiet", quiet, "suppress progress output");

  const char* commands[] = {"synth-data", "ingest",       "split",         "partition",
                            "train-teacher", "distill-mono", "distill-multi", "evaluate",
                            "report",        "overlays"};
  for (const char* c : commands) app.add_subcommand(c)->fallthrough();
  app.get_subcommand("split")->add_option("--ratios", ratios_arg, "train,val,test ratios");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CliState st;
  st.quiet = quiet;
  std::string stage = app.get_subcommands().front()->get_name();
  try {
    json raw = config_path.empty() ? json::object() : kd::load_json_file(config_path);
    for (const std::string& ov : overrides) kd::apply_override(raw, ov);
    if (seed >= 0) {
      raw["train"]["seed"] = seed;
      raw["synth"]["seed"] = seed;
    }
    if (!out_dir.empty()) raw["run_dir"] = out_dir;
    st.cfg = kd::parse_run_config(raw);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (stage == "synth-data") return cmd_synth(st);
    if (stage == "ingest") return cmd_ingest(st);
    if (stage == "split") return cmd_split(st, ratios_arg);
    if (stage == "partition") return cmd_partition(st);
    if (stage == "train-teacher") return cmd_train_teacher(st);
    if (stage == "distill-mono") return cmd_distill_mono(st);
    if (stage == "distill-multi") return cmd_distill_multi(st);
    if (stage == "evaluate") return cmd_evaluate(st);
    if (stage == "report") return cmd_report(st);
    if (stage == "overlays") return cmd_overlays(st);
    std::cerr << "unknown command '" << stage << "'\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error in stage '" << stage << "': " << e.what() << "\n";
    return 1;
  }
}

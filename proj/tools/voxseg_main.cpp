// voxseg command-line tool: phantom dataset generation, training, sliding-
// window inference, evaluation, and gradient checking.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "voxseg/checkpoint.hpp"
#include "voxseg/config.hpp"
#include "voxseg/gradcheck.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/nifti.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/stats.hpp"
#include "voxseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace voxseg;

namespace {

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config:
    case ErrorKind::Shape:
      return 1;
    case ErrorKind::Data:
      return 2;
    case ErrorKind::Numeric:
      return 3;
  }
  return 1;
}

std::string case_name(int64_t i, const char* split) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "case_%s_%03d", split, static_cast<int>(i));
  return buf;
}

int cmd_phantom(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  json manifest;
  manifest["cases"] = json::array();
  std::vector<uint64_t> seeds;
  auto emit = [&](int64_t idx, int64_t global, const char* split) {
    PhantomSpec spec = cfg.data.phantom;
    spec.seed = cfg.seed + static_cast<uint64_t>(global);
    seeds.push_back(spec.seed);
    auto [image, label] = gen_phantom(spec);
    const std::string name = case_name(idx, split);
    write_volume(image, out_dir + "/" + name + "_image.nii");
    write_volume(label, out_dir + "/" + name + "_label.nii");
    json c;
    c["name"] = name;
    c["split"] = split;
    c["image"] = name + "_image.nii";
    c["label"] = name + "_label.nii";
    c["seed"] = spec.seed;
    c["spec"] = to_json(spec);
    manifest["cases"].push_back(c);
  };
  for (int64_t i = 0; i < cfg.data.n_train; ++i) emit(i, i, "train");
  for (int64_t i = 0; i < cfg.data.n_test; ++i) emit(i, cfg.data.n_train + i, "test");
  std::sort(seeds.begin(), seeds.end());
  check(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end(), ErrorKind::Config,
        "phantom: duplicate case seeds");
  save_json(manifest, out_dir + "/manifest.json");
  save_json(cfg.to_json(), out_dir + "/resolved_config.json");
  std::cout << "wrote " << cfg.data.n_train << " train + " << cfg.data.n_test
            << " test phantoms to " << out_dir << "\n";
  return 0;
}

TrainDataset load_split(const std::string& data_dir, const std::string& split) {
  std::ifstream f(data_dir + "/manifest.json");
  check(f.good(), ErrorKind::Data, "missing dataset manifest: " + data_dir + "/manifest.json");
  json manifest;
  f >> manifest;
  TrainDataset data;
  for (const auto& c : manifest.at("cases")) {
    if (c.value("split", "") != split) continue;
    auto image = read_volume<float>(data_dir + "/" + c.at("image").get<std::string>());
    auto label = read_volume<uint8_t>(data_dir + "/" + c.at("label").get<std::string>());
    data.push_back(make_train_case(image, label));
  }
  check(!data.empty(), ErrorKind::Data, "no '" + split + "' cases in " + data_dir);
  return data;
}

int cmd_train(RunConfig cfg, const std::string& data_dir, const std::string& out_dir) {
  fs::create_directories(out_dir);
  cfg.train.seed = cfg.seed;
  TrainDataset data = load_split(data_dir, "train");
  Model<float> model(cfg.model, cfg.seed);
  std::cout << "model parameters: " << model.param_count() << " (attention "
            << model.attention_param_count() << ")\n";
  save_json(cfg.to_json(), out_dir + "/resolved_config.json");

  const std::string ckpt_path = out_dir + "/checkpoint.bin";
  auto result = train_loop(model, data, cfg.train, SamplerConfig{},
                           [&](int64_t iter, Model<float>& m) {
                             save_checkpoint(m, ckpt_path);
                             std::cout << "iter " << iter << ": checkpoint saved\n";
                           });
  write_trace_csv(result.trace, out_dir + "/trace.csv");
  if (!result.completed) {
    std::cerr << "training halted: " << result.halt_reason
              << " (last good checkpoint kept at " << ckpt_path << ")\n";
    return 3;
  }
  if (!result.trace.empty())
    std::cout << "final loss " << result.trace.back().loss.total << " after "
              << result.iterations_run << " iterations\n";
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input,
              const std::string& out_dir, int64_t patch, int64_t stride, double threshold) {
  fs::create_directories(out_dir);
  Model<float> model = load_checkpoint(ckpt_path);
  auto image = read_volume<float>(input);
  for (int a = 0; a < 3; ++a) {
    if (image.dims[a] < patch)
      std::cerr << "warning: input dim " << image.dims[a] << " below patch size " << patch
                << "; zero-padding\n";
    if (std::abs(image.spacing[a] - image.spacing[0]) > 1e-6)
      std::cerr << "warning: anisotropic spacing on axis " << a << "\n";
  }
  auto res = predict_volume(model, image, patch, stride, threshold);
  const std::string stem = fs::path(input).stem().string();
  write_volume(res.probability, out_dir + "/" + stem + "_prob.nii");
  write_volume(res.mask, out_dir + "/" + stem + "_mask.nii");
  std::cout << "inference wall clock: " << res.seconds << " s ("
            << "model load excluded)\n";
  return 0;
}

// Maps a file name to its case stem, dropping the pipeline suffixes.
std::string case_stem(std::string name) {
  for (const char* suffix : {"_image", "_label", "_mask", "_prob"}) {
    const size_t pos = name.rfind(suffix);
    if (pos != std::string::npos && pos + std::strlen(suffix) == name.size())
      return name.substr(0, pos);
  }
  return name;
}

std::map<std::string, std::string> index_masks(const std::string& dir, bool prefer_label) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".nii") continue;
    const std::string stem_full = entry.path().stem().string();
    if (stem_full.size() >= 5 && stem_full.rfind("_prob") == stem_full.size() - 5) continue;
    if (stem_full.size() >= 6 && stem_full.rfind("_image") == stem_full.size() - 6) continue;
    const std::string stem = case_stem(stem_full);
    const bool is_preferred = prefer_label
                                  ? stem_full.rfind("_label") != std::string::npos
                                  : stem_full.rfind("_mask") != std::string::npos;
    if (!out.count(stem) || is_preferred) out[stem] = entry.path().string();
  }
  return out;
}

MetricsReport evaluate_dirs(const std::map<std::string, std::string>& preds,
                            const std::map<std::string, std::string>& gts, bool symmetric_asd,
                            const std::string& error_map_dir,
                            std::vector<std::string>& skipped) {
  MetricsReport report;
  for (const auto& [stem, pred_path] : preds) {
    auto it = gts.find(stem);
    if (it == gts.end()) {
      skipped.push_back(stem);
      continue;
    }
    auto pred = read_label_volume(pred_path);
    auto gt = read_label_volume(it->second);
    CaseMetrics cm;
    cm.name = stem;
    cm.dice = dice(pred, gt);
    cm.hd95_mm = hd95(pred, gt);
    cm.asd_mm = asd(pred, gt, symmetric_asd);
    report.cases.push_back(cm);
    if (!error_map_dir.empty() && !extract_surface(pred).empty() &&
        !extract_surface(gt).empty()) {
      fs::create_directories(error_map_dir);
      write_volume(surface_error_map(pred, gt), error_map_dir + "/" + stem + "_surferr.nii");
    }
  }
  return report;
}

void write_report_csv(const MetricsReport& report, const std::string& path,
                      const std::vector<std::pair<std::string, TTestResult>>& tests) {
  std::ofstream f(path);
  check(f.good(), ErrorKind::Data, "eval: cannot write " + path);
  f << "case,dice,hd95_mm,asd_mm\n";
  f << std::setprecision(9);
  auto cell = [&](const std::optional<double>& v) {
    return v ? std::to_string(*v) : std::string();
  };
  for (const auto& c : report.cases)
    f << c.name << ',' << c.dice << ',' << cell(c.hd95_mm) << ',' << cell(c.asd_mm) << "\n";
  const auto da = report.dice_agg(), ha = report.hd95_agg(), aa = report.asd_agg();
  f << "mean," << da.mean << ',' << ha.mean << ',' << aa.mean << "\n";
  f << "std," << da.stddev << ',' << ha.stddev << ',' << aa.stddev << "\n";
  for (const auto& [name, t] : tests)
    f << "p_" << name << ',' << t.p << ",t=" << t.t << ",\n";
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out_csv,
             const std::string& compare_dir, bool symmetric_asd,
             const std::string& error_map_dir) {
  auto preds = index_masks(pred_dir, false);
  auto gts = index_masks(gt_dir, true);
  std::vector<std::string> skipped;
  MetricsReport report = evaluate_dirs(preds, gts, symmetric_asd, error_map_dir, skipped);
  for (const auto& s : skipped) std::cerr << "warning: no ground truth for " << s << ", skipped\n";
  check(!report.cases.empty(), ErrorKind::Data, "eval: no matched cases");

  std::vector<std::pair<std::string, TTestResult>> tests;
  if (!compare_dir.empty()) {
    auto other = index_masks(compare_dir, false);
    std::vector<std::string> skipped2;
    MetricsReport other_report = evaluate_dirs(other, gts, symmetric_asd, "", skipped2);
    std::vector<double> d1, d2, h1, h2, a1, a2;
    for (const auto& c : report.cases)
      for (const auto& o : other_report.cases)
        if (c.name == o.name) {
          d1.push_back(c.dice);
          d2.push_back(o.dice);
          if (c.hd95_mm && o.hd95_mm) {
            h1.push_back(*c.hd95_mm);
            h2.push_back(*o.hd95_mm);
          }
          if (c.asd_mm && o.asd_mm) {
            a1.push_back(*c.asd_mm);
            a2.push_back(*o.asd_mm);
          }
        }
    check(d1.size() >= 2, ErrorKind::Data, "eval: --compare needs at least 2 matched cases");
    tests.emplace_back("dice", paired_t_test(d1, d2));
    if (h1.size() >= 2) tests.emplace_back("hd95", paired_t_test(h1, h2));
    if (a1.size() >= 2) tests.emplace_back("asd", paired_t_test(a1, a2));
  }

  write_report_csv(report, out_csv, tests);
  const auto da = report.dice_agg(), ha = report.hd95_agg(), aa = report.asd_agg();
  std::cout << "cases: " << report.cases.size() << "\n"
            << "dice: " << da.mean << " +/- " << da.stddev << "\n"
            << "hd95_mm: " << ha.mean << " +/- " << ha.stddev << " (" << ha.count << " defined)\n"
            << "asd_mm: " << aa.mean << " +/- " << aa.stddev << " (" << aa.count << " defined)\n";
  for (const auto& [name, t] : tests)
    std::cout << "paired t-test " << name << ": t=" << t.t << " p=" << t.p << "\n";
  return 0;
}

int cmd_gradcheck(double tol, bool inject_fault) {
  auto reports = gradcheck::run_all(tol, inject_fault);
  bool all_pass = true;
  std::printf("%-28s %-14s %s\n", "operation", "max_rel_err", "status");
  for (const auto& r : reports) {
    std::printf("%-28s %-14.3e %s\n", r.op.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep attentive 3-D segmentation workbench"};
  app.require_subcommand(1);

  int threads = 0;
  std::string config_path;
  uint64_t seed_flag = 0;
  bool seed_set = false;
  app.add_option("--threads", threads, "worker thread count (0 = hardware)");
  app.add_option("--config", config_path, "JSON config with model/train/data/metrics sections");
  app.add_option("--seed", seed_flag, "run seed override")->each([&](const std::string&) {
    seed_set = true;
  });

  auto* p_phantom = app.add_subcommand("phantom", "generate a synthetic dataset");
  std::string out_dir;
  int64_t n_train = -1, n_test = -1;
  p_phantom->add_option("--out", out_dir, "output directory")->required();
  p_phantom->add_option("--n-train", n_train, "number of training phantoms");
  p_phantom->add_option("--n-test", n_test, "number of held-out phantoms");

  auto* p_train = app.add_subcommand("train", "train a model on a phantom dataset");
  std::string data_dir, train_out;
  int64_t iters = -1, batch = -1;
  double channel_scale = 0.0;
  std::string supervision;
  bool no_attention = false;
  p_train->add_option("--data", data_dir, "dataset directory (with manifest.json)")->required();
  p_train->add_option("--out", train_out, "output directory")->required();
  p_train->add_option("--iters", iters, "override total iterations");
  p_train->add_option("--batch", batch, "override mini-batch size");
  p_train->add_option("--channel-scale", channel_scale, "desk-scale channel multiplier");
  p_train->add_option("--supervision", supervision,
                      "output-only | backbone+output | sam | saf");
  p_train->add_flag("--no-attention", no_attention, "train the non-attentive variant");

  auto* p_infer = app.add_subcommand("infer", "sliding-window inference on one volume");
  std::string ckpt, input_vol, infer_out;
  int64_t patch = 0, stride = 0;
  double threshold = -1.0;
  p_infer->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  p_infer->add_option("--input", input_vol, "input NIfTI volume")->required();
  p_infer->add_option("--out", infer_out, "output directory")->required();
  p_infer->add_option("--patch", patch, "patch size");
  p_infer->add_option("--stride", stride, "sliding-window stride");
  p_infer->add_option("--threshold", threshold, "binarization threshold");

  auto* p_eval = app.add_subcommand("eval", "evaluate predictions against ground truth");
  std::string pred_dir, gt_dir, out_csv, compare_dir, error_map_dir;
  bool asym_asd = false;
  p_eval->add_option("--pred", pred_dir, "prediction directory")->required();
  p_eval->add_option("--gt", gt_dir, "ground-truth directory")->required();
  p_eval->add_option("--out", out_csv, "report CSV path")->required();
  p_eval->add_option("--compare", compare_dir, "second prediction set for paired t-tests");
  p_eval->add_option("--error-maps", error_map_dir, "directory for surface error maps");
  p_eval->add_flag("--asymmetric-asd", asym_asd, "use the directed ASD variant");

  auto* p_grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  double tol = 1e-5;
  bool inject_fault = false;
  p_grad->add_option("--tol", tol, "relative error threshold");
  p_grad->add_flag("--inject-fault", inject_fault,
                   "deliberately corrupt one analytic gradient (checker self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (threads > 0) set_num_threads(threads);
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (seed_set) cfg.seed = seed_flag;

    if (*p_phantom) {
      if (n_train >= 0) cfg.data.n_train = n_train;
      if (n_test >= 0) cfg.data.n_test = n_test;
      return cmd_phantom(cfg, out_dir);
    }
    if (*p_train) {
      if (iters > 0) cfg.train.total_iters = iters;
      if (batch > 0) cfg.train.batch_size = batch;
      if (channel_scale > 0) cfg.model.channel_scale = channel_scale;
      if (!supervision.empty()) cfg.model.supervision = supervision_from_string(supervision);
      if (no_attention) cfg.model.attention_enabled = false;
      return cmd_train(cfg, data_dir, train_out);
    }
    if (*p_infer) {
      return cmd_infer(ckpt, input_vol, infer_out, patch > 0 ? patch : cfg.data.patch_size,
                       stride > 0 ? stride : cfg.data.stride,
                       threshold >= 0 ? threshold : cfg.data.threshold);
    }
    if (*p_eval) {
      return cmd_eval(pred_dir, gt_dir, out_csv, compare_dir, !asym_asd, error_map_dir);
    }
    if (*p_grad) {
      return cmd_gradcheck(tol, inject_fault);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

// Command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error
// (dataset, image, mask, checkpoint), 3 numeric failure.

#include "bsm/checkpoint.hpp"
#include "bsm/errors.hpp"
#include "bsm/hierarchy.hpp"
#include "bsm/image_io.hpp"
#include "bsm/inference.hpp"
#include "bsm/selftest.hpp"
#include "bsm/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct TrainArgs {
  std::string config, data, out, log;
  std::vector<std::string> overrides;
  std::string composition, scorer;
  long long iterations = -1, seed = -1;
};

int cmd_train(const TrainArgs& a) {
  bsm::TrainConfig config = a.config.empty() ? bsm::TrainConfig{} : bsm::TrainConfig::from_file(a.config);
  std::vector<std::string> overrides = a.overrides;
  if (!a.composition.empty()) overrides.push_back("composition=" + a.composition);
  if (!a.scorer.empty()) overrides.push_back("scorer=" + a.scorer);
  if (a.iterations >= 0) overrides.push_back("iterations=" + std::to_string(a.iterations));
  if (a.seed >= 0) overrides.push_back("seed=" + std::to_string(a.seed));
  config = config.with_overrides(overrides);
  const bsm::PairedDataset data = bsm::load_dataset(a.data);
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log);
    if (!log) throw bsm::DatasetError("cannot write log " + a.log);
  }
  std::cout << "training on " << data.size() << " pairs, "
            << (config.precision == 64 ? "64" : "32") << "-bit\n" << std::flush;
  bsm::train(config, data, a.out, [&](const std::string& line) {
    std::cout << line << '\n' << std::flush;
    if (log) log << line << '\n' << std::flush;
  });
  std::cout << "checkpoint " << a.out << '\n';
  return kOk;
}

int cmd_enhance(const std::string& ckpt, const std::string& in, const std::string& out, bool dump) {
  const auto model = bsm::load_model<double>(ckpt);
  const auto written = bsm::enhance_files(model, in, out, {dump},
                                          [](const std::string& w) { std::cerr << w << '\n'; });
  for (const auto& p : written) std::cout << p.string() << '\n';
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& csv, bool identity) {
  const bsm::PairedDataset data = bsm::load_dataset(data_dir);
  const bsm::EvalReport report =
      identity ? bsm::evaluate_identity(data) : bsm::evaluate(bsm::load_model<double>(ckpt), data);
  std::cout << report.table();
  if (!csv.empty()) {
    std::ofstream f(csv);
    if (!f) throw bsm::DatasetError("cannot write " + csv);
    f << report.csv();
  }
  return kOk;
}

int cmd_score(const std::string& in, const std::string& scorer, const std::string& out) {
  const bsm::ScorerKind kind = bsm::parse_scorer(scorer);
  if (kind == bsm::ScorerKind::external) throw bsm::ConfigError("score computes luma or histogram maps only");
  const auto map = bsm::brightness_map(bsm::read_png(in), kind);
  bsm::save_score_map(map, out);
  std::printf("min=%.6f max=%.6f mean=%.6f\n", map.values.minCoeff(), map.values.maxCoeff(), map.values.mean());
  return kOk;
}

int cmd_selftest() {
  bool ok = true;
  for (const auto& r : bsm::run_selftest()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumeric;
}

int cmd_validate_masks(const std::string& in) {
  std::vector<std::filesystem::path> images;
  if (std::filesystem::is_directory(in)) {
    for (const auto& e : std::filesystem::directory_iterator(in))
      if (e.path().extension() == ".png") images.push_back(e.path());
    std::sort(images.begin(), images.end());
  } else {
    images.push_back(in);
  }
  for (const auto& path : images) {
    if (!bsm::has_mask_sidecar(path)) {
      std::cout << path.filename().string() << ": no sidecar\n";
      continue;
    }
    const bsm::Tensor<double> image = bsm::read_png(path);
    const auto masks = bsm::load_mask_sidecar(path, std::make_pair(image.dim(1), image.dim(2)));
    std::cout << path.filename().string() << ": " << masks.count() << " instances, ok\n";
  }
  return kOk;
}

int cmd_info(const std::string& ckpt, const std::vector<std::string>& overrides) {
  if (!ckpt.empty()) {
    auto model = bsm::load_model<double>(ckpt);
    std::cout << model.config().to_text() << "parameters = " << model.parameter_count() << '\n';
    return kOk;
  }
  const bsm::TrainConfig config = bsm::TrainConfig{}.with_overrides(overrides);
  bsm::BsmambaModel<double> model(config.model, config.seed);
  std::cout << config.to_text() << "parameters = " << model.parameter_count() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-light image enhancement with hierarchy-sorted selective scans"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a paired dataset");
  train->add_option("--config", ta.config, "key = value config file");
  train->add_option("--data", ta.data, "Dataset root with low/ and high/")->required();
  train->add_option("--out", ta.out, "Checkpoint path")->required();
  train->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
  train->add_option("--composition", ta.composition, "Block composition mode");
  train->add_option("--scorer", ta.scorer, "Brightness scorer: luma, histogram or external");
  train->add_option("--iterations", ta.iterations, "Number of iterations");
  train->add_option("--seed", ta.seed, "Random seed");
  train->add_option("--log", ta.log, "Also write the log lines to this file");

  std::string ckpt, in, out, data, csv, scorer = "luma";
  bool dump = false, identity = false;
  auto* enhance = app.add_subcommand("enhance", "Enhance a PNG or a directory of PNGs");
  enhance->add_option("--ckpt", ckpt, "Checkpoint")->required();
  enhance->add_option("--in", in, "Input PNG or directory")->required();
  enhance->add_option("--out", out, "Output directory")->required();
  enhance->add_flag("--dump-maps", dump, "Also write score maps and scan orders");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a paired dataset");
  eval->add_option("--ckpt", ckpt, "Checkpoint");
  eval->add_option("--data", data, "Dataset root")->required();
  eval->add_option("--csv", csv, "Write per-image metrics as CSV");
  eval->add_flag("--identity", identity, "Score the low images themselves (no model)");

  auto* score = app.add_subcommand("score", "Write a brightness score map as 16-bit PGM");
  score->add_option("--in", in, "Input PNG")->required();
  score->add_option("--scorer", scorer, "luma or histogram");
  score->add_option("--out", out, "Output PGM")->required();

  auto* selftest = app.add_subcommand("selftest", "Run the built-in oracle and gradient checks");

  auto* validate = app.add_subcommand("validate-masks", "Check mask sidecars of a PNG or directory");
  validate->add_option("--in", in, "Image or directory")->required();

  std::vector<std::string> info_overrides;
  auto* info = app.add_subcommand("info", "Print an architecture and its parameter count");
  info->add_option("--ckpt", ckpt, "Checkpoint (default: built-in config)");
  info->add_option("--set", info_overrides, "Config override key=value (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*enhance) return cmd_enhance(ckpt, in, out, dump);
    if (*eval) {
      if (!identity && ckpt.empty()) throw bsm::ConfigError("eval needs --ckpt or --identity");
      return cmd_eval(ckpt, data, csv, identity);
    }
    if (*score) return cmd_score(in, scorer, out);
    if (*selftest) return cmd_selftest();
    if (*validate) return cmd_validate_masks(in);
    if (*info) return cmd_info(ckpt, info_overrides);
  } catch (const bsm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const bsm::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const bsm::DomainError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const bsm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

// SPDX-License-Identifier: Apache-2.0
// attrprompt: train, evaluate and inspect attribute-prompt models.
#include "attrprompt/config.hpp"
#include "attrprompt/image_io.hpp"
#include "attrprompt/inference.hpp"
#include "attrprompt/metrics.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <random>
#include <set>

using namespace attrprompt;
namespace fs = std::filesystem;

namespace {

struct Loaded {
  LoadedCheckpoint ckpt;
  Model model;
  ImageOptions options;
};

Loaded open_checkpoint(const fs::path& path) {
  auto ckpt = load_checkpoint(path);
  Model model = model_from_checkpoint(ckpt);
  const ImageOptions options = image_options_from_checkpoint(ckpt);
  return {std::move(ckpt), std::move(model), options};
}

Image preprocess(const fs::path& path, const ImageOptions& o) {
  return normalize(resize_bilinear(load_image(path), o.height, o.width), o.normalization);
}

json report_json(const MetricReport& r, const AttributeSchema& schema) {
  json per = json::array();
  for (std::size_t j = 0; j < r.per_attribute.size(); ++j) {
    const auto& a = r.per_attribute[j];
    per.push_back({{"attribute", schema.name(j)},
                   {"positives", a.positives},
                   {"negatives", a.negatives},
                   {"tpr", a.tpr},
                   {"tnr", a.tnr},
                   {"skipped", a.skipped}});
  }
  json skipped = json::array();
  for (auto j : r.skipped_attributes) skipped.push_back(schema.name(j));
  return {{"mA", r.mA},
          {"accuracy", r.instance.accuracy},
          {"precision", r.instance.precision},
          {"recall", r.instance.recall},
          {"f1", r.instance.f1},
          {"skipped_attributes", skipped},
          {"per_attribute", per}};
}

MetricReport score(const Predictor& predictor, const std::vector<LabeledSample>& samples) {
  BinaryMatrix preds, labels;
  for (const auto& rec : predictor.predict(samples)) preds.push_back(rec.binary);
  for (const auto& s : samples) labels.push_back(s.labels);
  return evaluate(preds, labels);
}

int run_train(const fs::path& config_path, const fs::path& output) {
  RunConfig config = load_run_config(config_path);
  if (!output.empty()) config.output = output;
  if (config.output.empty()) throw std::invalid_argument("train: set `output` in the config or pass --output");
  const auto data = prepare_data(config);
  std::cerr << "train " << data.train.size() << ", val " << data.val.size() << ", test " << data.test.size()
            << " samples, " << data.schema.size() << " attributes\n";
  auto on_epoch = [](const EpochRecord& r) { std::cerr << r.to_json().dump() << "\n"; };
  const auto trained = train_from_config(config, data, on_epoch);
  json summary = {{"checkpoint", (config.output / "final.apa").string()}, {"steps", trained.result.steps}};
  const Predictor predictor(trained.model, trained.store, HeadSource::Ffn, config.train.threshold);
  if (!data.val.empty()) summary["val"] = report_json(score(predictor, data.val), data.schema);
  if (!data.test.empty()) summary["test"] = report_json(score(predictor, data.test), data.schema);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_eval(const fs::path& checkpoint, const fs::path& annotations, const std::string& head, double threshold,
             const std::string& split) {
  const auto l = open_checkpoint(checkpoint);
  const auto [schema, samples] = load_annotations(annotations, parse_split(split), l.options);
  if (!(schema == l.model.schema())) throw std::invalid_argument("annotation schema differs from the checkpoint's");
  if (samples.empty()) throw std::invalid_argument("no samples in split '" + split + "'");
  const Predictor predictor(l.model, l.ckpt.store, parse_head_source(head), threshold);
  json out = report_json(score(predictor, samples), schema);
  out["head"] = head;
  out["samples"] = samples.size();
  std::cout << out.dump(2) << "\n";
  return 0;
}

int run_infer(const fs::path& checkpoint, const fs::path& images, const fs::path& out_path, const std::string& head,
              double threshold) {
  const auto l = open_checkpoint(checkpoint);
  const Predictor predictor(l.model, l.ckpt.store, parse_head_source(head), threshold);
  static const std::set<std::string> kExtensions = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff"};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && kExtensions.count(ext)) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write '" + out_path.string() + "'");
  for (const auto& f : files) out << predictor.predict(preprocess(f, l.options), f.filename().string()).to_json().dump() << "\n";
  std::cerr << files.size() << " predictions written to " << out_path << "\n";
  return 0;
}

int run_cam(const fs::path& checkpoint, const fs::path& image, const std::string& attribute, const fs::path& out,
            const std::string& method) {
  const auto l = open_checkpoint(checkpoint);
  const auto cam = emit_cam(l.model, l.ckpt.store, preprocess(image, l.options), attribute, l.options.normalization,
                            out, parse_cam_method(method));
  std::cout << json{{"out", out.string()}, {"argmax_row", cam.argmax_row}, {"argmax_col", cam.argmax_col}}.dump()
            << "\n";
  return 0;
}

int run_bench(const fs::path& checkpoint, int batch, int repeats) {
  if (batch < 1) throw std::invalid_argument("bench: --batch must be positive");
  const auto l = open_checkpoint(checkpoint);
  std::mt19937_64 rng(0);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<Image> images(batch, Image(l.options.height, l.options.width));
  for (auto& img : images) {
    for (auto& p : img.pixels) p = d(rng);
  }
  std::cout << latency_bench(l.model, l.ckpt.store, images, repeats).to_json().dump(2) << "\n";
  return 0;
}

int run_synth(int attributes, int samples, std::uint64_t seed, int size, const fs::path& out) {
  SyntheticSpec spec;
  spec.attributes = attributes;
  spec.samples = samples;
  spec.seed = seed;
  spec.height = spec.width = size;
  const auto path = write_synthetic_dataset(out, generate_synthetic_dataset(spec));
  std::cout << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-prompt pedestrian attribute recognition"};
  app.require_subcommand(1);

  fs::path config, output, checkpoint, annotations, images, image, out;
  std::string head = "ffn", attribute, method = "rollout", split = "test";
  double threshold = 0.5;
  int batch = 8, repeats = 20, attributes = 5, samples = 512, size = 32;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "Train from a YAML run config");
  train->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);
  train->add_option("--output", output, "Override the config's output directory");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on an annotation file");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--annotations", annotations)->required()->check(CLI::ExistingFile);
  eval->add_option("--head", head, "ffn or align")->check(CLI::IsMember({"ffn", "align"}));
  eval->add_option("--threshold", threshold);
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* infer = app.add_subcommand("infer", "Predict every image in a directory");
  infer->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  infer->add_option("--images", images)->required()->check(CLI::ExistingDirectory);
  infer->add_option("--out", out, "Line-delimited JSON output")->required();
  infer->add_option("--head", head, "ffn or align")->check(CLI::IsMember({"ffn", "align"}));
  infer->add_option("--threshold", threshold);

  auto* cam = app.add_subcommand("cam", "Write an attribute heatmap overlay");
  cam->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  cam->add_option("--image", image)->required()->check(CLI::ExistingFile);
  cam->add_option("--attribute", attribute)->required();
  cam->add_option("--out", out)->required();
  cam->add_option("--method", method, "rollout or gradient")->check(CLI::IsMember({"rollout", "gradient"}));

  auto* bench = app.add_subcommand("bench", "Compare text-free and text-forward latency");
  bench->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  bench->add_option("--batch", batch);
  bench->add_option("--repeats", repeats);

  auto* synth = app.add_subcommand("synth", "Render a synthetic cue dataset");
  synth->add_option("--A", attributes, "Attributes");
  synth->add_option("--N", samples, "Samples");
  synth->add_option("--seed", seed);
  synth->add_option("--size", size, "Image height and width");
  synth->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(config, output);
    if (*eval) return run_eval(checkpoint, annotations, head, threshold, split);
    if (*infer) return run_infer(checkpoint, images, out, head, threshold);
    if (*cam) return run_cam(checkpoint, image, attribute, out, method);
    if (*bench) return run_bench(checkpoint, batch, repeats);
    if (*synth) return run_synth(attributes, samples, seed, size, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

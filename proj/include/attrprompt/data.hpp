// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attrprompt {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered attribute names. Position j of a name is its slot in every label
/// vector, weight vector and prompt bank.
class AttributeSchema {
 public:
  AttributeSchema() = default;
  explicit AttributeSchema(std::vector<std::string> names);

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t j) const { return names_.at(j); }
  std::optional<std::size_t> index_of(std::string_view name) const;

  bool operator==(const AttributeSchema&) const = default;

 private:
  std::vector<std::string> names_;
};

/// HxWx3 image, channel-interleaved, row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), pixels(std::size_t(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

/// Per-channel (x - mean) / std applied to [0,1] RGB.
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};

  static Normalization identity() { return {}; }
  static Normalization symmetric() { return {{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}}; }
  static Normalization clip() {
    return {{0.48145466, 0.4578275, 0.40821073}, {0.26862954, 0.26130258, 0.27577711}};
  }
  bool operator==(const Normalization&) const = default;
};

Image normalize(const Image& raw, const Normalization& norm);
Image denormalize(const Image& normed, const Normalization& norm);

struct LabeledSample {
  std::string id;
  Image image;  // preprocessed: resized and normalized
  std::vector<std::uint8_t> labels;
};

enum class Split { Train, Val, Test };
Split parse_split(std::string_view tag);
std::string_view to_string(Split split);

struct AnnotationEntry {
  std::string image_relpath;
  Split split = Split::Train;
  std::vector<std::uint8_t> labels;
};

struct AnnotationFile {
  AttributeSchema schema;
  std::vector<AnnotationEntry> entries;
};

/// Parses the tab-separated annotation format:
///   #attributes<TAB>name1<TAB>...<TAB>nameA
///   image_relpath<TAB>split<TAB>b1 b2 ... bA
/// Blank lines are ignored.
AnnotationFile parse_annotations(std::istream& in, const std::string& source = "<stream>");
AnnotationFile read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const AnnotationFile& file);

struct ImageOptions {
  int height = 256;
  int width = 192;
  Normalization normalization = Normalization::clip();
};

/// Reads the annotation file, keeps entries of `split` in file order and
/// loads their images (relative to the file's directory), resized and
/// normalized per `options`.
std::pair<AttributeSchema, std::vector<LabeledSample>> load_annotations(
    const std::filesystem::path& path, Split split, const ImageOptions& options = {});

enum class WeightScheme { Exponential, Uniform };

/// Class-imbalance weights. With the exponential scheme, a positive label on
/// attribute j weighs exp(1 - r_j) and a negative label exp(r_j), r_j being
/// the training positive ratio.
struct ImbalanceWeights {
  std::vector<double> positive_ratio;
  std::vector<double> positive_weight;
  std::vector<double> negative_weight;

  std::size_t size() const { return positive_ratio.size(); }
  double weight(std::size_t j, std::uint8_t label) const {
    return label ? positive_weight.at(j) : negative_weight.at(j);
  }
  static ImbalanceWeights uniform(std::size_t attributes);
};

ImbalanceWeights compute_imbalance_weights(const std::vector<LabeledSample>& samples,
                                           const AttributeSchema& schema,
                                           WeightScheme scheme = WeightScheme::Exponential);

// Synthetic desk-scale data.

struct SyntheticSpec {
  int attributes = 5;
  int samples = 512;
  int height = 32;
  int width = 32;
  int cue_size = 6;
  std::uint64_t seed = 0;
  double min_positive_rate = 0.25;
  double max_positive_rate = 0.6;
  double train_fraction = 0.75;
  double val_fraction = 0.125;
  Normalization normalization = Normalization::symmetric();
};

struct CueBox {
  int y = 0;
  int x = 0;
  int size = 0;
  bool contains(int py, int px) const { return py >= y && py < y + size && px >= x && px < x + size; }
  bool intersects(int y0, int x0, int h, int w) const {
    return y < y0 + h && y0 < y + size && x < x0 + w && x0 < x + size;
  }
};

struct SyntheticSample {
  LabeledSample sample;
  Split split = Split::Train;
  std::vector<std::optional<CueBox>> cues;  // one slot per attribute
};

struct SyntheticDataset {
  SyntheticSpec spec;
  AttributeSchema schema;
  std::vector<SyntheticSample> items;

  std::vector<LabeledSample> split(Split s) const;
  std::vector<std::array<double, 3>> colors() const;
};

/// RGB colour of attribute j's cue for an A-attribute dataset.
std::array<double, 3> cue_color(int attribute, int attributes);

/// Renders attribute j, when present, as a solid square of its own colour at
/// a random position over a low-contrast noisy background. Cues never overlap.
SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Writes `images/<id>.png` and `annotations.txt` under `dir`.
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir,
                                              const SyntheticDataset& data);

}  // namespace attrprompt

// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/data.hpp"

#include "attrprompt/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace attrprompt {

namespace {

std::vector<std::string> split_on(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view rstrip_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

constexpr int kMaxCueColors = 12;

}  // namespace

AttributeSchema::AttributeSchema(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw DataError("attribute schema needs at least one attribute");
  std::set<std::string_view> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw DataError("attribute names must be non-empty");
    if (!seen.insert(n).second) throw DataError("duplicate attribute name '" + n + "'");
  }
}

std::optional<std::size_t> AttributeSchema::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin());
}

Image normalize(const Image& raw, const Normalization& norm) {
  Image out = raw;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const auto c = i % 3;
    out.pixels[i] = (raw.pixels[i] - norm.mean[c]) / norm.std[c];
  }
  return out;
}

Image denormalize(const Image& normed, const Normalization& norm) {
  Image out = normed;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const auto c = i % 3;
    out.pixels[i] = normed.pixels[i] * norm.std[c] + norm.mean[c];
  }
  return out;
}

Split parse_split(std::string_view tag) {
  if (tag == "train") return Split::Train;
  if (tag == "val") return Split::Val;
  if (tag == "test") return Split::Test;
  throw DataError("unknown split tag '" + std::string(tag) + "' (expected train, val or test)");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

AnnotationFile parse_annotations(std::istream& in, const std::string& source) {
  AnnotationFile file;
  std::string raw;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = rstrip_cr(raw);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(line_no);
    if (!have_header) {
      auto fields = split_on(line, '\t');
      if (fields.front() != "#attributes" || fields.size() < 2) {
        throw DataError(where + ": expected '#attributes<TAB>name...' header");
      }
      fields.erase(fields.begin());
      try {
        file.schema = AttributeSchema(std::move(fields));
      } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
      }
      have_header = true;
      continue;
    }
    const auto fields = split_on(line, '\t');
    if (fields.size() != 3 || fields[0].empty()) {
      throw DataError(where + ": malformed line, expected image<TAB>split<TAB>labels");
    }
    AnnotationEntry entry;
    entry.image_relpath = fields[0];
    try {
      entry.split = parse_split(fields[1]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    std::istringstream bits(fields[2]);
    std::string tok;
    while (bits >> tok) {
      if (tok != "0" && tok != "1") throw DataError(where + ": malformed label '" + tok + "' (expected 0 or 1)");
      entry.labels.push_back(tok == "1" ? 1 : 0);
    }
    if (entry.labels.size() != file.schema.size()) {
      throw DataError(where + ": sample '" + entry.image_relpath + "' has " +
                      std::to_string(entry.labels.size()) + " labels, schema has " +
                      std::to_string(file.schema.size()));
    }
    file.entries.push_back(std::move(entry));
  }
  if (!have_header) throw DataError(source + ": missing '#attributes' header");
  return file;
}

AnnotationFile read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file '" + path.string() + "'");
  return parse_annotations(in, path.string());
}

void write_annotations(const std::filesystem::path& path, const AnnotationFile& file) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write annotation file '" + path.string() + "'");
  out << "#attributes";
  for (const auto& n : file.schema.names()) out << '\t' << n;
  out << '\n';
  for (const auto& e : file.entries) {
    if (e.labels.size() != file.schema.size()) {
      throw DataError("sample '" + e.image_relpath + "' label length does not match schema");
    }
    out << e.image_relpath << '\t' << to_string(e.split) << '\t';
    for (std::size_t j = 0; j < e.labels.size(); ++j) out << (j ? " " : "") << int(e.labels[j]);
    out << '\n';
  }
}

std::pair<AttributeSchema, std::vector<LabeledSample>> load_annotations(
    const std::filesystem::path& path, Split split, const ImageOptions& options) {
  const auto file = read_annotations(path);
  const auto root = path.parent_path();
  std::vector<LabeledSample> samples;
  for (const auto& e : file.entries) {
    if (e.split != split) continue;
    LabeledSample s;
    s.id = e.image_relpath;
    s.labels = e.labels;
    auto raw = load_image(root / e.image_relpath);
    s.image = normalize(resize_bilinear(raw, options.height, options.width), options.normalization);
    samples.push_back(std::move(s));
  }
  return {file.schema, std::move(samples)};
}

ImbalanceWeights ImbalanceWeights::uniform(std::size_t attributes) {
  ImbalanceWeights w;
  w.positive_ratio.assign(attributes, 0.5);
  w.positive_weight.assign(attributes, 1.0);
  w.negative_weight.assign(attributes, 1.0);
  return w;
}

ImbalanceWeights compute_imbalance_weights(const std::vector<LabeledSample>& samples,
                                           const AttributeSchema& schema, WeightScheme scheme) {
  if (samples.empty()) throw DataError("imbalance weights need at least one training sample");
  const auto a = schema.size();
  std::vector<double> positives(a, 0.0);
  for (const auto& s : samples) {
    if (s.labels.size() != a) throw DataError("sample '" + s.id + "' label length does not match schema");
    for (std::size_t j = 0; j < a; ++j) positives[j] += s.labels[j];
  }
  ImbalanceWeights w = ImbalanceWeights::uniform(a);
  for (std::size_t j = 0; j < a; ++j) {
    const double r = positives[j] / static_cast<double>(samples.size());
    w.positive_ratio[j] = r;
    if (scheme == WeightScheme::Exponential) {
      w.positive_weight[j] = std::exp(1.0 - r);
      w.negative_weight[j] = std::exp(r);
    }
  }
  return w;
}

std::vector<LabeledSample> SyntheticDataset::split(Split s) const {
  std::vector<LabeledSample> out;
  for (const auto& item : items) {
    if (item.split == s) out.push_back(item.sample);
  }
  return out;
}

std::vector<std::array<double, 3>> SyntheticDataset::colors() const {
  std::vector<std::array<double, 3>> out;
  for (int j = 0; j < spec.attributes; ++j) out.push_back(cue_color(j, spec.attributes));
  return out;
}

std::array<double, 3> cue_color(int attribute, int attributes) {
  // Evenly spaced fully saturated hues.
  const double h = 6.0 * attribute / attributes;
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.attributes < 1) throw DataError("synthetic dataset needs at least one attribute");
  if (spec.samples < 1) throw DataError("synthetic dataset needs at least one sample");
  if (spec.attributes > kMaxCueColors) {
    throw DataError("at most " + std::to_string(kMaxCueColors) + " attributes have distinct cue colours");
  }
  if (spec.cue_size < 1) throw DataError("cue size must be positive");
  const int cell = spec.cue_size + 1;
  const int grid_rows = spec.height / cell;
  const int grid_cols = spec.width / cell;
  if (grid_rows * grid_cols < spec.attributes) {
    throw DataError("image " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                    " is too small to place " + std::to_string(spec.attributes) + " distinct " +
                    std::to_string(spec.cue_size) + "px cues");
  }

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SyntheticDataset data;
  data.spec = spec;
  std::vector<std::string> names;
  for (int j = 0; j < spec.attributes; ++j) names.push_back("attr" + std::to_string(j));
  data.schema = AttributeSchema(std::move(names));

  std::vector<double> rates(spec.attributes);
  for (auto& r : rates) r = spec.min_positive_rate + (spec.max_positive_rate - spec.min_positive_rate) * unit(rng);

  const int n_train = std::max(1, static_cast<int>(std::lround(spec.samples * spec.train_fraction)));
  const int n_val = std::min(spec.samples - n_train, static_cast<int>(std::lround(spec.samples * spec.val_fraction)));

  std::uniform_int_distribution<int> pos_y(0, spec.height - spec.cue_size);
  std::uniform_int_distribution<int> pos_x(0, spec.width - spec.cue_size);

  for (int i = 0; i < spec.samples; ++i) {
    SyntheticSample item;
    std::ostringstream id;
    id << "synth_" << std::setw(5) << std::setfill('0') << i;
    item.sample.id = id.str();
    item.split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    item.sample.labels.resize(spec.attributes);
    item.cues.resize(spec.attributes);

    Image raw(spec.height, spec.width);
    for (auto& p : raw.pixels) p = 0.1 + 0.1 * unit(rng);

    std::vector<CueBox> placed;
    const auto free_at = [&](int y, int x) {
      // One pixel of clearance keeps neighbouring cues separable.
      for (const auto& b : placed) {
        if (b.intersects(y - 1, x - 1, spec.cue_size + 2, spec.cue_size + 2)) return false;
      }
      return true;
    };
    for (int j = 0; j < spec.attributes; ++j) {
      const bool present = unit(rng) < rates[j];
      item.sample.labels[j] = present ? 1 : 0;
      if (!present) continue;
      std::optional<CueBox> box;
      for (int attempt = 0; attempt < 200 && !box; ++attempt) {
        const int y = pos_y(rng);
        const int x = pos_x(rng);
        if (free_at(y, x)) box = CueBox{y, x, spec.cue_size};
      }
      if (!box) {
        // Crowded image: fall back to the first free grid cell.
        for (int r = 0; r < grid_rows && !box; ++r) {
          for (int c = 0; c < grid_cols && !box; ++c) {
            if (free_at(r * cell, c * cell)) box = CueBox{r * cell, c * cell, spec.cue_size};
          }
        }
      }
      if (!box) throw DataError("could not place cue for attribute " + std::to_string(j));
      placed.push_back(*box);
      item.cues[j] = box;
      const auto color = cue_color(j, spec.attributes);
      for (int y = box->y; y < box->y + box->size; ++y) {
        for (int x = box->x; x < box->x + box->size; ++x) {
          for (int c = 0; c < 3; ++c) raw.at(y, x, c) = color[c];
        }
      }
    }
    item.sample.image = normalize(raw, spec.normalization);
    data.items.push_back(std::move(item));
  }
  return data;
}

std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDataset& data) {
  std::filesystem::create_directories(dir / "images");
  AnnotationFile file;
  file.schema = data.schema;
  for (const auto& item : data.items) {
    const std::string rel = "images/" + item.sample.id + ".png";
    save_image(dir / rel, denormalize(item.sample.image, data.spec.normalization));
    file.entries.push_back({rel, item.split, item.sample.labels});
  }
  const auto path = dir / "annotations.txt";
  write_annotations(path, file);
  return path;
}

}  // namespace attrprompt

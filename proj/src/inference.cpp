// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/inference.hpp"

#include "attrprompt/image_io.hpp"
#include "attrprompt/losses.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace attrprompt {

namespace {

double median(std::vector<double> xs) {
  const auto mid = xs.begin() + static_cast<std::ptrdiff_t>(xs.size() / 2);
  std::nth_element(xs.begin(), mid, xs.end());
  if (xs.size() % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(xs.begin(), mid));
}

template <typename F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

HeadSource parse_head_source(const std::string& name) {
  if (name == "ffn") return HeadSource::Ffn;
  if (name == "align" || name == "alignment") return HeadSource::Alignment;
  throw std::invalid_argument("unknown head '" + name + "' (expected ffn or align)");
}

std::string to_string(HeadSource source) { return source == HeadSource::Ffn ? "ffn" : "align"; }

nlohmann::json PredictionRecord::to_json() const {
  std::vector<int> b(binary.begin(), binary.end());
  return {{"id", id}, {"probabilities", probabilities}, {"binary", b}, {"source", to_string(source)}};
}

Predictor::Predictor(const Model& model, const ParameterStore& store, HeadSource source, double threshold)
    : model_(model), store_(store), source_(source), threshold_(threshold) {
  if (!(threshold_ > 0.0 && threshold_ < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  if (source_ == HeadSource::Alignment) {
    if (!model_.has_text_parameters(store_)) {
      throw std::invalid_argument("alignment head requested but the checkpoint has no text-branch parameters");
    }
    ad::NoGradGuard guard;
    text_features_ = model_.text_features(store_).value();
    tau_ = model_.temperature(store_);
  }
}

PredictionRecord Predictor::predict(const Image& image, const std::string& id) const {
  ad::NoGradGuard guard;
  PredictionRecord rec;
  rec.id = id;
  rec.source = source_;
  ad::Var tokens = model_.attribute_tokens(store_, image);
  if (source_ == HeadSource::Ffn) {
    const Matrix logits = model_.logits(store_, tokens).value();
    for (Eigen::Index j = 0; j < logits.rows(); ++j) rec.probabilities.push_back(1.0 / (1.0 + std::exp(-logits(j, 0))));
  } else {
    const Matrix f_v = model_.visual_features(store_, tokens).value();
    rec.probabilities = aligned_similarity(f_v, text_features_, tau_).y_hat_vt;
  }
  for (double p : rec.probabilities) rec.binary.push_back(p >= threshold_ ? 1 : 0);
  return rec;
}

std::vector<PredictionRecord> Predictor::predict(const std::vector<LabeledSample>& samples) const {
  std::vector<PredictionRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(predict(s.image, s.id));
  return out;
}

std::vector<double> attention_rollout(const std::vector<std::vector<Matrix>>& attention, Eigen::Index query,
                                      Eigen::Index first, Eigen::Index count) {
  if (attention.empty() || attention.front().empty()) throw std::invalid_argument("rollout: no attention maps");
  const Eigen::Index t = attention.front().front().rows();
  if (query < 0 || query >= t || first < 0 || first + count > t) throw std::out_of_range("rollout: index range");
  Matrix rollout = Matrix::Identity(t, t);
  for (const auto& heads : attention) {
    Matrix mean = Matrix::Zero(t, t);
    for (const auto& h : heads) mean += h;
    mean /= static_cast<double>(heads.size());
    Matrix mixed = 0.5 * mean + 0.5 * Matrix::Identity(t, t);
    const Eigen::VectorXd sums = mixed.rowwise().sum();
    for (Eigen::Index i = 0; i < t; ++i) mixed.row(i) /= sums(i);
    rollout = mixed * rollout;
  }
  std::vector<double> out(static_cast<std::size_t>(count));
  for (Eigen::Index k = 0; k < count; ++k) out[static_cast<std::size_t>(k)] = rollout(query, first + k);
  return out;
}

CamMethod parse_cam_method(const std::string& name) {
  if (name == "rollout") return CamMethod::Rollout;
  if (name == "gradient") return CamMethod::Gradient;
  throw std::invalid_argument("unknown CAM method '" + name + "' (rollout, gradient)");
}

namespace {

std::vector<double> gradient_relevance(const Model& model, const ParameterStore& store, const Image& image,
                                       std::size_t j) {
  ad::ConstantParametersGuard constant_parameters;
  const Matrix pixels = model.vision().patchify(image);
  const ad::Var input = ad::leaf(pixels, true);
  const ad::Var logits = model.logits(store, model.attribute_tokens(store, input));
  ad::backward(ad::slice_rows(logits, static_cast<Eigen::Index>(j), 1));
  std::vector<double> rel(static_cast<std::size_t>(pixels.rows()), 0.0);
  if (input.grad().size() == 0) return rel;
  for (Eigen::Index i = 0; i < pixels.rows(); ++i) {
    rel[i] = std::max(0.0, pixels.row(i).dot(input.grad().row(i)));
  }
  return rel;
}

}  // namespace

CamResult compute_cam(const Model& model, const ParameterStore& store, const Image& image,
                      const std::string& attribute, CamMethod method) {
  const auto j = model.schema().index_of(attribute);
  if (!j) {
    std::string names;
    for (const auto& n : model.schema().names()) names += (names.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown attribute '" + attribute + "'; schema: [" + names + "]");
  }
  const auto& vc = model.config().visual;
  std::vector<double> rel;
  if (method == CamMethod::Gradient) {
    rel = gradient_relevance(model, store, image, *j);
  } else {
    std::vector<std::vector<Matrix>> attention;
    {
      ad::NoGradGuard guard;
      model.attribute_tokens(store, image, &attention);
    }
    rel = attention_rollout(attention, model.prompt_position(*j), 1, vc.patch_count());
  }

  CamResult out;
  out.patch_relevance.resize(vc.grid_rows(), vc.grid_cols());
  for (int i = 0; i < vc.patch_count(); ++i) out.patch_relevance(i / vc.grid_cols(), i % vc.grid_cols()) = rel[i];
  Eigen::Index r = 0, c = 0;
  out.patch_relevance.maxCoeff(&r, &c);
  out.argmax_row = static_cast<int>(r);
  out.argmax_col = static_cast<int>(c);

  cv::Mat grid(vc.grid_rows(), vc.grid_cols(), CV_64F, out.patch_relevance.data());
  cv::Mat up;
  cv::resize(grid, up, cv::Size(image.width, image.height), 0, 0, cv::INTER_LINEAR);
  out.heatmap.resize(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) out.heatmap(y, x) = up.at<double>(y, x);
  }
  return out;
}

void write_cam_overlay(const std::filesystem::path& path, const Image& display, const Matrix& heatmap,
                       double opacity) {
  if (heatmap.rows() != display.height || heatmap.cols() != display.width) {
    throw std::invalid_argument("heatmap size does not match the image");
  }
  const double lo = heatmap.minCoeff();
  const double span = heatmap.maxCoeff() - lo;
  cv::Mat gray(display.height, display.width, CV_8U);
  for (int y = 0; y < display.height; ++y) {
    for (int x = 0; x < display.width; ++x) {
      const double v = span > 0.0 ? (heatmap(y, x) - lo) / span : 0.5;
      gray.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  }
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_JET);  // BGR, red = high
  Image out(display.height, display.width);
  for (int y = 0; y < display.height; ++y) {
    for (int x = 0; x < display.width; ++x) {
      const auto bgr = colored.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        const double heat = bgr[2 - c] / 255.0;
        out.at(y, x, c) = (1.0 - opacity) * std::clamp(display.at(y, x, c), 0.0, 1.0) + opacity * heat;
      }
    }
  }
  save_image(path, out);
}

CamResult emit_cam(const Model& model, const ParameterStore& store, const Image& image, const std::string& attribute,
                   const Normalization& normalization, const std::filesystem::path& out, CamMethod method) {
  CamResult cam = compute_cam(model, store, image, attribute, method);
  write_cam_overlay(out, denormalize(image, normalization), cam.heatmap);
  return cam;
}

nlohmann::json LatencyReport::to_json() const {
  return {{"batch", batch},
          {"repeats", repeats},
          {"ffn_ms_per_image", ffn_ms_per_image},
          {"with_text_ms_per_image", with_text_ms_per_image},
          {"ratio", ratio}};
}

LatencyReport latency_bench(const Model& model, const ParameterStore& store, const std::vector<Image>& batch,
                            int repeats, int warmup) {
  if (repeats < 10) throw std::invalid_argument("latency_bench needs repeats >= 10");
  if (batch.empty()) throw std::invalid_argument("latency_bench needs a non-empty batch");
  if (!model.has_text_parameters(store)) {
    throw std::invalid_argument("latency_bench needs text-branch parameters for the comparison path");
  }
  ad::NoGradGuard guard;
  const double tau = model.temperature(store);
  double sink = 0.0;
  auto ffn = [&] {
    for (const auto& img : batch) sink += model.logits(store, model.attribute_tokens(store, img)).value()(0, 0);
  };
  auto with_text = [&] {
    for (const auto& img : batch) {
      const Matrix f_t = model.text_features(store).value();
      const Matrix f_v = model.visual_features(store, model.attribute_tokens(store, img)).value();
      sink += aligned_similarity(f_v, f_t, tau).y_hat_vt.front();
    }
  };
  for (int i = 0; i < warmup; ++i) {
    ffn();
    with_text();
  }
  std::vector<double> a, b;
  for (int i = 0; i < repeats; ++i) {
    a.push_back(time_ms(ffn));
    b.push_back(time_ms(with_text));
  }
  if (!std::isfinite(sink)) throw std::runtime_error("latency_bench: non-finite outputs");
  LatencyReport r;
  r.batch = static_cast<int>(batch.size());
  r.repeats = repeats;
  r.ffn_ms_per_image = median(a) / static_cast<double>(batch.size());
  r.with_text_ms_per_image = median(b) / static_cast<double>(batch.size());
  r.ratio = r.ffn_ms_per_image / r.with_text_ms_per_image;
  return r;
}

}  // namespace attrprompt

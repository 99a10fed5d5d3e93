// SPDX-License-Identifier: Apache-2.0
#include "bdkit/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "bdkit/core/error.hpp"
#include "bdkit/core/registry.hpp"
#include "bdkit/core/seed.hpp"

namespace bdkit::data {

namespace fs = std::filesystem;

std::span<const double> LabeledDataset::image_view(std::size_t i) const {
  const std::size_t n = image_size();
  return {images.data() + i * n, n};
}

nn::Tensor LabeledDataset::image(std::size_t i) const {
  const auto v = image_view(i);
  return nn::Tensor({channels(), height(), width()}, std::vector<double>(v.begin(), v.end()));
}

nn::Tensor LabeledDataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = image_size();
  nn::Tensor out({indices.size(), channels(), height(), width()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(images.data() + indices[k] * n, n, out.data() + k * n);
  }
  return out;
}

std::vector<int> LabeledDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.name = name;
  out.split = split;
  out.num_classes = num_classes;
  out.images = batch(indices);
  out.labels = batch_labels(indices);
  return out;
}

std::vector<std::size_t> LabeledDataset::indices_of_class(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(i);
  }
  return out;
}

LabeledDataset make_dataset(std::string name, Split split, int num_classes, const std::vector<nn::Tensor>& images,
                            std::vector<int> labels) {
  if (images.size() != labels.size()) throw DatasetError("image/label count mismatch");
  LabeledDataset ds;
  ds.name = std::move(name);
  ds.split = split;
  ds.num_classes = num_classes;
  ds.labels = std::move(labels);
  if (images.empty()) {
    ds.images = nn::Tensor({0, 0, 0, 0});
    return ds;
  }
  const nn::Shape s = images.front().shape();
  if (s.size() != 3) throw GeometryError("images must be (C,H,W)");
  ds.images = nn::Tensor({images.size(), s[0], s[1], s[2]});
  const std::size_t n = nn::numel(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw GeometryError("all images must share one shape");
    std::copy_n(images[i].data(), n, ds.images.data() + i * n);
  }
  for (int y : ds.labels) {
    if (y < 0 || y >= num_classes) throw DatasetError("label " + std::to_string(y) + " outside [0," +
                                                      std::to_string(num_classes) + ")");
  }
  return ds;
}

nn::Tensor resize_bilinear(const nn::Tensor& image, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  nn::Tensor out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = image.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(ch * out_h + y) * out_w + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

LabeledDataset generate_synth_tiny(Split split, std::size_t count, std::uint64_t seed) {
  constexpr std::size_t kSize = 16, kChannels = 3;
  constexpr int kClasses = 3;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.03);

  LabeledDataset ds;
  ds.name = kSynthTiny;
  ds.split = split;
  ds.num_classes = kClasses;
  ds.images = nn::Tensor({count, kChannels, kSize, kSize});
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % kClasses);
    ds.labels[i] = label;
    double bg[kChannels], fg[kChannels];
    for (auto& v : bg) v = 0.05 + 0.25 * unit(rng);
    // Foreground is bright in at least one channel but never near-white.
    for (auto& v : fg) v = 0.2 + 0.6 * unit(rng);
    fg[static_cast<std::size_t>(unit(rng) * kChannels) % kChannels] = 0.9;
    const double cy = 5.5 + 5.0 * unit(rng);
    const double cx = 5.5 + 5.0 * unit(rng);
    const double r = 3.5 + 1.0 * unit(rng);
    double* img = ds.images.data() + i * kChannels * kSize * kSize;
    for (std::size_t y = 0; y < kSize; ++y) {
      for (std::size_t x = 0; x < kSize; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double rr = std::sqrt(dy * dy + dx * dx);
        bool inside = false;
        switch (label) {
          case 0: inside = std::abs(dy) <= r * 0.8 && std::abs(dx) <= r * 0.8; break;
          case 1: inside = (std::abs(dy) <= 1.0 && std::abs(dx) <= r) || (std::abs(dx) <= 1.0 && std::abs(dy) <= r); break;
          default: inside = rr <= r && rr >= r - 1.6; break;
        }
        for (std::size_t c = 0; c < kChannels; ++c) {
          const double v = (inside ? fg[c] : bg[c]) + noise(rng);
          img[(c * kSize + y) * kSize + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return ds;
}

namespace {

std::vector<unsigned char> read_blob(const fs::path& path, std::size_t expected, std::vector<std::string>& missing) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    missing.push_back(path.string());
    return {};
  }
  std::vector<unsigned char> bytes(expected);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
  if (static_cast<std::size_t>(in.gcount()) != expected || in.peek() != EOF) {
    throw DatasetError(path.string() + ": expected exactly " + std::to_string(expected) + " bytes");
  }
  return bytes;
}

std::string split_key(Split s) { return s == Split::TRAIN ? "train" : "test"; }

}  // namespace

LabeledDataset load_dataset(const std::string& name, Split split, const LoadOptions& options) {
  const DatasetInfo& info = dataset_info(name);
  if (name == kSynthTiny) {
    const std::size_t n = split == Split::TRAIN ? options.synth_train_size : options.synth_test_size;
    return generate_synth_tiny(split, n, derive_seed(0x5EED, std::string(kSynthTiny) + "/" + split_key(split)));
  }

  const fs::path dir = options.root / name;
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw DatasetError("missing dataset files: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(manifest_path.string() + ": " + e.what());
  }
  const std::string key = split_key(split);
  if (!manifest.contains("splits") || !manifest["splits"].contains(key)) {
    throw DatasetError(manifest_path.string() + ": no '" + key + "' split");
  }
  const auto h = manifest.at("height").get<std::size_t>();
  const auto w = manifest.at("width").get<std::size_t>();
  const auto c = manifest.at("channels").get<std::size_t>();
  const auto classes = manifest.at("num_classes").get<int>();
  const auto& sp = manifest["splits"][key];
  const auto count = sp.at("count").get<std::size_t>();
  if (h != info.height || w != info.width || c != info.channels || classes != info.num_classes) {
    throw DatasetError(manifest_path.string() + ": shape/classes differ from the canonical " + name + " layout");
  }
  const std::size_t canonical = split == Split::TRAIN ? info.train_count : info.test_count;
  if (count != canonical) {
    throw DatasetError(manifest_path.string() + ": " + key + " count " + std::to_string(count) + " != canonical " +
                       std::to_string(canonical));
  }

  std::vector<std::string> missing;
  const auto pixels = read_blob(dir / sp.at("images").get<std::string>(), count * h * w * c, missing);
  const auto labels = read_blob(dir / sp.at("labels").get<std::string>(), count, missing);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DatasetError("missing dataset files: " + list);
  }

  LabeledDataset ds;
  ds.name = name;
  ds.split = split;
  ds.num_classes = classes;
  const std::size_t oh = info.load_height, ow = info.load_width;
  ds.images = nn::Tensor({count, c, oh, ow});
  ds.labels.resize(count);
  nn::Tensor chw({c, h, w});
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* src = pixels.data() + i * h * w * c;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) chw[(ch * h + y) * w + x] = src[(y * w + x) * c + ch] / 255.0;
    const nn::Tensor img = (oh == h && ow == w) ? chw : resize_bilinear(chw, oh, ow);
    std::copy_n(img.data(), img.size(), ds.images.data() + i * img.size());
    ds.labels[i] = labels[i];
    if (ds.labels[i] >= classes) throw DatasetError(name + ": label out of range at index " + std::to_string(i));
  }
  return ds;
}

void write_split(const fs::path& dataset_dir, const LabeledDataset& ds) {
  fs::create_directories(dataset_dir);
  const fs::path manifest_path = dataset_dir / "manifest.json";
  nlohmann::json manifest;
  if (std::ifstream in(manifest_path); in) in >> manifest;
  const std::string key = split_key(ds.split);
  manifest["name"] = ds.name;
  manifest["channels"] = ds.channels();
  manifest["height"] = ds.height();
  manifest["width"] = ds.width();
  manifest["num_classes"] = ds.num_classes;
  manifest["format"] = "uint8 NHWC row-major images, uint8 labels";
  manifest["splits"][key] = {{"count", ds.size()}, {"images", key + "_images.u8"}, {"labels", key + "_labels.u8"}};

  const std::size_t c = ds.channels(), h = ds.height(), w = ds.width();
  std::vector<unsigned char> pixels(ds.size() * c * h * w);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto img = ds.image_view(i);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double v = std::clamp(img[(ch * h + y) * w + x], 0.0, 1.0);
          pixels[((i * h + y) * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
  }
  std::vector<unsigned char> labels(ds.labels.begin(), ds.labels.end());
  std::ofstream(dataset_dir / (key + "_images.u8"), std::ios::binary)
      .write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  std::ofstream(dataset_dir / (key + "_labels.u8"), std::ios::binary)
      .write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  std::ofstream(manifest_path) << manifest.dump(2) << "\n";
}

}  // namespace bdkit::data

// SPDX-License-Identifier: Apache-2.0
#include "bdkit/pretrain/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <openssl/evp.h>

#include "bdkit/core/error.hpp"
#include "bdkit/core/seed.hpp"
#include "bdkit/nn/ops.hpp"

namespace bdkit::pretrain {

namespace {

constexpr std::size_t kInputChannels = 3;
constexpr char kMagic[8] = {'B', 'D', 'K', 'E', 'N', 'C', '0', '1'};

struct Layout {
  std::vector<ParamGroup> groups;
  std::vector<std::size_t> bn_channels;
  std::vector<std::size_t> tap_channels;
};

struct LayoutBuilder {
  Layout out;
  void conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, bool bias) {
    out.groups.push_back({name + ".weight", {cout, cin, k, k}});
    if (bias) out.groups.push_back({name + ".bias", {cout}});
  }
  void bn(const std::string& name, std::size_t c) {
    out.groups.push_back({name + ".gamma", {c}});
    out.groups.push_back({name + ".beta", {c}});
    out.bn_channels.push_back(c);
  }
};

std::size_t block_expansion(const ArchSpec& a) { return a.family == ArchSpec::Family::RESNET_BOTTLENECK ? 4 : 1; }

// Parameter order here must match Encoder::run.
Layout make_layout(const ArchSpec& a) {
  LayoutBuilder b;
  if (a.family == ArchSpec::Family::TINY_CNN) {
    b.conv("conv1", a.widths[0], kInputChannels, 3, true);
    b.conv("conv2", a.widths[1], a.widths[0], 3, true);
    b.out.tap_channels = {a.widths[0], a.widths[1]};
    return b.out;
  }
  const std::size_t exp = block_expansion(a);
  b.conv("stem.conv", 64, kInputChannels, 3, false);
  b.bn("stem.bn", 64);
  std::size_t in = 64;
  for (std::size_t s = 0; s < a.widths.size(); ++s) {
    const std::size_t w = a.widths[s];
    for (std::size_t k = 0; k < a.blocks[s]; ++k) {
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(k);
      if (exp == 1) {
        b.conv(p + ".conv1", w, in, 3, false);
        b.bn(p + ".bn1", w);
        b.conv(p + ".conv2", w, w, 3, false);
        b.bn(p + ".bn2", w);
      } else {
        b.conv(p + ".conv1", w, in, 1, false);
        b.bn(p + ".bn1", w);
        b.conv(p + ".conv2", w, w, 3, false);
        b.bn(p + ".bn2", w);
        b.conv(p + ".conv3", w * exp, w, 1, false);
        b.bn(p + ".bn3", w * exp);
      }
      if (stride != 1 || in != w * exp) {
        b.conv(p + ".shortcut", w * exp, in, 1, false);
        b.bn(p + ".shortcut_bn", w * exp);
      }
      in = w * exp;
    }
    b.out.tap_channels.push_back(in);
  }
  return b.out;
}

// Walks parameters and BN buffers in layout order.
struct Cursor {
  const std::vector<nn::Var>& params;
  std::vector<nn::Tensor>& buffers;
  bool training;
  bool update_stats;
  std::size_t p = 0, q = 0;

  const nn::Var& next() { return params[p++]; }
  nn::Var conv(const nn::Var& x, std::size_t stride, std::size_t pad, bool bias = false) {
    const nn::Var& w = next();
    nn::Var b = bias ? next() : nn::Var();
    return nn::conv2d(x, w, b, stride, pad);
  }
  nn::Var bn(const nn::Var& x) {
    const nn::Var& gamma = next();
    const nn::Var& beta = next();
    nn::Tensor& mean = buffers[q++];
    nn::Tensor& var = buffers[q++];
    nn::BatchNormBuffers upd;
    if (training && update_stats) {
      upd.running_mean = &mean;
      upd.running_var = &var;
    }
    return nn::batch_norm2d(x, gamma, beta, mean, var, training, upd);
  }
};

}  // namespace

std::size_t parameter_count(const std::string& architecture) {
  std::size_t n = 0;
  for (const auto& g : make_layout(parse_architecture(architecture)).groups) n += nn::numel(g.shape);
  return n;
}

Encoder Encoder::create(const std::string& architecture, std::uint64_t seed) {
  Encoder e;
  e.arch_ = parse_architecture(architecture);
  Layout layout = make_layout(e.arch_);
  e.groups_ = std::move(layout.groups);
  e.tap_channels_ = std::move(layout.tap_channels);
  Rng rng(seed);
  for (const auto& g : e.groups_) {
    nn::Tensor t(g.shape);
    const bool is_weight = g.name.ends_with(".weight");
    if (g.name.ends_with(".gamma")) {
      t.fill(1.0);
    } else if (is_weight && g.shape.size() == 4) {
      const double fan_in = static_cast<double>(g.shape[1] * g.shape[2] * g.shape[3]);
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : t.storage()) v = d(rng);
    }
    e.params_.emplace_back(std::move(t), false);
  }
  for (std::size_t c : layout.bn_channels) {
    e.buffers_.emplace_back(nn::Shape{c}, 0.0);
    e.buffers_.emplace_back(nn::Shape{c}, 1.0);
  }
  for (std::size_t c : e.tap_channels_) e.masks_.emplace_back(nn::Shape{c}, 1.0);
  return e;
}

Encoder::Encoder(const Encoder& other)
    : metadata(other.metadata),
      arch_(other.arch_),
      groups_(other.groups_),
      buffers_(other.buffers_),
      masks_(other.masks_),
      tap_channels_(other.tap_channels_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.emplace_back(p.value(), false);
}

Encoder& Encoder::operator=(const Encoder& other) {
  if (this != &other) *this = Encoder(other);
  return *this;
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

std::vector<double> Encoder::flat_parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& p : params_) out.insert(out.end(), p.value().values().begin(), p.value().values().end());
  return out;
}

void Encoder::set_trainable(bool trainable) {
  for (auto& p : params_) {
    p.node()->requires_grad = trainable;
    p.node()->grad = nn::Tensor();
  }
}

void Encoder::set_tap_mask(std::size_t tap, nn::Tensor mask) {
  if (tap >= masks_.size()) throw ValidationError("tap", "tap index out of range");
  if (mask.shape() != masks_[tap].shape()) throw GeometryError("mask shape must be " + nn::to_string(masks_[tap].shape()));
  masks_[tap] = std::move(mask);
}

EncoderOutput Encoder::run(const nn::Var& x, bool training, bool update_stats,
                           const std::vector<nn::Var>& tap_scales) {
  if (x.value().rank() != 4 || x.dim(1) != kInputChannels) {
    throw GeometryError("encoder expects (B,3,H,W), got " + nn::to_string(x.shape()));
  }
  if (!tap_scales.empty() && tap_scales.size() != tap_count()) throw GeometryError("need one tap scale per tap");
  Cursor cur{params_, buffers_, training, update_stats};
  EncoderOutput out;
  auto emit_tap = [&](nn::Var h) {
    const std::size_t t = out.taps.size();
    bool all_one = true;
    for (double m : masks_[t].values()) all_one = all_one && m == 1.0;
    if (!all_one) h = nn::channel_scale(h, nn::Var(masks_[t]));
    if (!tap_scales.empty()) h = nn::channel_scale(h, tap_scales[t]);
    out.taps.push_back(h);
    return h;
  };

  if (arch_.family == ArchSpec::Family::TINY_CNN) {
    nn::Var h = nn::avg_pool2d(nn::relu(cur.conv(x, 1, 1, true)), 2);
    h = emit_tap(h);
    h = nn::avg_pool2d(nn::relu(cur.conv(h, 1, 1, true)), 2);
    h = emit_tap(h);
    // no projection head: every layer sits under a tap, as with the ResNets
    out.embedding = nn::global_avg_pool(h);
    return out;
  }

  const std::size_t exp = block_expansion(arch_);
  nn::Var h = nn::relu(cur.bn(cur.conv(x, 1, 1)));
  std::size_t in = 64;
  for (std::size_t s = 0; s < arch_.widths.size(); ++s) {
    const std::size_t w = arch_.widths[s];
    for (std::size_t k = 0; k < arch_.blocks[s]; ++k) {
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      nn::Var y;
      if (exp == 1) {
        y = nn::relu(cur.bn(cur.conv(h, stride, 1)));
        y = cur.bn(cur.conv(y, 1, 1));
      } else {
        y = nn::relu(cur.bn(cur.conv(h, 1, 0)));
        y = nn::relu(cur.bn(cur.conv(y, stride, 1)));
        y = cur.bn(cur.conv(y, 1, 0));
      }
      nn::Var shortcut = h;
      if (stride != 1 || in != w * exp) shortcut = cur.bn(cur.conv(h, stride, 0));
      h = nn::relu(nn::add(y, shortcut));
      in = w * exp;
    }
    h = emit_tap(h);
  }
  out.embedding = nn::global_avg_pool(h);
  return out;
}

EncoderOutput Encoder::forward(const nn::Var& images, const ForwardOptions& options) {
  return run(images, options.training, true, options.tap_scales);
}

EncoderOutput Encoder::forward(const nn::Tensor& images) const {
  return const_cast<Encoder*>(this)->run(nn::Var(images), false, false, {});
}

nn::Tensor Encoder::embed(const nn::Tensor& images, std::size_t chunk) const {
  const std::size_t n = images.dim(0), img = images.size() / std::max<std::size_t>(n, 1);
  const std::size_t d = embedding_dim();
  nn::Tensor out({n, d});
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    nn::Tensor part({e - s, images.dim(1), images.dim(2), images.dim(3)});
    std::copy_n(images.data() + s * img, (e - s) * img, part.data());
    const nn::Tensor z = forward(part).embedding.value();
    std::copy_n(z.data(), z.size(), out.data() + s * d);
  }
  return out;
}

std::string Encoder::hash() const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, arch_.id.data(), arch_.id.size());
  auto feed = [&](const nn::Tensor& t) { EVP_DigestUpdate(ctx, t.data(), t.size() * sizeof(double)); };
  for (const auto& p : params_) feed(p.value());
  for (const auto& b : buffers_) feed(b);
  for (const auto& m : masks_) feed(m);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

void Encoder::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["architecture"] = arch_.id;
  header["metadata"] = metadata;
  std::size_t offset = 0;
  auto add = [&](const char* section, const std::string& name, const nn::Tensor& t) {
    header[section].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  };
  header["parameters"] = nlohmann::json::array();
  header["buffers"] = nlohmann::json::array();
  header["masks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params_.size(); ++i) add("parameters", groups_[i].name, params_[i].value());
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    add("buffers", (i % 2 == 0 ? "bn" + std::to_string(i / 2) + ".running_mean" : "bn" + std::to_string(i / 2) + ".running_var"),
        buffers_[i]);
  }
  for (std::size_t i = 0; i < masks_.size(); ++i) add("masks", "tap" + std::to_string(i), masks_[i]);
  header["element_count"] = offset;

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write encoder checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  unsigned char le[8];
  for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(len >> (8 * i));
  out.write(reinterpret_cast<const char*>(le), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  auto write_t = [&](const nn::Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  };
  for (const auto& p : params_) write_t(p.value());
  for (const auto& b : buffers_) write_t(b);
  for (const auto& m : masks_) write_t(m);
  if (!out) throw IoError("short write to " + path.string());
}

Encoder Encoder::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open encoder checkpoint " + path.string());
  char magic[8];
  unsigned char le[8];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(le), 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + ": not an encoder checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(le[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  Encoder e = create(header.at("architecture").get<std::string>(), 0);
  e.metadata = header.value("metadata", nlohmann::json::object());
  auto read_t = [&](nn::Tensor& t, const nlohmann::json& entry) {
    if (entry.at("shape").get<nn::Shape>() != t.shape()) throw IoError(path.string() + ": shape mismatch");
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  };
  const auto& ps = header.at("parameters");
  const auto& bs = header.at("buffers");
  const auto& ms = header.at("masks");
  if (ps.size() != e.params_.size() || bs.size() != e.buffers_.size() || ms.size() != e.masks_.size()) {
    throw IoError(path.string() + ": group count mismatch for " + e.arch_.id);
  }
  for (std::size_t i = 0; i < e.params_.size(); ++i) {
    if (ps[i].at("name") != e.groups_[i].name) throw IoError(path.string() + ": unexpected group " + ps[i].dump());
    read_t(e.params_[i].mutable_value(), ps[i]);
  }
  for (std::size_t i = 0; i < e.buffers_.size(); ++i) read_t(e.buffers_[i], bs[i]);
  for (std::size_t i = 0; i < e.masks_.size(); ++i) read_t(e.masks_[i], ms[i]);
  if (!in || in.peek() != EOF) throw IoError(path.string() + ": truncated or oversized payload");
  return e;
}

}  // namespace bdkit::pretrain

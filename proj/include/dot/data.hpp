#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dot/common.hpp"
#include "dot/serialize.hpp"
#include "dot/tensor.hpp"

namespace dot {

struct ShiftSpec {
  double brightness_offset = 0.0;
  double noise_sigma = 0.0;
  bool invert = false;
  double background_texture_amplitude = 0.0;
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 50;
  std::size_t image_size = 16;
  ShiftSpec shift;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes == 0)
      throw std::invalid_argument("SyntheticSpec: num_classes must be positive");
    if (samples_per_class == 0)
      throw std::invalid_argument(
          "SyntheticSpec: samples_per_class must be positive");
    if (image_size < 8)
      throw std::invalid_argument("SyntheticSpec: image_size must be >= 8");
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},
          {"samples_per_class", s.samples_per_class},
          {"image_size", s.image_size},
          {"brightness_offset", s.shift.brightness_offset},
          {"noise_sigma", s.shift.noise_sigma},
          {"invert", s.shift.invert},
          {"background_texture_amplitude",
           s.shift.background_texture_amplitude},
          {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.samples_per_class = j.at("samples_per_class").get<std::size_t>();
  s.image_size = j.at("image_size").get<std::size_t>();
  s.shift.brightness_offset = j.at("brightness_offset").get<double>();
  s.shift.noise_sigma = j.at("noise_sigma").get<double>();
  s.shift.invert = j.at("invert").get<bool>();
  s.shift.background_texture_amplitude =
      j.at("background_texture_amplitude").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

struct DomainDataset {
  Tensor images;  // n x 1 x H x W, values in [0, 1]
  std::vector<int> labels;
  std::string domain_tag;  // "source" or "target"
  SyntheticSpec manifest;

  std::size_t size() const { return labels.size(); }
};

namespace detail {

inline constexpr double kPi = 3.141592653589793;

// One oriented stroke per class: class k runs at angle pi*k/K. Jitter in
// center, thickness, orientation and intensity makes the within-class
// distribution non-trivial.
inline void render_sample(std::vector<double>& px, std::size_t s,
                          std::size_t class_id, std::size_t num_classes,
                          Rng& rng) {
  const double theta = kPi * static_cast<double>(class_id) /
                           static_cast<double>(num_classes) +
                       rng.uniform(-0.08, 0.08);
  const double half = static_cast<double>(s) / 2.0;
  const double cx = half + rng.uniform(-2.0, 2.0);
  const double cy = half + rng.uniform(-2.0, 2.0);
  const double thickness = rng.uniform(1.3, 2.3);
  const double intensity = rng.uniform(0.7, 1.0);
  const double nx = -std::sin(theta), ny = std::cos(theta);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double d = std::abs(nx * (static_cast<double>(x) - cx) +
                                ny * (static_cast<double>(y) - cy));
      const double v = 1.0 - (d / thickness) * (d / thickness);
      if (v > 0.0) px[y * s + x] += intensity * v;
    }
}

inline void apply_shift(std::vector<double>& px, std::size_t s,
                        const ShiftSpec& shift, Rng& rng) {
  if (shift.background_texture_amplitude != 0.0) {
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double arg = 2.0 * kPi *
                               (2.0 * static_cast<double>(x) +
                                3.0 * static_cast<double>(y)) /
                               static_cast<double>(s) +
                           phase;
        px[y * s + x] += shift.background_texture_amplitude * 0.5 *
                         (1.0 + std::sin(arg));
      }
  }
  for (auto& v : px) v += shift.brightness_offset;
  if (shift.invert)
    for (auto& v : px) v = 1.0 - v;  // before noise
  if (shift.noise_sigma > 0.0)
    for (auto& v : px) v += rng.normal(0.0, shift.noise_sigma);
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
}

inline DomainDataset generate_domain(const SyntheticSpec& spec,
                                     const std::string& tag,
                                     bool apply_shift_ops) {
  const std::size_t s = spec.image_size;
  const std::size_t n = spec.num_classes * spec.samples_per_class;
  std::vector<double> images(n * s * s);
  std::vector<int> labels(n);
  const std::uint64_t domain_seed = tag_seed(spec.seed, tag);
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const std::size_t idx = k * spec.samples_per_class + i;
      Rng rng(mix_seed(domain_seed, idx));
      std::vector<double> px(s * s, 0.08);
      render_sample(px, s, k, spec.num_classes, rng);
      if (apply_shift_ops) {
        apply_shift(px, s, spec.shift, rng);
      } else {
        for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
      }
      std::copy(px.begin(), px.end(), images.begin() + idx * s * s);
      labels[idx] = static_cast<int>(k);
    }
  DomainDataset ds;
  ds.images = Tensor({n, 1, s, s}, std::move(images));
  ds.labels = std::move(labels);
  ds.domain_tag = tag;
  ds.manifest = spec;
  return ds;
}

}  // namespace detail

// Source renders with the identity shift; target applies the spec's shift.
inline std::pair<DomainDataset, DomainDataset> generate_pair(
    const SyntheticSpec& spec) {
  spec.validate();
  return {detail::generate_domain(spec, "source", false),
          detail::generate_domain(spec, "target", true)};
}

inline void save_dataset(const DomainDataset& ds, const std::string& path) {
  nlohmann::json manifest = to_json(ds.manifest);
  manifest["domain_tag"] = ds.domain_tag;
  manifest["num_samples"] = ds.size();
  NamedBlobs c;
  c.manifest = manifest.dump();
  std::vector<double> label_data(ds.labels.begin(), ds.labels.end());
  c.blobs.emplace_back("images", ds.images);
  c.blobs.emplace_back("labels", Tensor({ds.size()}, std::move(label_data)));
  write_container_file(path, c);
}

inline DomainDataset load_dataset(const std::string& path) {
  NamedBlobs c = read_container_file(path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(c.manifest);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dataset manifest: " + std::string(e.what()));
  }
  DomainDataset ds;
  ds.manifest = synthetic_spec_from_json(manifest);
  ds.domain_tag = manifest.at("domain_tag").get<std::string>();
  ds.images = c.find("images");
  const Tensor& labels = c.find("labels");
  const auto n = manifest.at("num_samples").get<std::size_t>();
  if (ds.images.rank() != 4 || ds.images.dim(0) != n ||
      ds.images.dim(2) != ds.manifest.image_size ||
      ds.images.dim(3) != ds.manifest.image_size)
    throw FormatError("dataset manifest does not match image payload shape");
  if (labels.rank() != 1 || labels.dim(0) != n)
    throw FormatError("dataset manifest does not match label payload shape");
  ds.labels.reserve(n);
  for (double v : labels.data()) ds.labels.push_back(static_cast<int>(v));
  return ds;
}

struct Batch {
  Tensor images;                    // b x 1 x H x W
  std::vector<std::size_t> indices; // positions within the dataset
};

namespace detail {

inline void augment_sample(std::vector<double>& px, std::size_t s, Rng& rng) {
  if (rng.bernoulli(0.5)) {  // horizontal flip
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s / 2; ++x)
        std::swap(px[y * s + x], px[y * s + (s - 1 - x)]);
  }
  if (rng.bernoulli(0.25)) {  // random erasing, 5-15% area, gray fill
    const double area = rng.uniform(0.05, 0.15) * static_cast<double>(s * s);
    const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    auto clamp_dim = [s](double v) {
      return std::min<std::size_t>(
          s, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(v))));
    };
    const std::size_t w = clamp_dim(std::sqrt(area * aspect));
    const std::size_t h = clamp_dim(std::sqrt(area / aspect));
    const std::size_t x0 = rng.uniform_index(s - w + 1);
    const std::size_t y0 = rng.uniform_index(s - h + 1);
    for (std::size_t y = y0; y < y0 + h; ++y)
      for (std::size_t x = x0; x < x0 + w; ++x) px[y * s + x] = 0.5;
  }
}

}  // namespace detail

// Epoch-seeded shuffled minibatches; the short final batch is dropped so
// contrastive denominators keep their full size. Augmentation draws from a
// per-sample derived stream.
inline std::vector<Batch> batches(const DomainDataset& ds,
                                  std::size_t batch_size, std::uint64_t seed,
                                  bool augment) {
  if (batch_size < 2)
    throw std::invalid_argument("batches: batch_size must be >= 2");
  if (batch_size > ds.size())
    throw std::invalid_argument("batches: batch_size " +
                                std::to_string(batch_size) +
                                " exceeds dataset size " +
                                std::to_string(ds.size()));
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng shuffle_rng(seed);
  shuffle_rng.shuffle(perm);
  const std::size_t s = ds.manifest.image_size;
  const std::size_t px_per_image = s * s;
  std::vector<Batch> out;
  for (std::size_t start = 0; start + batch_size <= ds.size();
       start += batch_size) {
    Batch b;
    std::vector<double> data(batch_size * px_per_image);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t idx = perm[start + i];
      b.indices.push_back(idx);
      std::vector<double> px(
          ds.images.data().begin() + idx * px_per_image,
          ds.images.data().begin() + (idx + 1) * px_per_image);
      if (augment) {
        Rng rng(mix_seed(seed, 0x517cc1b727220a95ULL ^ (start + i)));
        detail::augment_sample(px, s, rng);
      }
      std::copy(px.begin(), px.end(), data.begin() + i * px_per_image);
    }
    b.images = Tensor({batch_size, 1, s, s}, std::move(data));
    out.push_back(std::move(b));
  }
  return out;
}

// Plain image gather, no shuffle or augmentation; used by evaluation and
// refinement passes.
inline Tensor images_at(const DomainDataset& ds,
                        const std::vector<std::size_t>& indices) {
  const std::size_t s = ds.manifest.image_size;
  const std::size_t px_per_image = s * s;
  std::vector<double> data(indices.size() * px_per_image);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy(ds.images.data().begin() + indices[i] * px_per_image,
              ds.images.data().begin() + (indices[i] + 1) * px_per_image,
              data.begin() + i * px_per_image);
  return Tensor({indices.size(), 1, s, s}, std::move(data));
}

inline std::vector<int> labels_at(const DomainDataset& ds,
                                  const std::vector<std::size_t>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(ds.labels.at(i));
  return out;
}

}  // namespace dot

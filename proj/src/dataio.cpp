#include "tttseg/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tttseg/tensor_io.hpp"

namespace fs = std::filesystem;

namespace tttseg {

void SyntheticSpec::validate() const {
  if (height < 4 || width < 4) throw ConfigError("synthetic spec: image extents must be >= 4");
  if (num_classes < 2) throw ConfigError("synthetic spec: num_classes must be >= 2");
  if (num_classes > 256) throw ConfigError("synthetic spec: num_classes must be <= 256");
  if (min_shapes > max_shapes) throw ConfigError("synthetic spec: min_shapes > max_shapes");
  if (noise_std < 0.0) throw ConfigError("synthetic spec: noise_std must be >= 0");
  if (count == 0) throw ConfigError("synthetic spec: count must be >= 1");
}

namespace {

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%06zu", index);
  return buf;
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.samples.reserve(spec.count);
  Rng root(spec.seed);
  const double c_norm = static_cast<double>(spec.num_classes);
  for (std::size_t s = 0; s < spec.count; ++s) {
    Rng rng = root.fork(s);
    Tensor image({1, spec.height, spec.width});
    Tensor labels({spec.height, spec.width});
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = rng.normal(0.0, spec.noise_std);

    const std::size_t shapes = spec.min_shapes + rng.uniform_int(spec.max_shapes - spec.min_shapes + 1);
    for (std::size_t k = 0; k < shapes; ++k) {
      const std::size_t cls = 1 + rng.uniform_int(spec.num_classes - 1);
      const bool ellipse = rng.uniform() < 0.5;
      const double cy = rng.uniform() * static_cast<double>(spec.height);
      const double cx = rng.uniform() * static_cast<double>(spec.width);
      const double min_r = static_cast<double>(std::min(spec.height, spec.width)) / 8.0;
      const double max_r = static_cast<double>(std::min(spec.height, spec.width)) / 3.0;
      const double rh = min_r + rng.uniform() * (max_r - min_r);
      const double rw = min_r + rng.uniform() * (max_r - min_r);
      const double intensity = static_cast<double>(cls) / c_norm;
      for (std::size_t r = 0; r < spec.height; ++r) {
        for (std::size_t c = 0; c < spec.width; ++c) {
          const double dy = (static_cast<double>(r) - cy) / rh;
          const double dx = (static_cast<double>(c) - cx) / rw;
          const bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                      : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
          if (!inside) continue;
          image[r * spec.width + c] += intensity;       // intensities add up
          labels[r * spec.width + c] = static_cast<double>(cls);  // later shapes overwrite
        }
      }
    }
    d.samples.push_back({std::move(image), std::move(labels), sample_id(s)});
  }
  return d;
}

namespace {

nlohmann::json spec_to_json(const SyntheticSpec& s) {
  return nlohmann::json{{"height", s.height},       {"width", s.width},
                        {"num_classes", s.num_classes}, {"min_shapes", s.min_shapes},
                        {"max_shapes", s.max_shapes},   {"noise_std", s.noise_std},
                        {"seed", s.seed},               {"count", s.count}};
}

SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.min_shapes = j.at("min_shapes").get<std::size_t>();
  s.max_shapes = j.at("max_shapes").get<std::size_t>();
  s.noise_std = j.at("noise_std").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.count = j.at("count").get<std::size_t>();
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
}

void require_file(const fs::path& p, const std::string& listed_as) {
  if (!fs::exists(p)) throw IoError("manifest lists missing file: " + listed_as);
}

}  // namespace

void save_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "tttseg-dataset-v1";
  manifest["spec"] = spec_to_json(d.spec);
  nlohmann::json samples = nlohmann::json::array();
  for (const SegmentationSample& s : d.samples) {
    const std::string image_file = s.id + "_image.tsr";
    const std::string label_file = s.id + "_labels.tsr";
    save_tsr(s.image, Dtype::F64, (fs::path(dir) / image_file).string());
    save_tsr(s.labels, Dtype::U8, (fs::path(dir) / label_file).string());
    samples.push_back({{"id", s.id}, {"image", image_file}, {"labels", label_file}});
  }
  manifest["samples"] = samples;
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const nlohmann::json manifest = read_json((fs::path(dir) / "manifest.json").string());
  if (manifest.value("format", "") != "tttseg-dataset-v1") {
    throw IoError(dir + ": not a dataset manifest (missing or wrong format tag)");
  }
  Dataset d;
  d.spec = spec_from_json(manifest.at("spec"));
  for (const auto& entry : manifest.at("samples")) {
    const std::string id = entry.at("id").get<std::string>();
    const std::string image_file = entry.at("image").get<std::string>();
    const std::string label_file = entry.at("labels").get<std::string>();
    require_file(fs::path(dir) / image_file, image_file);
    require_file(fs::path(dir) / label_file, label_file);
    LoadedTensor image = load_tsr((fs::path(dir) / image_file).string());
    LoadedTensor labels = load_tsr((fs::path(dir) / label_file).string());
    if (image.tensor.shape() != Shape{1, d.spec.height, d.spec.width}) {
      throw IoError(image_file + ": image shape " + shape_str(image.tensor.shape()) +
                    " does not match the dataset spec");
    }
    if (labels.tensor.shape() != Shape{d.spec.height, d.spec.width}) {
      throw IoError(label_file + ": label shape " + shape_str(labels.tensor.shape()) +
                    " does not match the dataset spec");
    }
    d.samples.push_back({std::move(image.tensor), std::move(labels.tensor), id});
  }
  return d;
}

bool is_validation_sample(const std::string& id) {
  // FNV-1a, stable across platforms.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h % 5 == 0;  // 20 percent
}

void save_predictions(const std::vector<std::pair<std::string, LabelMask>>& preds, const std::string& dir,
                      bool with_pgm) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "tttseg-predictions-v1";
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& [id, mask] : preds) {
    const std::string mask_file = id + "_pred.tsr";
    save_tsr(mask.labels, Dtype::U8, (fs::path(dir) / mask_file).string());
    if (with_pgm) export_mask_pgm(mask, (fs::path(dir) / (id + "_pred.pgm")).string());
    samples.push_back({{"id", id}, {"mask", mask_file}, {"num_classes", mask.num_classes}});
  }
  manifest["samples"] = samples;
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::vector<std::pair<std::string, LabelMask>> load_predictions(const std::string& dir) {
  const nlohmann::json manifest = read_json((fs::path(dir) / "manifest.json").string());
  if (manifest.value("format", "") != "tttseg-predictions-v1") {
    throw IoError(dir + ": not a predictions manifest");
  }
  std::vector<std::pair<std::string, LabelMask>> out;
  for (const auto& entry : manifest.at("samples")) {
    const std::string id = entry.at("id").get<std::string>();
    const std::string mask_file = entry.at("mask").get<std::string>();
    require_file(fs::path(dir) / mask_file, mask_file);
    LoadedTensor t = load_tsr((fs::path(dir) / mask_file).string());
    out.emplace_back(id, LabelMask{std::move(t.tensor), entry.at("num_classes").get<std::size_t>()});
  }
  return out;
}

std::vector<std::uint8_t> encode_pgm(const LabelMask& mask) {
  if (mask.num_classes > 256) throw ValueError("PGM export supports at most 256 classes");
  if (mask.labels.rank() != 2) throw ShapeError("PGM export expects an [H x W] mask");
  const std::size_t h = mask.labels.extent(0), w = mask.labels.extent(1);
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  const double denom = mask.num_classes > 1 ? static_cast<double>(mask.num_classes - 1) : 1.0;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    bytes.push_back(static_cast<std::uint8_t>(std::floor(255.0 * mask.labels[i] / denom)));
  }
  return bytes;
}

void export_mask_pgm(const LabelMask& mask, const std::string& path) {
  write_file_bytes(path, encode_pgm(mask));
}

}  // namespace tttseg

#pragma once

// In-memory multi-domain dataset and its on-disk layout:
//
//   root/manifest.json
//   root/<domain>/<seed>/frame0.png frame1.png   8-bit RGB
//   root/<domain>/<seed>/label0.png label1.png   8-bit grey, class index, 255 = ignore
//   root/<domain>/<seed>/flow.bin                see io::write_flow

#include <cnsg/image_io.hpp>
#include <cnsg/synthdata.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace cnsg::synth {

struct DomainSplit {
  std::string name;
  std::vector<VideoSample> train;
  std::vector<VideoSample> eval;
};

struct Dataset {
  int64_t num_classes = 5;
  int64_t height = 96;
  int64_t width = 96;
  std::vector<DomainSplit> domains;

  const DomainSplit& domain(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return d;
    throw Error("dataset has no domain '" + name + "'");
  }
  std::vector<std::string> domain_names() const {
    std::vector<std::string> out;
    for (const auto& d : domains) out.push_back(d.name);
    return out;
  }
};

struct DatasetSpec {
  std::vector<std::string> domains{"daylight", "dusk", "fog", "neon"};
  int64_t train_samples = 200;
  int64_t eval_samples = 50;
  uint64_t eval_seed_offset = 100000;
  SceneOptions scene;
};

/// Train seeds are 0..train_samples-1, eval seeds start at eval_seed_offset; identical across domains.
inline Dataset generate_dataset(const DatasetSpec& spec, const std::vector<DomainStyle>& styles = builtin_styles()) {
  Dataset ds;
  ds.num_classes = spec.scene.num_classes;
  ds.height = spec.scene.height;
  ds.width = spec.scene.width;
  for (const auto& name : spec.domains) {
    const auto& style = find_style(styles, name);
    DomainSplit split{name, {}, {}};
    for (int64_t i = 0; i < spec.train_samples; ++i)
      split.train.push_back(generate_scene(static_cast<uint64_t>(i), style, spec.scene));
    for (int64_t i = 0; i < spec.eval_samples; ++i)
      split.eval.push_back(generate_scene(spec.eval_seed_offset + static_cast<uint64_t>(i), style, spec.scene));
    ds.domains.push_back(std::move(split));
  }
  return ds;
}

namespace disk {

namespace fs = std::filesystem;

inline void write_sample(const fs::path& dir, const VideoSample& s) {
  fs::create_directories(dir);
  io::write_png(dir / "frame0.png", io::frame_to_image(s.frame_prev));
  io::write_png(dir / "frame1.png", io::frame_to_image(s.frame_curr));
  io::write_png(dir / "label0.png", io::label_to_image(s.label_prev));
  io::write_png(dir / "label1.png", io::label_to_image(s.label_curr));
  io::write_flow(dir / "flow.bin", s.flow);
}

inline VideoSample read_sample(const fs::path& dir, const std::string& domain, uint64_t seed, int64_t h, int64_t w) {
  for (const char* f : {"frame0.png", "frame1.png", "label0.png", "label1.png", "flow.bin"})
    if (!fs::exists(dir / f)) throw io::IoError(dir / f, "missing sample file");
  VideoSample s;
  s.domain = domain;
  s.seed = seed;
  s.frame_prev = io::image_to_frame(io::read_png(dir / "frame0.png"));
  s.frame_curr = io::image_to_frame(io::read_png(dir / "frame1.png"));
  s.label_prev = io::image_to_label(io::read_png(dir / "label0.png"));
  s.label_curr = io::image_to_label(io::read_png(dir / "label1.png"));
  s.flow = io::read_flow(dir / "flow.bin");
  for (const auto* t : {&s.frame_prev, &s.frame_curr, &s.flow})
    if (t->size(1) != h || t->size(2) != w) throw io::IoError(dir, "sample resolution disagrees with manifest");
  if (s.frame_prev.size(0) != 3 || s.frame_curr.size(0) != 3) throw io::IoError(dir, "frames must be RGB");
  for (const auto* t : {&s.label_prev, &s.label_curr})
    if (t->size(0) != h || t->size(1) != w) throw io::IoError(dir, "label resolution disagrees with manifest");
  return s;
}

inline std::vector<uint64_t> seeds_of(const std::vector<VideoSample>& v) {
  std::vector<uint64_t> out;
  for (const auto& s : v) out.push_back(s.seed);
  return out;
}

inline void write_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root);
  nlohmann::json manifest;
  manifest["format"] = "cnsg-synth-v1";
  manifest["num_classes"] = ds.num_classes;
  manifest["ignore_index"] = kIgnoreIndex;
  manifest["resolution"] = {{"height", ds.height}, {"width", ds.width}};
  manifest["domains"] = nlohmann::json::array();
  for (const auto& d : ds.domains) {
    for (const auto* part : {&d.train, &d.eval})
      for (const auto& s : *part) write_sample(root / d.name / std::to_string(s.seed), s);
    manifest["domains"].push_back(
        {{"name", d.name}, {"train_seeds", seeds_of(d.train)}, {"eval_seeds", seeds_of(d.eval)}});
  }
  std::ofstream os(root / "manifest.json");
  if (!os) throw io::IoError(root / "manifest.json", "cannot open for writing");
  os << manifest.dump(2) << '\n';
  if (!os) throw io::IoError(root / "manifest.json", "write failed");
}

inline nlohmann::json read_manifest(const fs::path& root) {
  const auto path = root / "manifest.json";
  if (!fs::exists(path)) throw io::IoError(path, "dataset manifest not found");
  std::ifstream is(path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw io::IoError(path, e.what());
  }
}

/// Loads every listed sample. Any sample directory on disk that the manifest
/// does not list, or any listed sample that is missing, is a hard error.
inline Dataset read_dataset(const fs::path& root, const std::vector<std::string>& only_domains = {}) {
  const auto manifest = read_manifest(root);
  Dataset ds;
  try {
    ds.num_classes = manifest.at("num_classes").get<int64_t>();
    ds.height = manifest.at("resolution").at("height").get<int64_t>();
    ds.width = manifest.at("resolution").at("width").get<int64_t>();
    for (const auto& d : manifest.at("domains")) {
      const auto name = d.at("name").get<std::string>();
      const auto train = d.at("train_seeds").get<std::vector<uint64_t>>();
      const auto eval = d.at("eval_seeds").get<std::vector<uint64_t>>();
      std::set<std::string> listed;
      for (auto s : train) listed.insert(std::to_string(s));
      for (auto s : eval) listed.insert(std::to_string(s));
      const auto dir = root / name;
      if (!fs::is_directory(dir)) throw io::IoError(dir, "domain directory listed in manifest is missing");
      std::set<std::string> on_disk;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) on_disk.insert(e.path().filename().string());
      if (on_disk != listed)
        throw io::IoError(dir, "manifest lists " + std::to_string(listed.size()) + " samples but " +
                                   std::to_string(on_disk.size()) + " sample directories exist");
      if (!only_domains.empty() && std::find(only_domains.begin(), only_domains.end(), name) == only_domains.end())
        continue;
      DomainSplit split{name, {}, {}};
      for (auto s : train) split.train.push_back(read_sample(dir / std::to_string(s), name, s, ds.height, ds.width));
      for (auto s : eval) split.eval.push_back(read_sample(dir / std::to_string(s), name, s, ds.height, ds.width));
      ds.domains.push_back(std::move(split));
    }
  } catch (const nlohmann::json::exception& e) {
    throw io::IoError(root / "manifest.json", std::string("malformed manifest: ") + e.what());
  }
  return ds;
}

}  // namespace disk

}  // namespace cnsg::synth

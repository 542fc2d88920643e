#include "rhp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace rhp {

namespace fs = std::filesystem;

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train_classifier:
      return "train_classifier";
    case SplitTag::train_module:
      return "train_module";
    case SplitTag::eval:
      return "eval";
  }
  return "unknown";
}

SplitTag parse_split_tag(const std::string& name) {
  if (name == "train_classifier") return SplitTag::train_classifier;
  if (name == "train_module") return SplitTag::train_module;
  if (name == "eval") return SplitTag::eval;
  throw DatasetError("unknown split tag '" + name + "'");
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  bool have_split = false;
  bool have_header = false;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = trim(line.substr(1, colon - 1));
      const std::string value = trim(line.substr(colon + 1));
      if (key == "split") {
        m.split = parse_split_tag(value);
        have_split = true;
      } else if (key == "class_count") {
        m.class_count = std::stoi(value);
      }
      continue;
    }
    if (!have_header) {
      if (line != "path,label") throw DatasetError(path.string() + ": expected 'path,label' header");
      have_header = true;
      continue;
    }
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    ManifestEntry e{trim(line.substr(0, comma)), 0};
    try {
      e.label = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": bad label");
    }
    if (!seen.insert(e.path).second) {
      throw DatasetError(path.string() + ": duplicate path " + e.path);
    }
    m.entries.push_back(std::move(e));
  }
  if (!have_split) throw DatasetError(path.string() + ": missing '# split:' line");
  if (m.class_count <= 0) throw DatasetError(path.string() + ": missing '# class_count:' line");
  for (const auto& e : m.entries) {
    if (e.label < 0 || e.label >= m.class_count) {
      throw DatasetError(path.string() + ": label " + std::to_string(e.label) +
                         " out of range for " + e.path);
    }
  }
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DatasetError("cannot write manifest " + path.string());
  out << "# rhp manifest v1\n# split: " << to_string(m.split)
      << "\n# class_count: " << m.class_count << "\npath,label\n";
  for (const auto& e : m.entries) out << e.path << ',' << e.label << '\n';
  if (!out) throw DatasetError("failed writing manifest " + path.string());
}

Tensor<Real> read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("missing image " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> v)) throw DatasetError("malformed PPM header in " + path.string());
    return v;
  };
  if (magic != "P6") throw DatasetError(path.string() + " is not a binary PPM");
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw DatasetError(path.string() + ": only 8-bit RGB PPM is supported");
  }
  in.get();
  std::vector<unsigned char> bytes(std::size_t(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
  if (in.gcount() != std::streamsize(bytes.size())) {
    throw DatasetError(path.string() + ": truncated pixel data");
  }
  Tensor<Real> img(1, 3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img(0, c, y, x) = Real(bytes[(std::size_t(y) * w + x) * 3 + c]) / Real(255);
  return img;
}

void write_ppm(const fs::path& path, const Tensor<Real>& image) {
  if (image.n() != 1 || image.c() != 3) throw ShapeError("write_ppm expects a 1x3xHxW image");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write image " + path.string());
  out << "P6\n" << image.w() << ' ' << image.h() << "\n255\n";
  std::vector<unsigned char> bytes(std::size_t(image.size()));
  for (Index y = 0; y < image.h(); ++y)
    for (Index x = 0; x < image.w(); ++x)
      for (Index c = 0; c < 3; ++c) {
        const double v = std::clamp(double(image(0, c, y, x)), 0.0, 1.0);
        bytes[(std::size_t(y) * image.w() + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DatasetError("failed writing image " + path.string());
}

LoadedDataset load_dataset(const fs::path& manifest_path) {
  LoadedDataset out;
  out.manifest = read_manifest(manifest_path);
  out.data.class_count = out.manifest.class_count;
  const auto& entries = out.manifest.entries;
  if (entries.empty()) return out;
  std::vector<Tensor<Real>> images;
  images.reserve(entries.size());
  for (const auto& e : entries) {
    images.push_back(read_ppm(out.manifest.root / e.path));
    if (images.back().shape() != images.front().shape()) {
      throw DatasetError("image " + e.path + " has a different size than the first image");
    }
    out.data.labels.push_back(e.label);
  }
  out.data.images = stack<Real>(images);
  return out;
}

}  // namespace rhp

#include "rhp/persistence.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "rhp/dataset.hpp"

namespace rhp {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMagic = "rhp-container";

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

// Reads "<word> <number>\n" and returns the number.
std::uint64_t read_count_line(std::istream& in, const std::string& word, const fs::path& path) {
  std::string line;
  if (!std::getline(in, line)) throw TruncatedError(path.string() + ": missing '" + word + "' line");
  std::istringstream ls(line);
  std::string w;
  long long n = -1;
  if (!(ls >> w >> n) || w != word || n < 0) {
    throw FormatError(path.string() + ": malformed '" + word + "' line");
  }
  return static_cast<std::uint64_t>(n);
}

std::vector<Index> json_shape(const Json& h, const fs::path& path) {
  if (!h.contains("shape") || !h["shape"].is_array()) {
    throw FormatError(path.string() + ": header has no shape");
  }
  std::vector<Index> s = h["shape"].get<std::vector<Index>>();
  for (Index d : s) {
    if (d < 1) throw FormatError(path.string() + ": non-positive dimension in shape");
  }
  return s;
}

Index product(const std::vector<Index>& s) {
  Index p = 1;
  for (Index d : s) p *= d;
  return p;
}

}  // namespace

void write_container(const fs::path& path, const Json& header, const std::vector<float>& payload) {
  const std::string text = header.dump();
  std::string bytes;
  bytes.reserve(payload.size() * 4);
  for (float v : payload) put_u32le(bytes, std::bit_cast<std::uint32_t>(v));

  // Write to a sibling and rename so readers never see a half-written file.
  const fs::path tmp = path.string() + ".part";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << kMagic << ' ' << kFormatVersion << '\n'
        << "header " << text.size() << '\n'
        << text << '\n'
        << "payload " << bytes.size() << '\n';
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw FormatError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

Container read_container(const fs::path& path, const std::string& kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw TruncatedError(path.string() + ": empty file");
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    if (!(ls >> magic) || magic != kMagic) {
      throw FormatError(path.string() + ": not an rhp container");
    }
    if (!(ls >> version)) throw FormatError(path.string() + ": missing format version");
    if (version != kFormatVersion) {
      throw VersionError(path.string() + ": unsupported format version " +
                         std::to_string(version) + " (expected " +
                         std::to_string(kFormatVersion) + ")");
    }
  }
  const std::uint64_t header_len = read_count_line(in, "header", path);
  std::string text(header_len, '\0');
  in.read(text.data(), std::streamsize(header_len));
  if (std::uint64_t(in.gcount()) != header_len) throw TruncatedError(path.string() + ": truncated header");
  if (in.get() != '\n') throw FormatError(path.string() + ": header length mismatch");

  Container c;
  try {
    c.header = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  if (c.header.value("kind", std::string()) != kind) {
    throw FormatError(path.string() + ": expected a '" + kind + "' file, found '" +
                      c.header.value("kind", std::string("?")) + "'");
  }

  const std::uint64_t payload_len = read_count_line(in, "payload", path);
  if (payload_len % 4 != 0) throw FormatError(path.string() + ": payload is not float32 aligned");
  std::string bytes(payload_len, '\0');
  in.read(bytes.data(), std::streamsize(payload_len));
  if (std::uint64_t(in.gcount()) != payload_len) {
    throw TruncatedError(path.string() + ": truncated payload (" + std::to_string(in.gcount()) +
                         " of " + std::to_string(payload_len) + " bytes)");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes after payload");
  }
  c.payload.resize(payload_len / 4);
  for (std::size_t i = 0; i < c.payload.size(); ++i) {
    c.payload[i] = std::bit_cast<float>(get_u32le(bytes.data() + 4 * i));
  }
  return c;
}

std::string creation_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (end != env && *end == '\0') t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Json split_to_json(const RegionSplitSpec& s) {
  Json j;
  j["kind"] = to_string(s.kind);
  j["k"] = s.k_regions;
  if (s.kind == SplitKind::grid) {
    j["grid_h"] = s.grid_h;
    j["grid_w"] = s.grid_w;
  }
  if (s.kind == SplitKind::slash && s.slash_band_width > 0) j["band_width"] = s.slash_band_width;
  return j;
}

RegionSplitSpec split_from_json(const Json& j) {
  RegionSplitSpec s;
  s.kind = parse_split_kind(j.at("kind").get<std::string>());
  s.k_regions = j.value("k", 0);
  s.grid_h = j.value("grid_h", 0);
  s.grid_w = j.value("grid_w", 0);
  s.slash_band_width = j.value("band_width", 0);
  return s;
}

void save_artifact(const fs::path& path, const PerturbationArtifact& a) {
  const Tensor<Real>& t = a.tensor;
  if (t.n() != 1) throw ShapeError("artifact tensor must be 1 x C x H x W");
  Json h;
  h["kind"] = "perturbation";
  h["version"] = kFormatVersion;
  h["shape"] = {t.c(), t.h(), t.w()};
  h["epsilon"] = a.epsilon;
  h["split"] = a.split ? split_to_json(*a.split) : Json(nullptr);
  h["source_model_id"] = a.source_model_id;
  h["method"] = a.method;
  h["seed"] = a.seed;
  h["created"] = creation_timestamp();
  write_container(path, h, std::vector<float>(t.data(), t.data() + t.size()));
}

PerturbationArtifact load_artifact(const fs::path& path) {
  Container c = read_container(path, "perturbation");
  const auto shape = json_shape(c.header, path);
  if (shape.size() != 3) throw FormatError(path.string() + ": artifact shape must be C,H,W");
  if (Index(c.payload.size()) != product(shape)) {
    throw FormatError(path.string() + ": header shape does not match payload length");
  }
  PerturbationArtifact a;
  a.tensor = Tensor<Real>(Shape{1, shape[0], shape[1], shape[2]});
  std::copy(c.payload.begin(), c.payload.end(), a.tensor.data());
  a.epsilon = c.header.at("epsilon").get<double>();
  if (!c.header["split"].is_null()) a.split = split_from_json(c.header["split"]);
  a.source_model_id = c.header.value("source_model_id", std::string());
  a.method = c.header.value("method", std::string());
  a.seed = c.header.value("seed", std::uint64_t(0));
  return a;
}

void save_classifier(const fs::path& path, const ToyCnn<Real>& model, const Json& extra) {
  Json h;
  h["kind"] = "classifier";
  h["version"] = kFormatVersion;
  h["model_id"] = model.id();
  h["class_count"] = model.class_count();
  h["input_shape"] = {model.input_shape().c, model.input_shape().h, model.input_shape().w};
  h["architecture"] = model.architecture();
  h["parameter_count"] = model.params().size();
  h["created"] = creation_timestamp();
  for (const auto& [k, v] : extra.items()) h[k] = v;
  const auto& p = model.params();
  write_container(path, h, std::vector<float>(p.data(), p.data() + p.size()));
}

ToyCnn<Real> load_classifier(const fs::path& path, Json* header) {
  Container c = read_container(path, "classifier");
  const auto in = c.header.at("input_shape").get<std::vector<Index>>();
  if (in.size() != 3) throw FormatError(path.string() + ": input_shape must be C,H,W");
  ToyCnn<Real> model(c.header.at("class_count").get<int>(), Shape{1, in[0], in[1], in[2]},
                     c.header.value("model_id", std::string("toy_cnn")));
  if (c.header.value("architecture", Json::array()) != Json(model.architecture())) {
    throw FormatError(path.string() + ": unknown classifier architecture");
  }
  if (Index(c.payload.size()) != model.params().size()) {
    throw FormatError(path.string() + ": parameter count does not match the architecture");
  }
  std::copy(c.payload.begin(), c.payload.end(), model.params().data());
  if (header) *header = std::move(c.header);
  return model;
}

void save_transformer(const fs::path& path, const TransformerParams<Real>& p, Index height,
                      Index width, const Json& extra) {
  Json h;
  h["kind"] = "transformer";
  h["version"] = kFormatVersion;
  h["channels"] = p.channels();
  h["image_size"] = {height, width};
  h["split"] = split_to_json(p.split);
  h["k_regions"] = p.k_regions();
  h["parameter_count"] = p.parameter_count();
  h["rn_momentum"] = double(p.rn.momentum);
  h["rn_stab_const"] = double(p.rn.stab_const);
  h["input_scale"] = double(p.input_scale);
  h["layout"] = "conv_weight,conv_bias,gamma,beta,moving_mean,moving_var";
  h["created"] = creation_timestamp();
  for (const auto& [k, v] : extra.items()) h[k] = v;
  const Vector<Real> theta = p.pack();
  std::vector<float> payload(theta.data(), theta.data() + theta.size());
  payload.insert(payload.end(), p.rn.moving_mean.data(),
                 p.rn.moving_mean.data() + p.rn.moving_mean.size());
  payload.insert(payload.end(), p.rn.moving_var.data(),
                 p.rn.moving_var.data() + p.rn.moving_var.size());
  write_container(path, h, payload);
}

TransformerParams<Real> load_transformer(const fs::path& path, Json* header) {
  Container c = read_container(path, "transformer");
  const Index channels = c.header.at("channels").get<Index>();
  const auto size = c.header.at("image_size").get<std::vector<Index>>();
  if (size.size() != 2) throw FormatError(path.string() + ": image_size must be H,W");
  const RegionSplitSpec split = split_from_json(c.header.at("split"));
  auto partition = std::make_shared<const RegionPartition>(build_partition(split, size[0], size[1]));
  const int k = partition->k_regions();
  if (c.header.value("k_regions", -1) != k) {
    throw FormatError(path.string() + ": region count does not match the split");
  }
  TransformerParams<Real> p = init_transformer<Real>(channels, partition, 0, split);
  const Index n = p.parameter_count();
  if (Index(c.payload.size()) != n + 2 * k) {
    throw FormatError(path.string() + ": payload length does not match channels and K");
  }
  p.unpack(Eigen::Map<const Vector<Real>>(c.payload.data(), n));
  p.rn.moving_mean = Eigen::Map<const Vector<Real>>(c.payload.data() + n, k);
  p.rn.moving_var = Eigen::Map<const Vector<Real>>(c.payload.data() + n + k, k);
  p.rn.momentum = Real(c.header.value("rn_momentum", 0.1));
  p.rn.stab_const = Real(c.header.value("rn_stab_const", 1e-5));
  p.input_scale = Real(c.header.value("input_scale", 1.0));
  if (header) *header = std::move(c.header);
  return p;
}

Json to_json(const EvalReport& r) {
  Json j;
  j["model_id"] = r.model_id;
  j["attack_id"] = r.attack_id;
  j["clean_error"] = r.clean_error;
  j["adv_error"] = r.adv_error;
  j["error_increase"] = r.error_increase;
  j["sample_count"] = r.sample_count;
  j["seed"] = r.seed;
  return j;
}

EvalReport eval_report_from_json(const Json& j) {
  EvalReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.attack_id = j.at("attack_id").get<std::string>();
  r.clean_error = j.at("clean_error").get<double>();
  r.adv_error = j.at("adv_error").get<double>();
  r.error_increase = j.at("error_increase").get<double>();
  r.sample_count = j.at("sample_count").get<Index>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

Json to_json(const TrainStep& s) {
  Json j;
  j["epoch"] = s.epoch;
  j["iteration"] = s.iteration;
  j["loss"] = s.loss;
  j["frac_b_over_a"] = s.frac_b_over_a;
  j["frac_c_over_d"] = s.frac_c_over_d;
  return j;
}

TrainStep train_step_from_json(const Json& j) {
  TrainStep s;
  s.epoch = j.at("epoch").get<int>();
  s.iteration = j.at("iteration").get<long>();
  s.loss = j.at("loss").get<double>();
  s.frac_b_over_a = j.at("frac_b_over_a").get<double>();
  s.frac_c_over_d = j.at("frac_c_over_d").get<double>();
  return s;
}

Json to_json(const HomogeneityReport& r) {
  Json j;
  j["within_region_variance"] = r.within_region_variance;
  j["total_variance"] = r.total_variance;
  j["ratio"] = r.ratio;
  return j;
}

void write_jsonl(const fs::path& path, const std::vector<Json>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw FormatError("failed writing " + path.string());
}

std::vector<Json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<Json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void write_report_csv(const fs::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "model_id,attack_id,clean_error_pct,adv_error_pct,error_increase_pct,samples,seed\n";
  for (const auto& r : reports) {
    out << r.model_id << ',' << r.attack_id << ',' << format_number(100.0 * r.clean_error) << ','
        << format_number(100.0 * r.adv_error) << ',' << format_number(100.0 * r.error_increase)
        << ',' << r.sample_count << ',' << r.seed << '\n';
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

void export_perturbation_image(const PerturbationArtifact& a, const fs::path& path) {
  const Tensor<Real>& t = a.tensor;
  if (t.n() != 1 || (t.c() != 1 && t.c() != 3)) {
    throw ShapeError("export needs a 1- or 3-channel artifact, got " + t.shape().str());
  }
  if (!(a.epsilon > 0.0)) throw std::invalid_argument("export needs a positive epsilon");
  const double two_eps = 2.0 * a.radius();
  Tensor<Real> img(Shape{1, 3, t.h(), t.w()});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < t.h(); ++y)
      for (Index x = 0; x < t.w(); ++x) {
        const double p = t(0, t.c() == 1 ? 0 : c, y, x);
        // floor(v + 0.5) rounds 127.5 up, as the zero perturbation requires.
        const double level = std::clamp(std::floor(255.0 * (p / two_eps + 0.5) + 0.5), 0.0, 255.0);
        img(0, c, y, x) = Real(level / 255.0);
      }
  write_ppm(path, img);
}

}  // namespace rhp

#include "mlcil/dataio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "mlcil/errors.hpp"
#include "mlcil/random.hpp"

namespace mlcil::dataio {

using nlohmann::json;

const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

bool Sample::has_label(ClassId c) const {
  return std::binary_search(labels.begin(), labels.end(), c);
}

bool operator==(const Sample& a, const Sample& b) {
  return a.id == b.id && a.regions == b.regions && a.labels == b.labels &&
         a.split == b.split;
}

Dataset::Dataset(std::vector<std::string> class_names, std::vector<Sample> samples)
    : class_names_(std::move(class_names)), samples_(std::move(samples)) {
  if (!std::is_sorted(class_names_.begin(), class_names_.end()) ||
      std::adjacent_find(class_names_.begin(), class_names_.end()) != class_names_.end()) {
    throw DataError("class names must be sorted and unique");
  }
  index();
}

void Dataset::index() {
  by_id_.clear();
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (!by_id_.emplace(samples_[i].id, i).second) {
      throw DataError("duplicate sample id '" + samples_[i].id + "'");
    }
  }
}

std::size_t Dataset::n_regions() const {
  return samples_.empty() ? 0 : samples_.front().regions.rows();
}

std::size_t Dataset::d_in() const {
  return samples_.empty() ? 0 : samples_.front().regions.cols();
}

ClassId Dataset::class_id(const std::string& name) const {
  auto it = std::lower_bound(class_names_.begin(), class_names_.end(), name);
  if (it == class_names_.end() || *it != name) {
    throw DataError("unknown class '" + name + "'");
  }
  return static_cast<ClassId>(it - class_names_.begin());
}

std::size_t Dataset::index_of(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw DataError("unknown sample id '" + id + "'");
  return it->second;
}

const Sample& Dataset::sample(const std::string& id) const {
  return samples_[index_of(id)];
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (samples_[i].split == split) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------- generation

void GeneratorConfig::validate() const {
  if (n_classes < 1) throw DataError("n_classes must be >= 1");
  if (n_regions < 1) throw DataError("R must be >= 1");
  if (d_in < 1) throw DataError("d_in must be >= 1");
  if (max_labels_per_image < 1 ||
      max_labels_per_image > std::min(n_classes, n_regions)) {
    throw DataError("max_labels_per_image must be in [1, min(n_classes, R)]");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw DataError("noise_sigma must be finite and >= 0");
  }
}

SyntheticData generate(const GeneratorConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_classes, d = cfg.d_in, R = cfg.n_regions;

  // Unit prototypes with pairwise cosine < 0.5, by rejection.
  Tensor protos({n, d});
  {
    Rng rng(derive_seed(cfg.seed, 1));
    const std::size_t max_attempts = 10 * n * n;
    std::size_t attempts = 0, accepted = 0;
    std::vector<double> v(d);
    while (accepted < n) {
      if (attempts++ >= max_attempts) {
        throw DataError("could not draw " + std::to_string(n) +
                        " separable prototypes in d_in=" + std::to_string(d) +
                        "; increase d_in");
      }
      for (double& x : v) x = rng.normal();
      const double nv = numgrad::norm(v);
      if (nv == 0.0) continue;
      for (double& x : v) x /= nv;
      bool ok = true;
      for (std::size_t j = 0; j < accepted && ok; ++j) {
        ok = numgrad::dot(v, protos.row(j)) < 0.5;
      }
      if (!ok) continue;
      std::copy(v.begin(), v.end(), protos.row(accepted).begin());
      ++accepted;
    }
  }

  std::vector<std::string> names;
  const std::size_t name_width = std::max<std::size_t>(2, std::to_string(n - 1).size());
  for (std::size_t c = 0; c < n; ++c) {
    const std::string num = std::to_string(c);
    names.push_back("class_" + std::string(name_width - num.size(), '0') + num);
  }

  Rng rng(derive_seed(cfg.seed, 2));
  std::vector<Sample> samples;
  std::vector<std::vector<std::size_t>> label_regions;
  const std::size_t total = cfg.n_train + cfg.n_test;
  const std::size_t width = std::to_string(total).size();
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t k = 1 + static_cast<std::size_t>(rng.below(cfg.max_labels_per_image));
    std::vector<std::size_t> classes(n), regions(R);
    for (std::size_t c = 0; c < n; ++c) classes[c] = c;
    for (std::size_t r = 0; r < R; ++r) regions[r] = r;
    rng.shuffle(classes);
    rng.shuffle(regions);

    Tensor feats({R, d});
    for (double& x : feats.data()) x = rng.normal(0.0, cfg.noise_sigma);
    std::vector<std::pair<ClassId, std::size_t>> placed;
    for (std::size_t j = 0; j < k; ++j) {
      auto row = feats.row(regions[j]);
      auto proto = protos.row(classes[j]);
      for (std::size_t t = 0; t < d; ++t) row[t] += proto[t];
      placed.emplace_back(classes[j], regions[j]);
    }
    std::sort(placed.begin(), placed.end());

    Sample s;
    std::string num = std::to_string(i);
    s.id = "img-" + std::string(width - num.size(), '0') + num;
    s.regions = std::move(feats);
    s.split = i < cfg.n_train ? Split::kTrain : Split::kTest;
    std::vector<std::size_t> where;
    for (auto [c, r] : placed) {
      s.labels.push_back(c);
      where.push_back(r);
    }
    samples.push_back(std::move(s));
    label_regions.push_back(std::move(where));
  }
  return SyntheticData{Dataset(std::move(names), std::move(samples)),
                       std::move(protos), std::move(label_regions)};
}

// ---------------------------------------------------------------- JSON lines

void write_jsonl(std::ostream& os, const Dataset& data) {
  for (const Sample& s : data.samples()) {
    json regions = json::array();
    for (std::size_t r = 0; r < s.regions.rows(); ++r) {
      auto row = s.regions.row(r);
      regions.push_back(std::vector<double>(row.begin(), row.end()));
    }
    json labels = json::array();
    for (ClassId c : s.labels) labels.push_back(data.class_names()[c]);
    json line = {{"id", s.id},
                 {"labels", labels},
                 {"regions", regions},
                 {"split", split_name(s.split)}};
    os << line.dump() << '\n';
  }
}

namespace {

struct RawSample {
  std::string id;
  Tensor regions;
  std::vector<std::string> labels;
  Split split;
};

RawSample parse_line(const std::string& text, std::size_t line_no,
                     std::ostream* warnings) {
  auto fail = [line_no](const std::string& what) {
    return DataError("line " + std::to_string(line_no) + ": " + what);
  };
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw fail(std::string("malformed JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw fail("expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "id" && key != "regions" && key != "labels" && key != "split" &&
        warnings) {
      *warnings << "warning: line " << line_no << ": ignoring unknown field '"
                << key << "'\n";
    }
  }
  RawSample out;
  try {
    out.id = j.at("id").get<std::string>();
    const auto& regions = j.at("regions");
    if (!regions.is_array() || regions.empty()) throw fail("'regions' must be a non-empty array");
    const std::size_t R = regions.size();
    const std::size_t d = regions.front().size();
    if (d == 0) throw fail("region rows must be non-empty");
    std::vector<double> flat;
    flat.reserve(R * d);
    for (const auto& row : regions) {
      if (!row.is_array() || row.size() != d) throw fail("ragged 'regions' matrix");
      for (const auto& v : row) {
        if (!v.is_number()) throw fail("non-numeric region value");
        flat.push_back(v.get<double>());
      }
    }
    out.regions = Tensor::matrix(R, d, std::move(flat));
    out.labels = j.at("labels").get<std::vector<std::string>>();
    const std::string split = j.at("split").get<std::string>();
    if (split == "train") {
      out.split = Split::kTrain;
    } else if (split == "test") {
      out.split = Split::kTest;
    } else {
      throw fail("split must be 'train' or 'test', got '" + split + "'");
    }
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
  if (out.split == Split::kTrain && out.labels.empty()) {
    throw fail("train sample '" + out.id + "' has no labels");
  }
  return out;
}

}  // namespace

Dataset read_jsonl(std::istream& is, std::ostream* warnings) {
  std::vector<RawSample> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    RawSample s = parse_line(line, line_no, warnings);
    if (!raw.empty() && s.regions.shape() != raw.front().regions.shape()) {
      throw DataError("line " + std::to_string(line_no) +
                      ": schema error, regions shape " +
                      numgrad::shape_string(s.regions.shape()) + " differs from " +
                      numgrad::shape_string(raw.front().regions.shape()));
    }
    raw.push_back(std::move(s));
  }
  std::set<std::string> name_set;
  for (const auto& s : raw) name_set.insert(s.labels.begin(), s.labels.end());
  std::vector<std::string> names(name_set.begin(), name_set.end());

  std::vector<Sample> samples;
  samples.reserve(raw.size());
  for (auto& r : raw) {
    Sample s;
    s.id = std::move(r.id);
    s.regions = std::move(r.regions);
    s.split = r.split;
    for (const auto& name : r.labels) {
      s.labels.push_back(static_cast<ClassId>(
          std::lower_bound(names.begin(), names.end(), name) - names.begin()));
    }
    std::sort(s.labels.begin(), s.labels.end());
    s.labels.erase(std::unique(s.labels.begin(), s.labels.end()), s.labels.end());
    samples.push_back(std::move(s));
  }
  return Dataset(std::move(names), std::move(samples));
}

namespace {

bool is_gzip_path(const std::filesystem::path& p) { return p.extension() == ".gz"; }

}  // namespace

void save(const Dataset& data, const std::filesystem::path& path) {
  std::ostringstream os;
  write_jsonl(os, data);
  const std::string text = os.str();
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
    const int written = gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
    gzclose(f);
    if (written != static_cast<int>(text.size())) {
      throw DataError("short write to '" + path.string() + "'");
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

Dataset load(const std::filesystem::path& path, std::ostream* warnings) {
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw DataError("cannot open '" + path.string() + "'");
    std::string text;
    char buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof buf)) > 0) text.append(buf, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw DataError("corrupt gzip stream in '" + path.string() + "'");
    std::istringstream is(text);
    return read_jsonl(is, warnings);
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return read_jsonl(in, warnings);
}

}  // namespace mlcil::dataio

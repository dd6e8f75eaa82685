#pragma once

// Multi-label region-feature datasets: synthetic generation and the JSON-lines
// file format (optionally gzip-compressed).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "mlcil/numgrad.hpp"

namespace mlcil::dataio {

using ClassId = std::size_t;
using numgrad::Tensor;

enum class Split { kTrain, kTest };

const char* split_name(Split s);

struct Sample {
  std::string id;
  Tensor regions;               // R x d_in
  std::vector<ClassId> labels;  // sorted, unique
  Split split = Split::kTrain;

  bool has_label(ClassId c) const;
};

/// Class ids are positions in the alphabetically sorted class-name list.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<std::string> class_names, std::vector<Sample> samples);

  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<Sample>& samples() const { return samples_; }
  std::size_t n_classes() const { return class_names_.size(); }
  std::size_t n_regions() const;
  std::size_t d_in() const;

  ClassId class_id(const std::string& name) const;
  const Sample& sample(const std::string& id) const;
  std::size_t index_of(const std::string& id) const;
  std::vector<std::size_t> indices(Split split) const;

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.class_names_ == b.class_names_ && a.samples_ == b.samples_;
  }

 private:
  void index();

  std::vector<std::string> class_names_;
  std::vector<Sample> samples_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

bool operator==(const Sample& a, const Sample& b);

struct GeneratorConfig {
  std::size_t n_classes = 12;
  std::size_t n_train = 600;
  std::size_t n_test = 300;
  std::size_t n_regions = 4;
  std::size_t d_in = 16;
  std::size_t max_labels_per_image = 3;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Generated data together with its ground truth.
struct SyntheticData {
  Dataset dataset;
  Tensor prototypes;  // n_classes x d_in, unit rows
  /// Per sample (same order as dataset.samples()), the region index holding
  /// each label, parallel to Sample::labels.
  std::vector<std::vector<std::size_t>> label_regions;
};

/// Class names are "class_00", "class_01", ... so alphabetical order equals
/// generation order.
SyntheticData generate(const GeneratorConfig& cfg);

void write_jsonl(std::ostream& os, const Dataset& data);
Dataset read_jsonl(std::istream& is, std::ostream* warnings);

/// Paths ending in ".gz" are gzip-compressed.
void save(const Dataset& data, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path, std::ostream* warnings = nullptr);

}  // namespace mlcil::dataio

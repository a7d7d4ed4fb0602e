#pragma once

#include <map>
#include <string>
#include <vector>

#include "moetune/model.hpp"

namespace moetune {

constexpr int kReportSchemaVersion = 1;

/// Top-1 dispatch histogram of one layer.
struct ExpertHistogram {
  std::size_t layer = 0;
  std::vector<std::size_t> counts;  // length E
  std::vector<double> frequencies;  // counts / token count
  std::size_t token_count = 0;
};

struct ClassRouting {
  std::string class_name;
  std::vector<ExpertHistogram> per_layer;          // aligned with report.layers
  std::size_t dominant_primary = 0;                // at the last requested layer
  std::size_t dominant_secondary = 0;
  double entropy_first = 0.0;                      // -sum f ln f, first layer
  double entropy_last = 0.0;                       // same, last layer
};

struct SpecializationReport {
  std::vector<std::size_t> layers;
  std::size_t total_experts = 0;
  std::vector<ClassRouting> classes;
  std::vector<std::vector<std::size_t>> overlap;  // |dominant-pair intersection|
};

/// Top-1 dispatch histogram over the traces of one layer.
ExpertHistogram expert_frequency(const std::vector<RoutingTrace>& traces, std::size_t layer,
                                 std::size_t total_experts);

/// Default layer sampling: first, middle, last.
std::vector<std::size_t> default_layer_sample(std::size_t n_layers);

/// Per-class, per-layer histograms plus dominant pairs (two highest
/// frequencies at the last requested layer, ties to the lower index), routing
/// entropy, and the cross-class dominant-pair overlap matrix.
SpecializationReport specialization_report(
    const std::map<std::string, std::vector<RoutingTrace>>& traces_by_class,
    const std::vector<std::size_t>& layers, std::size_t total_experts);

double routing_entropy(const ExpertHistogram& h);

/// (layer, expert) pairs whose top-1 frequency is below the threshold.
std::vector<std::pair<std::size_t, std::size_t>> underutilized_experts(
    const std::vector<RoutingTrace>& traces, double threshold, std::size_t total_experts,
    const std::vector<std::size_t>& layers);

/// CSV columns: class,layer,expert,count,frequency. JSON mirrors the full
/// report and validates against the shipped schema.
void export_report_csv(const SpecializationReport& report, const std::string& path);
void export_report_json(const SpecializationReport& report, const std::string& path);
SpecializationReport parse_report_csv(const std::string& path);

/// Minimal structural JSON-schema validation (type/required/properties/items
/// subset); throws with a path-qualified message on the first violation.
void validate_json_file(const std::string& doc_path, const std::string& schema_path);

/// Validates an exported JSON report against the schema shipped as
/// schema/specialization_report.schema.json.
void validate_report_json(const std::string& report_path, const std::string& schema_path);

}  // namespace moetune

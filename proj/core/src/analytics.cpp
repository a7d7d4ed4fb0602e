#include "moetune/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace moetune {

using nlohmann::json;

ExpertHistogram expert_frequency(const std::vector<RoutingTrace>& traces, std::size_t layer,
                                 std::size_t total_experts) {
  ExpertHistogram h;
  h.layer = layer;
  h.counts.assign(total_experts, 0);
  for (const auto& t : traces) {
    if (t.layer != layer) continue;
    if (t.argmax_expert >= total_experts) {
      throw std::invalid_argument("expert_frequency: trace expert out of range");
    }
    ++h.counts[t.argmax_expert];
    ++h.token_count;
  }
  if (h.token_count == 0) {
    throw std::invalid_argument("expert_frequency: no traces for layer " + std::to_string(layer));
  }
  h.frequencies.resize(total_experts);
  for (std::size_t i = 0; i < total_experts; ++i) {
    h.frequencies[i] = static_cast<double>(h.counts[i]) / static_cast<double>(h.token_count);
  }
  return h;
}

std::vector<std::size_t> default_layer_sample(std::size_t n_layers) {
  if (n_layers == 0) throw std::invalid_argument("default_layer_sample: zero layers");
  if (n_layers == 1) return {0};
  std::vector<std::size_t> out{0, n_layers / 2, n_layers - 1};
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double routing_entropy(const ExpertHistogram& h) {
  double e = 0.0;
  for (double f : h.frequencies) {
    if (f > 0.0) e -= f * std::log(f);
  }
  return e;
}

namespace {

std::pair<std::size_t, std::size_t> dominant_pair(const ExpertHistogram& h) {
  // Two highest frequencies; ties resolved toward the lower expert index by
  // scanning in index order with strict improvement.
  std::size_t best = 0, second = h.frequencies.size() > 1 ? 1 : 0;
  if (h.frequencies.size() > 1 && h.frequencies[1] > h.frequencies[0]) std::swap(best, second);
  for (std::size_t i = 2; i < h.frequencies.size(); ++i) {
    if (h.frequencies[i] > h.frequencies[best]) {
      second = best;
      best = i;
    } else if (h.frequencies[i] > h.frequencies[second]) {
      second = i;
    }
  }
  return {best, second};
}

}  // namespace

SpecializationReport specialization_report(
    const std::map<std::string, std::vector<RoutingTrace>>& traces_by_class,
    const std::vector<std::size_t>& layers, std::size_t total_experts) {
  if (traces_by_class.size() < 2) {
    throw std::invalid_argument("specialization_report: need at least 2 classes");
  }
  if (layers.empty()) throw std::invalid_argument("specialization_report: empty layer list");

  SpecializationReport rep;
  rep.layers = layers;
  rep.total_experts = total_experts;
  for (const auto& [cls, traces] : traces_by_class) {
    if (traces.empty()) {
      throw std::invalid_argument("specialization_report: class has no traces: " + cls);
    }
    ClassRouting cr;
    cr.class_name = cls;
    for (std::size_t layer : layers) {
      cr.per_layer.push_back(expert_frequency(traces, layer, total_experts));
    }
    cr.entropy_first = routing_entropy(cr.per_layer.front());
    cr.entropy_last = routing_entropy(cr.per_layer.back());
    auto [p, s] = dominant_pair(cr.per_layer.back());
    cr.dominant_primary = p;
    cr.dominant_secondary = s;
    rep.classes.push_back(std::move(cr));
  }

  const std::size_t n = rep.classes.size();
  rep.overlap.assign(n, std::vector<std::size_t>(n, 0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t hits = 0;
      const auto& ca = rep.classes[a];
      const auto& cb = rep.classes[b];
      for (std::size_t ea : {ca.dominant_primary, ca.dominant_secondary}) {
        if (ea == cb.dominant_primary || ea == cb.dominant_secondary) ++hits;
      }
      rep.overlap[a][b] = hits;
    }
  }
  return rep;
}

std::vector<std::pair<std::size_t, std::size_t>> underutilized_experts(
    const std::vector<RoutingTrace>& traces, double threshold, std::size_t total_experts,
    const std::vector<std::size_t>& layers) {
  if (threshold < 0.0 || threshold >= 1.0) {
    throw std::invalid_argument("underutilized_experts: threshold must be in [0, 1)");
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (threshold == 0.0) return out;
  for (std::size_t layer : layers) {
    auto h = expert_frequency(traces, layer, total_experts);
    for (std::size_t e = 0; e < total_experts; ++e) {
      if (h.frequencies[e] < threshold) out.emplace_back(layer, e);
    }
  }
  return out;
}

void export_report_csv(const SpecializationReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_report_csv: cannot open " + path);
  out << "class,layer,expert,count,frequency\n";
  out << std::setprecision(6) << std::fixed;
  for (const auto& cls : report.classes) {
    for (const auto& h : cls.per_layer) {
      for (std::size_t e = 0; e < h.counts.size(); ++e) {
        out << cls.class_name << "," << h.layer << "," << e << "," << h.counts[e] << ","
            << h.frequencies[e] << "\n";
      }
    }
  }
}

SpecializationReport parse_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("parse_report_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "class,layer,expert,count,frequency") {
    throw std::runtime_error("parse_report_csv: bad header in " + path);
  }
  SpecializationReport rep;
  std::map<std::string, std::map<std::size_t, ExpertHistogram>> acc;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string cls, field;
    std::getline(is, cls, ',');
    std::getline(is, field, ',');
    const std::size_t layer = std::stoul(field);
    std::getline(is, field, ',');
    const std::size_t expert = std::stoul(field);
    std::getline(is, field, ',');
    const std::size_t count = std::stoul(field);
    std::getline(is, field, ',');
    const double freq = std::stod(field);
    auto& h = acc[cls][layer];
    h.layer = layer;
    if (h.counts.size() <= expert) {
      h.counts.resize(expert + 1, 0);
      h.frequencies.resize(expert + 1, 0.0);
    }
    h.counts[expert] = count;
    h.frequencies[expert] = freq;
    h.token_count += count;
  }
  for (auto& [cls, layers] : acc) {
    ClassRouting cr;
    cr.class_name = cls;
    for (auto& [layer, h] : layers) {
      if (rep.classes.empty()) rep.layers.push_back(layer);
      rep.total_experts = std::max(rep.total_experts, h.counts.size());
      cr.per_layer.push_back(std::move(h));
    }
    rep.classes.push_back(std::move(cr));
  }
  return rep;
}

namespace {

json histogram_to_json(const ExpertHistogram& h) {
  return json{{"layer", h.layer},
              {"counts", h.counts},
              {"frequencies", h.frequencies},
              {"token_count", h.token_count}};
}

// Structural subset of JSON Schema: type, properties, required, items.
void validate_node(const json& value, const json& schema, const std::string& where) {
  if (schema.contains("type")) {
    const std::string t = schema.at("type");
    const bool ok = (t == "object" && value.is_object()) || (t == "array" && value.is_array()) ||
                    (t == "string" && value.is_string()) ||
                    (t == "integer" && value.is_number_integer()) ||
                    (t == "number" && value.is_number()) || (t == "boolean" && value.is_boolean());
    if (!ok) {
      throw std::runtime_error("schema violation at " + where + ": expected type " + t);
    }
  }
  if (schema.contains("required")) {
    for (const auto& key : schema.at("required")) {
      if (!value.contains(key.get<std::string>())) {
        throw std::runtime_error("schema violation at " + where + ": missing required field " +
                                 key.get<std::string>());
      }
    }
  }
  if (schema.contains("properties") && value.is_object()) {
    for (const auto& [key, sub] : schema.at("properties").items()) {
      if (value.contains(key)) validate_node(value.at(key), sub, where + "." + key);
    }
  }
  if (schema.contains("items") && value.is_array()) {
    std::size_t i = 0;
    for (const auto& el : value) {
      validate_node(el, schema.at("items"), where + "[" + std::to_string(i++) + "]");
    }
  }
}

}  // namespace

void export_report_json(const SpecializationReport& report, const std::string& path) {
  json classes = json::array();
  for (const auto& cls : report.classes) {
    json layers = json::array();
    for (const auto& h : cls.per_layer) layers.push_back(histogram_to_json(h));
    classes.push_back({{"class", cls.class_name},
                       {"per_layer", layers},
                       {"dominant_primary", cls.dominant_primary},
                       {"dominant_secondary", cls.dominant_secondary},
                       {"entropy_first", cls.entropy_first},
                       {"entropy_last", cls.entropy_last}});
  }
  json doc = {{"schema_version", kReportSchemaVersion},
              {"layers", report.layers},
              {"total_experts", report.total_experts},
              {"classes", classes},
              {"overlap", report.overlap}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_report_json: cannot open " + path);
  out << doc.dump(2) << "\n";
}

void validate_json_file(const std::string& doc_path, const std::string& schema_path) {
  std::ifstream din(doc_path), sin(schema_path);
  if (!din) throw std::runtime_error("validate_json_file: cannot open " + doc_path);
  if (!sin) throw std::runtime_error("validate_json_file: cannot open " + schema_path);
  json doc = json::parse(din);
  json schema = json::parse(sin);
  validate_node(doc, schema, "$");
}

void validate_report_json(const std::string& report_path, const std::string& schema_path) {
  validate_json_file(report_path, schema_path);
}

}  // namespace moetune

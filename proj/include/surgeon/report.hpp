#pragma once

#include <cstdint>
#include <iomanip>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "surgeon/errors.hpp"
#include "surgeon/surgeon.hpp"

namespace surgeon {

/// Layer types used in the sparsity-by-type table.
inline std::string layer_type(LayerKind k) {
  switch (k) {
    case LayerKind::attention_projection: return "attention";
    case LayerKind::linear: return "fully-connected";
    case LayerKind::embedding: return "embedding";
  }
  return "?";
}

struct TypeRow {
  std::string type;
  std::int64_t total = 0;
  std::int64_t removed = 0;
  double sparsity = 0.0;      // removed / total within the type
  double contribution = 0.0;  // removed / global total; sums to global sparsity
};

struct SparsitySummary {
  std::vector<LayerShotReport> layers;  // depth order
  std::vector<TypeRow> types;           // fixed order: attention, fully-connected, embedding (present ones only)
  std::int64_t total = 0;
  std::int64_t removed = 0;
  double global_sparsity = 0.0;
};

/// Aggregates the last report in the list (the final state of the run).
inline SparsitySummary summarize(const std::vector<ShotReport>& reports) {
  SparsitySummary s;
  if (reports.empty()) return s;
  s.layers = reports.back().layers;
  for (const char* t : {"attention", "fully-connected", "embedding"}) {
    TypeRow row;
    row.type = t;
    bool present = false;
    for (const auto& l : s.layers)
      if (layer_type(l.kind) == t) {
        present = true;
        row.total += l.total();
        row.removed += l.removed_elements;
      }
    if (present) s.types.push_back(row);
  }
  for (const auto& l : s.layers) {
    s.total += l.total();
    s.removed += l.removed_elements;
  }
  s.global_sparsity = s.total == 0 ? 0.0 : static_cast<double>(s.removed) / static_cast<double>(s.total);
  for (auto& t : s.types) {
    t.sparsity = t.total == 0 ? 0.0 : static_cast<double>(t.removed) / static_cast<double>(t.total);
    t.contribution = s.total == 0 ? 0.0 : static_cast<double>(t.removed) / static_cast<double>(s.total);
  }
  return s;
}

inline void write_layer_csv(std::ostream& os, const SparsitySummary& s) {
  os << "depth,layer,type,rows,cols,total,removed,sparsity,removed_rows,removed_cols\n" << std::setprecision(17);
  for (const auto& l : s.layers)
    os << l.depth << ',' << l.name << ',' << layer_type(l.kind) << ',' << l.rows << ',' << l.cols << ',' << l.total()
       << ',' << l.removed_elements << ',' << l.sparsity() << ',' << l.removed_rows << ',' << l.removed_cols << '\n';
}

inline void write_type_csv(std::ostream& os, const SparsitySummary& s) {
  os << "type,total,removed,sparsity,contribution\n" << std::setprecision(17);
  for (const auto& t : s.types)
    os << t.type << ',' << t.total << ',' << t.removed << ',' << t.sparsity << ',' << t.contribution << '\n';
}

inline Json to_json(const SparsitySummary& s) {
  Json layers = Json::array(), types = Json::array();
  for (const auto& l : s.layers) layers.push_back(to_json(l));
  for (const auto& t : s.types)
    types.push_back({{"type", t.type},
                     {"total", t.total},
                     {"removed", t.removed},
                     {"sparsity", t.sparsity},
                     {"contribution", t.contribution}});
  return Json{{"total", s.total},
              {"removed", s.removed},
              {"global_sparsity", s.global_sparsity},
              {"layers", layers},
              {"types", types}};
}

inline std::vector<ShotReport> read_shot_reports(std::istream& is) {
  std::vector<ShotReport> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ConfigError("shot report line is not JSON");
    out.push_back(shot_report_from_json(j));
  }
  return out;
}

}  // namespace surgeon

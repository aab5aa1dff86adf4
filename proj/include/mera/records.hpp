#pragma once

// Patient records and their line-delimited JSON file format.

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mera/error.hpp"
#include "mera/ontology.hpp"

namespace mera {

/// One admission: an unordered set of leaf codes, stored sorted and unique.
struct Visit {
  std::vector<CodeId> codes;

  static Visit of(std::vector<CodeId> codes) {
    std::sort(codes.begin(), codes.end());
    codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
    return Visit{std::move(codes)};
  }
  bool contains(const CodeId& c) const { return std::binary_search(codes.begin(), codes.end(), c); }
  std::size_t size() const { return codes.size(); }
  bool operator==(const Visit&) const = default;
};

/// Chronological visits of one patient.
struct PatientRecord {
  std::string patient_id;
  std::vector<Visit> visits;
  bool operator==(const PatientRecord&) const = default;
};

/// Checks the record invariants; with an ontology, also that every code is a leaf.
inline void validate_record(const PatientRecord& p, const Ontology* o = nullptr) {
  if (p.patient_id.empty()) throw ValidationError("record without patient_id");
  if (p.visits.size() < 2) {
    throw ValidationError("patient " + p.patient_id + " has fewer than 2 visits");
  }
  for (const auto& v : p.visits) {
    if (v.codes.empty()) throw ValidationError("patient " + p.patient_id + " has an empty visit");
    if (!std::is_sorted(v.codes.begin(), v.codes.end()) ||
        std::adjacent_find(v.codes.begin(), v.codes.end()) != v.codes.end()) {
      throw ValidationError("patient " + p.patient_id + " has duplicate codes in a visit");
    }
    if (o != nullptr) {
      for (const auto& c : v.codes) {
        if (!o->contains(c)) throw ValidationError("patient " + p.patient_id + ": unknown code " + c);
      }
    }
  }
}

inline std::string format_record(const PatientRecord& p) {
  std::string out = "{\"patient_id\": " + nlohmann::json(p.patient_id).dump() + ", \"visits\": [";
  for (std::size_t i = 0; i < p.visits.size(); ++i) {
    if (i > 0) out += ", ";
    out += '[';
    for (std::size_t j = 0; j < p.visits[i].codes.size(); ++j) {
      if (j > 0) out += ", ";
      out += nlohmann::json(p.visits[i].codes[j]).dump();
    }
    out += ']';
  }
  out += "]}";
  return out;
}

/// Parses one line. Visit sets are canonicalized; duplicates inside a visit are an error.
inline PatientRecord parse_record(const std::string& line, const Ontology* o = nullptr) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed record: ") + e.what());
  }
  if (!j.is_object() || !j.contains("patient_id") || !j.contains("visits") ||
      !j["patient_id"].is_string() || !j["visits"].is_array()) {
    throw ValidationError("malformed record: expected {\"patient_id\": ..., \"visits\": [...]}");
  }
  PatientRecord p;
  p.patient_id = j["patient_id"].get<std::string>();
  for (const auto& visit : j["visits"]) {
    if (!visit.is_array()) throw ValidationError("malformed record: visit is not an array");
    std::vector<CodeId> codes;
    for (const auto& c : visit) {
      if (!c.is_string()) throw ValidationError("malformed record: code is not a string");
      codes.push_back(c.get<std::string>());
    }
    const auto n = codes.size();
    auto v = Visit::of(std::move(codes));
    if (v.size() != n) throw ValidationError("patient " + p.patient_id + " has duplicate codes in a visit");
    p.visits.push_back(std::move(v));
  }
  validate_record(p, o);
  return p;
}

inline std::vector<PatientRecord> read_records(std::istream& in, const Ontology* o = nullptr) {
  std::vector<PatientRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_record(line, o));
  }
  return out;
}

inline std::vector<PatientRecord> load_records(const std::string& path, const Ontology* o = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open records file " + path);
  return read_records(in, o);
}

inline void save_records(const std::vector<PatientRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write records file " + path);
  for (const auto& p : records) out << format_record(p) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace mera

#include "ipf/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ipf/error.hpp"
#include "ipf/random.hpp"

namespace ipf {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Sex s) { return s == Sex::male ? "Male" : "Female"; }

std::string_view to_string(Smoking s) {
  switch (s) {
    case Smoking::currently_smokes: return "Currently smokes";
    case Smoking::ex_smoker: return "Ex-smoker";
    case Smoking::never_smoked: return "Never smoked";
  }
  return "Never smoked";
}

FvcSeries::FvcSeries(std::vector<FvcPoint> points) : points_(std::move(points)) {
  if (points_.size() < 2) throw DataError("FVC series needs at least two measurements");
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!(points_[i].fvc > 0.0) || !std::isfinite(points_[i].fvc)) {
      throw DataError("FVC values must be positive and finite");
    }
    if (i > 0 && !(points_[i].weeks > points_[i - 1].weeks)) {
      throw DataError("FVC timestamps must be strictly increasing");
    }
  }
}

std::vector<double> FvcSeries::weeks() const {
  std::vector<double> out;
  out.reserve(points_.size());
  for (const auto& p : points_) out.push_back(p.weeks);
  return out;
}

std::vector<double> FvcSeries::values() const {
  std::vector<double> out;
  out.reserve(points_.size());
  for (const auto& p : points_) out.push_back(p.fvc);
  return out;
}

std::vector<double> FvcSeries::rezeroed_weeks() const {
  std::vector<double> out = weeks();
  if (!out.empty()) {
    const double origin = out.front();
    for (auto& t : out) t -= origin;
  }
  return out;
}

void CtVolume::validate() const {
  if (slices.empty()) throw DataError("CT volume has no slices");
  for (const auto& s : slices) {
    if (!s.same_shape(slices.front())) throw DataError("CT slice dimension mismatch");
  }
  if (slices.front().empty()) throw DataError("CT slices are empty");
  if (keep.top > keep.bottom || keep.bottom >= slices.size()) {
    throw DataError("keep_range out of bounds");
  }
}

std::array<double, 2> smoking_code(Smoking s) {
  switch (s) {
    case Smoking::never_smoked: return {0.0, 0.0};
    case Smoking::ex_smoker: return {0.0, 1.0};
    case Smoking::currently_smokes: return {1.0, 0.0};
  }
  return {0.0, 0.0};
}

ClinicalVector encode_clinical(const ClinicalRecord& record, const NormStats& stats) {
  const double span = stats.age_max - stats.age_min;
  const double age = std::clamp((record.age - stats.age_min) / span, 0.0, 1.0);
  const auto smoke = smoking_code(record.smoking);
  return ClinicalVector{{age, record.sex == Sex::male ? 1.0 : 0.0, smoke[0], smoke[1]}};
}

NormStats fit_norm_stats(std::span<const ClinicalRecord> records) {
  if (records.empty()) return {};
  auto [lo, hi] = std::minmax_element(records.begin(), records.end(),
                                      [](const auto& a, const auto& b) { return a.age < b.age; });
  NormStats s{static_cast<double>(lo->age), static_cast<double>(hi->age)};
  if (!(s.age_min < s.age_max)) {
    s.age_min -= 0.5;
    s.age_max += 0.5;
  }
  return s;
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const char* what, std::size_t line) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc{} || ptr != end || !std::isfinite(v)) {
    throw ParseError(std::string("non-numeric ") + what + ", row " + std::to_string(line));
  }
  return v;
}

Sex parse_sex(const std::string& s, std::size_t line) {
  if (s == "Male") return Sex::male;
  if (s == "Female") return Sex::female;
  throw ParseError("unknown sex '" + s + "', row " + std::to_string(line));
}

Smoking parse_smoking(const std::string& s, std::size_t line) {
  if (s == "Currently smokes") return Smoking::currently_smokes;
  if (s == "Ex-smoker") return Smoking::ex_smoker;
  if (s == "Never smoked") return Smoking::never_smoked;
  throw ParseError("unknown smoking status '" + s + "', row " + std::to_string(line));
}

}  // namespace

std::vector<ClinicalRow> parse_clinical_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::vector<ClinicalRow> rows;
  std::vector<std::size_t> counts;
  std::map<std::pair<std::string, double>, std::size_t> index;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (!have_header) {
      if (trim(line) != kClinicalCsvHeader) {
        throw ParseError("header mismatch (expected '" + std::string(kClinicalCsvHeader) +
                         "'), row " + std::to_string(line_no));
      }
      have_header = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 6) {
      throw ParseError("expected 6 columns, got " + std::to_string(f.size()) + ", row " +
                       std::to_string(line_no));
    }
    if (f[0].empty()) throw ParseError("missing patient_id, row " + std::to_string(line_no));
    ClinicalRow row;
    row.patient_id = f[0];
    row.weeks = parse_number(f[1], "weeks", line_no);
    row.fvc = parse_number(f[2], "fvc", line_no);
    const double age = parse_number(f[3], "age", line_no);
    if (age != std::floor(age) || age < kMinPlausibleAge || age > kMaxPlausibleAge) {
      throw ParseError("age outside plausible range, row " + std::to_string(line_no));
    }
    row.record = ClinicalRecord{f[0], static_cast<int>(age), parse_sex(f[4], line_no),
                                parse_smoking(f[5], line_no)};

    const auto key = std::make_pair(row.patient_id, row.weeks);
    if (auto it = index.find(key); it != index.end()) {
      rows[it->second].fvc += row.fvc;
      ++counts[it->second];
    } else {
      index.emplace(key, rows.size());
      rows.push_back(std::move(row));
      counts.push_back(1);
    }
  }
  if (!have_header) throw ParseError("missing header, row " + std::to_string(line_no + 1));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].fvc /= static_cast<double>(counts[i]);
  return rows;
}

std::vector<ClinicalRow> parse_clinical_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open clinical CSV: " + path.string());
  return parse_clinical_csv(in);
}

std::vector<PatientClinical> group_by_patient(const std::vector<ClinicalRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<ClinicalRecord, std::vector<FvcPoint>>> groups;
  for (const auto& r : rows) {
    auto [it, inserted] = groups.try_emplace(r.patient_id, r.record, std::vector<FvcPoint>{});
    if (inserted) {
      order.push_back(r.patient_id);
    } else if (!(it->second.first == r.record)) {
      throw ParseError("inconsistent clinical fields for patient " + r.patient_id);
    }
    it->second.second.push_back({r.weeks, r.fvc});
  }
  std::vector<PatientClinical> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    auto& [record, points] = groups.at(id);
    std::stable_sort(points.begin(), points.end(),
                     [](const FvcPoint& a, const FvcPoint& b) { return a.weeks < b.weeks; });
    try {
      out.push_back({record, FvcSeries(points)});
    } catch (const DataError& e) {
      throw DataError("patient " + id + ": " + e.what());
    }
  }
  return out;
}

void write_clinical_csv(std::ostream& out, std::span<const PatientSample> patients) {
  out << kClinicalCsvHeader << '\n';
  for (const auto& p : patients) {
    for (const auto& pt : p.fvc.points()) {
      out << p.id() << ',' << pt.weeks << ',' << std::setprecision(17) << pt.fvc << ','
          << p.clinical.age << ',' << to_string(p.clinical.sex) << ','
          << to_string(p.clinical.smoking) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------

CtVolume load_ct_stack(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest: " + manifest.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  if (!doc.contains("slices") || !doc["slices"].is_array() || !doc.contains("keep_range") ||
      !doc["keep_range"].is_array() || doc["keep_range"].size() != 2) {
    throw ParseError("manifest missing 'slices' or 'keep_range': " + manifest.string());
  }
  CtVolume vol;
  const fs::path base = manifest.parent_path();
  for (const auto& entry : doc["slices"]) {
    const fs::path p = base / entry.get<std::string>();
    if (!fs::exists(p)) throw DataError("missing slice file: " + p.string());
    vol.slices.push_back(read_pgm16(p));
  }
  const auto top = doc["keep_range"][0].get<long long>();
  const auto bottom = doc["keep_range"][1].get<long long>();
  if (top < 0 || bottom < 0) throw DataError("keep_range out of bounds: " + manifest.string());
  vol.keep = {static_cast<std::size_t>(top), static_cast<std::size_t>(bottom)};
  try {
    vol.validate();
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + ": " + manifest.string());
  }
  return vol;
}

void write_ct_stack(const fs::path& dir, const std::string& patient_id, const CtVolume& volume,
                    const std::string& header_comment) {
  fs::create_directories(dir);
  json doc;
  doc["patient_id"] = patient_id;
  doc["slices"] = json::array();
  for (std::size_t i = 0; i < volume.slices.size(); ++i) {
    std::ostringstream name;
    name << "slice_" << std::setw(3) << std::setfill('0') << i << ".pgm";
    write_pgm16(dir / name.str(), volume.slices[i], header_comment);
    doc["slices"].push_back(name.str());
  }
  doc["keep_range"] = {volume.keep.top, volume.keep.bottom};
  if (!header_comment.empty()) {
    auto run = json::parse(header_comment, nullptr, false);
    doc["run"] = run.is_discarded() ? json(header_comment) : run;
  }
  std::ofstream out(dir / "manifest.json");
  out << doc.dump(2) << '\n';
}

fs::path manifest_path(const fs::path& root, const std::string& patient_id) {
  return root / "ct" / patient_id / "manifest.json";
}

std::vector<PatientSample> load_dataset(const fs::path& root) {
  const auto grouped = group_by_patient(parse_clinical_csv(root / "clinical.csv"));
  std::vector<PatientSample> out;
  out.reserve(grouped.size());
  for (const auto& g : grouped) {
    out.push_back({g.record, load_ct_stack(manifest_path(root, g.record.patient_id)), g.fvc});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Fold> kfold_split(std::size_t count, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw DataError("k-fold split needs k >= 2");
  if (count < k) {
    throw DataError("k-fold split: " + std::to_string(k) + " folds exceed " +
                    std::to_string(count) + " patients");
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = count / k + (f < count % k ? 1 : 0);
    folds[f].test.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(folds[f].test.begin(), folds[f].test.end());
    pos += size;
  }
  for (auto& fold : folds) {
    std::vector<bool> in_test(count, false);
    for (auto i : fold.test) in_test[i] = true;
    for (std::size_t i = 0; i < count; ++i) {
      if (!in_test[i]) fold.train.push_back(i);
    }
  }
  return folds;
}

}  // namespace ipf

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ipf/raster.hpp"

namespace ipf {

enum class Sex { male, female };
enum class Smoking { currently_smokes, ex_smoker, never_smoked };

std::string_view to_string(Sex s);
std::string_view to_string(Smoking s);

inline constexpr int kMinPlausibleAge = 18;
inline constexpr int kMaxPlausibleAge = 120;

struct ClinicalRecord {
  std::string patient_id;
  int age = 0;
  Sex sex = Sex::male;
  Smoking smoking = Smoking::never_smoked;

  bool operator==(const ClinicalRecord&) const = default;
};

struct FvcPoint {
  double weeks = 0.0;
  double fvc = 0.0;  // mL

  bool operator==(const FvcPoint&) const = default;
};

// Chronologically ordered FVC measurements. Construction validates:
// at least two points, strictly increasing weeks, positive FVC.
class FvcSeries {
 public:
  FvcSeries() = default;
  explicit FvcSeries(std::vector<FvcPoint> points);

  const std::vector<FvcPoint>& points() const noexcept { return points_; }
  std::size_t size() const noexcept { return points_.size(); }
  std::vector<double> weeks() const;
  std::vector<double> values() const;
  // Weeks shifted so the first measurement sits at t = 0.
  std::vector<double> rezeroed_weeks() const;
  double baseline() const { return points_.front().fvc; }

  bool operator==(const FvcSeries&) const = default;

 private:
  std::vector<FvcPoint> points_;
};

struct KeepRange {
  std::size_t top = 0;
  std::size_t bottom = 0;

  bool operator==(const KeepRange&) const = default;
};

struct CtVolume {
  std::vector<RawSlice> slices;
  KeepRange keep;

  // Throws DataError when slice shapes differ or keep range is out of bounds.
  void validate() const;
  std::size_t kept_count() const noexcept { return keep.bottom - keep.top + 1; }
  std::span<const RawSlice> kept() const {
    return std::span<const RawSlice>(slices).subspan(keep.top, kept_count());
  }

  bool operator==(const CtVolume&) const = default;
};

struct PatientSample {
  ClinicalRecord clinical;
  CtVolume volume;
  FvcSeries fvc;

  const std::string& id() const noexcept { return clinical.patient_id; }
  bool operator==(const PatientSample&) const = default;
};

// [age_normalized, sex_code, smoke_bit1, smoke_bit0]
struct ClinicalVector {
  std::array<double, 4> values{};
};

struct NormStats {
  double age_min = 0.0;
  double age_max = 1.0;
};

// Fixed 2-bit smoking code; (1, 1) is never produced.
std::array<double, 2> smoking_code(Smoking s);

ClinicalVector encode_clinical(const ClinicalRecord& record, const NormStats& stats);

// Min/max age over the given records. Falls back to a unit-wide range around
// a single age so that age_min < age_max always holds.
NormStats fit_norm_stats(std::span<const ClinicalRecord> records);

// ---------------------------------------------------------------------------
// Clinical CSV

inline constexpr std::string_view kClinicalCsvHeader =
    "patient_id,weeks,fvc,age,sex,smoking_status";

struct ClinicalRow {
  std::string patient_id;
  double weeks = 0.0;
  double fvc = 0.0;
  ClinicalRecord record;
};

// Parses the clinical CSV. Lines starting with '#' are comments. Duplicate
// (patient_id, weeks) rows are merged by averaging FVC; the merged row keeps
// the position of the first occurrence. Throws ParseError naming the line.
std::vector<ClinicalRow> parse_clinical_csv(std::istream& in);
std::vector<ClinicalRow> parse_clinical_csv(const std::filesystem::path& path);

struct PatientClinical {
  ClinicalRecord record;
  FvcSeries fvc;
};

// Groups rows per patient in first-appearance order, sorting each series by
// week. Throws ParseError if a patient's clinical fields disagree across rows.
std::vector<PatientClinical> group_by_patient(const std::vector<ClinicalRow>& rows);

void write_clinical_csv(std::ostream& out, std::span<const PatientSample> patients);

// ---------------------------------------------------------------------------
// CT manifests

CtVolume load_ct_stack(const std::filesystem::path& manifest);

// Writes slices as `<dir>/slice_NNN.pgm` plus `<dir>/manifest.json`.
void write_ct_stack(const std::filesystem::path& dir, const std::string& patient_id,
                    const CtVolume& volume, const std::string& header_comment = {});

// Dataset directory layout:
//   <root>/clinical.csv
//   <root>/ct/<patient_id>/manifest.json
std::filesystem::path manifest_path(const std::filesystem::path& root,
                                    const std::string& patient_id);
std::vector<PatientSample> load_dataset(const std::filesystem::path& root);

// ---------------------------------------------------------------------------
// Cross-validation

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Patient-level k-fold split over indices [0, count). Test partitions are
// disjoint, cover every index, and differ in size by at most one.
std::vector<Fold> kfold_split(std::size_t count, std::size_t k, std::uint64_t seed);

inline std::vector<Fold> kfold_split(std::span<const PatientSample> patients, std::size_t k,
                                     std::uint64_t seed) {
  return kfold_split(patients.size(), k, seed);
}

}  // namespace ipf

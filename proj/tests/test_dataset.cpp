#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "ipf/dataset.hpp"
#include "ipf/error.hpp"
#include "ipf/raster.hpp"
#include "ipf/synthetic.hpp"
#include "support.hpp"

using namespace ipf;

namespace {

std::vector<ClinicalRow> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_clinical_csv(in);
}

const std::string kHeader = "patient_id,weeks,fvc,age,sex,smoking_status\n";

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("clinical CSV rows parse into records") {
  const auto rows = parse("# produced by hand\n" + kHeader +
                          "P1,-4,2315,58,Male,Ex-smoker\n"
                          "P1,5,2214,58,Male,Ex-smoker\n"
                          "P2,0,3020.5,71,Female,Never smoked\r\n");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].patient_id == "P1");
  CHECK(rows[0].weeks == -4.0);
  CHECK(rows[0].fvc == 2315.0);
  CHECK(rows[0].record.age == 58);
  CHECK(rows[0].record.sex == Sex::male);
  CHECK(rows[0].record.smoking == Smoking::ex_smoker);
  CHECK(rows[2].fvc == 3020.5);
  CHECK(rows[2].record.smoking == Smoking::never_smoked);
}

TEST_CASE("duplicate visits are averaged in place") {
  const auto rows = parse(kHeader +
                          "P1,0,2000,60,Male,Ex-smoker\n"
                          "P1,3,1900,60,Male,Ex-smoker\n"
                          "P1,0,2100,60,Male,Ex-smoker\n");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].weeks == 0.0);
  CHECK(rows[0].fvc == 2050.0);
}

TEST_CASE("malformed CSV rows name the row") {
  CHECK_THROWS_WITH_AS(parse(kHeader + "P1,0,abc,60,Male,Ex-smoker\n"),
                       "non-numeric fvc, row 2", ParseError);
  CHECK_THROWS_WITH_AS(parse(kHeader + "P1,0,2000,60,Male,Quit\n"),
                       "unknown smoking status 'Quit', row 2", ParseError);
  CHECK_THROWS_WITH_AS(parse(kHeader + "P1,0,2000,60,Other,Ex-smoker\n"),
                       "unknown sex 'Other', row 2", ParseError);
  CHECK_THROWS_AS(parse(kHeader + "P1,0,2000,7,Male,Ex-smoker\n"), ParseError);
  CHECK_THROWS_AS(parse(kHeader + "P1,0,2000,60.5,Male,Ex-smoker\n"), ParseError);
  CHECK_THROWS_AS(parse(kHeader + "P1,0,2000,60,Male\n"), ParseError);
  CHECK_THROWS_AS(parse("id,weeks,fvc,age,sex,smoking\n"), ParseError);
  CHECK_THROWS_AS(parse(""), ParseError);
}

TEST_CASE("grouping sorts each series and rejects conflicting fields") {
  const auto groups = group_by_patient(parse(kHeader +
                                             "B,9,1800,70,Female,Never smoked\n"
                                             "A,2,2500,64,Male,Ex-smoker\n"
                                             "B,1,1900,70,Female,Never smoked\n"
                                             "A,0,2550,64,Male,Ex-smoker\n"));
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].record.patient_id == "B");
  CHECK(groups[0].fvc.weeks() == std::vector<double>{1.0, 9.0});
  CHECK(groups[1].fvc.values() == std::vector<double>{2550.0, 2500.0});

  CHECK_THROWS_AS(group_by_patient(parse(kHeader +
                                         "A,0,2500,64,Male,Ex-smoker\n"
                                         "A,1,2400,65,Male,Ex-smoker\n")),
                  ParseError);
  CHECK_THROWS_AS(group_by_patient(parse(kHeader + "A,0,2500,64,Male,Ex-smoker\n")), DataError);
}

TEST_CASE("FVC series invariants") {
  const FvcSeries s({{-3.0, 2000.0}, {2.0, 1990.0}, {10.0, 1950.0}});
  CHECK(s.rezeroed_weeks() == std::vector<double>{0.0, 5.0, 13.0});
  CHECK(s.baseline() == 2000.0);
  CHECK_THROWS_AS(FvcSeries({{0.0, 2000.0}}), DataError);
  CHECK_THROWS_AS(FvcSeries({{0.0, 2000.0}, {0.0, 1990.0}}), DataError);
  CHECK_THROWS_AS(FvcSeries({{1.0, 2000.0}, {0.0, 1990.0}}), DataError);
  CHECK_THROWS_AS(FvcSeries({{0.0, 2000.0}, {1.0, -5.0}}), DataError);
}

TEST_CASE("clinical encoding") {
  const NormStats stats{50.0, 90.0};
  const ClinicalRecord r{"P", 70, Sex::female, Smoking::currently_smokes};
  const auto v = encode_clinical(r, stats);
  CHECK(v.values[0] == doctest::Approx(0.5));
  CHECK(v.values[1] == 0.0);
  CHECK(v.values[2] == 1.0);
  CHECK(v.values[3] == 0.0);

  // Ages outside the training range clamp to [0, 1].
  CHECK(encode_clinical({"P", 30, Sex::male, Smoking::never_smoked}, stats).values[0] == 0.0);
  CHECK(encode_clinical({"P", 30, Sex::male, Smoking::never_smoked}, stats).values[1] == 1.0);
  CHECK(encode_clinical({"P", 30, Sex::male, Smoking::ex_smoker}, stats).values[3] == 1.0);
  CHECK(encode_clinical({"P", 99, Sex::male, Smoking::never_smoked}, stats).values[0] == 1.0);

  std::set<std::array<double, 3>> codes;
  for (Sex sex : {Sex::male, Sex::female}) {
    for (Smoking sm : {Smoking::currently_smokes, Smoking::ex_smoker, Smoking::never_smoked}) {
      const auto e = encode_clinical({"P", 60, sex, sm}, stats);
      codes.insert({e.values[1], e.values[2], e.values[3]});
    }
  }
  CHECK(codes.size() == 6);
}

TEST_CASE("norm stats span the training ages") {
  const std::vector<ClinicalRecord> recs{{"a", 61, Sex::male, Smoking::ex_smoker},
                                         {"b", 49, Sex::male, Smoking::ex_smoker},
                                         {"c", 80, Sex::male, Smoking::ex_smoker}};
  const auto s = fit_norm_stats(recs);
  CHECK(s.age_min == 49.0);
  CHECK(s.age_max == 80.0);
}

TEST_CASE("16-bit PGM round trip keeps samples and skips comments") {
  test::TempDir dir("pgm");
  RawSlice img(3, 5);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint16_t>(i * 4099);
  write_pgm16(dir / "a.pgm", img, "hello");
  CHECK(read_pgm16(dir / "a.pgm") == img);
  CHECK(test::slurp(dir / "a.pgm").find("# hello") != std::string::npos);

  test::spit(dir / "bad.pgm", "P2\n1 1\n255\n0\n");
  CHECK_THROWS_AS(read_pgm16(dir / "bad.pgm"), DataError);
  test::spit(dir / "short.pgm", "P5\n4 4\n65535\nab");
  CHECK_THROWS_AS(read_pgm16(dir / "short.pgm"), DataError);
}

TEST_CASE("HU conversion is offset by 1024") {
  RawSlice raw(1, 3);
  raw.data = {0, 1024, 2048};
  const auto hu = to_hu(raw);
  CHECK(hu.data == std::vector<float>{-1024.0f, 0.0f, 1024.0f});
  CHECK(from_hu(hu) == raw);
}

TEST_CASE("CT manifest round trip and missing slice") {
  test::TempDir dir("ct");
  const auto patients = generate_synthetic(SynthSpec{1, 4, 32, 3, 5.0}, 1);
  const auto& vol = patients[0].volume;
  write_ct_stack(dir / "P", "P", vol, "{\"seed\":1}");
  const auto back = load_ct_stack(dir / "P" / "manifest.json");
  CHECK(back == vol);

  std::filesystem::remove(dir / "P" / "slice_002.pgm");
  CHECK_THROWS_WITH_AS(load_ct_stack(dir / "P" / "manifest.json"),
                       doctest::Contains("missing slice file"), DataError);
  CHECK_THROWS_AS(load_ct_stack(dir / "nope.json"), DataError);
}

TEST_CASE("dataset directory round trip") {
  test::TempDir dir("ds");
  const auto patients = generate_synthetic(SynthSpec{3, 3, 32, 4, 5.0}, 11);
  {
    std::ofstream csv(dir / "clinical.csv");
    write_clinical_csv(csv, patients);
  }
  for (const auto& p : patients) {
    write_ct_stack(manifest_path(dir.path(), p.id()).parent_path(), p.id(), p.volume);
  }
  const auto back = load_dataset(dir.path());
  REQUIRE(back.size() == patients.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == patients[i]);
}

TEST_CASE("synthetic cohort is deterministic and well formed") {
  const SynthSpec spec;
  const auto a = generate_synthetic(spec, 7);
  const auto b = generate_synthetic(spec, 7);
  const auto c = generate_synthetic(spec, 8);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  REQUIRE(a.size() == 8);
  for (const auto& p : a) {
    CHECK(p.volume.slices.size() == 6);
    CHECK(p.volume.kept_count() == 4);
    CHECK(p.fvc.size() == 6);
    CHECK(p.clinical.age >= 49);
    CHECK(p.clinical.age <= 88);
    const auto w = p.fvc.weeks();
    CHECK(w.back() - w.front() <= 60.0);
  }
  CHECK_THROWS_AS(generate_synthetic(SynthSpec{0, 6, 64, 6, 5.0}, 1), UsageError);
  CHECK_THROWS_AS(generate_synthetic(SynthSpec{2, 6, 64, 1, 5.0}, 1), UsageError);
}

TEST_CASE("k-fold split partitions patients") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    for (std::size_t count : {5u, 8u, 23u}) {
      const auto folds = kfold_split(count, 5, seed);
      REQUIRE(folds.size() == 5);
      std::vector<int> seen(count, 0);
      std::size_t lo = count;
      std::size_t hi = 0;
      for (const auto& f : folds) {
        lo = std::min(lo, f.test.size());
        hi = std::max(hi, f.test.size());
        CHECK(f.train.size() + f.test.size() == count);
        for (auto i : f.test) ++seen[i];
        for (auto i : f.train) CHECK(std::find(f.test.begin(), f.test.end(), i) == f.test.end());
      }
      CHECK(hi - lo <= 1);
      CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    }
  }
  CHECK(kfold_split(10, 5, 3)[0].test == kfold_split(10, 5, 3)[0].test);
  CHECK_THROWS_AS(kfold_split(4, 5, 0), DataError);
  CHECK_THROWS_AS(kfold_split(10, 1, 0), DataError);
}

}  // TEST_SUITE

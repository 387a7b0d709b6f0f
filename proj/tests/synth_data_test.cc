// Copyright 2026 The Dynaquery Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dynaquery/synth_data.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "test_util.h"

namespace dynaquery {
namespace {

namespace fs = std::filesystem;

fs::path TempDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dynaquery_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Direct summation of the discretized log-normal, using the plain CDF.
std::pair<double, double> OracleMoments(double mu, double sigma, int lo,
                                        int hi) {
  auto cdf = [&](double x) {
    return x <= 0 ? 0.0
                  : 0.5 * std::erfc(-(std::log(x) - mu) /
                                    (sigma * std::sqrt(2.0)));
  };
  double z = 0, m1 = 0, m2 = 0;
  for (int n = lo; n <= hi; ++n) {
    const double p = cdf(n + 0.5) - cdf(n - 0.5);
    z += p;
    m1 += n * p;
    m2 += static_cast<double>(n) * n * p;
  }
  m1 /= z;
  m2 /= z;
  return {m1, std::sqrt(m2 - m1 * m1)};
}

TEST(CountModelTest, FitHitsReferenceMoments) {
  const CountModel m = FitCountModel(24.64, 63.94, 1, 2267);
  const auto [mean, sd] = OracleMoments(m.mu, m.sigma, 1, 2267);
  EXPECT_NEAR(mean, 24.64, 1e-6);
  EXPECT_NEAR(sd, 63.94, 1e-6);
  EXPECT_NEAR(m.Mean(), 24.64, 1e-6);
  EXPECT_NEAR(m.StdDev(), 63.94, 1e-6);
}

TEST(CountModelTest, FitHitsScaledMoments) {
  for (double scale : {0.1, 0.2, 0.5}) {
    SceneSpec spec;
    spec.count_scale = scale;
    const CountModel m = SceneCountModel(spec);
    EXPECT_EQ(m.max_count, static_cast<int>(std::floor(2267 * scale)));
    EXPECT_NEAR(m.Mean(), 24.64 * scale, 1e-6 * scale);
    EXPECT_NEAR(m.StdDev(), 63.94 * scale, 1e-6 * scale);
    double total = 0;
    for (double p : m.pmf) total += p;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(CountModelTest, UnreachableTargetsRaiseConfigError) {
  EXPECT_TRUE(
      ThrowsKind([] { FitCountModel(0.5, 1, 1, 100); }, ErrorKind::kConfig));
  EXPECT_TRUE(
      ThrowsKind([] { FitCountModel(5, 1, 1, 4); }, ErrorKind::kConfig));
}

TEST(SynthDataTest, SameSeedIsByteIdentical) {
  SceneSpec spec;
  spec.seed = 99;
  const Dataset a = Generate(spec, 12), b = Generate(spec, 12);
  EXPECT_TRUE(SameScenes(a, b));
  const fs::path da = TempDir("det_a"), db = TempDir("det_b");
  SaveDataset(a, da.string());
  SaveDataset(b, db.string());
  EXPECT_EQ(Slurp(da / "images.bin"), Slurp(db / "images.bin"));
  EXPECT_EQ(Slurp(da / "annotations.json"), Slurp(db / "annotations.json"));
  spec.seed = 100;
  EXPECT_FALSE(SameScenes(a, Generate(spec, 12)));
}

TEST(SynthDataTest, ScenesDependOnlyOnIndex) {
  SceneSpec spec;
  const Dataset d = Generate(spec, 10);
  const CountModel model = SceneCountModel(spec);
  Dataset single{spec, {GenerateScene(spec, model, 7)}};
  Dataset slice{spec, {d.scenes[7]}};
  EXPECT_TRUE(SameScenes(single, slice));
  const std::vector<int> counts = SampleCounts(spec, 10);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(counts[i], d.scenes[i].count());
}

TEST(SynthDataTest, ForcedCountOne) {
  SceneSpec spec;
  spec.force_min_count = 1;
  spec.force_max_count = 1;
  for (const SyntheticScene& s : Generate(spec, 40).scenes) {
    EXPECT_EQ(s.count(), 1);
    EXPECT_EQ(s.count_level, CountLevel::kL0);
  }
}

TEST(SynthDataTest, AnnotationsInBoundsAndLevelsConsistent) {
  SceneSpec spec;
  spec.level_balanced = true;
  const Dataset d = Generate(spec, 60);
  for (const SyntheticScene& s : d.scenes) {
    EXPECT_EQ(s.count_level, CountToLevel(s.count(), spec.thresholds));
    EXPECT_GE(s.count(), 1);
    for (const LabeledBox& o : s.boxes) {
      EXPECT_GT(o.box.area(), 0);
      EXPECT_GE(o.box.x, 0);
      EXPECT_GE(o.box.y, 0);
      EXPECT_LE(o.box.x + o.box.w, spec.image_size);
      EXPECT_LE(o.box.y + o.box.h, spec.image_size);
      EXPECT_LT(o.box.w, spec.image_size);
      EXPECT_GE(o.category, 0);
      EXPECT_LT(o.category, spec.num_classes);
    }
    for (double v : s.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      ASSERT_EQ(v * 255.0, std::round(v * 255.0));
    }
  }
}

TEST(SynthDataTest, ObjectsAreRenderedInClassColors) {
  SceneSpec spec;
  spec.force_min_count = spec.force_max_count = 1;
  spec.size_median = 12;
  spec.size_sigma = 0;
  for (const SyntheticScene& s : Generate(spec, 30).scenes) {
    const LabeledBox& o = s.boxes[0];
    // The center pixel of a square or disc carries the class color.
    if (o.category == 2) continue;
    const int cx = static_cast<int>(o.box.x + o.box.w / 2);
    const int cy = static_cast<int>(o.box.y + o.box.h / 2);
    const double red = s.image.at({0, cy, cx}), green = s.image.at({1, cy, cx});
    if (o.category == 0) EXPECT_GT(red, green + 0.3);
    if (o.category == 1) EXPECT_GT(green, red + 0.3);
  }
}

TEST(SynthDataTest, CountHistogramFitsModel) {
  SceneSpec spec;
  spec.seed = 2024;
  const int n = 10000;
  const std::vector<int> counts = SampleCounts(spec, n);
  const CountModel model = SceneCountModel(spec);
  std::map<int, int> hist;
  double m1 = 0, m2 = 0;
  for (int c : counts) {
    ++hist[c];
    m1 += c;
    m2 += static_cast<double>(c) * c;
  }
  m1 /= n;
  const double sd = std::sqrt(m2 / n - m1 * m1);
  EXPECT_NEAR(m1, spec.TargetMean(), 0.1 * spec.TargetMean());
  EXPECT_NEAR(sd, spec.TargetStd(), 0.1 * spec.TargetStd());

  // Pearson chi-square, pooling the tail until each bin expects >= 5.
  double chi2 = 0, expected = 0, observed = 0;
  int bins = 0;
  for (int c = model.min_count; c <= model.max_count; ++c) {
    expected += n * model.Probability(c);
    observed += hist.count(c) ? hist[c] : 0;
    if (expected >= 5 || c == model.max_count) {
      chi2 += (observed - expected) * (observed - expected) / expected;
      ++bins;
      expected = observed = 0;
    }
  }
  const double df = bins - 1;
  // Wilson-Hilferty 0.999 quantile.
  const double z = 3.0902;
  const double critical =
      df * std::pow(1 - 2 / (9 * df) + z * std::sqrt(2 / (9 * df)), 3);
  EXPECT_LT(chi2, critical) << "bins " << bins;
}

TEST(SynthDataTest, LongTailCoversAllLevels) {
  SceneSpec spec;
  std::vector<int> per_level(4, 0);
  for (int c : SampleCounts(spec, 10000)) {
    ++per_level[LevelIndex(CountToLevel(c, spec.thresholds))];
  }
  for (int l = 0; l < 4; ++l) EXPECT_GT(per_level[l], 0) << l;
  // Heavily imbalanced: the sparsest level dominates.
  EXPECT_GT(per_level[0], 10 * per_level[2]);
}

TEST(SynthDataTest, LevelBalancedSamplingIsRoughlyUniform) {
  SceneSpec spec;
  spec.level_balanced = true;
  std::vector<int> per_level(4, 0);
  for (int c : SampleCounts(spec, 4000)) {
    ++per_level[LevelIndex(CountToLevel(c, spec.thresholds))];
  }
  for (int l = 0; l < 4; ++l) EXPECT_NEAR(per_level[l], 1000, 120) << l;
}

TEST(SynthDataTest, CountWindowIsRespected) {
  SceneSpec spec;
  spec.force_min_count = 91;
  for (int c : SampleCounts(spec, 500)) {
    EXPECT_GE(c, 91);
    EXPECT_LE(c, spec.MaxCount());
  }
}

TEST(SynthDataTest, InfeasibleSpecsRaiseConfigError) {
  SceneSpec spec;
  spec.size_min = 64;
  spec.size_max = 80;
  EXPECT_TRUE(ThrowsKind([&] { Generate(spec, 1); }, ErrorKind::kConfig));
  spec = SceneSpec();
  spec.force_min_count = 10;
  spec.force_max_count = 5;
  EXPECT_TRUE(ThrowsKind([&] { Generate(spec, 1); }, ErrorKind::kConfig));
}

TEST(SynthDataTest, SaveLoadRoundTrip) {
  SceneSpec spec;
  spec.level_balanced = true;
  spec.seed = 5;
  const Dataset d = Generate(spec, 8);
  const fs::path dir = TempDir("roundtrip");
  SaveDataset(d, dir.string());
  const Dataset back = LoadDataset(dir.string());
  EXPECT_TRUE(SameScenes(d, back));
  EXPECT_EQ(nlohmann::json(back.spec), nlohmann::json(spec));
}

TEST(SynthDataTest, EmptyDatasetRoundTrips) {
  const Dataset d = Generate(SceneSpec(), 0);
  const fs::path dir = TempDir("empty");
  SaveDataset(d, dir.string());
  EXPECT_EQ(LoadDataset(dir.string()).size(), 0);
}

TEST(SynthDataTest, EveryTruncationIsAParseError) {
  SceneSpec spec;
  spec.image_size = 8;
  spec.size_max = 4;
  spec.size_median = 2;
  const Dataset d = Generate(spec, 2);
  const fs::path dir = TempDir("trunc");
  SaveDataset(d, dir.string());
  const std::string bin = Slurp(dir / "images.bin");
  const std::string ann = Slurp(dir / "annotations.json");
  for (size_t cut = 0; cut < bin.size(); ++cut) {
    std::ofstream(dir / "images.bin", std::ios::binary) << bin.substr(0, cut);
    EXPECT_TRUE(
        ThrowsKind([&] { LoadDataset(dir.string()); }, ErrorKind::kParse))
        << cut;
  }
  std::ofstream(dir / "images.bin", std::ios::binary) << bin;
  for (size_t cut = 0; cut < ann.size(); cut += 7) {
    std::ofstream(dir / "annotations.json") << ann.substr(0, cut);
    EXPECT_TRUE(
        ThrowsKind([&] { LoadDataset(dir.string()); }, ErrorKind::kParse))
        << cut;
  }
}

TEST(SynthDataTest, ParseErrorsNameByteOffset) {
  const fs::path dir = TempDir("corrupt");
  SaveDataset(Generate(SceneSpec(), 1), dir.string());
  std::ofstream(dir / "annotations.json") << "{\"format\": [1, 2,, 3]}";
  try {
    LoadDataset(dir.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("byte offset 18"), std::string::npos)
        << e.what();
  }
}

TEST(SceneSpecJsonTest, RoundTripAndStrictKeys) {
  SceneSpec spec;
  spec.image_size = 96;
  spec.thresholds = FiveLevelThresholds(true);
  spec.seed = 1234567890123ULL;
  const SceneSpec back = nlohmann::json(spec).get<SceneSpec>();
  EXPECT_EQ(back.image_size, 96);
  EXPECT_EQ(back.thresholds.cuts, spec.thresholds.cuts);
  EXPECT_EQ(back.seed, spec.seed);
  EXPECT_TRUE(
      ThrowsKind([] { nlohmann::json{{"imagesize", 3}}.get<SceneSpec>(); },
                 ErrorKind::kConfig));
  EXPECT_TRUE(
      ThrowsKind([] { nlohmann::json{{"image_size", "big"}}.get<SceneSpec>(); },
                 ErrorKind::kConfig));
}

TEST(SynthDataTest, GroundTruthConversion) {
  SceneSpec spec;
  const SyntheticScene s = Generate(spec, 1).scenes[0];
  const GroundTruth gt = ToGroundTruth(s);
  ASSERT_EQ(gt.size(), s.count());
  EXPECT_NO_THROW(gt.Validate(spec.num_classes));
  const LabeledBox& o = s.boxes[0];
  EXPECT_DOUBLE_EQ(gt.boxes[0].x * 64, o.box.x + o.box.w / 2);
  EXPECT_DOUBLE_EQ(gt.boxes[0].h * 64, o.box.h);
}

}  // namespace
}  // namespace dynaquery

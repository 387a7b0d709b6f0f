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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'D', 'Q', 'S', 'Y', 'N', 'T', 'H', '1'};
constexpr int kFormatVersion = 1;

// Upper tail P(Z > z) without cancellation for large z.
double NormalTail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// P(a < Z <= b) for a < b, accurate in either tail.
double NormalMass(double a, double b) {
  if (a >= 0) return NormalTail(a) - NormalTail(b);
  return NormalTail(-b) - NormalTail(-a);
}

uint64_t SplitMix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Library-independent draws so datasets match across standard libraries.
class SceneRng {
 public:
  explicit SceneRng(uint64_t seed) : engine_(seed) {}
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double Normal() {
    const double u = 1.0 - Uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2 * M_PI * Uniform());
  }
  int Int(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(Uniform() * (hi - lo + 1));
  }

 private:
  std::mt19937_64 engine_;
};

int SampleFromPmf(const std::vector<double>& pmf, double u) {
  double acc = 0;
  for (size_t i = 0; i < pmf.size(); ++i) {
    acc += pmf[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding can leave u just above the accumulated mass.
  for (size_t i = pmf.size(); i-- > 0;) {
    if (pmf[i] > 0) return static_cast<int>(i);
  }
  return 0;
}

std::array<double, 2> Moments(double mu, double sigma, int lo, int hi) {
  const std::vector<double> pmf = DiscretizedLogNormal(mu, sigma, lo, hi);
  double m1 = 0, m2 = 0;
  for (size_t i = 0; i < pmf.size(); ++i) {
    const double n = lo + static_cast<double>(i);
    m1 += n * pmf[i];
    m2 += n * n * pmf[i];
  }
  return {m1, std::sqrt(std::max(0.0, m2 - m1 * m1))};
}

int DrawCount(const SceneSpec& spec, const CountModel& model, SceneRng& rng) {
  if (!spec.level_balanced) {
    return model.min_count + SampleFromPmf(model.pmf, rng.Uniform());
  }
  const int levels = spec.thresholds.num_levels();
  std::vector<std::vector<double>> by_level(
      levels, std::vector<double>(model.pmf.size()));
  std::vector<int> present;
  std::vector<double> mass(levels, 0.0);
  for (size_t i = 0; i < model.pmf.size(); ++i) {
    const int l =
        LevelIndex(CountToLevel(model.min_count + i, spec.thresholds));
    by_level[l][i] = model.pmf[i];
    mass[l] += model.pmf[i];
  }
  for (int l = 0; l < levels; ++l) {
    if (mass[l] > 0) present.push_back(l);
  }
  const int l = present[std::min<size_t>(
      present.size() - 1, static_cast<size_t>(rng.Uniform() * present.size()))];
  for (double& p : by_level[l]) p /= mass[l];
  return model.min_count + SampleFromPmf(by_level[l], rng.Uniform());
}

double BoxIou(const PixelBox& a, const PixelBox& b) { return PixelIou(a, b); }

struct Color {
  double r, g, b;
};
constexpr Color kPalette[] = {{0.95, 0.25, 0.2}, {0.2, 0.9, 0.3},
                              {0.3, 0.45, 1.0},  {0.95, 0.9, 0.2},
                              {0.85, 0.3, 0.9},  {0.2, 0.9, 0.9}};

// Class c is a filled square (c % 3 == 0), a disc (1) or a hollow frame (2).
bool Covers(int category, const PixelBox& box, int px, int py) {
  const double cx = px + 0.5 - box.x, cy = py + 0.5 - box.y;
  switch (category % 3) {
    case 1: {
      const double u = (cx - box.w / 2) / (box.w / 2);
      const double v = (cy - box.h / 2) / (box.h / 2);
      return box.w < 3 || box.h < 3 || u * u + v * v <= 1.05;
    }
    case 2:
      return box.w < 5 || box.h < 5 || cx < 1 || cy < 1 || cx > box.w - 1 ||
             cy > box.h - 1;
    default:
      return true;
  }
}

double Quantize(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

void WriteU32(std::ostream& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> bytes)
      : bytes_(std::move(bytes)) {}
  void Need(size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      Fail(ErrorKind::kParse, "images.bin truncated at byte ", bytes_.size(),
           " while reading ", what, " at byte offset ", pos_);
    }
  }
  uint32_t U32(const char* what) {
    Need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  const unsigned char* Take(size_t n, const char* what) {
    Need(n, what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  size_t pos() const { return pos_; }
  size_t size() const { return bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
  size_t pos_ = 0;
};

std::vector<unsigned char> ReadBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kInput, "cannot open ", path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* ConventionName(CutConvention c) {
  return c == CutConvention::kUpperInclusive ? "upper_inclusive"
                                             : "lower_inclusive";
}

template <typename F>
void ConfigGuard(const char* what, F&& f) {
  try {
    f();
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, what, ": ", e.what());
  }
}

}  // namespace

double CountModel::Mean() const {
  double m = 0;
  for (size_t i = 0; i < pmf.size(); ++i) m += (min_count + i) * pmf[i];
  return m;
}

double CountModel::StdDev() const {
  const double m = Mean();
  double v = 0;
  for (size_t i = 0; i < pmf.size(); ++i) {
    const double d = min_count + static_cast<double>(i) - m;
    v += d * d * pmf[i];
  }
  return std::sqrt(v);
}

double CountModel::Probability(int n) const {
  if (n < min_count || n > max_count) return 0.0;
  return pmf[n - min_count];
}

std::vector<double> DiscretizedLogNormal(double mu, double sigma, int lo,
                                         int hi) {
  if (lo < 0 || hi < lo || !(sigma > 0) || !std::isfinite(mu)) {
    Fail(ErrorKind::kConfig, "bad log-normal window or parameters");
  }
  std::vector<double> pmf;
  double total = 0;
  for (int n = lo; n <= hi; ++n) {
    const double a = n == 0 ? -INFINITY : (std::log(n - 0.5) - mu) / sigma;
    const double b = (std::log(n + 0.5) - mu) / sigma;
    pmf.push_back(NormalMass(a, b));
    total += pmf.back();
  }
  if (!(total > 0)) Fail(ErrorKind::kConfig, "count window has no mass");
  for (double& p : pmf) p /= total;
  return pmf;
}

CountModel FitCountModel(double target_mean, double target_std, int min_count,
                         int max_count) {
  if (!(target_mean > min_count) || !(target_mean < max_count) ||
      !(target_std > 0)) {
    Fail(ErrorKind::kConfig, "count targets outside the window [", min_count,
         ", ", max_count, "]");
  }
  // Continuous moment match as the starting point; sigma is solved in logs.
  const double cv2 = (target_std / target_mean) * (target_std / target_mean);
  double s = 0.5 * std::log(std::log1p(cv2));
  double mu = std::log(target_mean) - 0.5 * std::exp(2 * s);
  auto residual = [&](double m, double ls) {
    const auto mom = Moments(m, std::exp(ls), min_count, max_count);
    return std::array<double, 2>{mom[0] / target_mean - 1,
                                 mom[1] / target_std - 1};
  };
  auto norm = [](const std::array<double, 2>& r) {
    return std::hypot(r[0], r[1]);
  };
  std::array<double, 2> r = residual(mu, s);
  for (int iter = 0; iter < 200 && norm(r) > 1e-12; ++iter) {
    const double h = 1e-6;
    const auto rm0 = residual(mu + h, s), rm1 = residual(mu - h, s);
    const auto rs0 = residual(mu, s + h), rs1 = residual(mu, s - h);
    const double j00 = (rm0[0] - rm1[0]) / (2 * h),
                 j10 = (rm0[1] - rm1[1]) / (2 * h),
                 j01 = (rs0[0] - rs1[0]) / (2 * h),
                 j11 = (rs0[1] - rs1[1]) / (2 * h);
    const double det = j00 * j11 - j01 * j10;
    if (!(std::abs(det) > 0)) break;
    const double dmu = -(j11 * r[0] - j01 * r[1]) / det;
    const double ds = -(-j10 * r[0] + j00 * r[1]) / det;
    double step = 1.0;
    bool improved = false;
    for (int k = 0; k < 40; ++k, step *= 0.5) {
      const auto trial = residual(mu + step * dmu, s + step * ds);
      if (norm(trial) < norm(r)) {
        mu += step * dmu;
        s += step * ds;
        r = trial;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  if (norm(r) > 1e-8) {
    Fail(ErrorKind::kConfig, "cannot match count mean ", target_mean,
         " and std ", target_std, " within [", min_count, ", ", max_count, "]");
  }
  CountModel model{mu, std::exp(s), min_count, max_count, {}};
  model.pmf = DiscretizedLogNormal(mu, model.sigma, min_count, max_count);
  return model;
}

int SceneSpec::MaxCount() const {
  return std::max(1, static_cast<int>(std::floor(reference_max * count_scale)));
}

void to_json(json& j, const LevelThresholds& t) {
  j = json{{"cuts", t.cuts}, {"convention", ConventionName(t.convention)}};
}

void from_json(const json& j, LevelThresholds& t) {
  ConfigGuard("thresholds", [&] {
    for (const auto& [key, value] : j.items()) {
      if (key == "cuts") {
        t.cuts = value.get<std::vector<double>>();
      } else if (key == "convention") {
        const std::string name = value.get<std::string>();
        if (name == "upper_inclusive") {
          t.convention = CutConvention::kUpperInclusive;
        } else if (name == "lower_inclusive") {
          t.convention = CutConvention::kLowerInclusive;
        } else {
          Fail(ErrorKind::kConfig, "unknown cut convention ", name);
        }
      } else {
        Fail(ErrorKind::kConfig, "unknown thresholds key ", key);
      }
    }
  });
}

void to_json(json& j, const SceneSpec& s) {
  j = json{{"image_size", s.image_size},
           {"count_scale", s.count_scale},
           {"reference_mean", s.reference_mean},
           {"reference_std", s.reference_std},
           {"reference_max", s.reference_max},
           {"force_min_count", s.force_min_count},
           {"force_max_count", s.force_max_count},
           {"level_balanced", s.level_balanced},
           {"thresholds", s.thresholds},
           {"size_median", s.size_median},
           {"size_sigma", s.size_sigma},
           {"size_min", s.size_min},
           {"size_max", s.size_max},
           {"num_classes", s.num_classes},
           {"noise", s.noise},
           {"seed", s.seed}};
}

void from_json(const json& j, SceneSpec& s) {
  ConfigGuard("scene spec", [&] {
    if (!j.is_object())
      Fail(ErrorKind::kConfig, "scene spec must be an object");
    for (const auto& [key, v] : j.items()) {
      if (key == "image_size")
        v.get_to(s.image_size);
      else if (key == "count_scale")
        v.get_to(s.count_scale);
      else if (key == "reference_mean")
        v.get_to(s.reference_mean);
      else if (key == "reference_std")
        v.get_to(s.reference_std);
      else if (key == "reference_max")
        v.get_to(s.reference_max);
      else if (key == "force_min_count")
        v.get_to(s.force_min_count);
      else if (key == "force_max_count")
        v.get_to(s.force_max_count);
      else if (key == "level_balanced")
        v.get_to(s.level_balanced);
      else if (key == "thresholds")
        v.get_to(s.thresholds);
      else if (key == "size_median")
        v.get_to(s.size_median);
      else if (key == "size_sigma")
        v.get_to(s.size_sigma);
      else if (key == "size_min")
        v.get_to(s.size_min);
      else if (key == "size_max")
        v.get_to(s.size_max);
      else if (key == "num_classes")
        v.get_to(s.num_classes);
      else if (key == "noise")
        v.get_to(s.noise);
      else if (key == "seed")
        v.get_to(s.seed);
      else
        Fail(ErrorKind::kConfig, "unknown scene spec key ", key);
    }
  });
}

void ValidateSceneSpec(const SceneSpec& s) {
  if (s.image_size < 8) Fail(ErrorKind::kConfig, "image_size must be >= 8");
  if (s.size_min < 1 || s.size_max < s.size_min) {
    Fail(ErrorKind::kConfig, "bad object size range [", s.size_min, ", ",
         s.size_max, "]");
  }
  if (s.size_min >= s.image_size) {
    Fail(ErrorKind::kConfig, "objects of ", s.size_min,
         " px cannot be placed in a ", s.image_size, " px image");
  }
  if (!(s.size_median > 0) || !(s.size_sigma >= 0)) {
    Fail(ErrorKind::kConfig, "bad object size distribution");
  }
  if (!(s.count_scale > 0) || s.reference_max < 1) {
    Fail(ErrorKind::kConfig, "bad count scaling");
  }
  if (s.num_classes < 1 || s.num_classes > 6) {
    Fail(ErrorKind::kConfig, "num_classes must be in [1, 6]");
  }
  if (!(s.noise >= 0)) Fail(ErrorKind::kConfig, "noise must be >= 0");
  ValidateThresholds(s.thresholds);
  const int lo = std::max(1, s.force_min_count);
  const int hi = s.force_max_count > 0 ? s.force_max_count : s.MaxCount();
  if (s.force_min_count < 0 || s.force_max_count < 0 || hi < lo) {
    Fail(ErrorKind::kConfig, "empty count window [", lo, ", ", hi, "]");
  }
}

CountModel SceneCountModel(const SceneSpec& spec) {
  ValidateSceneSpec(spec);
  CountModel base =
      FitCountModel(spec.TargetMean(), spec.TargetStd(), 1, spec.MaxCount());
  const int lo = std::max(1, spec.force_min_count);
  const int hi =
      spec.force_max_count > 0 ? spec.force_max_count : spec.MaxCount();
  if (lo == base.min_count && hi == base.max_count) return base;
  // Conditional on the window; the shape of the fitted model is kept.
  base.pmf = DiscretizedLogNormal(base.mu, base.sigma, lo, hi);
  base.min_count = lo;
  base.max_count = hi;
  return base;
}

SyntheticScene GenerateScene(const SceneSpec& spec, const CountModel& model,
                             int64_t index) {
  SceneRng rng(SplitMix(spec.seed ^ SplitMix(static_cast<uint64_t>(index))));
  const int n = DrawCount(spec, model, rng);
  const int size = spec.image_size;

  // Crowded scenes shrink objects so they stay mostly separable.
  double median = spec.size_median;
  const double budget = 0.35 * size * size / n;
  if (median * median > budget) median = std::sqrt(budget);
  const int hi = std::min(spec.size_max, size - 1);

  SyntheticScene scene;
  for (int i = 0; i < n; ++i) {
    const double side = median * std::exp(spec.size_sigma * rng.Normal());
    const double aspect = std::exp(0.2 * rng.Normal());
    const int w = std::clamp(static_cast<int>(std::lround(side * aspect)),
                             spec.size_min, hi);
    const int h = std::clamp(static_cast<int>(std::lround(side / aspect)),
                             spec.size_min, hi);
    const int category = rng.Int(0, spec.num_classes - 1);
    PixelBox box;
    for (int attempt = 0; attempt < 30; ++attempt) {
      box = {static_cast<double>(rng.Int(0, size - w)),
             static_cast<double>(rng.Int(0, size - h)), static_cast<double>(w),
             static_cast<double>(h)};
      const bool clear = std::none_of(
          scene.boxes.begin(), scene.boxes.end(),
          [&](const LabeledBox& o) { return BoxIou(o.box, box) > 0.1; });
      if (clear) break;
    }
    scene.boxes.push_back({category, box});
  }
  scene.count_level = CountToLevel(n, spec.thresholds);

  std::vector<double> pixels(3 * size * size);
  for (double& p : pixels) p = 0.12 + spec.noise * rng.Normal();
  for (const LabeledBox& o : scene.boxes) {
    const Color c = kPalette[o.category % 6];
    const double rgb[3] = {c.r, c.g, c.b};
    const int x0 = static_cast<int>(o.box.x), y0 = static_cast<int>(o.box.y);
    for (int y = y0; y < y0 + o.box.h; ++y) {
      for (int x = x0; x < x0 + o.box.w; ++x) {
        if (!Covers(o.category, o.box, x, y)) continue;
        for (int ch = 0; ch < 3; ++ch) {
          pixels[(ch * size + y) * size + x] =
              rgb[ch] + 0.5 * spec.noise * rng.Normal();
        }
      }
    }
  }
  for (double& p : pixels) p = Quantize(p);
  scene.image = Tensor({3, size, size}, std::move(pixels));
  return scene;
}

Dataset Generate(const SceneSpec& spec, int n_images) {
  if (n_images < 0) Fail(ErrorKind::kConfig, "negative image count");
  const CountModel model = SceneCountModel(spec);
  Dataset d{spec, {}};
  d.scenes.reserve(n_images);
  for (int i = 0; i < n_images; ++i) {
    d.scenes.push_back(GenerateScene(spec, model, i));
  }
  return d;
}

std::vector<int> SampleCounts(const SceneSpec& spec, int n_images) {
  const CountModel model = SceneCountModel(spec);
  std::vector<int> out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) {
    SceneRng rng(SplitMix(spec.seed ^ SplitMix(static_cast<uint64_t>(i))));
    out.push_back(DrawCount(spec, model, rng));
  }
  return out;
}

GroundTruth ToGroundTruth(const SyntheticScene& scene) {
  const double h = scene.image.dim(1), w = scene.image.dim(2);
  GroundTruth gt;
  for (const LabeledBox& o : scene.boxes) {
    gt.boxes.push_back({(o.box.x + o.box.w / 2) / w,
                        (o.box.y + o.box.h / 2) / h, o.box.w / w, o.box.h / h});
    gt.classes.push_back(o.category);
  }
  return gt;
}

EvalImage ToEvalImage(const SyntheticScene& scene) {
  return EvalImage{scene.boxes, {}};
}

bool SameScenes(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (int i = 0; i < a.size(); ++i) {
    const SyntheticScene &x = a.scenes[i], &y = b.scenes[i];
    if (x.count_level != y.count_level || x.count() != y.count()) return false;
    if (x.image.shape() != y.image.shape()) return false;
    if (!std::equal(x.image.data().begin(), x.image.data().end(),
                    y.image.data().begin())) {
      return false;
    }
    for (int k = 0; k < x.count(); ++k) {
      const LabeledBox &p = x.boxes[k], &q = y.boxes[k];
      if (p.category != q.category || p.box.x != q.box.x ||
          p.box.y != q.box.y || p.box.w != q.box.w || p.box.h != q.box.h) {
        return false;
      }
    }
  }
  return true;
}

void SaveDataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) Fail(ErrorKind::kInput, "cannot create ", dir, ": ", ec.message());

  json images = json::array(), annotations = json::array(),
       categories = json::array();
  for (int c = 0; c < d.spec.num_classes; ++c) {
    categories.push_back({{"id", c}, {"name", StrCat("class", c)}});
  }
  std::ofstream bin(fs::path(dir) / "images.bin", std::ios::binary);
  if (!bin) Fail(ErrorKind::kInput, "cannot write images.bin in ", dir);
  bin.write(kMagic, sizeof(kMagic));
  WriteU32(bin, kFormatVersion);
  WriteU32(bin, static_cast<uint32_t>(d.size()));
  int annotation_id = 0;
  for (int i = 0; i < d.size(); ++i) {
    const SyntheticScene& s = d.scenes[i];
    const int c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
    images.push_back({{"id", i},
                      {"width", w},
                      {"height", h},
                      {"count_level", LevelIndex(s.count_level)}});
    for (const LabeledBox& o : s.boxes) {
      annotations.push_back({{"id", annotation_id++},
                             {"image_id", i},
                             {"category_id", o.category},
                             {"bbox", {o.box.x, o.box.y, o.box.w, o.box.h}},
                             {"area", o.box.area()}});
    }
    WriteU32(bin, c);
    WriteU32(bin, h);
    WriteU32(bin, w);
    std::vector<char> bytes(s.image.numel());
    const auto data = s.image.data();
    for (size_t k = 0; k < bytes.size(); ++k) {
      bytes[k] = static_cast<char>(
          static_cast<unsigned char>(std::lround(data[k] * 255.0)));
    }
    bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!bin) Fail(ErrorKind::kInput, "write failed for images.bin in ", dir);

  const json doc{{"format", "dynaquery-synth"},
                 {"version", kFormatVersion},
                 {"spec", d.spec},
                 {"images", images},
                 {"annotations", annotations},
                 {"categories", categories}};
  std::ofstream out(fs::path(dir) / "annotations.json");
  out << doc.dump(1) << "\n";
  if (!out) Fail(ErrorKind::kInput, "write failed for annotations.json");
}

Dataset LoadDataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::vector<unsigned char> text =
      ReadBytes(fs::path(dir) / "annotations.json");
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kParse, "annotations.json: malformed at byte offset ",
         e.byte, ": ", e.what());
  }
  Dataset d;
  std::vector<int> levels;
  try {
    if (doc.at("format") != "dynaquery-synth" ||
        doc.at("version") != kFormatVersion) {
      Fail(ErrorKind::kParse, "annotations.json: unsupported format");
    }
    d.spec = doc.at("spec").get<SceneSpec>();
    const json& images = doc.at("images");
    d.scenes.resize(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
      if (images[i].at("id").get<size_t>() != i) {
        Fail(ErrorKind::kParse, "annotations.json: image ids out of order at ",
             i);
      }
      levels.push_back(images[i].at("count_level").get<int>());
    }
    for (const json& a : doc.at("annotations")) {
      const size_t image = a.at("image_id").get<size_t>();
      const auto bbox = a.at("bbox").get<std::vector<double>>();
      if (image >= d.scenes.size() || bbox.size() != 4) {
        Fail(ErrorKind::kParse, "annotations.json: bad annotation ",
             a.at("id").dump());
      }
      d.scenes[image].boxes.push_back({a.at("category_id").get<int>(),
                                       {bbox[0], bbox[1], bbox[2], bbox[3]}});
    }
  } catch (const json::exception& e) {
    Fail(ErrorKind::kParse, "annotations.json: ", e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kParse) throw;
    Fail(ErrorKind::kParse, "annotations.json: ", e.what());
  }

  ByteReader bin(ReadBytes(fs::path(dir) / "images.bin"));
  const unsigned char* magic = bin.Take(sizeof(kMagic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    Fail(ErrorKind::kParse, "images.bin: bad magic at byte offset 0");
  }
  if (bin.U32("version") != kFormatVersion) {
    Fail(ErrorKind::kParse, "images.bin: unsupported version at byte offset 8");
  }
  const size_t count_at = bin.pos();
  if (bin.U32("image count") != d.scenes.size()) {
    Fail(ErrorKind::kParse, "images.bin: image count at byte offset ", count_at,
         " disagrees with annotations.json");
  }
  for (size_t i = 0; i < d.scenes.size(); ++i) {
    const size_t header_at = bin.pos();
    const uint32_t c = bin.U32("channels"), h = bin.U32("height"),
                   w = bin.U32("width");
    if (c != 3 || h == 0 || w == 0 || h > 4096 || w > 4096) {
      Fail(ErrorKind::kParse, "images.bin: bad image header at byte offset ",
           header_at);
    }
    const size_t n = static_cast<size_t>(c) * h * w;
    const unsigned char* p = bin.Take(n, "pixels");
    std::vector<double> pixels(n);
    for (size_t k = 0; k < n; ++k) pixels[k] = p[k] / 255.0;
    d.scenes[i].image =
        Tensor({static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)},
               std::move(pixels));
    if (levels[i] < 0 || levels[i] >= d.spec.thresholds.num_levels()) {
      Fail(ErrorKind::kParse, "annotations.json: bad count level for image ",
           i);
    }
    d.scenes[i].count_level = static_cast<CountLevel>(levels[i]);
  }
  if (bin.pos() != bin.size()) {
    Fail(ErrorKind::kParse, "images.bin: trailing bytes at byte offset ",
         bin.pos());
  }
  return d;
}

}  // namespace dynaquery

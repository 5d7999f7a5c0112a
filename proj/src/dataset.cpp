#include "dqkd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace fs = std::filesystem;

namespace dqkd {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t image_seed(std::uint64_t base, int cls, int split, int index) {
  return mix64(base ^ mix64(static_cast<std::uint64_t>(cls) * 1000003ull +
                            static_cast<std::uint64_t>(split) * 101ull +
                            static_cast<std::uint64_t>(index)));
}

float clamp01(double v) { return static_cast<float>(std::min(std::max(v, 0.0), 1.0)); }

// One texture image for class `cls`; family cycles through sinusoid, checker
// and directional blobs, all oriented by a class-specific angle.
Tensor make_texture(int cls, int n_classes, int size, std::mt19937_64& rng,
                    const SynthOptions& opts) {
  const int family = cls % 3;
  const double theta = M_PI * cls / std::max(1, n_classes);
  const double ct = std::cos(theta), st = std::sin(theta);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double a = opts.texture_contrast;

  Tensor img({1, size, size});
  if (family == 0) {  // oriented sinusoid
    const double freq = 2.0 + 2.0 * unif(rng);
    const double phase = 2.0 * M_PI * unif(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x * ct + y * st) / size;
        img(0, y, x) = clamp01(0.5 + a * std::sin(2.0 * M_PI * freq * u + phase));
      }
  } else if (family == 1) {  // oriented checker, elongated along theta
    const double freq = 2.0 + 2.0 * unif(rng);
    const double phase_u = unif(rng), phase_v = unif(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x * ct + y * st) / size;
        const double v = (-x * st + y * ct) / size;
        const double su = std::sin(2.0 * M_PI * (freq * u + phase_u)) >= 0.0 ? 1.0 : -1.0;
        const double sv = std::sin(2.0 * M_PI * (0.5 * freq * v + phase_v)) >= 0.0 ? 1.0 : -1.0;
        img(0, y, x) = clamp01(0.5 + a * su * sv);
      }
  } else {  // blob noise smeared along theta
    std::vector<double> noise(static_cast<std::size_t>(size) * size);
    for (auto& n : noise) n = gauss(rng);
    const int len = 5;
    double mean = 0.0, sq = 0.0;
    std::vector<double> streaks(noise.size());
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double acc = 0.0;
        for (int t = -len; t <= len; ++t) {
          const int sx = std::clamp(
              static_cast<int>(std::lround(x + t * ct)), 0, size - 1);
          const int sy = std::clamp(
              static_cast<int>(std::lround(y + t * st)), 0, size - 1);
          acc += noise[static_cast<std::size_t>(sy) * size + sx];
        }
        streaks[static_cast<std::size_t>(y) * size + x] = acc;
        mean += acc;
        sq += acc * acc;
      }
    mean /= streaks.size();
    const double sd = std::sqrt(std::max(sq / streaks.size() - mean * mean, 1e-12));
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img(0, y, x) =
            clamp01(0.5 + a * (streaks[static_cast<std::size_t>(y) * size + x] - mean) / sd);
  }
  if (opts.noise_sigma > 0.0)
    for (std::int64_t i = 0; i < img.numel(); ++i)
      img[i] = clamp01(img[i] + opts.noise_sigma * gauss(rng));
  return img;
}

// Contrast patch or scratch stroke; returns the exact mask.
Tensor inject_anomaly(Tensor& img, std::mt19937_64& rng, const SynthOptions& opts) {
  const int size = img.dim(1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor mask({size, size});
  const double delta = (opts.anomaly_min + (opts.anomaly_max - opts.anomaly_min) * unif(rng)) *
                       (unif(rng) < 0.5 ? -1.0 : 1.0);
  const bool stroke = unif(rng) < 0.5;
  if (!stroke) {
    const int half = std::max(2, static_cast<int>(size * (0.06 + 0.06 * unif(rng))));
    const int cx = half + static_cast<int>(unif(rng) * (size - 2 * half));
    const int cy = half + static_cast<int>(unif(rng) * (size - 2 * half));
    const bool ellipse = unif(rng) < 0.5;
    for (int y = cy - half; y <= cy + half; ++y)
      for (int x = cx - half; x <= cx + half; ++x) {
        if (ellipse) {
          const double dx = (x - cx) / static_cast<double>(half);
          const double dy = (y - cy) / static_cast<double>(half);
          if (dx * dx + dy * dy > 1.0) continue;
        }
        mask(y, x) = 1.0f;
        // contrast patch: polarity inversion plus an intensity shift
        img(0, y, x) = clamp01(1.0 - img(0, y, x) + delta);
      }
  } else {
    const double ang = 2.0 * M_PI * unif(rng);
    const double len = size * (0.4 + 0.4 * unif(rng));
    const int width = 1 + static_cast<int>(unif(rng) * 2.0);
    double px = size * (0.15 + 0.5 * unif(rng));
    double py = size * (0.15 + 0.5 * unif(rng));
    const int steps = static_cast<int>(len * 2);
    for (int s = 0; s < steps; ++s) {
      const int ix = static_cast<int>(px), iy = static_cast<int>(py);
      for (int dy = -width; dy <= width; ++dy)
        for (int dx = -width; dx <= width; ++dx) {
          const int x = ix + dx, y = iy + dy;
          if (x < 0 || x >= size || y < 0 || y >= size) continue;
          if (dx * dx + dy * dy > width * width) continue;
          mask(y, x) = 1.0f;
          img(0, y, x) = clamp01(img(0, y, x) + delta);
        }
      px += 0.5 * std::cos(ang);
      py += 0.5 * std::sin(ang);
      if (px < 1 || px >= size - 1 || py < 1 || py >= size - 1) break;
    }
  }
  // generator contract: at least one positive pixel, at most 25%
  double pos = 0.0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) pos += mask[i];
  if (pos < 1.0 || pos > 0.25 * mask.numel()) fail("inject_anomaly: mask fraction out of bounds");
  return mask;
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

DatasetSpec generate_synthetic_dataset(int n_classes, int imgs_per_class, int image_size,
                                       std::uint64_t seed, const SynthOptions& opts) {
  if (n_classes < 1) fail("generate_synthetic_dataset: n_classes must be >= 1");
  if (image_size < 16) fail("generate_synthetic_dataset: image_size must be >= 16");
  if (imgs_per_class < 1) fail("generate_synthetic_dataset: imgs_per_class must be >= 1");

  const int n_good = opts.test_good >= 0 ? opts.test_good : std::max(2, imgs_per_class / 4);
  const int n_defect = opts.test_defect >= 0 ? opts.test_defect : std::max(4, imgs_per_class / 2);

  DatasetSpec ds;
  ds.image_size = image_size;
  ds.seed = seed;
  for (int c = 0; c < n_classes; ++c) {
    ClassData cd;
    cd.name = "class" + zero_pad(c, 2);
    for (int i = 0; i < imgs_per_class; ++i) {
      std::mt19937_64 rng(image_seed(seed, c, 0, i));
      ImageItem item;
      item.image = make_texture(c, n_classes, image_size, rng, opts);
      item.mask = Tensor({image_size, image_size});
      item.id = cd.name + "/train/good/" + zero_pad(i, 3);
      cd.train.push_back(std::move(item));
    }
    for (int i = 0; i < n_good; ++i) {
      std::mt19937_64 rng(image_seed(seed, c, 1, i));
      ImageItem item;
      item.image = make_texture(c, n_classes, image_size, rng, opts);
      item.mask = Tensor({image_size, image_size});
      item.id = cd.name + "/test/good/" + zero_pad(i, 3);
      cd.test.push_back(std::move(item));
    }
    for (int i = 0; i < n_defect; ++i) {
      std::mt19937_64 rng(image_seed(seed, c, 2, i));
      ImageItem item;
      item.image = make_texture(c, n_classes, image_size, rng, opts);
      item.mask = inject_anomaly(item.image, rng, opts);
      item.anomalous = true;
      item.id = cd.name + "/test/defect/" + zero_pad(i, 3);
      cd.test.push_back(std::move(item));
    }
    ds.classes.push_back(std::move(cd));
  }
  return ds;
}

void write_pgm(const std::string& path, const Tensor& gray) {
  const bool ok = gray.rank() == 2 || (gray.rank() == 3 && gray.dim(0) == 1);
  if (!ok) fail("write_pgm: expected (H,W) or (1,H,W), got " + gray.shape_str());
  const int H = gray.dim(gray.rank() - 2), W = gray.dim(gray.rank() - 1);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("write_pgm: cannot open " + path);
  out << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const float v = gray[static_cast<std::int64_t>(y) * W + x];
      const double q = std::nearbyint(std::min(std::max(static_cast<double>(v), 0.0), 1.0) * 255.0);
      row[static_cast<std::size_t>(x)] = static_cast<unsigned char>(q);
    }
    out.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!out) fail("write_pgm: write failed for " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") fail("read_pgm: " + path + " is not a binary PGM (P5)");
  auto next_int = [&in, &path]() {
    int v;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      if (!(in >> v)) fail("read_pgm: malformed header in " + path);
      return v;
    }
  };
  const int W = next_int();
  const int H = next_int();
  const int maxval = next_int();
  if (W < 1 || H < 1 || maxval != 255) fail("read_pgm: unsupported PGM header in " + path);
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> buf(static_cast<std::size_t>(W) * H);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    fail("read_pgm: truncated pixel data in " + path);
  Tensor img({1, H, W});
  for (std::size_t i = 0; i < buf.size(); ++i)
    img[static_cast<std::int64_t>(i)] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

void save_dataset_dir(const DatasetSpec& ds, const std::string& root) {
  for (const auto& cd : ds.classes) {
    const fs::path base = fs::path(root) / cd.name;
    fs::create_directories(base / "train" / "good");
    fs::create_directories(base / "test" / "good");
    fs::create_directories(base / "test" / "defect");
    fs::create_directories(base / "ground_truth" / "defect");
    int ig = 0, id = 0;
    for (std::size_t i = 0; i < cd.train.size(); ++i)
      write_pgm((base / "train" / "good" / (zero_pad(static_cast<int>(i), 3) + ".pgm")).string(),
                cd.train[i].image);
    for (const auto& item : cd.test) {
      if (item.anomalous) {
        const std::string stem = zero_pad(id++, 3);
        write_pgm((base / "test" / "defect" / (stem + ".pgm")).string(), item.image);
        write_pgm((base / "ground_truth" / "defect" / (stem + "_mask.pgm")).string(), item.mask);
      } else {
        write_pgm((base / "test" / "good" / (zero_pad(ig++, 3) + ".pgm")).string(), item.image);
      }
    }
  }
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool dirs_only) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (dirs_only && !e.is_directory()) continue;
    if (!dirs_only && !e.is_regular_file()) continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".pgm" || ext == ".png";
}

Tensor load_image_file(const fs::path& p) {
  if (p.extension() == ".png")
    fail("load_dataset_dir: PNG decoding is not supported, convert to PGM: " + p.string());
  return read_pgm(p.string());
}

}  // namespace

DatasetSpec load_dataset_dir(const std::string& root) {
  if (!fs::exists(root)) fail("load_dataset_dir: no such directory: " + root);
  DatasetSpec ds;
  int size = -1;
  for (const auto& class_dir : sorted_entries(root, true)) {
    ClassData cd;
    cd.name = class_dir.filename().string();
    for (const auto& f : sorted_entries(class_dir / "train" / "good", false)) {
      if (!is_image_file(f)) continue;
      ImageItem item;
      item.image = load_image_file(f);
      item.mask = Tensor({item.image.dim(1), item.image.dim(2)});
      item.id = cd.name + "/train/good/" + f.stem().string();
      cd.train.push_back(std::move(item));
    }
    for (const auto& defect_dir : sorted_entries(class_dir / "test", true)) {
      const std::string defect = defect_dir.filename().string();
      for (const auto& f : sorted_entries(defect_dir, false)) {
        if (!is_image_file(f)) continue;
        ImageItem item;
        item.image = load_image_file(f);
        item.id = cd.name + "/test/" + defect + "/" + f.stem().string();
        if (defect == "good") {
          item.mask = Tensor({item.image.dim(1), item.image.dim(2)});
        } else {
          const fs::path mask_path =
              class_dir / "ground_truth" / defect / (f.stem().string() + "_mask.pgm");
          if (!fs::exists(mask_path))
            fail("load_dataset_dir: missing mask for anomalous image " + f.string() +
                 " (expected " + mask_path.string() + ")");
          Tensor m = load_image_file(mask_path);
          if (m.dim(1) != item.image.dim(1) || m.dim(2) != item.image.dim(2))
            fail("load_dataset_dir: mask size mismatch for " + f.string());
          Tensor mask({m.dim(1), m.dim(2)});
          for (std::int64_t i = 0; i < mask.numel(); ++i) mask[i] = m[i] > 0.5f ? 1.0f : 0.0f;
          item.mask = std::move(mask);
          item.anomalous = true;
        }
        cd.test.push_back(std::move(item));
      }
    }
    if (cd.train.empty() && cd.test.empty()) continue;
    for (const auto& item : cd.train) {
      if (size < 0) size = item.image.dim(1);
      if (item.image.dim(1) != size || item.image.dim(2) != size)
        fail("load_dataset_dir: images must share one square size; offending id " + item.id);
    }
    for (const auto& item : cd.test)
      if (item.image.dim(1) != size || item.image.dim(2) != size)
        fail("load_dataset_dir: images must share one square size; offending id " + item.id);
    ds.classes.push_back(std::move(cd));
  }
  if (ds.classes.empty()) fail("load_dataset_dir: no classes found under " + root);
  ds.image_size = size;
  return ds;
}

DatasetSpec one_class_view(const DatasetSpec& ds, int class_index) {
  if (class_index < 0 || class_index >= ds.n_classes())
    fail("one_class_view: class index out of range");
  DatasetSpec out;
  out.image_size = ds.image_size;
  out.seed = ds.seed;
  out.classes.push_back(ds.classes[static_cast<std::size_t>(class_index)]);
  return out;
}

std::vector<std::pair<const ImageItem*, int>> all_train_images(const DatasetSpec& ds) {
  std::vector<std::pair<const ImageItem*, int>> out;
  for (int c = 0; c < ds.n_classes(); ++c)
    for (const auto& item : ds.classes[static_cast<std::size_t>(c)].train)
      out.emplace_back(&item, c);
  return out;
}

}  // namespace dqkd

#include "seqscript/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "seqscript/pgm.hpp"

namespace fs = std::filesystem;

namespace seqscript {

namespace {

constexpr int kGrid = 16;        // design grid
constexpr int kCropHeight = 24;  // canvas height
constexpr int kGlyphHeight = 16;
constexpr int kMinGlyphWidth = 12, kMaxGlyphWidth = 18;
constexpr int kMinWordLen = 3, kMaxWordLen = 10;
constexpr double kSharedDrawProb = 0.7;  // shared-vs-exclusive mix in pair words
constexpr int kExclusivePerScript = 8;
constexpr int kSharedGlyphs = 6;

const char* kStyleNames[] = {"bars", "slant", "arc", "dot", "ring", "chevron"};
constexpr int kNumStyles = 6;

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

double dist_point_segment(double px, double py, double x0, double y0, double x1, double y1) {
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
  t = std::min(1.0, std::max(0.0, t));
  const double qx = x0 + t * dx, qy = y0 + t * dy;
  return std::hypot(px - qx, py - qy);
}

// Coverage of one stroke at a point in design coordinates.
double stroke_coverage(const Stroke& s, double x, double y, double thick) {
  const double half = thick * 0.5;
  switch (s.kind) {
    case StrokeKind::bar_h:
    case StrokeKind::bar_v:
    case StrokeKind::slant_up:
    case StrokeKind::slant_down: {
      const double d = dist_point_segment(x, y, s.x0, s.y0, s.x1, s.y1);
      return clamp01(half + 0.5 - d);
    }
    case StrokeKind::chevron: {
      const double xm = 2.0 * s.x1 - s.x0;
      const double d = std::min(dist_point_segment(x, y, s.x0, s.y0, s.x1, s.y1),
                                dist_point_segment(x, y, s.x1, s.y1, xm, s.y0));
      return clamp01(half + 0.5 - d);
    }
    case StrokeKind::arc: {
      const double dx = x - s.x0, dy = y - s.y0;
      const double d = std::hypot(dx, dy);
      // quadrant gate: 0 = +x+y, 1 = -x+y, 2 = -x-y, 3 = +x-y
      const bool xin = (s.quad == 0 || s.quad == 3) ? dx >= -0.5 : dx <= 0.5;
      const bool yin = (s.quad == 0 || s.quad == 1) ? dy >= -0.5 : dy <= 0.5;
      if (!xin || !yin) return 0.0;
      return clamp01(half + 0.5 - std::abs(d - s.r));
    }
    case StrokeKind::ring: {
      const double d = std::hypot(x - s.x0, y - s.y0);
      return clamp01(half + 0.5 - std::abs(d - s.r));
    }
    case StrokeKind::dot: {
      const double d = std::hypot(x - s.x0, y - s.y0);
      return clamp01(s.r + 0.5 - d);
    }
  }
  return 0.0;
}

std::string glyph_signature(const Glyph& g) {
  std::ostringstream os;
  for (const Stroke& s : g.strokes)
    os << static_cast<int>(s.kind) << ':' << s.x0 << ',' << s.y0 << ',' << s.x1 << ',' << s.y1
       << ',' << s.r << ',' << s.quad << ';';
  return os.str();
}

Glyph gen_glyph_of_style(int style, Rng& rng) {
  Glyph g;
  switch (style) {
    case 0: {  // bars: horizontal + vertical segments on a coarse grid
      const int n = rng.uniform_int(2, 4);
      for (int i = 0; i < n; ++i) {
        Stroke s;
        if (i % 2 == 0) {
          s.kind = StrokeKind::bar_h;
          s.y0 = s.y1 = 2 + 3 * rng.uniform_int(0, 4);
          s.x0 = rng.uniform_int(0, 4);
          s.x1 = s.x0 + rng.uniform_int(8, 14 - static_cast<int>(s.x0));
        } else {
          s.kind = StrokeKind::bar_v;
          s.x0 = s.x1 = 2 + 3 * rng.uniform_int(0, 4);
          s.y0 = rng.uniform_int(0, 4);
          s.y1 = s.y0 + rng.uniform_int(8, 14 - static_cast<int>(s.y0));
        }
        g.strokes.push_back(s);
      }
      break;
    }
    case 1: {  // slants: full diagonals
      const int n = rng.uniform_int(2, 3);
      for (int i = 0; i < n; ++i) {
        Stroke s;
        const bool up = rng.uniform() < 0.5;
        s.kind = up ? StrokeKind::slant_up : StrokeKind::slant_down;
        const int xa = rng.uniform_int(0, 5), xb = rng.uniform_int(10, 15);
        const int ya = rng.uniform_int(0, 4), yb = rng.uniform_int(11, 15);
        if (up) {  // rising left-to-right: start low, end high
          s.x0 = xa; s.y0 = yb; s.x1 = xb; s.y1 = ya;
        } else {
          s.x0 = xa; s.y0 = ya; s.x1 = xb; s.y1 = yb;
        }
        g.strokes.push_back(s);
      }
      break;
    }
    case 2: {  // quarter arcs
      const int n = rng.uniform_int(2, 3);
      for (int i = 0; i < n; ++i) {
        Stroke s;
        s.kind = StrokeKind::arc;
        s.x0 = rng.uniform_int(5, 10);
        s.y0 = rng.uniform_int(5, 10);
        s.r = rng.uniform_int(4, 7);
        s.quad = rng.uniform_int(0, 3);
        g.strokes.push_back(s);
      }
      break;
    }
    case 3: {  // dot clusters
      const int n = rng.uniform_int(3, 6);
      std::set<std::pair<int, int>> used;
      for (int i = 0; i < n; ++i) {
        int cx, cy;
        do {
          cx = 2 + 4 * rng.uniform_int(0, 3);
          cy = 2 + 4 * rng.uniform_int(0, 3);
        } while (!used.insert({cx, cy}).second);
        Stroke s;
        s.kind = StrokeKind::dot;
        s.x0 = cx;
        s.y0 = cy;
        s.r = 1.3 + 0.4 * rng.uniform();
        g.strokes.push_back(s);
      }
      break;
    }
    case 4: {  // rings
      const int n = rng.uniform_int(1, 2);
      for (int i = 0; i < n; ++i) {
        Stroke s;
        s.kind = StrokeKind::ring;
        s.r = rng.uniform_int(2, 4 + 2 * (1 - i));
        s.x0 = rng.uniform_int(static_cast<int>(s.r) + 1, 15 - static_cast<int>(s.r) - 1);
        s.y0 = rng.uniform_int(static_cast<int>(s.r) + 1, 15 - static_cast<int>(s.r) - 1);
        g.strokes.push_back(s);
      }
      break;
    }
    default: {  // chevrons
      const int n = rng.uniform_int(2, 3);
      for (int i = 0; i < n; ++i) {
        Stroke s;
        s.kind = StrokeKind::chevron;
        const int yb = 3 + 5 * i + rng.uniform_int(0, 2);
        const int ya = yb + rng.uniform_int(3, 5);
        s.x0 = rng.uniform_int(0, 3);
        s.y0 = std::min(15, ya);
        s.x1 = rng.uniform_int(6, 9);
        s.y1 = std::min(13, yb);
        g.strokes.push_back(s);
      }
      break;
    }
  }
  return g;
}

std::vector<Glyph> gen_glyph_set(int style, int count, Rng& rng, std::set<std::string>& taken) {
  std::vector<Glyph> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > count * 200)
      throw ConfigError("glyph generation failed to find enough distinct glyphs");
    Glyph g = gen_glyph_of_style(style, rng);
    const std::string sig = glyph_signature(g);
    if (!taken.insert(sig).second) continue;
    out.push_back(std::move(g));
  }
  return out;
}

void draw_glyph(Tensor& canvas, const Glyph& glyph, int x_off, int y_off, int width,
                double intensity) {
  const double sx = static_cast<double>(width) / kGrid;
  const double sy = static_cast<double>(kGlyphHeight) / kGrid;
  const double thick = 1.6;
  const int W = canvas.shape[1];
  for (int py = 0; py < kGlyphHeight; ++py) {
    for (int px = 0; px < width; ++px) {
      const double gx = (px + 0.5) / sx - 0.5;
      const double gy = (py + 0.5) / sy - 0.5;
      double cov = 0.0;
      for (const Stroke& s : glyph.strokes) cov = std::max(cov, stroke_coverage(s, gx, gy, thick));
      if (cov <= 0.0) continue;
      double& pix = canvas.data[static_cast<std::size_t>((y_off + py) * W + (x_off + px))];
      pix = std::max(pix, cov * intensity);
    }
  }
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << body;
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace

int max_script_count() { return kNumStyles; }

ScriptSet make_scripts(int num_scripts, bool shared_pair, std::uint64_t seed) {
  if (num_scripts < 2) throw ConfigError("need at least 2 scripts");
  if (num_scripts > kNumStyles)
    throw ConfigError("infeasible glyph constraints: at most " + std::to_string(kNumStyles) +
                      " scripts have disjoint stroke families");
  ScriptSet set;
  Rng base(seed);
  std::set<std::string> taken;
  for (int i = 0; i < num_scripts; ++i) {
    SyntheticScript s;
    s.id = i + 1;
    s.name = kStyleNames[i];
    Rng rng = base.split(static_cast<std::uint64_t>(100 + i));
    s.exclusive = gen_glyph_set(i, kExclusivePerScript, rng, taken);
    set.scripts.push_back(std::move(s));
  }
  if (shared_pair) {
    set.shared_c = num_scripts - 1;
    set.shared_d = num_scripts;
    // shared glyphs are drawn in C's stroke family, like common characters
    // that the second script inherited
    Rng rng = base.split(999);
    std::vector<Glyph> shared = gen_glyph_set(set.shared_c - 1, kSharedGlyphs, rng, taken);
    set.scripts[static_cast<std::size_t>(set.shared_c - 1)].shared = shared;
    set.scripts[static_cast<std::size_t>(set.shared_d - 1)].shared = std::move(shared);
  }
  return set;
}

WordCrop render_word(const ScriptSet& set, int script, Rng& rng) {
  if (script < 1 || script > set.count())
    throw ConfigError("render_word: script " + std::to_string(script) + " out of range");
  const SyntheticScript& s = set.by_id(script);
  const bool in_pair = !s.shared.empty();
  const bool is_d = script == set.shared_d;

  const int len = rng.uniform_int(kMinWordLen, kMaxWordLen);
  std::vector<const Glyph*> glyphs(static_cast<std::size_t>(len));
  std::vector<std::uint8_t> from_shared(static_cast<std::size_t>(len), 0);
  for (int i = 0; i < len; ++i) {
    if (in_pair && rng.uniform() < kSharedDrawProb) {
      glyphs[static_cast<std::size_t>(i)] =
          &s.shared[static_cast<std::size_t>(rng.uniform_int(0, kSharedGlyphs - 1))];
      from_shared[static_cast<std::size_t>(i)] = 1;
    } else {
      glyphs[static_cast<std::size_t>(i)] =
          &s.exclusive[static_cast<std::size_t>(rng.uniform_int(0, kExclusivePerScript - 1))];
    }
  }
  if (is_d) {
    // every word of the second pair member carries at least one exclusive
    bool any = false;
    for (std::uint8_t f : from_shared) any = any || f == 0;
    if (!any) {
      const int pos = rng.uniform_int(0, len - 1);
      glyphs[static_cast<std::size_t>(pos)] =
          &s.exclusive[static_cast<std::size_t>(rng.uniform_int(0, kExclusivePerScript - 1))];
      from_shared[static_cast<std::size_t>(pos)] = 0;
    }
  }

  std::vector<int> widths(static_cast<std::size_t>(len));
  std::vector<int> gaps(static_cast<std::size_t>(len), 0);
  int total = 4;  // 2 px margins on both sides
  for (int i = 0; i < len; ++i) {
    widths[static_cast<std::size_t>(i)] = rng.uniform_int(kMinGlyphWidth, kMaxGlyphWidth);
    if (i > 0) gaps[static_cast<std::size_t>(i)] = rng.uniform_int(0, 3);
    total += widths[static_cast<std::size_t>(i)] + gaps[static_cast<std::size_t>(i)];
  }

  WordCrop crop;
  crop.image = Tensor({kCropHeight, total, 1}, 0.0);
  crop.script = script;
  crop.labels.assign(static_cast<std::size_t>(len), script);
  crop.glyph_shared = std::move(from_shared);
  int x = 2;
  for (int i = 0; i < len; ++i) {
    x += gaps[static_cast<std::size_t>(i)];
    const int top = rng.uniform_int(3, 5);
    const double intensity = rng.uniform(0.8, 1.0);
    draw_glyph(crop.image, *glyphs[static_cast<std::size_t>(i)], x, top,
               widths[static_cast<std::size_t>(i)], intensity);
    x += widths[static_cast<std::size_t>(i)];
  }
  return crop;
}

namespace {

// Homography sending destination pixel (x,y) to source (u,v), fitted to the
// four corner correspondences. Plain 8x8 Gaussian elimination.
struct Homography {
  double m[8];

  static Homography fit(const double dst[4][2], const double src[4][2]) {
    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
      const double x = dst[i][0], y = dst[i][1];
      const double u = src[i][0], v = src[i][1];
      double* r1 = a[2 * i];
      double* r2 = a[2 * i + 1];
      r1[0] = x; r1[1] = y; r1[2] = 1; r1[6] = -u * x; r1[7] = -u * y; r1[8] = u;
      r2[3] = x; r2[4] = y; r2[5] = 1; r2[6] = -v * x; r2[7] = -v * y; r2[8] = v;
    }
    for (int col = 0; col < 8; ++col) {
      int piv = col;
      for (int r = col + 1; r < 8; ++r)
        if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
      std::swap(a[piv], a[col]);
      if (std::abs(a[col][col]) < 1e-12) throw NumericError("degenerate perspective corners");
      for (int r = 0; r < 8; ++r) {
        if (r == col) continue;
        const double f = a[r][col] / a[col][col];
        for (int c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
      }
    }
    Homography h;
    for (int i = 0; i < 8; ++i) h.m[i] = a[i][8] / a[i][i];
    return h;
  }

  void map(double x, double y, double& u, double& v) const {
    const double w = m[6] * x + m[7] * y + 1.0;
    u = (m[0] * x + m[1] * y + m[2]) / w;
    v = (m[3] * x + m[4] * y + m[5]) / w;
  }
};

double bilinear(const Tensor& img, double u, double v) {
  const int H = img.shape[0], W = img.shape[1];
  const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto at = [&](int y, int x) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return img.data[static_cast<std::size_t>(y * W + x)];
  };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

}  // namespace

WordCrop augment(const WordCrop& crop, Rng& rng) {
  WordCrop out = crop;
  const int H = crop.image.shape[0], W = crop.image.shape[1];

  if (rng.uniform() < 0.5) {  // contrast about the mean
    const double factor = rng.uniform(0.5, 1.5);
    double mean = 0.0;
    for (double v : out.image.data) mean += v;
    mean /= static_cast<double>(out.image.size());
    for (double& v : out.image.data) v = clamp01(mean + factor * (v - mean));
  }

  if (rng.uniform() < 0.5) {  // perspective warp
    const double dx = 0.08 * W, dy = 0.08 * H;
    const double dst[4][2] = {{0, 0},
                              {static_cast<double>(W - 1), 0},
                              {static_cast<double>(W - 1), static_cast<double>(H - 1)},
                              {0, static_cast<double>(H - 1)}};
    double src[4][2];
    for (int i = 0; i < 4; ++i) {
      src[i][0] = dst[i][0] + rng.uniform(-dx, dx);
      src[i][1] = dst[i][1] + rng.uniform(-dy, dy);
    }
    const Homography h = Homography::fit(dst, src);
    Tensor warped({H, W, 1}, 0.0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double u, v;
        h.map(x, y, u, v);
        warped.data[static_cast<std::size_t>(y * W + x)] = bilinear(out.image, u, v);
      }
    out.image = std::move(warped);
  }

  if (rng.uniform() < 0.5) {  // additive gaussian noise
    const double sigma = rng.uniform(0.0, 0.08);
    for (double& v : out.image.data) v = clamp01(v + sigma * rng.normal());
  }

  return out;
}

GenResult gen_dataset(const std::string& out_dir, int num_scripts, bool shared_pair, int n_train,
                      int n_test, std::uint64_t seed, bool force) {
  if (n_train < num_scripts || n_test < num_scripts)
    throw ConfigError("gen_dataset: counts must be >= the script count");
  const fs::path root(out_dir);
  if (fs::exists(root) && !fs::is_empty(root) && !force)
    throw IoError("output directory " + out_dir + " is not empty (use force to overwrite)");
  std::error_code ec;
  fs::create_directories(root / "train", ec);
  fs::create_directories(root / "test", ec);
  if (ec) throw IoError("cannot create dataset tree under " + out_dir);

  const ScriptSet set = make_scripts(num_scripts, shared_pair, seed);
  GenResult res;
  res.meta.num_scripts = num_scripts;
  for (const auto& s : set.scripts) res.meta.script_names.push_back(s.name);
  res.meta.shared_c = set.shared_c;
  res.meta.shared_d = set.shared_d;
  res.meta.train_count = n_train;
  res.meta.test_count = n_test;
  res.meta.seed = seed;

  long long c_words = 0, c_shared_only = 0, d_words = 0, d_shared_only = 0;
  for (int split = 0; split < 2; ++split) {
    const int n = split == 0 ? n_train : n_test;
    const char* sub = split == 0 ? "train" : "test";
    Rng split_rng = Rng(seed).split(split == 0 ? 1 : 2);
    std::ostringstream manifest;
    for (int i = 0; i < n; ++i) {
      const int script = i % num_scripts + 1;  // balanced within +-1
      Rng rng = split_rng.split(static_cast<std::uint64_t>(i));
      WordCrop crop = render_word(set, script, rng);

      if (script == set.shared_c || script == set.shared_d) {
        bool all_shared = true;
        for (std::uint8_t f : crop.glyph_shared) all_shared = all_shared && f;
        if (script == set.shared_c) {
          ++c_words;
          c_shared_only += all_shared ? 1 : 0;
        } else {
          ++d_words;
          d_shared_only += all_shared ? 1 : 0;
        }
      }

      char name[32];
      std::snprintf(name, sizeof(name), "w%05d.pgm", i);
      const std::string rel = std::string(sub) + "/" + name;
      write_pgm_file(crop.image, (root / rel).string());
      manifest << rel << '\t' << script << '\t';
      for (std::size_t k = 0; k < crop.labels.size(); ++k) {
        if (k) manifest << ',';
        manifest << crop.labels[k];
      }
      manifest << '\n';
      ++res.files_written;
    }
    write_text_file((root / (std::string(sub) + ".tsv")).string(), manifest.str());
  }

  if (set.shared_c) {
    res.meta.shared_only_frac_c = c_words ? static_cast<double>(c_shared_only) / c_words : 0.0;
    res.meta.shared_only_frac_d = d_words ? static_cast<double>(d_shared_only) / d_words : 0.0;
  }

  std::ostringstream meta;
  meta << "num_scripts=" << num_scripts << '\n';
  meta << "script_names=";
  for (int i = 0; i < num_scripts; ++i) meta << (i ? "," : "") << res.meta.script_names[static_cast<std::size_t>(i)];
  meta << '\n';
  if (set.shared_c)
    meta << "shared_pair=" << set.shared_c << ',' << set.shared_d << '\n';
  else
    meta << "shared_pair=none\n";
  meta << "train_count=" << n_train << '\n';
  meta << "test_count=" << n_test << '\n';
  meta << "seed=" << seed << '\n';
  meta << "shared_only_frac_c=" << res.meta.shared_only_frac_c << '\n';
  meta << "shared_only_frac_d=" << res.meta.shared_only_frac_d << '\n';
  write_text_file((root / "metadata.txt").string(), meta.str());
  return res;
}

DatasetManifest load_manifest(const std::string& path, int num_scripts) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path);
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    ManifestEntry e;
    std::istringstream is(line);
    std::string script_tok, labels_tok;
    if (!std::getline(is, e.file, '\t') || !std::getline(is, script_tok, '\t') ||
        !std::getline(is, labels_tok))
      throw FormatError("manifest: malformed line", line_no);
    try {
      e.script = std::stoi(script_tok);
    } catch (...) {
      throw FormatError("manifest: bad script index '" + script_tok + "'", line_no);
    }
    if (e.script < 1 || e.script > num_scripts)
      throw FormatError("manifest: script index " + std::to_string(e.script) + " out of range",
                        line_no);
    std::istringstream ls(labels_tok);
    std::string tok;
    while (std::getline(ls, tok, ',')) {
      int v = 0;
      try {
        v = std::stoi(tok);
      } catch (...) {
        throw FormatError("manifest: bad label '" + tok + "'", line_no);
      }
      if (v < 1 || v > num_scripts)
        throw FormatError("manifest: label " + std::to_string(v) + " out of range", line_no);
      e.labels.push_back(v);
    }
    if (e.labels.empty()) throw FormatError("manifest: empty label list", line_no);
    const fs::path img = fs::path(m.root) / e.file;
    if (!fs::exists(img)) throw IoError("manifest references missing file: " + img.string());
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetMeta load_metadata(const std::string& dir) {
  const std::string path = (fs::path(dir) / "metadata.txt").string();
  std::ifstream f(path);
  if (!f) throw IoError("cannot open metadata: " + path);
  DatasetMeta meta;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("metadata: missing '='", line_no);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "num_scripts") meta.num_scripts = std::stoi(val);
      else if (key == "train_count") meta.train_count = std::stoi(val);
      else if (key == "test_count") meta.test_count = std::stoi(val);
      else if (key == "seed") meta.seed = std::stoull(val);
      else if (key == "shared_only_frac_c") meta.shared_only_frac_c = std::stod(val);
      else if (key == "shared_only_frac_d") meta.shared_only_frac_d = std::stod(val);
      else if (key == "shared_pair" && val != "none") {
        const std::size_t comma = val.find(',');
        meta.shared_c = std::stoi(val.substr(0, comma));
        meta.shared_d = std::stoi(val.substr(comma + 1));
      } else if (key == "script_names") {
        std::istringstream ns(val);
        std::string tok;
        while (std::getline(ns, tok, ',')) meta.script_names.push_back(tok);
      }
    } catch (const FormatError&) {
      throw;
    } catch (...) {
      throw FormatError("metadata: bad value for " + key, line_no);
    }
  }
  if (meta.num_scripts < 2) throw FormatError("metadata: missing or bad num_scripts");
  return meta;
}

}  // namespace seqscript

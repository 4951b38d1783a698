#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "seqscript/tensor.hpp"

namespace seqscript {

// Procedural glyphs are stroke compositions on a 16x16 design grid. Each
// synthetic script draws its exclusive glyphs from a single stroke family,
// so scripts are visually distinct by construction; a shared glyph subset
// (rendered in the first pair member's family) can be injected into two
// scripts to recreate the common-character ambiguity.
enum class StrokeKind { bar_h, bar_v, slant_up, slant_down, arc, dot, ring, chevron };

struct Stroke {
  StrokeKind kind;
  double x0 = 0, y0 = 0;  // segment start / center
  double x1 = 0, y1 = 0;  // segment end / chevron apex
  double r = 0;           // arc, ring, dot radius
  int quad = 0;           // arc quadrant, 0..3
};

struct Glyph {
  std::vector<Stroke> strokes;
};

struct SyntheticScript {
  int id = 0;  // 1-based class index (0 is the CTC blank)
  std::string name;
  std::vector<Glyph> exclusive;
  std::vector<Glyph> shared;  // non-empty only for the shared pair
};

struct ScriptSet {
  std::vector<SyntheticScript> scripts;
  int shared_c = 0;  // pair member whose words may be all-shared
  int shared_d = 0;  // pair member guaranteed an exclusive glyph per word

  int count() const { return static_cast<int>(scripts.size()); }
  const SyntheticScript& by_id(int id) const { return scripts[static_cast<std::size_t>(id - 1)]; }
};

// Deterministic per seed. Throws ConfigError when more scripts are requested
// than there are disjoint stroke families.
ScriptSet make_scripts(int num_scripts, bool shared_pair, std::uint64_t seed);
int max_script_count();

struct WordCrop {
  Tensor image;             // [24, W, 1], values in [0,1]
  std::vector<int> labels;  // one per rendered glyph, all = script
  int script = 0;           // 1-based truth
  std::vector<std::uint8_t> glyph_shared;  // 1 where the glyph came from the shared set

  int width() const { return image.shape[1]; }
};

WordCrop render_word(const ScriptSet& set, int script, Rng& rng);

// Independently with probability 1/2 each: contrast rescale about the mean
// (factor in [0.5,1.5]), additive Gaussian noise (sigma in [0,0.08]), and a
// perspective warp displacing corners by up to 8% of the image dims with
// bilinear resampling. Output clamped to [0,1]; labels untouched.
WordCrop augment(const WordCrop& crop, Rng& rng);

struct ManifestEntry {
  std::string file;  // relative to the dataset root
  int script = 0;
  std::vector<int> labels;
};

struct DatasetManifest {
  std::string root;
  std::vector<ManifestEntry> entries;
};

struct DatasetMeta {
  int num_scripts = 0;
  std::vector<std::string> script_names;
  int shared_c = 0, shared_d = 0;  // 0,0 = no shared pair
  int train_count = 0, test_count = 0;
  std::uint64_t seed = 0;
  // Fraction of each pair member's words carrying no exclusive glyph: the
  // accuracy ceiling for any classifier that only reads glyph inventory.
  double shared_only_frac_c = 0.0;
  double shared_only_frac_d = 0.0;
};

struct GenResult {
  DatasetMeta meta;
  int files_written = 0;
};

// Writes out_dir/{train,test}/wNNNNN.pgm plus train.tsv, test.tsv and
// metadata.txt. Per-script counts balanced within +-1; byte-identical per
// seed. Refuses a non-empty out_dir unless force is set.
GenResult gen_dataset(const std::string& out_dir, int num_scripts, bool shared_pair, int n_train,
                      int n_test, std::uint64_t seed, bool force = false);

// TSV: file <TAB> script <TAB> comma-separated per-glyph labels. Verifies
// the referenced files exist and labels lie in [1, num_scripts].
DatasetManifest load_manifest(const std::string& path, int num_scripts);
DatasetMeta load_metadata(const std::string& dir);

}  // namespace seqscript

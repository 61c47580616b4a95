#pragma once

// On-disk datasets. Sources: root/{A,B,label}/<name>.png. Prepared tiles:
// out/{tier}/{A,B,label}/<source>_<row>_<col>.png plus out/manifest.csv.

#include "wricnet/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

namespace wricnet {

/// Reads every pair under root; names are matched across A, B and label.
inline std::vector<ImageTriple> load_source_dir(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  for (const char* sub : {"A", "B", "label"})
    if (!fs::is_directory(root / sub))
      throw ImageIOError("dataset " + root.string() + " has no " + sub + "/ directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(root / "A"))
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().stem().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw ImageIOError("dataset " + root.string() + " has no A/*.png images");

  std::vector<ImageTriple> out;
  for (const auto& n : names) {
    const fs::path a = root / "A" / (n + ".png"), b = root / "B" / (n + ".png"),
                   l = root / "label" / (n + ".png");
    if (!fs::exists(b)) throw ImageIOError("missing " + b.string());
    if (!fs::exists(l)) throw ImageIOError("missing " + l.string());
    ImageTriple t{n, to_unit_float(read_png(a, 3)), to_unit_float(read_png(b, 3)), read_label_png(l)};
    if (!t.t2.same_dims(t.t1.height, t.t1.width) || !t.gt.same_dims(t.t1.height, t.t1.width))
      throw ImageIOError("pair " + n + ": A, B and label sizes differ");
    out.push_back(std::move(t));
  }
  return out;
}

inline std::filesystem::path tile_path(const std::filesystem::path& root, Tier tier, const char* part,
                                       const std::string& source, std::size_t row, std::size_t col) {
  return root / tier_name(tier) / part /
         (source + "_" + std::to_string(row) + "_" + std::to_string(col) + ".png");
}

inline const char* kManifestHeader = "tier,source_id,row,col,A,B,label";

/// Tiles every source at every tier and writes PNGs plus the manifest.
/// Returns the number of tiles written.
inline std::size_t write_prepared(const std::vector<ImageTriple>& sources, const std::vector<Tier>& tiers,
                                  std::size_t window, const std::filesystem::path& out,
                                  const std::vector<std::pair<std::string, std::string>>& provenance) {
  std::filesystem::create_directories(out);
  std::ofstream man(out / "manifest.csv", std::ios::trunc);
  if (!man) throw ImageIOError("cannot write " + (out / "manifest.csv").string());
  for (const auto& [k, v] : provenance) man << "# " << k << '=' << v << '\n';
  man << kManifestHeader << '\n';
  std::size_t n = 0;
  for (Tier tier : tiers) {
    for (const auto& src : sources) {
      for (const auto& tp : make_tier_tiles(src, tier, window)) {
        const auto a = tile_path(out, tier, "A", tp.source_id, tp.tile_row, tp.tile_col);
        const auto b = tile_path(out, tier, "B", tp.source_id, tp.tile_row, tp.tile_col);
        const auto l = tile_path(out, tier, "label", tp.source_id, tp.tile_row, tp.tile_col);
        write_png(a, to_u8(tp.t1));
        write_png(b, to_u8(tp.t2));
        write_label_png(l, tp.gt);
        man << tier_name(tier) << ',' << tp.source_id << ',' << tp.tile_row << ',' << tp.tile_col << ','
            << std::filesystem::relative(a, out).generic_string() << ','
            << std::filesystem::relative(b, out).generic_string() << ','
            << std::filesystem::relative(l, out).generic_string() << '\n';
        ++n;
      }
    }
  }
  return n;
}

/// Source ids listed one per line ('#' comments allowed).
inline std::set<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ImageIOError("cannot read id list " + path.string());
  std::set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    line = line.substr(0, line.find('#'));
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (!line.empty()) ids.insert(line);
  }
  return ids;
}

/// Loads prepared tiles of the given tiers; images are min-max normalized per
/// tile image. `only` restricts to the listed source ids.
inline std::vector<TilePair> load_prepared(const std::filesystem::path& root, const std::vector<Tier>& tiers,
                                           const std::optional<std::set<std::string>>& only = std::nullopt) {
  std::ifstream man(root / "manifest.csv");
  if (!man) throw ImageIOError("no manifest.csv in " + root.string() + " (run prepare first)");
  std::string line;
  bool header = false;
  std::vector<TilePair> out;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kManifestHeader) throw ImageIOError("unexpected manifest header: " + line);
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw ImageIOError("malformed manifest row: " + line);
    const Tier tier = parse_tier(f[0]);
    if (std::find(tiers.begin(), tiers.end(), tier) == tiers.end()) continue;
    if (only && !only->count(f[1])) continue;
    TilePair tp;
    tp.tier = tier;
    tp.source_id = f[1];
    tp.tile_row = std::stoul(f[2]);
    tp.tile_col = std::stoul(f[3]);
    tp.t1 = normalize(to_unit_float(read_png(root / f[4], 3)));
    tp.t2 = normalize(to_unit_float(read_png(root / f[5], 3)));
    tp.gt = read_label_png(root / f[6]);
    tp.validate();
    out.push_back(std::move(tp));
  }
  if (!header) throw ImageIOError("empty manifest in " + root.string());
  return out;
}

} // namespace wricnet

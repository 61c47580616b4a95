#pragma once

// Weight checkpoints: <stem>.bin holds the raw little-endian parameter arrays
// back to back; <stem>.manifest is a text table of name, dtype, shape, offset
// (in elements) and element count.

#include "wricnet/blocks.hpp"

#include <bit>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace wricnet {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

template <class T> constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

struct CheckpointPaths {
  std::filesystem::path bin, manifest;

  explicit CheckpointPaths(const std::filesystem::path& stem)
      : bin(stem.string() + ".bin"), manifest(stem.string() + ".manifest") {}
};

template <class T>
void save_checkpoint(const ParameterStore<T>& store, const std::filesystem::path& stem) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
  const CheckpointPaths paths(stem);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream bin(paths.bin, std::ios::binary | std::ios::trunc);
  std::ofstream man(paths.manifest, std::ios::trunc);
  if (!bin || !man) throw CheckpointError("cannot open checkpoint for writing: " + stem.string());
  man << "# wricnet-checkpoint v1\n# name dtype shape offset count\n";
  std::size_t offset = 0;
  for (const auto& e : store.entries()) {
    const Shape s = e.tensor.shape();
    const auto d = e.tensor.data();
    bin.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
    man << e.name << ' ' << dtype_name<T>() << ' ' << s.n << ',' << s.c << ',' << s.h << ','
        << s.w << ' ' << offset << ' ' << d.size() << '\n';
    offset += d.size();
  }
  if (!bin || !man) throw CheckpointError("failed writing checkpoint: " + stem.string());
}

/// Loads values into an existing store; names, shapes and dtype must match exactly.
template <class T> void load_checkpoint(ParameterStore<T>& store, const std::filesystem::path& stem) {
  const CheckpointPaths paths(stem);
  std::ifstream man(paths.manifest);
  std::ifstream bin(paths.bin, std::ios::binary);
  if (!man || !bin) throw CheckpointError("missing checkpoint files for " + stem.string());

  std::size_t loaded = 0;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string name, dtype, shape;
    std::size_t offset = 0, count = 0;
    if (!(is >> name >> dtype >> shape >> offset >> count))
      throw CheckpointError("malformed manifest line: " + line);
    if (dtype != dtype_name<T>())
      throw CheckpointError("checkpoint dtype " + dtype + " does not match model dtype " +
                            dtype_name<T>());
    Tensor<T> t = store.find(name);
    const Shape s = t.shape();
    const std::string expect = std::to_string(s.n) + "," + std::to_string(s.c) + "," +
                               std::to_string(s.h) + "," + std::to_string(s.w);
    if (shape != expect || count != t.numel())
      throw CheckpointError("shape mismatch for " + name + ": file " + shape + ", model " + expect);
    bin.seekg(static_cast<std::streamoff>(offset * sizeof(T)));
    auto dst = t.mutable_data();
    bin.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size_bytes()));
    if (!bin) throw CheckpointError("truncated checkpoint data for " + name);
    ++loaded;
  }
  if (loaded != store.entries().size())
    throw CheckpointError("checkpoint has " + std::to_string(loaded) + " arrays, model has " +
                          std::to_string(store.entries().size()));
}

} // namespace wricnet

#include "advmtl/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace advmtl {

namespace {
constexpr const char* kMagic = "advmtl-checkpoint";
constexpr int kVersion = 1;
}  // namespace

void save_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  out << kMagic << ' ' << kVersion << '\n';
  char buf[32];
  for (const auto& [name, t] : tensors) {
    if (name.find_first_of(" \t\n") != std::string::npos)
      throw CheckpointError("tensor name '" + name + "' contains whitespace");
    out << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape()) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", t[i]);
      if (i) out << ' ';
      out << buf;
    }
    out << '\n';
  }
  out << "end\n";
  if (!out) throw CheckpointError("failed while writing '" + path.string() + "'");
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kMagic || version != kVersion)
    throw CheckpointError("'" + path.string() + "' is not a version-1 advmtl checkpoint");

  NamedTensors out;
  std::string word;
  while (in >> word) {
    if (word == "end") return out;
    if (word != "tensor") throw CheckpointError("unexpected token '" + word + "' in checkpoint");
    std::string name;
    std::size_t rank = 0;
    if (!(in >> name >> rank) || rank == 0)
      throw CheckpointError("bad tensor header in checkpoint");
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      if (!(in >> d) || d == 0) throw CheckpointError("bad shape for tensor '" + name + "'");
      count *= d;
    }
    std::vector<double> values(count);
    for (auto& v : values) {
      std::string tok;
      if (!(in >> tok)) throw CheckpointError("truncated values for tensor '" + name + "'");
      char* end = nullptr;
      v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size())
        throw CheckpointError("bad value '" + tok + "' in tensor '" + name + "'");
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  throw CheckpointError("checkpoint '" + path.string() + "' is missing its end marker");
}

}  // namespace advmtl

#include "esr/lm/checkpoint.hpp"

#include "esr/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace esr::lm {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian doubles");

constexpr const char* kMagic = "esr-checkpoint 1";

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ostringstream header;
  header << kMagic << '\n' << "seed " << ckpt.seed << '\n' << "step " << ckpt.step << '\n';
  header << "tensors " << ckpt.tensors.size() << '\n';
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.empty() || name.find_first_of(" \n\t") != std::string::npos) {
      throw ConfigError("checkpoint tensor name '" + name + "' contains whitespace");
    }
    header << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  }
  header << "data\n";
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [_, m] : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string line;
  auto expect = [&](const std::string& key) {
    std::string word;
    if (!(in >> word) || word != key) throw ConfigError("checkpoint " + path.string() + ": expected '" + key + "'");
  };
  if (!std::getline(in, line) || line != kMagic) {
    throw ConfigError("checkpoint " + path.string() + ": unsupported header");
  }
  Checkpoint ckpt;
  std::size_t count = 0;
  expect("seed");
  in >> ckpt.seed;
  expect("step");
  in >> ckpt.step;
  expect("tensors");
  in >> count;
  std::vector<std::pair<std::string, std::pair<long, long>>> shapes;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    long r = -1, c = -1;
    if (!(in >> name >> r >> c) || r < 0 || c < 0) throw ConfigError("checkpoint " + path.string() + ": bad tensor line");
    shapes.push_back({name, {r, c}});
  }
  expect("data");
  in.get();
  for (const auto& [name, shape] : shapes) {
    grad::Matrix m(shape.first, shape.second);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw IoError("checkpoint " + path.string() + " is truncated");
    ckpt.tensors.emplace(name, std::move(m));
  }
  return ckpt;
}

}  // namespace esr::lm

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmc/errors.hpp"
#include "mmc/nets.hpp"

namespace mmc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr std::string_view kMagic = "MMCCKPT 1";
}

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << kMagic << '\n' << tensors.size() << '\n';
  for (const auto& e : tensors) {
    if (e.name.find_first_of(" \n\t") != std::string::npos) {
      throw std::invalid_argument("checkpoint tensor names cannot contain whitespace: " + e.name);
    }
    out << e.name << ' ' << e.value.rank();
    for (int d : e.value.shape()) out << ' ' << d;
    out << '\n';
  }
  out << "END\n";
  for (const auto& e : tensors) {
    const auto data = e.value.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  auto fail = [&path](const std::string& why) { return DataError("checkpoint " + path.string() + ": " + why); };

  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw fail("bad magic line");
  std::size_t count = 0;
  if (!std::getline(in, line)) throw fail("missing tensor count");
  {
    std::istringstream is(line);
    if (!(is >> count)) throw fail("bad tensor count");
  }
  std::vector<std::pair<std::string, Shape>> header;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw fail("truncated header");
    std::istringstream is(line);
    std::string name;
    std::size_t rank = 0;
    if (!(is >> name >> rank)) throw fail("bad header record: " + line);
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(is >> d) || d <= 0) throw fail("bad shape in record: " + line);
    }
    header.emplace_back(std::move(name), std::move(shape));
  }
  if (!std::getline(in, line) || line != "END") throw fail("missing END marker");

  TensorMap out;
  for (auto& [name, shape] : header) {
    std::vector<double> data(numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw fail("truncated data for " + name);
    out.add(name, Tensor::from_data(shape, std::move(data)));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after tensor data");
  return out;
}

}  // namespace mmc

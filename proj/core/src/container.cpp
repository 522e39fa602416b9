#include "bswitch/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace bswitch {

namespace {

using json = nlohmann::json;

void put_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le64(std::string_view in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= std::uint64_t{static_cast<unsigned char>(in[off + static_cast<std::size_t>(i)])} << (8 * i);
  }
  return v;
}

}  // namespace

const Tensor& Container::tensor(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw ContainerError("container (" + kind + "): no tensor named '" + std::string(name) + "'");
}

std::string encode_container(const Container& c) {
  json manifest;
  manifest["kind"] = c.kind;
  manifest["meta"] = json(c.meta);
  manifest["structure"] = json::parse(c.structure);
  manifest["tensors"] = json::array();
  std::size_t payload = 0;
  for (const auto& t : c.tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape}});
    payload += t.tensor.size() * 8;
  }
  const std::string text = manifest.dump();

  std::string out;
  out.reserve(kContainerMagic.size() + 8 + text.size() + payload);
  out.append(kContainerMagic);
  put_le64(out, text.size());
  out.append(text);
  for (const auto& t : c.tensors) {
    for (double v : t.tensor.values) put_le64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Container decode_container(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != kContainerMagic) {
    throw ContainerError("not a BSW1 container (bad magic)");
  }
  const std::uint64_t len = get_le64(bytes, 4);
  if (len > bytes.size() - 12) throw ContainerError("BSW1: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(12, len));
  } catch (const json::exception& e) {
    throw ContainerError(std::string("BSW1: malformed manifest: ") + e.what());
  }

  Container c;
  try {
    c.kind = manifest.at("kind").get<std::string>();
    c.meta = manifest.at("meta").get<Metadata>();
    c.structure = manifest.at("structure").dump();
    std::size_t off = 12 + len;
    for (const auto& entry : manifest.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t n = numel(shape);
      if (n > (bytes.size() - off) / 8) throw ContainerError("BSW1: truncated payload for " + t.name);
      std::vector<double> values(n);
      for (std::size_t i = 0; i < n; ++i, off += 8) {
        values[i] = std::bit_cast<double>(get_le64(bytes, off));
      }
      t.tensor = Tensor(std::move(shape), std::move(values));
      c.tensors.push_back(std::move(t));
    }
    if (off != bytes.size()) throw ContainerError("BSW1: trailing bytes after payload");
  } catch (const json::exception& e) {
    throw ContainerError(std::string("BSW1: malformed manifest: ") + e.what());
  }
  return c;
}

void atomic_write_file(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_container(const std::filesystem::path& path, const Container& c) {
  atomic_write_file(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
  try {
    return decode_container(read_file(path));
  } catch (const ContainerError& e) {
    throw ContainerError(path.string() + ": " + e.what());
  }
}

}  // namespace bswitch

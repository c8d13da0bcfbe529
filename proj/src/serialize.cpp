#include "ltxb/serialize.hpp"

#include <cstring>
#include <fstream>

#include "ltxb/hashing.hpp"

namespace ltxb {

namespace {

void put_bytes(std::vector<char>& out, const void* p, size_t n) {
  const char* c = static_cast<const char*>(p);
  out.insert(out.end(), c, c + n);
}

template <typename T>
void put(std::vector<char>& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

struct Cursor {
  const std::vector<char>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    require(pos + n <= buf.size(), ErrorKind::corruption,
            "container truncated at byte offset " + std::to_string(pos));
  }
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string take_string(size_t n) {
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

Tensor TensorFile::get(const std::string& name) const {
  const Tensor* t = find(name);
  require(t != nullptr, ErrorKind::not_found, "tensor '" + name + "' not in container");
  return *t;
}

std::vector<char> serialize_tensor_file(const TensorFile& tf) {
  std::vector<char> out;
  put_bytes(out, "LTXB", 4);
  put<uint32_t>(out, tf.version);
  put<uint64_t>(out, tf.metadata_json.size());
  put_bytes(out, tf.metadata_json.data(), tf.metadata_json.size());
  put<uint32_t>(out, (uint32_t)tf.tensors.size());
  for (const auto& [name, t] : tf.tensors) {
    put<uint32_t>(out, (uint32_t)name.size());
    put_bytes(out, name.data(), name.size());
    const Shape& s = t.shape();
    put<uint32_t>(out, (uint32_t)s.size());
    for (int d : s) put<int64_t>(out, d);
    put_bytes(out, t.data().data(), t.data().size() * sizeof(float));
  }
  put<uint64_t>(out, fnv1a64(out.data(), out.size()));
  return out;
}

TensorFile parse_tensor_file(const std::vector<char>& bytes) {
  require(bytes.size() >= 16, ErrorKind::corruption, "container truncated at byte offset 0");
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  uint64_t actual = fnv1a64(bytes.data(), bytes.size() - 8);
  require(stored == actual, ErrorKind::corruption,
          "container hash mismatch over bytes [0, " + std::to_string(bytes.size() - 8) +
              "): stored " + hash_hex(stored) + ", computed " + hash_hex(actual));

  Cursor c{bytes};
  std::string magic = c.take_string(4);
  require(magic == "LTXB", ErrorKind::corruption, "bad magic at byte offset 0");
  TensorFile tf;
  tf.version = c.take<uint32_t>();
  require(tf.version == kContainerVersion, ErrorKind::version,
          "unsupported container version " + std::to_string(tf.version));
  uint64_t meta_len = c.take<uint64_t>();
  tf.metadata_json = c.take_string(meta_len);
  uint32_t count = c.take<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = c.take<uint32_t>();
    std::string name = c.take_string(name_len);
    uint32_t ndim = c.take<uint32_t>();
    require(ndim <= 8, ErrorKind::corruption,
            "implausible tensor rank at byte offset " + std::to_string(c.pos));
    Shape shape(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      int64_t dim = c.take<int64_t>();
      require(dim > 0 && dim < (int64_t{1} << 32), ErrorKind::corruption,
              "implausible dimension at byte offset " + std::to_string(c.pos));
      shape[d] = (int)dim;
      numel *= dim;
    }
    c.need((size_t)numel * sizeof(float));
    std::vector<float> data((size_t)numel);
    std::memcpy(data.data(), bytes.data() + c.pos, (size_t)numel * sizeof(float));
    c.pos += (size_t)numel * sizeof(float);
    tf.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return tf;
}

std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open '" + path + "' for reading");
  in.seekg(0, std::ios::end);
  std::vector<char> buf((size_t)in.tellg());
  in.seekg(0);
  in.read(buf.data(), (std::streamsize)buf.size());
  require(in.good() || buf.empty(), ErrorKind::io, "failed reading '" + path + "'");
  return buf;
}

void write_file_bytes(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), (std::streamsize)bytes.size());
  out.flush();
  require(out.good(), ErrorKind::io, "failed writing '" + path + "'");
}

uint64_t write_tensor_file(const std::string& path, const TensorFile& tf) {
  std::vector<char> bytes = serialize_tensor_file(tf);
  write_file_bytes(path, bytes);
  uint64_t h;
  std::memcpy(&h, bytes.data() + bytes.size() - 8, 8);
  return h;
}

TensorFile read_tensor_file(const std::string& path, uint64_t* hash_out) {
  std::vector<char> bytes = read_file_bytes(path);
  TensorFile tf = parse_tensor_file(bytes);
  if (hash_out) std::memcpy(hash_out, bytes.data() + bytes.size() - 8, 8);
  return tf;
}

uint64_t read_tensor_file_hash(const std::string& path) {
  uint64_t h = 0;
  read_tensor_file(path, &h);
  return h;
}

}  // namespace ltxb

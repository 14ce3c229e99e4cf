#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "softtpl/error.hpp"
#include "softtpl/model.hpp"

namespace softtpl {

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'O', 'F', 'T', 'T', 'P', 'L', '\0'};

[[noreturn]] void fail(const std::string& what) { throw Error("model", "checkpoint: " + what); }

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }

 private:
  void le(std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out_.write(buf, bytes);
  }
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 20)) fail("string length out of range");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
  }

 private:
  std::uint64_t le(int bytes) {
    unsigned char buf[8];
    read(reinterpret_cast<char*>(buf), static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
};

}  // namespace

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Model<Real>& model) {
  model.params.check_shapes();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  Writer w(out);
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(sizeof(Real) * 8));
  const auto& d = model.params.dims;
  for (int v : {d.vocab, d.fields, d.embed, d.hidden}) w.u32(static_cast<std::uint32_t>(v));
  w.u64(model.vocab.hash());

  const auto& tokens = model.vocab.tokens();
  w.u32(static_cast<std::uint32_t>(tokens.size() - Vocabulary::kNumReserved));
  for (std::size_t i = Vocabulary::kNumReserved; i < tokens.size(); ++i) w.str(tokens[i]);
  const auto& fields = model.fields.names();
  w.u32(static_cast<std::uint32_t>(fields.size() - 1));
  for (std::size_t i = 1; i < fields.size(); ++i) w.str(fields[i]);

  std::uint32_t count = 0;
  model.params.for_each([&](const char*, const Mat<Real>&) { ++count; });
  w.u32(count);
  model.params.for_each([&](const char* name, const Mat<Real>& m) {
    w.str(name);
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(static_cast<double>(m(r, c)));
    }
  });
  if (!out) fail("write failed for " + path.string());
}

template <typename Real>
Model<Real> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path.string());
  Reader r(in);
  std::array<char, 8> magic{};
  r.read(magic.data(), magic.size());
  if (magic != kMagic) fail(path.string() + " is not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) fail("unsupported format version " + std::to_string(version));
  r.u32();  // training precision, informational
  ModelDims d;
  d.vocab = static_cast<int>(r.u32());
  d.fields = static_cast<int>(r.u32());
  d.embed = static_cast<int>(r.u32());
  d.hidden = static_cast<int>(r.u32());
  const std::uint64_t stored_hash = r.u64();

  std::vector<std::string> tokens(r.u32());
  for (auto& t : tokens) t = r.str();
  std::vector<std::string> fields(r.u32());
  for (auto& f : fields) f = r.str();

  Model<Real> model{Vocabulary::from_tokens(tokens), FieldTable(fields), ModelParams<Real>::zeros(d)};
  if (model.vocab.hash() != stored_hash) fail("vocabulary hash does not match its header");
  if (static_cast<int>(model.vocab.size()) != d.vocab || static_cast<int>(model.fields.size()) != d.fields) {
    fail("vocabulary or field table size disagrees with the header");
  }

  const std::uint32_t count = r.u32();
  std::uint32_t seen = 0;
  model.params.for_each([&](const char* name, Mat<Real>& m) {
    if (seen++ >= count) fail("missing tensor " + std::string(name));
    const std::string stored = r.str();
    if (stored != name) fail("expected tensor " + std::string(name) + ", found " + stored);
    const auto rows = r.u64(), cols = r.u64();
    if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols())) {
      fail("tensor " + stored + " has the wrong shape");
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<Real>(r.f64());
    }
  });
  if (seen != count) fail("unexpected extra tensors");
  return model;
}

template <typename Real>
Model<Real> load_checkpoint(const std::filesystem::path& path, const Vocabulary& expected) {
  Model<Real> model = load_checkpoint<Real>(path);
  if (model.vocab.hash() != expected.hash()) {
    fail("vocabulary hash mismatch: checkpoint was trained with a different vocabulary");
  }
  return model;
}

template void save_checkpoint(const std::filesystem::path&, const Model<float>&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&, const Vocabulary&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&, const Vocabulary&);

}  // namespace softtpl

#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "mllmreid/error.hpp"
#include "mllmreid/models.hpp"

namespace mllmreid::model {
namespace {

constexpr char kMagic[4] = {'M', 'L', 'R', 'D'};

class Writer {
 public:
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    le(bits, 8);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string path) : buf_(std::move(bytes)), path_(std::move(path)) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() {
    const std::uint64_t bits = le(8);
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }
  void need(std::uint64_t n) const {
    if (n > remaining()) {
      throw FormatError("truncated checkpoint " + path_ + ": needed " + std::to_string(n) + " more bytes at offset " +
                        std::to_string(pos_) + ", file has " + std::to_string(buf_.size()));
    }
  }

 private:
  std::uint64_t le(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  std::string buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string join_lines(const std::vector<std::string>& v) {
  std::string s;
  for (const std::string& t : v) s += t + '\n';
  return s;
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

}  // namespace

const std::string* CheckpointData::find_header(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return &v;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  Writer w;
  w.raw(kMagic, 4);
  w.u16(data.version);
  w.u32(static_cast<std::uint32_t>(data.header.size()));
  for (const auto& [k, v] : data.header) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(data.tensors.size()));
  for (const NamedArray& t : data.tensors) {
    if (ad::numel(t.shape) != t.data.size()) throw ShapeError("checkpoint tensor " + t.name + " has inconsistent shape");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    for (double v : t.data) w.f64(v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + tmp.string());
    os.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!os) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  Reader r(ss.str(), path.string());
  if (r.remaining() < 4 || r.raw(4) != std::string(kMagic, 4)) {
    throw FormatError("bad magic in " + path.string() + ": not an MLRD checkpoint");
  }
  CheckpointData d;
  d.version = r.u16();
  if (d.version != kCheckpointVersion) {
    throw FormatError("checkpoint " + path.string() + " has version " + std::to_string(d.version) +
                      ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::uint32_t nh = r.u32();
  for (std::uint32_t i = 0; i < nh; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    d.header.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t nt = r.u32();
  for (std::uint32_t i = 0; i < nt; ++i) {
    NamedArray t;
    t.name = r.str();
    const std::uint32_t nd = r.u32();
    r.need(static_cast<std::uint64_t>(nd) * 8);
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < nd; ++k) {
      t.shape.push_back(r.u64());
      count *= t.shape.back();
    }
    if (count > r.remaining() / 8) r.need(count * 8);
    t.data.resize(count);
    for (double& v : t.data) v = r.f64();
    d.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint " + path.string() + " has trailing bytes");
  return d;
}

CheckpointData to_checkpoint(const ModelSet& m) {
  CheckpointData d;
  auto put = [&](const std::string& k, const std::string& v) { d.header.emplace_back(k, v); };
  auto num = [&](const std::string& k, std::size_t v) { put(k, std::to_string(v)); };
  put("stage", m.stage);
  const VisualEncoderConfig& e = m.encoder.config;
  num("encoder.height", e.height);
  num("encoder.width", e.width);
  num("encoder.channels", e.channels);
  num("encoder.patch", e.patch);
  num("encoder.dim", e.dim);
  num("encoder.layers", e.layers);
  num("encoder.heads", e.heads);
  num("encoder.mlp_ratio", e.mlp_ratio);
  put("encoder.tap", tap_point_name(e.tap));
  if (m.projection) num("projection.out", m.projection->linear.w.dim(1));
  if (m.lm) {
    const CausalLMConfig& c = m.lm->config;
    num("lm.vocab", c.vocab);
    num("lm.dim", c.dim);
    num("lm.layers", c.layers);
    num("lm.heads", c.heads);
    num("lm.mlp_ratio", c.mlp_ratio);
    num("lm.max_len", c.max_len);
  }
  if (m.vocab) put("vocab", join_lines(m.vocab->tokens()));
  if (m.id_head) {
    num("id_head.dim", m.id_head->linear.w.dim(0));
    num("id_head.classes", m.id_head->classes());
  }
  for (const auto& [k, v] : m.meta) put("meta." + k, v);
  for (const Tensor& t : m.parameters()) d.tensors.push_back({t.name(), t.shape(), {t.data().begin(), t.data().end()}});
  return d;
}

ModelSet from_checkpoint(const CheckpointData& d) {
  auto get = [&](const std::string& k) -> const std::string& {
    const std::string* v = d.find_header(k);
    if (!v) throw FormatError("checkpoint header lacks '" + k + "'");
    return *v;
  };
  auto num = [&](const std::string& k) -> std::size_t {
    const std::string& v = get(k);
    try {
      std::size_t used = 0;
      const unsigned long long n = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint header '" + k + "' is not a number: '" + v + "'");
    }
  };

  ModelSet m;
  m.stage = get("stage");
  VisualEncoderConfig e;
  e.height = num("encoder.height");
  e.width = num("encoder.width");
  e.channels = num("encoder.channels");
  e.patch = num("encoder.patch");
  e.dim = num("encoder.dim");
  e.layers = num("encoder.layers");
  e.heads = num("encoder.heads");
  e.mlp_ratio = num("encoder.mlp_ratio");
  e.tap = parse_tap_point(get("encoder.tap"));
  m.encoder = VisualEncoder::init(e, 0);
  if (d.find_header("projection.out")) m.projection = Projection::init(e.dim, num("projection.out"), 0);
  if (d.find_header("lm.vocab")) {
    CausalLMConfig c;
    c.vocab = num("lm.vocab");
    c.dim = num("lm.dim");
    c.layers = num("lm.layers");
    c.heads = num("lm.heads");
    c.mlp_ratio = num("lm.mlp_ratio");
    c.max_len = num("lm.max_len");
    m.lm = CausalLM::init(c, 0);
  }
  if (const std::string* v = d.find_header("vocab")) {
    const std::vector<std::string> lines = split_lines(*v);
    if (lines.size() < text::kNumReserved) throw FormatError("checkpoint vocabulary lacks reserved tokens");
    m.vocab = text::Vocabulary(std::span<const std::string>(lines).subspan(text::kNumReserved));
    if (m.vocab->tokens() != lines) throw FormatError("checkpoint vocabulary has unexpected reserved tokens");
  }
  if (d.find_header("id_head.dim")) m.id_head = IdHead::init(num("id_head.dim"), num("id_head.classes"), 0, "id_head");
  for (const auto& [k, v] : d.header)
    if (k.rfind("meta.", 0) == 0) m.meta[k.substr(5)] = v;

  std::unordered_map<std::string, const NamedArray*> by_name;
  for (const NamedArray& t : d.tensors)
    if (!by_name.emplace(t.name, &t).second) throw FormatError("checkpoint has duplicate tensor " + t.name);
  std::vector<Tensor> params = m.parameters();
  if (params.size() != d.tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(d.tensors.size()) + " tensors, its config implies " +
                      std::to_string(params.size()));
  }
  for (Tensor& p : params) {
    const auto it = by_name.find(p.name());
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor " + p.name());
    if (it->second->shape != p.shape()) {
      throw FormatError("checkpoint tensor " + p.name() + " has shape " + ad::shape_str(it->second->shape) +
                        ", config expects " + ad::shape_str(p.shape()));
    }
    std::copy(it->second->data.begin(), it->second->data.end(), p.mutable_data().begin());
  }
  return m;
}

void save_checkpoint(const ModelSet& models, const std::filesystem::path& path) {
  write_checkpoint(path, to_checkpoint(models));
}

ModelSet load_checkpoint(const std::filesystem::path& path) { return from_checkpoint(read_checkpoint(path)); }

}  // namespace mllmreid::model

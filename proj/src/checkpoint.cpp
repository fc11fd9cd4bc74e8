#include "deltamil/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace deltamil {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& o, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  o.write(b, 4);
}
void put_f64(std::ostream& o, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  o.write(b, 8);
}
void put_str(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  char b[4];
  in.read(b, 4);
  if (!in) throw IoError("truncated checkpoint '" + path + "'");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}
double get_f64(std::istream& in, const std::string& path) {
  char b[8];
  in.read(b, 8);
  if (!in) throw IoError("truncated checkpoint '" + path + "'");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}
std::string get_str(std::istream& in, const std::string& path) {
  std::uint32_t n = get_u32(in, path);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("truncated checkpoint '" + path + "'");
  return s;
}

std::string config_text(const ModelConfig& c) {
  std::ostringstream o;
  o << "task=" << to_string(c.task) << "\narch=" << to_string(c.arch)
    << "\nfeature_dim=" << c.feature_dim << "\nd=" << c.d << "\nheads=" << c.heads
    << "\nhead_dim=" << c.head_dim << "\nlayers=" << c.layers << "\nd_ff=" << c.d_ff
    << "\nchunk_size=" << c.chunk_size << "\nattn_dim=" << c.attn_dim
    << "\nn_classes=" << c.n_classes << "\nn_bins=" << c.n_bins << "\nzscore=" << c.zscore
    << "\nlocal=" << c.use_local << "\ngated=" << c.use_gated << "\ndelta=" << c.use_delta
    << "\ndropout=" << c.dropout << "\n";
  return o.str();
}

ModelConfig config_from_text(const std::string& text, const std::string& path) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("checkpoint '" + path + "': bad config line");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "task") c.task = task_from_string(val);
    else if (key == "arch") c.arch = arch_from_string(val);
    else if (key == "feature_dim") c.feature_dim = std::stoll(val);
    else if (key == "d") c.d = std::stoll(val);
    else if (key == "heads") c.heads = std::stoll(val);
    else if (key == "head_dim") c.head_dim = std::stoll(val);
    else if (key == "layers") c.layers = std::stoll(val);
    else if (key == "d_ff") c.d_ff = std::stoll(val);
    else if (key == "chunk_size") c.chunk_size = std::stoll(val);
    else if (key == "attn_dim") c.attn_dim = std::stoll(val);
    else if (key == "n_classes") c.n_classes = std::stoll(val);
    else if (key == "n_bins") c.n_bins = std::stoll(val);
    else if (key == "zscore") c.zscore = val == "1";
    else if (key == "local") c.use_local = val == "1";
    else if (key == "gated") c.use_gated = val == "1";
    else if (key == "delta") c.use_delta = val == "1";
    else if (key == "dropout") c.dropout = std::stod(val);
    else throw IoError("checkpoint '" + path + "': unknown config key '" + key + "'");
  }
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint '" + path + "' for writing");
  f.write(kMagic, 4);
  put_u32(f, kVersion);
  put_str(f, config_text(model.config));
  put_u32(f, static_cast<std::uint32_t>(model.surv_bins.size()));
  for (double b : model.surv_bins) put_f64(f, b);
  put_u32(f, static_cast<std::uint32_t>(model.params.count()));
  for (const auto& [name, tensor] : model.params) {
    put_str(f, name);
    put_u32(f, static_cast<std::uint32_t>(tensor.shape().size()));
    for (Index dim : tensor.shape()) put_u32(f, static_cast<std::uint32_t>(dim));
    for (Index i = 0; i < tensor.size(); ++i) put_f64(f, tensor[i]);
  }
  if (!f) throw IoError("checkpoint write failed for '" + path + "'");

  std::ofstream manifest(path + ".txt", std::ios::trunc);
  manifest << config_text(model.config);
  manifest << "surv_bins";
  for (double b : model.surv_bins) manifest << " " << b;
  manifest << "\n";
  for (const auto& [name, tensor] : model.params)
    manifest << name << " " << shape_string(tensor.shape()) << "\n";
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad magic in checkpoint '" + path + "'");
  const std::uint32_t version = get_u32(f, path);
  if (version != kVersion)
    throw IoError("checkpoint version mismatch in '" + path + "': got " +
                  std::to_string(version));
  Model m;
  m.config = config_from_text(get_str(f, path), path);
  const std::uint32_t n_bins = get_u32(f, path);
  for (std::uint32_t i = 0; i < n_bins; ++i) m.surv_bins.push_back(get_f64(f, path));
  const std::uint32_t n_params = get_u32(f, path);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = get_str(f, path);
    const std::uint32_t ndim = get_u32(f, path);
    std::vector<Index> shape;
    for (std::uint32_t j = 0; j < ndim; ++j) shape.push_back(get_u32(f, path));
    Tensor t = Tensor::zeros(shape);
    for (Index j = 0; j < t.size(); ++j) t[j] = get_f64(f, path);
    m.params.add(name, std::move(t));
  }
  return m;
}

}  // namespace deltamil

#include "selfprune/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace selfprune {

namespace {

constexpr char kMagic[5] = {'S', 'P', 'R', 'N', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("load_model: truncated file reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32_array(std::ostream& os, const float* data, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t v = std::bit_cast<std::uint32_t>(data[i]);
    buf[i * 4 + 0] = static_cast<unsigned char>(v);
    buf[i * 4 + 1] = static_cast<unsigned char>(v >> 8);
    buf[i * 4 + 2] = static_cast<unsigned char>(v >> 16);
    buf[i * 4 + 3] = static_cast<unsigned char>(v >> 24);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_f32_array(std::istream& is, float* data, std::size_t n, const std::string& what) {
  std::vector<unsigned char> buf(n * 4);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw std::runtime_error("load_model: truncated file reading " + what);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t v = static_cast<std::uint32_t>(buf[i * 4 + 0]) |
                            (static_cast<std::uint32_t>(buf[i * 4 + 1]) << 8) |
                            (static_cast<std::uint32_t>(buf[i * 4 + 2]) << 16) |
                            (static_cast<std::uint32_t>(buf[i * 4 + 3]) << 24);
    data[i] = std::bit_cast<float>(v);
  }
}

// Standard normal deviates from raw mt19937_64 words via Box-Muller, so the
// byte stream does not depend on the standard library's distribution
// implementations.
class NormalSource {
 public:
  explicit NormalSource(std::uint64_t seed) : eng_(seed) {}

  double next() {
    double u1 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  void fill(Matrix& m, double sigma) {
    for (float& v : m.data) v = static_cast<float>(next() * sigma);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace

ModelSpec ModelSpec::create(int n_layers, int d_model, int n_heads, int d_ff, int vocab_size,
                            int max_seq_len) {
  if (n_heads <= 0 || d_model % n_heads != 0)
    throw std::invalid_argument("ModelSpec: d_model must be divisible by n_heads");
  ModelSpec s{n_layers, d_model, n_heads, d_model / n_heads, d_ff, vocab_size, max_seq_len};
  s.validate();
  return s;
}

void ModelSpec::validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || head_dim <= 0 || d_ff <= 0 ||
      vocab_size <= 0 || max_seq_len <= 0)
    throw std::invalid_argument("ModelSpec: all dimensions must be positive");
  if (n_heads * head_dim != d_model)
    throw std::invalid_argument("ModelSpec: n_heads * head_dim must equal d_model");
}

Model init_random_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const double sigma = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
  NormalSource src(seed);

  Model m;
  m.spec = spec;
  m.token_embedding = Matrix(static_cast<std::size_t>(spec.vocab_size),
                             static_cast<std::size_t>(spec.d_model));
  src.fill(m.token_embedding, sigma);

  const std::size_t dm = static_cast<std::size_t>(spec.d_model);
  const std::size_t attn = static_cast<std::size_t>(spec.n_heads * spec.head_dim);
  const std::size_t ff = static_cast<std::size_t>(spec.d_ff);
  m.layers.resize(static_cast<std::size_t>(spec.n_layers));
  for (auto& layer : m.layers) {
    layer.n_heads = spec.n_heads;
    layer.d_ff = spec.d_ff;
    layer.w_q = Matrix(dm, attn);
    layer.w_k = Matrix(dm, attn);
    layer.w_v = Matrix(dm, attn);
    layer.w_o = Matrix(attn, dm);
    layer.w_up = Matrix(dm, ff);
    layer.w_down = Matrix(ff, dm);
    src.fill(layer.w_q, sigma);
    src.fill(layer.w_k, sigma);
    src.fill(layer.w_v, sigma);
    src.fill(layer.w_o, sigma);
    src.fill(layer.w_up, sigma);
    src.fill(layer.w_down, sigma);
    layer.attn_norm.assign(dm, 1.0f);
    layer.ffn_norm.assign(dm, 1.0f);
  }
  m.final_norm.assign(dm, 1.0f);
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  model.spec.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open " + path.string());
  os.write(kMagic, sizeof(kMagic));
  const ModelSpec& s = model.spec;
  for (int v : {s.n_layers, s.d_model, s.n_heads, s.head_dim, s.d_ff, s.vocab_size, s.max_seq_len})
    write_u32(os, static_cast<std::uint32_t>(v));
  for (const auto& layer : model.layers) {
    write_u32(os, static_cast<std::uint32_t>(layer.n_heads));
    write_u32(os, static_cast<std::uint32_t>(layer.d_ff));
  }
  write_f32_array(os, model.token_embedding.data.data(), model.token_embedding.size());
  for (const auto& layer : model.layers) {
    write_f32_array(os, layer.w_q.data.data(), layer.w_q.size());
    write_f32_array(os, layer.w_k.data.data(), layer.w_k.size());
    write_f32_array(os, layer.w_v.data.data(), layer.w_v.size());
    write_f32_array(os, layer.w_o.data.data(), layer.w_o.size());
    write_f32_array(os, layer.w_up.data.data(), layer.w_up.size());
    write_f32_array(os, layer.w_down.data.data(), layer.w_down.size());
    write_f32_array(os, layer.attn_norm.data(), layer.attn_norm.size());
    write_f32_array(os, layer.ffn_norm.data(), layer.ffn_norm.size());
  }
  write_f32_array(os, model.final_norm.data(), model.final_norm.size());
  if (!os) throw std::runtime_error("save_model: write failed for " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path.string());
  char magic[5];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_model: bad magic in " + path.string());

  ModelSpec s;
  s.n_layers = static_cast<int>(read_u32(is, "header n_layers"));
  s.d_model = static_cast<int>(read_u32(is, "header d_model"));
  s.n_heads = static_cast<int>(read_u32(is, "header n_heads"));
  s.head_dim = static_cast<int>(read_u32(is, "header head_dim"));
  s.d_ff = static_cast<int>(read_u32(is, "header d_ff"));
  s.vocab_size = static_cast<int>(read_u32(is, "header vocab_size"));
  s.max_seq_len = static_cast<int>(read_u32(is, "header max_seq_len"));
  s.validate();

  Model m;
  m.spec = s;
  m.layers.resize(static_cast<std::size_t>(s.n_layers));
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string where = "layer " + std::to_string(l) + " live dims";
    m.layers[l].n_heads = static_cast<int>(read_u32(is, where));
    m.layers[l].d_ff = static_cast<int>(read_u32(is, where));
    if (m.layers[l].n_heads < 0 || m.layers[l].n_heads > s.n_heads ||
        m.layers[l].d_ff < 0 || m.layers[l].d_ff > s.d_ff)
      throw std::runtime_error("load_model: implausible live dims for layer " + std::to_string(l));
  }

  const std::size_t dm = static_cast<std::size_t>(s.d_model);
  m.token_embedding = Matrix(static_cast<std::size_t>(s.vocab_size), dm);
  read_f32_array(is, m.token_embedding.data.data(), m.token_embedding.size(), "token_embedding");
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    const std::size_t attn = static_cast<std::size_t>(layer.n_heads * s.head_dim);
    const std::size_t ff = static_cast<std::size_t>(layer.d_ff);
    const std::string p = "layer " + std::to_string(l) + " ";
    layer.w_q = Matrix(dm, attn);
    layer.w_k = Matrix(dm, attn);
    layer.w_v = Matrix(dm, attn);
    layer.w_o = Matrix(attn, dm);
    layer.w_up = Matrix(dm, ff);
    layer.w_down = Matrix(ff, dm);
    layer.attn_norm.resize(dm);
    layer.ffn_norm.resize(dm);
    read_f32_array(is, layer.w_q.data.data(), layer.w_q.size(), p + "w_q");
    read_f32_array(is, layer.w_k.data.data(), layer.w_k.size(), p + "w_k");
    read_f32_array(is, layer.w_v.data.data(), layer.w_v.size(), p + "w_v");
    read_f32_array(is, layer.w_o.data.data(), layer.w_o.size(), p + "w_o");
    read_f32_array(is, layer.w_up.data.data(), layer.w_up.size(), p + "w_up");
    read_f32_array(is, layer.w_down.data.data(), layer.w_down.size(), p + "w_down");
    read_f32_array(is, layer.attn_norm.data(), layer.attn_norm.size(), p + "attn_norm");
    read_f32_array(is, layer.ffn_norm.data(), layer.ffn_norm.size(), p + "ffn_norm");
  }
  m.final_norm.resize(dm);
  read_f32_array(is, m.final_norm.data(), m.final_norm.size(), "final_norm");
  return m;
}

TokenCorpus generate_corpus(int vocab_size, std::size_t n_tokens, std::uint64_t seed,
                            std::string name) {
  if (vocab_size <= 0) throw std::invalid_argument("generate_corpus: vocab_size must be positive");
  TokenCorpus c;
  c.vocab_size = vocab_size;
  c.name = std::move(name);
  c.tokens.resize(n_tokens);
  std::mt19937_64 eng(seed);
  for (auto& t : c.tokens)
    t = static_cast<std::uint32_t>(eng() % static_cast<std::uint64_t>(vocab_size));
  return c;
}

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_corpus: cannot open " + path.string());
    std::vector<unsigned char> buf(corpus.tokens.size() * 4);
    for (std::size_t i = 0; i < corpus.tokens.size(); ++i) {
      const std::uint32_t v = corpus.tokens[i];
      buf[i * 4 + 0] = static_cast<unsigned char>(v);
      buf[i * 4 + 1] = static_cast<unsigned char>(v >> 8);
      buf[i * 4 + 2] = static_cast<unsigned char>(v >> 16);
      buf[i * 4 + 3] = static_cast<unsigned char>(v >> 24);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw std::runtime_error("save_corpus: write failed for " + path.string());
  }
  std::ofstream meta(path.string() + ".meta");
  if (!meta) throw std::runtime_error("save_corpus: cannot open " + path.string() + ".meta");
  meta << "vocab_size " << corpus.vocab_size << "\n";
}

TokenCorpus load_corpus(const std::filesystem::path& path) {
  TokenCorpus c;
  c.name = path.stem().string();
  {
    std::ifstream meta(path.string() + ".meta");
    if (!meta)
      throw std::runtime_error("load_corpus: missing sidecar " + path.string() + ".meta");
    std::string key;
    if (!(meta >> key >> c.vocab_size) || key != "vocab_size" || c.vocab_size <= 0)
      throw std::runtime_error("load_corpus: malformed sidecar " + path.string() + ".meta");
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_corpus: cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const std::streamoff bytes = is.tellg();
  is.seekg(0, std::ios::beg);
  if (bytes % 4 != 0)
    throw std::runtime_error("load_corpus: size not a multiple of 4 bytes: " + path.string());
  std::vector<unsigned char> buf(static_cast<std::size_t>(bytes));
  if (!buf.empty() &&
      !is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw std::runtime_error("load_corpus: read failed for " + path.string());
  c.tokens.resize(buf.size() / 4);
  for (std::size_t i = 0; i < c.tokens.size(); ++i) {
    c.tokens[i] = static_cast<std::uint32_t>(buf[i * 4 + 0]) |
                  (static_cast<std::uint32_t>(buf[i * 4 + 1]) << 8) |
                  (static_cast<std::uint32_t>(buf[i * 4 + 2]) << 16) |
                  (static_cast<std::uint32_t>(buf[i * 4 + 3]) << 24);
    if (c.tokens[i] >= static_cast<std::uint32_t>(c.vocab_size))
      throw std::runtime_error("load_corpus: token id " + std::to_string(c.tokens[i]) +
                               " at position " + std::to_string(i) + " exceeds vocab_size");
  }
  return c;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("file_checksum: cannot open " + path.string());
  std::uint64_t h = 14695981039346656037ULL;
  char buf[65536];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    const std::streamsize got = is.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!is) break;
  }
  return h;
}

}  // namespace selfprune

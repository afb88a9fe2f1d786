#include "pcrobust/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pcrobust/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace pcrobust {

namespace {

Shape require_chw(const Shape& input, const char* arch) {
  if (input.size() != 3) {
    throw std::invalid_argument(std::string(arch) + ": input shape must be (C,H,W), got " +
                                shape_str(input));
  }
  return input;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

void append_conv(std::vector<std::unique_ptr<Layer>>& layers, std::size_t in_ch,
                 std::size_t out_ch, std::size_t k, Rng& rng) {
  const std::size_t fan_in = in_ch * k * k;
  Tensor w = init_uniform(Shape{out_ch, in_ch, k, k}, fan_in, rng);
  Tensor b = init_uniform(Shape{out_ch}, fan_in, rng);
  layers.push_back(std::make_unique<Conv2dLayer>(std::move(w), std::move(b)));
}

void append_dense(std::vector<std::unique_ptr<Layer>>& layers, std::size_t in, std::size_t out,
                  Rng& rng) {
  Tensor w = init_uniform(Shape{in, out}, in, rng);
  Tensor b = init_uniform(Shape{out}, in, rng);
  layers.push_back(std::make_unique<DenseLayer>(std::move(w), std::move(b)));
}

std::size_t conv_out(std::size_t extent, std::size_t k, std::size_t stride = 1) {
  if (k > extent) throw std::invalid_argument("architecture does not fit the input extent");
  return (extent - k) / stride + 1;
}

}  // namespace

ArchitectureSpec ArchitectureSpec::lenet5(Shape input, int k) {
  ArchitectureSpec s;
  s.name = "lenet5";
  s.input_shape = require_chw(input, "lenet5");
  s.num_classes = k;
  s.mlp_hidden.clear();
  return s;
}

ArchitectureSpec ArchitectureSpec::mlp(Shape input, int k, std::vector<std::size_t> hidden) {
  ArchitectureSpec s;
  s.name = "mlp";
  s.input_shape = std::move(input);
  s.num_classes = k;
  s.mlp_hidden = std::move(hidden);
  return s;
}

ArchitectureSpec ArchitectureSpec::cnn3(Shape input, int k) {
  ArchitectureSpec s;
  s.name = "cnn3";
  s.input_shape = require_chw(input, "cnn3");
  s.num_classes = k;
  s.mlp_hidden.clear();
  return s;
}

std::string ArchitectureSpec::to_string() const {
  std::ostringstream os;
  os << name << ";in=";
  for (std::size_t i = 0; i < input_shape.size(); ++i) {
    if (i) os << 'x';
    os << input_shape[i];
  }
  os << ";k=" << num_classes;
  if (name == "mlp") {
    os << ";hidden=";
    for (std::size_t i = 0; i < mlp_hidden.size(); ++i) {
      if (i) os << 'x';
      os << mlp_hidden[i];
    }
  }
  return os.str();
}

ArchitectureSpec ArchitectureSpec::parse(const std::string& text) {
  auto fail = [&text]() -> void {
    throw std::invalid_argument("architecture spec: cannot parse '" + text + "'");
  };
  ArchitectureSpec s;
  s.mlp_hidden.clear();
  std::istringstream is(text);
  std::string field;
  bool first = true;
  while (std::getline(is, field, ';')) {
    if (first) {
      s.name = field;
      first = false;
      continue;
    }
    const auto eq = field.find('=');
    if (eq == std::string::npos) fail();
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    auto parse_dims = [&fail](const std::string& v) {
      std::vector<std::size_t> dims;
      std::istringstream ds(v);
      std::string tok;
      while (std::getline(ds, tok, 'x')) {
        if (tok.empty()) fail();
        dims.push_back(static_cast<std::size_t>(std::stoull(tok)));
      }
      return dims;
    };
    if (key == "in") {
      s.input_shape = parse_dims(value);
    } else if (key == "k") {
      s.num_classes = std::stoi(value);
    } else if (key == "hidden") {
      if (!value.empty()) s.mlp_hidden = parse_dims(value);
    } else {
      fail();
    }
  }
  if (s.name.empty() || s.input_shape.empty() || s.num_classes < 2) fail();
  return s;
}

Network Network::build(const ArchitectureSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw std::invalid_argument("build: need at least 2 classes");
  Rng rng(seed);
  std::vector<std::unique_ptr<Layer>> layers;
  const int k = spec.num_classes;

  if (spec.name == "lenet5") {
    const Shape& in = require_chw(spec.input_shape, "lenet5");
    const std::size_t c = in[0];
    std::size_t h = in[1], w = in[2];
    append_conv(layers, c, 6, 5, rng);
    layers.push_back(std::make_unique<ReluLayer>());
    h = conv_out(h, 5);
    w = conv_out(w, 5);
    layers.push_back(std::make_unique<MaxPool2dLayer>(2, 2));
    h = conv_out(h, 2, 2);
    w = conv_out(w, 2, 2);
    append_conv(layers, 6, 16, 5, rng);
    layers.push_back(std::make_unique<ReluLayer>());
    h = conv_out(h, 5);
    w = conv_out(w, 5);
    layers.push_back(std::make_unique<MaxPool2dLayer>(2, 2));
    h = conv_out(h, 2, 2);
    w = conv_out(w, 2, 2);
    layers.push_back(std::make_unique<FlattenLayer>());
    const std::size_t flat = 16 * h * w;
    append_dense(layers, flat, 120, rng);
    layers.push_back(std::make_unique<ReluLayer>());
    append_dense(layers, 120, 84, rng);
    layers.push_back(std::make_unique<ReluLayer>());
    append_dense(layers, 84, static_cast<std::size_t>(k), rng);
  } else if (spec.name == "mlp") {
    const std::size_t flat = shape_numel(spec.input_shape);
    if (spec.input_shape.size() != 1) layers.push_back(std::make_unique<FlattenLayer>());
    std::size_t prev = flat;
    for (std::size_t h : spec.mlp_hidden) {
      append_dense(layers, prev, h, rng);
      layers.push_back(std::make_unique<ReluLayer>());
      prev = h;
    }
    append_dense(layers, prev, static_cast<std::size_t>(k), rng);
  } else if (spec.name == "cnn3") {
    const Shape& in = require_chw(spec.input_shape, "cnn3");
    const std::size_t c = in[0];
    std::size_t h = in[1], w = in[2];
    append_conv(layers, c, 8, 3, rng);
    layers.push_back(std::make_unique<ReluLayer>());
    h = conv_out(h, 3);
    w = conv_out(w, 3);
    layers.push_back(std::make_unique<MaxPool2dLayer>(2, 2));
    h = conv_out(h, 2, 2);
    w = conv_out(w, 2, 2);
    append_conv(layers, 8, 16, 3, rng);
    layers.push_back(std::make_unique<ReluLayer>());
    h = conv_out(h, 3);
    w = conv_out(w, 3);
    layers.push_back(std::make_unique<MaxPool2dLayer>(2, 2));
    h = conv_out(h, 2, 2);
    w = conv_out(w, 2, 2);
    layers.push_back(std::make_unique<FlattenLayer>());
    append_dense(layers, 16 * h * w, static_cast<std::size_t>(k), rng);
  } else {
    throw std::invalid_argument("build: unknown architecture '" + spec.name + "'");
  }
  return Network(spec, std::move(layers));
}

Tensor Network::forward(const Tensor& x) const {
  if (layers_.empty()) throw std::logic_error("network: forward on an empty network");
  const Shape& s = x.shape();
  const Shape& in = spec_.input_shape;
  const bool batch_ok = s.size() == in.size() + 1 &&
                        std::equal(in.begin(), in.end(), s.begin() + 1);
  // An mlp also accepts pre-flattened (N, D) input.
  const bool flat_ok = spec_.name == "mlp" && s.size() == 2 && s[1] == shape_numel(in);
  if (!batch_ok && !flat_ok) {
    throw std::invalid_argument("network: input " + shape_str(s) +
                                " does not match a batch of " + shape_str(in));
  }
  Tensor h = x;
  for (const auto& layer : layers_) h = layer->forward(h);
  return h;
}

std::vector<int> Network::predict(const Tensor& x) const {
  NoGradGuard no_grad;
  Tensor logits = forward(x);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers_) layer->collect_params(out);
  return out;
}

void Network::set_params_requires_grad(bool value) const {
  for (Tensor& p : parameters()) p.set_requires_grad(value);
}

Network Network::clone() const {
  std::vector<std::unique_ptr<Layer>> layers;
  layers.reserve(layers_.size());
  for (const auto& layer : layers_) layers.push_back(layer->clone());
  return Network(spec_, std::move(layers));
}

namespace {

constexpr char kMagic[8] = {'P', 'C', 'R', 'O', 'B', 'U', 'S', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return value;
}

}  // namespace

void Network::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kFormatVersion);
  const std::string arch = spec_.to_string();
  write_pod(os, static_cast<std::uint32_t>(arch.size()));
  os.write(arch.data(), static_cast<std::streamsize>(arch.size()));
  write_pod(os, static_cast<std::uint32_t>(spec_.num_classes));
  const auto params = parameters();
  write_pod(os, static_cast<std::uint32_t>(params.size()));
  for (const Tensor& p : params) {
    write_pod(os, static_cast<std::uint32_t>(p.shape().size()));
    for (std::size_t d : p.shape()) write_pod(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(p.data().data()),
             static_cast<std::streamsize>(p.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

Network Network::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: bad magic in '" + path + "'");
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kFormatVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto arch_len = read_pod<std::uint32_t>(is);
  std::string arch(arch_len, '\0');
  is.read(arch.data(), arch_len);
  if (!is) throw CheckpointError("checkpoint: truncated file");
  const ArchitectureSpec spec = ArchitectureSpec::parse(arch);
  const auto k = read_pod<std::uint32_t>(is);
  if (static_cast<int>(k) != spec.num_classes) {
    throw CheckpointError("checkpoint: class count field disagrees with architecture");
  }
  const auto count = read_pod<std::uint32_t>(is);

  // Stage everything before touching a network so a bad file can't leave a
  // half-loaded model behind.
  std::vector<Tensor> staged;
  staged.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto ndim = read_pod<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
    std::vector<double> values(shape_numel(shape));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint: truncated file");
    staged.emplace_back(std::move(shape), std::move(values));
  }

  Network net = Network::build(spec, 0);
  auto params = net.parameters();
  if (params.size() != staged.size()) {
    throw CheckpointError("checkpoint: parameter count does not match architecture");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != staged[i].shape()) {
      throw CheckpointError("checkpoint: tensor " + std::to_string(i) + " has shape " +
                            shape_str(staged[i].shape()) + ", architecture expects " +
                            shape_str(params[i].shape()));
    }
    params[i].data() = staged[i].data();
  }
  return net;
}

Network Network::load(const std::string& path, const ArchitectureSpec& expected) {
  Network net = load(path);
  if (!(net.spec() == expected)) {
    throw CheckpointError("checkpoint: holds '" + net.spec().to_string() + "', expected '" +
                          expected.to_string() + "'");
  }
  return net;
}

Network build(const ArchitectureSpec& spec, std::uint64_t seed) {
  return Network::build(spec, seed);
}

std::vector<int> predict(const Network& net, const Tensor& x) { return net.predict(x); }

void save_params(const Network& net, const std::string& path) { net.save(path); }

Network load_params(const std::string& path) { return Network::load(path); }

Tensor input_gradient(const Network& net, const LogitLoss& loss, const Tensor& x,
                      const std::vector<int>& labels) {
  return input_gradient(
      [&](const Tensor& leaf) { return loss(net.forward(leaf), labels); }, x);
}

}  // namespace pcrobust

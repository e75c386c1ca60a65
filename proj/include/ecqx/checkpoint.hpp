#pragma once

// Checkpoint container.
//
// A UTF-8 text header, one record per line, terminated by the line "end":
//
//   ECQX-CHECKPOINT
//   version 1
//   seed <u64>
//   input <d0> [<d1> ...]
//   bn <eps as %a hex float> <momentum as %a hex float>
//   layers <L>
//   layer <kind> in=<n> out=<n> kernel=<n> stride=<n> padding=<n> pool=<n> bias=<0|1>   (L times)
//   params <number of 64-bit reals that follow>
//   end
//
// followed by the parameter blocks as little-endian IEEE-754 binary64, layer
// by layer: weight, bias (when present), then running mean and running
// variance for batchnorm layers. Nothing follows the last block.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ecqx/nn.hpp"

namespace ecqx {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(char((bits >> (8 * b)) & 0xff));
}

inline double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | p[b];
  return std::bit_cast<double>(bits);
}

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

template <typename M>  // Model or const Model
auto param_blocks(M& m) {
  std::vector<decltype(&m.layers[0].weight)> out;
  for (auto& layer : m.layers) {
    if (!has_params(layer.spec.kind)) continue;
    out.push_back(&layer.weight);
    if (layer.spec.has_bias) out.push_back(&layer.bias);
    if (layer.spec.kind == LayerKind::batchnorm) {
      out.push_back(&layer.running_mean);
      out.push_back(&layer.running_var);
    }
  }
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& model, std::uint64_t seed) {
  std::ostringstream h;
  h << "ECQX-CHECKPOINT\n"
    << "version " << kCheckpointVersion << "\n"
    << "seed " << seed << "\n"
    << "input";
  for (auto d : model.input_shape) h << ' ' << d;
  h << "\nbn " << detail::hexfloat(model.bn_eps) << ' ' << detail::hexfloat(model.bn_momentum) << "\n";
  h << "layers " << model.layers.size() << "\n";
  for (const auto& l : model.layers) {
    const auto& s = l.spec;
    h << "layer " << kind_name(s.kind) << " in=" << s.in << " out=" << s.out << " kernel=" << s.kernel
      << " stride=" << s.stride << " padding=" << s.padding << " pool=" << s.pool
      << " bias=" << (s.has_bias ? 1 : 0) << "\n";
  }
  std::size_t count = 0;
  for (auto* t : detail::param_blocks(model)) count += t->size();
  h << "params " << count << "\nend\n";
  std::string out = h.str();
  out.reserve(out.size() + 8 * count);
  for (auto* t : detail::param_blocks(model))
    for (double v : t->vec()) detail::put_f64_le(out, v);
  return out;
}

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
};

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("truncated checkpoint header", pos);
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  auto expect = [&](const std::string& line, const std::string& key, std::size_t at) {
    if (line.rfind(key, 0) != 0) throw FormatError("expected '" + key + "' in checkpoint header", at);
    return std::istringstream(line.substr(key.size()));
  };

  std::size_t at = pos;
  if (next_line() != "ECQX-CHECKPOINT") throw FormatError("bad checkpoint magic", 0);
  at = pos;
  int version = 0;
  expect(next_line(), "version", at) >> version;
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), at);

  Checkpoint ck;
  at = pos;
  expect(next_line(), "seed", at) >> ck.seed;
  at = pos;
  {
    auto is = expect(next_line(), "input", at);
    std::size_t d;
    while (is >> d) ck.model.input_shape.push_back(d);
  }
  at = pos;
  {
    auto is = expect(next_line(), "bn", at);
    std::string eps, mom;
    is >> eps >> mom;
    ck.model.bn_eps = std::strtod(eps.c_str(), nullptr);
    ck.model.bn_momentum = std::strtod(mom.c_str(), nullptr);
  }
  at = pos;
  std::size_t n_layers = 0;
  expect(next_line(), "layers", at) >> n_layers;
  for (std::size_t i = 0; i < n_layers; ++i) {
    at = pos;
    auto is = expect(next_line(), "layer ", at);
    std::string kind;
    is >> kind;
    LayerSpec s;
    try {
      s.kind = parse_kind(kind);
    } catch (const InputError& e) {
      throw FormatError(e.what(), at);
    }
    std::string kv;
    while (is >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw FormatError("malformed layer field '" + kv + "'", at);
      const std::string key = kv.substr(0, eq);
      const std::size_t v = std::stoul(kv.substr(eq + 1));
      if (key == "in") s.in = v;
      else if (key == "out") s.out = v;
      else if (key == "kernel") s.kernel = v;
      else if (key == "stride") s.stride = v;
      else if (key == "padding") s.padding = v;
      else if (key == "pool") s.pool = v;
      else if (key == "bias") s.has_bias = v != 0;
      else throw FormatError("unknown layer field '" + key + "'", at);
    }
    Layer layer{s, {}, {}, {}, {}};
    if (has_params(s.kind)) {
      layer.weight = Tensor(weight_shape(s));
      const std::size_t nb = s.kind == LayerKind::batchnorm ? s.in : s.out;
      if (s.has_bias) layer.bias = Tensor({nb});
      if (s.kind == LayerKind::batchnorm) {
        layer.running_mean = Tensor({nb});
        layer.running_var = Tensor({nb});
      }
    }
    ck.model.layers.push_back(std::move(layer));
  }
  at = pos;
  std::size_t count = 0;
  expect(next_line(), "params", at) >> count;
  at = pos;
  if (next_line() != "end") throw FormatError("expected 'end' in checkpoint header", at);

  auto blocks = detail::param_blocks(ck.model);
  std::size_t expected = 0;
  for (auto* t : blocks) expected += t->size();
  if (expected != count)
    throw FormatError("header declares " + std::to_string(count) + " parameters, layers need " +
                      std::to_string(expected), at);
  if (bytes.size() - pos != 8 * count)
    throw FormatError("parameter payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(8 * count), pos);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  for (auto* t : blocks)
    for (auto& v : t->vec()) {
      v = detail::get_f64_le(p);
      p += 8;
    }
  try {
    validate_model(ck.model);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid model in checkpoint: ") + e.what(), 0);
  }
  return ck;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline void save_checkpoint(const std::string& path, const Model& model, std::uint64_t seed) {
  write_file(path, serialize_checkpoint(model, seed));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace ecqx

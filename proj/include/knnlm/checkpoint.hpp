#pragma once

// Checkpoint container:
//   "KNLM" | u32 version | u32 json_len | json (UTF-8) |
//   u32 n_tensors | n_tensors x { u32 name_len | name | u32 ndim |
//                                 u64 dims[ndim] | f32 data[prod(dims)] }
// All integers and floats are little-endian.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnlm/error.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/io.hpp"
#include "knnlm/model.hpp"

namespace knnlm {

inline constexpr std::string_view kCheckpointMagic = "KNLM";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Hash vocab_hash{};
  std::uint64_t step = 0;
  std::vector<double> loss_trace;  // mean training loss per epoch
  nlohmann::json meta = nlohmann::json::object();  // training settings, seed, metrics
  std::vector<float> params;

  template <typename Real = float>
  TransformerLM<Real> model() const {
    std::vector<Real> p(params.begin(), params.end());
    return TransformerLM<Real>(config, std::move(p));
  }

  template <typename Real>
  static Checkpoint from_model(const TransformerLM<Real>& m) {
    Checkpoint c;
    c.config = m.config();
    c.params.assign(m.params().begin(), m.params().end());
    return c;
  }

  std::string serialize() const {
    ParamLayout layout(config);
    if (params.size() != layout.total())
      fail_data("checkpoint: parameter count does not match config");
    nlohmann::json header{{"model", config},
                          {"vocab_hash", to_hex(vocab_hash)},
                          {"step", step},
                          {"loss_trace", loss_trace},
                          {"meta", meta}};
    io::Writer w;
    w.put_bytes(kCheckpointMagic);
    w.put(kCheckpointVersion);
    w.put_string(header.dump());
    w.put(static_cast<std::uint32_t>(layout.tensors().size()));
    for (const auto& t : layout.tensors()) {
      w.put_string(t.name);
      w.put(static_cast<std::uint32_t>(t.shape.size()));
      for (auto s : t.shape) w.put(static_cast<std::uint64_t>(s));
      w.put_array(std::span<const float>(params).subspan(t.offset, t.size));
    }
    return w.take();
  }

  static Checkpoint parse(std::string_view bytes) {
    io::Reader r(bytes, "checkpoint");
    if (r.get_bytes(4) != kCheckpointMagic) fail_data("checkpoint: bad magic");
    auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
      fail_data("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint c;
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(r.get_string());
      c.config = header.at("model").get<ModelConfig>();
      c.vocab_hash = hash_from_hex(header.at("vocab_hash").get<std::string>());
      c.step = header.at("step").get<std::uint64_t>();
      c.loss_trace = header.at("loss_trace").get<std::vector<double>>();
      c.meta = header.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      fail_data(std::string("checkpoint: bad header: ") + e.what());
    }
    ParamLayout layout;
    try {
      layout = ParamLayout(c.config);
    } catch (const Error& e) {
      fail_data(std::string("checkpoint: ") + e.what());
    }
    auto n = r.get<std::uint32_t>();
    if (n != layout.tensors().size()) fail_data("checkpoint: tensor count mismatch");
    c.params.assign(layout.total(), 0.0f);
    for (const auto& t : layout.tensors()) {
      auto name = r.get_string(4096);
      if (name != t.name) fail_data("checkpoint: expected tensor " + t.name + ", got " + name);
      auto ndim = r.get<std::uint32_t>();
      if (ndim != t.shape.size()) fail_data("checkpoint: rank mismatch for " + name);
      for (auto s : t.shape)
        if (r.get<std::uint64_t>() != s) fail_data("checkpoint: shape mismatch for " + name);
      r.get_array(std::span<float>(c.params).subspan(t.offset, t.size));
    }
    r.expect_end();
    return c;
  }

  Hash content_hash() const { return sha256(serialize()); }

  void save(const std::string& path) const { io::write_file(path, serialize()); }
  static Checkpoint load(const std::string& path) { return parse(io::read_file(path)); }
};

}  // namespace knnlm

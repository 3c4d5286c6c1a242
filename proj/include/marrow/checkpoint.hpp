#pragma once

// Checkpoint file: one line of JSON (config, vocabulary, tensor table with
// byte offsets) terminated by '\n', then the raw little-endian float32
// tensor data in table order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "marrow/error.hpp"
#include "marrow/io.hpp"
#include "marrow/model.hpp"
#include "marrow/text.hpp"

namespace marrow {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct ModelCheckpoint {
  ModelWeights<float> weights;
  std::optional<LoraAdapters<float>> adapters;
  Vocabulary vocab;

  const LoraAdapters<float>* lora() const { return adapters ? &*adapters : nullptr; }
};

inline constexpr const char* kCheckpointFormat = "marrow-checkpoint-v1";

namespace detail {

// Zero tensors with the shapes implied by the config; the loader fills them.
inline ModelWeights<float> weight_skeleton(const ModelConfig& c) {
  ModelWeights<float> w;
  w.config = c;
  const std::size_t d = c.d_model, f = c.d_ff;
  w.tok_embeddings = Tensor<float>({c.vocab_size, d});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    w.layers.push_back({Tensor<float>({d}), Tensor<float>({d, d}), Tensor<float>({d, d}), Tensor<float>({d, d}),
                        Tensor<float>({d, d}), Tensor<float>({d}), Tensor<float>({f, d}), Tensor<float>({f, d}),
                        Tensor<float>({d, f})});
  }
  w.final_norm = Tensor<float>({d});
  if (c.head == HeadKind::scalar) {
    w.head = Tensor<float>({1, d});
    w.head_bias = Tensor<float>({1});
  }
  return w;
}

inline LoraAdapters<float> lora_skeleton(const ModelConfig& c, std::size_t rank, double alpha) {
  LoraAdapters<float> l;
  l.rank = rank;
  l.alpha = alpha;
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    l.q.push_back({Tensor<float>({rank, c.d_model}), Tensor<float>({c.d_model, rank})});
    l.v.push_back({Tensor<float>({rank, c.d_model}), Tensor<float>({c.d_model, rank})});
  }
  return l;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  if (ckpt.weights.config.vocab_size != ckpt.vocab.size()) {
    throw ContractError("checkpoint vocabulary has " + std::to_string(ckpt.vocab.size()) + " tokens, model expects " +
                        std::to_string(ckpt.weights.config.vocab_size));
  }
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  auto add = [&](const std::string& name, const Tensor<float>& t) {
    const std::size_t nbytes = t.size() * sizeof(float);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}, {"nbytes", nbytes}});
    blob.append(reinterpret_cast<const char*>(t.data()), nbytes);
  };
  ckpt.weights.for_each(add);
  nlohmann::json lora = nullptr;
  if (ckpt.adapters) {
    validate_adapters(ckpt.weights, *ckpt.adapters);
    lora = {{"rank", ckpt.adapters->rank}, {"alpha", ckpt.adapters->alpha}};
    ckpt.adapters->for_each(add);
  }
  nlohmann::json header = {{"format", kCheckpointFormat}, {"config", ckpt.weights.config.to_json()},
                           {"lora", lora},                {"vocab", ckpt.vocab.to_json()},
                           {"tensors", tensors},          {"data_bytes", blob.size()}};
  return header.dump() + "\n" + blob;
}

inline ModelCheckpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) throw DataError(origin + ": missing checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed checkpoint header: " + e.what());
  }
  try {
    if (header.at("format") != kCheckpointFormat) throw DataError(origin + ": not a marrow checkpoint");
    const std::size_t data_bytes = header.at("data_bytes").get<std::size_t>();
    const std::size_t data_start = newline + 1;
    if (bytes.size() != data_start + data_bytes) {
      throw DataError(origin + ": expected " + std::to_string(data_start + data_bytes) + " bytes, found " +
                      std::to_string(bytes.size()) + " (truncated or padded file)");
    }
    ModelCheckpoint ckpt;
    const auto config = ModelConfig::from_json(header.at("config"));
    ckpt.vocab = Vocabulary::from_json(header.at("vocab"));
    if (ckpt.vocab.size() != config.vocab_size) throw DataError(origin + ": vocabulary size disagrees with config");
    ckpt.weights = detail::weight_skeleton(config);
    if (!header.at("lora").is_null()) {
      ckpt.adapters = detail::lora_skeleton(config, header["lora"].at("rank").get<std::size_t>(),
                                            header["lora"].at("alpha").get<double>());
    }
    const auto& table = header.at("tensors");
    std::size_t index = 0;
    auto fill = [&](const std::string& name, Tensor<float>& t) {
      if (index >= table.size()) throw DataError(origin + ": tensor '" + name + "' missing");
      const auto& entry = table[index++];
      if (entry.at("name") != name) {
        throw DataError(origin + ": expected tensor '" + name + "', found '" + entry.at("name").get<std::string>() + "'");
      }
      if (entry.at("shape").get<Shape>() != t.shape()) {
        throw DataError(origin + ": tensor '" + name + "' has shape " + shape_str(entry.at("shape").get<Shape>()) +
                        ", config implies " + shape_str(t.shape()));
      }
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
      if (nbytes != t.size() * sizeof(float) || offset + nbytes > data_bytes) {
        throw DataError(origin + ": tensor '" + name + "' byte range is inconsistent");
      }
      std::memcpy(t.data(), bytes.data() + data_start + offset, nbytes);
    };
    ckpt.weights.for_each(fill);
    if (ckpt.adapters) ckpt.adapters->for_each(fill);
    if (index != table.size()) throw DataError(origin + ": unexpected extra tensors");
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed checkpoint header: " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  write_file(path, serialize_checkpoint(ckpt));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path), path.string());
}

}  // namespace marrow

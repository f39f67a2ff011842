// Copyright (c) 2026 The ctxbias Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxbias/error.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/tokenizer.hpp"

namespace ctxbias {

inline uint64_t Fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t Fnv1a64(const std::string& s) { return Fnv1a64(s.data(), s.size()); }

inline std::string HexDigest(uint64_t h) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

struct TrainingState {
  long step = 0;
  int epoch = 0;
};

struct Checkpoint {
  MultiTaskLM<float> model;
  Vocab vocab;
  TrainingState state;
};

// Layout: "CTXBLM\0\0", u32 version, u64 header length, JSON header (config,
// vocab, training state, tensor table), float32 tensor payload in header
// order, then a u64 FNV-1a checksum over every preceding byte.
inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'X', 'B', 'L', 'M', 0, 0};
inline constexpr uint32_t kCheckpointVersion = 1;

inline std::string SerializeCheckpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["model_config"] = ckpt.model.config().ToJson();
  header["vocab"] = ckpt.vocab.ToJson();
  header["training_state"] = {{"step", ckpt.state.step}, {"epoch", ckpt.state.epoch}};
  header["tensors"] = nlohmann::ordered_json::array();
  VisitTensors(ckpt.model.weights(), [&](const std::string& name, const Mat<float>& t) {
    header["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  auto put = [&](const void* p, size_t n) { out.append(static_cast<const char*>(p), n); };
  put(&kCheckpointVersion, sizeof(kCheckpointVersion));
  uint64_t header_len = header_text.size();
  put(&header_len, sizeof(header_len));
  out += header_text;
  VisitTensors(ckpt.model.weights(), [&](const std::string&, const Mat<float>& t) {
    put(t.data(), sizeof(float) * t.size());
  });
  uint64_t sum = Fnv1a64(out.data(), out.size());
  put(&sum, sizeof(sum));
  return out;
}

inline Checkpoint DeserializeCheckpoint(const std::string& bytes) {
  const size_t fixed = sizeof(kCheckpointMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < fixed + sizeof(uint64_t) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    ThrowData("not a checkpoint file");
  }
  uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - sizeof(uint64_t), sizeof(uint64_t));
  if (Fnv1a64(bytes.data(), bytes.size() - sizeof(uint64_t)) != stored_sum) {
    ThrowData("checkpoint checksum mismatch");
  }
  uint32_t version;
  std::memcpy(&version, bytes.data() + sizeof(kCheckpointMagic), sizeof(version));
  if (version != kCheckpointVersion) {
    ThrowData("unsupported checkpoint version " + std::to_string(version));
  }
  uint64_t header_len;
  std::memcpy(&header_len, bytes.data() + sizeof(kCheckpointMagic) + sizeof(uint32_t),
              sizeof(header_len));
  if (fixed + header_len > bytes.size()) ThrowData("truncated checkpoint header");
  nlohmann::json header = nlohmann::json::parse(bytes.substr(fixed, header_len));

  Checkpoint ckpt;
  ModelConfig config = ModelConfig::FromJson(header.at("model_config"));
  ckpt.model = MultiTaskLM<float>::Create(config);
  ckpt.vocab = Vocab::FromJson(header.at("vocab"));
  if (ckpt.vocab.size() != config.vocab_size) ThrowData("checkpoint vocab size mismatch");
  ckpt.state.step = header.at("training_state").at("step").get<long>();
  ckpt.state.epoch = header.at("training_state").at("epoch").get<int>();

  const auto& table = header.at("tensors");
  size_t offset = fixed + header_len;
  size_t index = 0;
  VisitTensors(ckpt.model.mutable_weights(), [&](const std::string& name, Mat<float>& t) {
    if (index >= table.size()) ThrowData("checkpoint is missing tensor " + name);
    const auto& entry = table[index++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("rows").get<Eigen::Index>() != t.rows() ||
        entry.at("cols").get<Eigen::Index>() != t.cols()) {
      ThrowData("checkpoint tensor " + entry.at("name").get<std::string>() +
                " does not match the configured shape of " + name);
    }
    const size_t n = sizeof(float) * t.size();
    if (offset + n > bytes.size() - sizeof(uint64_t)) ThrowData("truncated checkpoint payload");
    std::memcpy(t.data(), bytes.data() + offset, n);
    offset += n;
  });
  if (index != table.size() || offset != bytes.size() - sizeof(uint64_t)) {
    ThrowData("checkpoint has unexpected extra tensors");
  }
  return ckpt;
}

inline std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) ThrowData("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void WriteFile(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) ThrowRuntime("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) ThrowRuntime("short write to " + path.string());
}

inline void SaveCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  WriteFile(path, SerializeCheckpoint(ckpt));
}

inline Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  return DeserializeCheckpoint(ReadFile(path));
}

}  // namespace ctxbias

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "i2v/adam.hpp"
#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/model.hpp"
#include "i2v/training.hpp"

namespace i2v {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'I', '2', 'V', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::optional<TrainConfig> train;
  std::vector<TrainLogRow> log;
  std::size_t best_epoch = 0;
  std::optional<AdamState> optimizer;
  // Free-form provenance: filter parameters, split seed, cohort source.
  nlohmann::json metadata = nlohmann::json::object();
};

inline Checkpoint make_checkpoint(const PretrainResult& r, nlohmann::json metadata = nlohmann::json::object()) {
  return {r.model, r.train, r.log, r.best_epoch, r.optimizer, std::move(metadata)};
}

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t x) {
  char b[8];
  std::memcpy(b, &x, 8);
  out.write(b, 8);
}

inline void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const Model& m = ck.model;
  nlohmann::json meta;
  meta["format_version"] = kCheckpointVersion;
  meta["model_config"] = m.config().to_json();
  meta["vocabulary"] = m.vocab().to_json();
  meta["vocab_digest"] = m.vocab().digest();
  meta["downstream"] = m.downstream().has_value();
  meta["train_config"] = ck.train ? ck.train->to_json() : nlohmann::json(nullptr);
  meta["best_epoch"] = ck.best_epoch;
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : ck.log) {
    log.push_back({{"epoch", r.epoch},
                   {"train_loss", r.train_loss},
                   {"valid_loss", r.valid_loss},
                   {"mask_loss", r.mask_loss},
                   {"next_loss", r.next_loss}});
  }
  meta["log"] = log;
  meta["metadata"] = ck.metadata;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : m.params()) manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  meta["tensors"] = manifest;
  meta["optimizer_step"] = ck.optimizer ? nlohmann::json(ck.optimizer->step) : nlohmann::json(nullptr);

  std::ostringstream out(std::ios::binary);
  const std::string header = meta.dump();
  out.write(kCheckpointMagic, 4);
  detail::write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : m.params()) detail::write_tensor(out, p.value);
  if (ck.optimizer) {
    for (const auto& t : ck.optimizer->m) detail::write_tensor(out, t);
    for (const auto& t : ck.optimizer->v) detail::write_tensor(out, t);
  }
  return out.str();
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint: " + path.string());
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  auto fail = [&](const std::string& why) -> InputError { return InputError(source + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CompatibilityError(source + ": not an I2V1 checkpoint (bad magic)");
  }
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + 4, 8);
  if (n > bytes.size() - 12) throw fail("truncated metadata block");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(n));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("corrupt metadata: ") + e.what());
  }
  try {
    const int version = meta.at("format_version");
    if (version != kCheckpointVersion) {
      throw CompatibilityError(source + ": checkpoint format version " + std::to_string(version) +
                               ", expected " + std::to_string(kCheckpointVersion));
    }
    const ModelConfig mc = ModelConfig::from_json(meta.at("model_config"));
    const Vocabulary vocab = Vocabulary::from_json(meta.at("vocabulary"));
    if (vocab.digest() != meta.at("vocab_digest").get<std::string>()) {
      throw CompatibilityError(source + ": stored vocabulary does not match its digest");
    }
    Checkpoint ck{Model(mc, vocab, 0), std::nullopt, {}, meta.at("best_epoch"), std::nullopt, meta.at("metadata")};
    if (meta.at("downstream").get<bool>()) ck.model.add_downstream_heads(0);
    if (!meta.at("train_config").is_null()) ck.train = TrainConfig::from_json(meta.at("train_config"));
    for (const auto& r : meta.at("log")) {
      ck.log.push_back({r.at("epoch"), r.at("train_loss"), r.at("valid_loss"), r.at("mask_loss"), r.at("next_loss")});
    }

    const auto& manifest = meta.at("tensors");
    ParamStore& params = ck.model.params();
    if (manifest.size() != params.size()) throw CompatibilityError(source + ": tensor manifest does not match model layout");
    std::size_t pos = 12 + n;
    auto read = [&](Tensor& t) {
      const std::size_t len = t.size() * sizeof(double);
      if (bytes.size() - pos < len) throw fail("truncated tensor payload");
      std::memcpy(t.data(), bytes.data() + pos, len);
      pos += len;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = manifest[i];
      if (entry.at("name").get<std::string>() != params[i].name ||
          entry.at("shape").get<Shape>() != params[i].value.shape()) {
        throw CompatibilityError(source + ": tensor " + entry.at("name").get<std::string>() +
                                 " does not match the model layout");
      }
      read(params[i].value);
    }
    if (!meta.at("optimizer_step").is_null()) {
      AdamState st = AdamState::for_params(params);
      st.step = meta.at("optimizer_step");
      for (auto& t : st.m) read(t);
      for (auto& t : st.v) read(t);
      ck.optimizer = std::move(st);
    }
    if (pos != bytes.size()) throw fail("trailing bytes after tensor payload");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed metadata: ") + e.what());
  }
}

// Loads a checkpoint; with `expected_digest`, also requires the vocabulary
// to match the cohort it will be used with.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<std::string>& expected_digest = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  Checkpoint ck = deserialize_checkpoint(buf.str(), path.string());
  if (expected_digest && *expected_digest != ck.model.vocab().digest()) {
    throw CompatibilityError(path.string() + ": vocabulary digest " + ck.model.vocab().digest() +
                             " does not match cohort digest " + *expected_digest);
  }
  return ck;
}

}  // namespace i2v

#pragma once

// Checkpoint archive layout (all integers little-endian):
//
//   8 bytes   magic "ATMCKPT1"
//   uint32    format version
//   uint64    header length n
//   n bytes   JSON header: config, vocabulary, parameter table, optimizer
//             step count, training step, manifest id
//   ...       float32 payload: every parameter in table order, then the
//             Adam first and second moments in the same order (if present)

#include <atm/config.hpp>
#include <atm/error.hpp>
#include <atm/manifest.hpp>
#include <atm/optim.hpp>
#include <atm/student.hpp>
#include <atm/tokenizer.hpp>
#include <atm/trainer.hpp>

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace atm {

inline constexpr char kCheckpointMagic[8] = {'A', 'T', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ExperimentConfig config;
  Tokenizer tokenizer;
  Student<float> student;
  long optimizer_steps = 0;
  std::vector<AdamW<float>::State> optimizer_state;
  long step = 0;
  std::string manifest_id;
};

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

inline void put_matrix(std::string& out, const Mat<float>& m) {
  out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float));
}

class Reader {
 public:
  Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > data_.size()) throw InputError(source_ + ": checkpoint is truncated");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  void read_matrix(Mat<float>& m) {
    std::memcpy(m.data(), take(static_cast<std::size_t>(m.size()) * sizeof(float)),
                static_cast<std::size_t>(m.size()) * sizeof(float));
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  auto params = const_cast<Student<float>&>(c.student).parameters();
  nlohmann::ordered_json h;
  h["config"] = to_json(c.config);
  h["vocabulary"] = c.tokenizer.tokens();
  h["parameters"] = nlohmann::ordered_json::array();
  for (const Parameter<float>* p : params) {
    h["parameters"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  if (!c.optimizer_state.empty() && c.optimizer_state.size() != params.size()) {
    throw InternalError("optimizer state does not match the parameter list");
  }
  h["optimizer_steps"] = c.optimizer_steps;
  h["optimizer_state"] = !c.optimizer_state.empty();
  h["step"] = c.step;
  h["manifest_id"] = c.manifest_id;
  const std::string header = h.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  for (const Parameter<float>* p : params) detail::put_matrix(out, p->value);
  for (const auto& s : c.optimizer_state) detail::put_matrix(out, s.m);
  for (const auto& s : c.optimizer_state) detail::put_matrix(out, s.v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& data, const std::string& source = "checkpoint") {
  detail::Reader r(data, source);
  if (std::memcmp(r.take(sizeof(kCheckpointMagic)), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw InputError(source + ": not a checkpoint file");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw InputError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto n = r.get<std::uint64_t>();
  nlohmann::ordered_json h;
  try {
    h = nlohmann::ordered_json::parse(std::string(r.take(n), n));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(source + ": corrupt checkpoint header: " + e.what());
  }
  Checkpoint c;
  apply_json(c.config, h.at("config"));
  c.config.validate();
  c.tokenizer = Tokenizer::from_tokens(h.at("vocabulary").get<std::vector<std::string>>());
  c.student = make_student(c.config, c.tokenizer);
  auto params = c.student.parameters();
  const auto& table = h.at("parameters");
  if (table.size() != params.size()) throw InputError(source + ": parameter count does not match the config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i];
    if (table[i].at("name").get<std::string>() != p.name || table[i].at("rows").get<long>() != p.value.rows() ||
        table[i].at("cols").get<long>() != p.value.cols()) {
      throw InputError(source + ": parameter " + std::to_string(i) + " does not match the model layout");
    }
    r.read_matrix(p.value);
  }
  c.optimizer_steps = h.at("optimizer_steps").get<long>();
  if (h.at("optimizer_state").get<bool>()) {
    c.optimizer_state.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.optimizer_state[i].m.resize(params[i]->value.rows(), params[i]->value.cols());
      r.read_matrix(c.optimizer_state[i].m);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.optimizer_state[i].v.resize(params[i]->value.rows(), params[i]->value.cols());
      r.read_matrix(c.optimizer_state[i].v);
    }
  }
  if (!r.at_end()) throw InputError(source + ": trailing bytes after checkpoint payload");
  c.step = h.at("step").get<long>();
  c.manifest_id = h.at("manifest_id").get<std::string>();
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path), path.string());
}

inline Checkpoint snapshot(const Trainer& t, std::string manifest_id) {
  Checkpoint c;
  c.config = t.config();
  c.tokenizer = t.tokenizer();
  c.student = t.student();
  c.optimizer_steps = t.optimizer().steps();
  c.optimizer_state = t.optimizer().state();
  c.step = t.step();
  c.manifest_id = std::move(manifest_id);
  return c;
}

// Rebuilds a trainer positioned exactly where the checkpoint was taken.
inline Trainer resume_trainer(const Checkpoint& c, const Dataset& train) {
  Trainer t(c.config, c.tokenizer, train, c.student);
  t.optimizer().restore(c.optimizer_steps, c.optimizer_state);
  t.resume_at(c.step);
  return t;
}

}  // namespace atm

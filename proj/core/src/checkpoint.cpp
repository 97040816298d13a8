#include <cstring>

#include "json_io.hpp"
#include "tscnet/train.hpp"

namespace tscnet {

namespace fs = std::filesystem;
using detail::json;

namespace {

void append(std::vector<uint8_t>& blob, const double* data, size_t n) {
  const auto* p = reinterpret_cast<const uint8_t*>(data);
  blob.insert(blob.end(), p, p + n * sizeof(double));
}

std::vector<double> take(const std::vector<uint8_t>& blob, size_t& offset, size_t n, const fs::path& path) {
  if (offset + n * sizeof(double) > blob.size()) throw IoError("checkpoint blob truncated: " + path.string());
  std::vector<double> out(n);
  std::memcpy(out.data(), blob.data() + offset, n * sizeof(double));
  offset += n * sizeof(double);
  return out;
}

}  // namespace

template <typename T>
VisionTransformer<T> Checkpoint::model_as() const {
  VisionTransformer<T> m(spec, 0);
  if (parameters.size() != m.parameter_count())
    throw StateError("checkpoint holds " + std::to_string(parameters.size()) + " parameters, model expects " +
                     std::to_string(m.parameter_count()));
  for (size_t i = 0; i < parameters.size(); ++i) m.parameters()[i] = static_cast<T>(parameters[i]);
  if (prototypes.rows() > 0) m.set_prototypes(prototypes);
  m.mark_ready();
  return m;
}

template VisionTransformer<float> Checkpoint::model_as<float>() const;
template VisionTransformer<double> Checkpoint::model_as<double>() const;

VisionTransformer<float> Checkpoint::model() const { return model_as<float>(); }

std::string Checkpoint::fingerprint() const {
  std::vector<uint8_t> blob;
  append(blob, parameters.data(), parameters.size());
  append(blob, prototypes.data(), static_cast<size_t>(prototypes.size()));
  return sha256_hex(std::span<const uint8_t>(blob));
}

void save_checkpoint(const Checkpoint& ck, const fs::path& stem) {
  if (!stem.parent_path().empty()) fs::create_directories(stem.parent_path());
  std::vector<uint8_t> blob;
  append(blob, ck.parameters.data(), ck.parameters.size());
  append(blob, ck.current_parameters.data(), ck.current_parameters.size());
  append(blob, ck.optimizer_state.data(), ck.optimizer_state.size());
  append(blob, ck.prototypes.data(), static_cast<size_t>(ck.prototypes.size()));

  json j;
  j["format"] = "tscnet-checkpoint";
  j["version"] = version_string();
  j["spec"] = detail::to_json(ck.spec);
  j["config"] = detail::to_json(ck.config);
  j["stage"] = ck.stage;
  j["epoch"] = ck.epoch;
  j["seed"] = ck.seed;
  j["best_score"] = ck.best_score;
  j["best_epoch"] = ck.best_epoch;
  j["strength"] = detail::to_json(ck.strength);
  j["loss_history"] = ck.loss_history;
  j["prototype_fingerprint"] = ck.prototype_fingerprint;
  j["prototype_rows"] = ck.prototypes.rows();
  j["prototype_cols"] = ck.prototypes.cols();
  j["parameter_count"] = ck.parameters.size();
  j["current_parameter_count"] = ck.current_parameters.size();
  j["optimizer_state_size"] = ck.optimizer_state.size();
  j["fingerprint"] = ck.fingerprint();
  j["blob_sha256"] = sha256_hex(std::span<const uint8_t>(blob));

  // Write the blob first so that a sidecar never points at a stale blob.
  write_binary_file(fs::path(stem).concat(".bin"), blob);
  write_text_file(fs::path(stem).concat(".json"), j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& stem) {
  const fs::path meta = fs::path(stem).concat(".json");
  const fs::path bin = fs::path(stem).concat(".bin");
  Checkpoint ck;
  try {
    const json j = json::parse(read_text_file(meta));
    if (j.value("format", std::string()) != "tscnet-checkpoint") throw IoError("not a checkpoint: " + meta.string());
    ck.spec = detail::spec_from_json(j.at("spec"));
    ck.config = detail::train_config_from_json(j.at("config"));
    ck.stage = j.at("stage").get<int>();
    ck.epoch = j.at("epoch").get<int>();
    ck.seed = j.at("seed").get<uint64_t>();
    ck.best_score = j.at("best_score").get<double>();
    ck.best_epoch = j.at("best_epoch").get<int>();
    ck.strength = detail::strength_from_json(j.at("strength"));
    ck.loss_history = j.at("loss_history").get<std::vector<double>>();
    ck.prototype_fingerprint = j.at("prototype_fingerprint").get<std::string>();

    const auto blob = read_binary_file(bin);
    if (sha256_hex(std::span<const uint8_t>(blob)) != j.at("blob_sha256").get<std::string>())
      throw IoError("checkpoint blob does not match its metadata: " + bin.string());
    size_t offset = 0;
    ck.parameters = take(blob, offset, j.at("parameter_count").get<size_t>(), bin);
    ck.current_parameters = take(blob, offset, j.at("current_parameter_count").get<size_t>(), bin);
    ck.optimizer_state = take(blob, offset, j.at("optimizer_state_size").get<size_t>(), bin);
    const auto rows = j.at("prototype_rows").get<Eigen::Index>(), cols = j.at("prototype_cols").get<Eigen::Index>();
    const auto proto = take(blob, offset, static_cast<size_t>(rows * cols), bin);
    ck.prototypes = Eigen::Map<const MatrixD>(proto.data(), rows, cols);
    if (offset != blob.size()) throw IoError("checkpoint blob has trailing data: " + bin.string());
    if (ck.fingerprint() != j.at("fingerprint").get<std::string>())
      throw IoError("checkpoint fingerprint mismatch: " + stem.string());
  } catch (const json::exception& e) {
    throw IoError("checkpoint metadata " + meta.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace tscnet

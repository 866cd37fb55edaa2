// Model file: magic "LAFF" | version u32 | config_len u32 | config JSON |
// parameters as f64, in FusionModel::parameters() order. Little-endian.

#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "laff/config.hpp"
#include "laff/errors.hpp"
#include "laff/fusion.hpp"

namespace laff {

void save_model(const FusionModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write model file " + path);
  const std::string config = to_json(model.config()).dump();
  os.write("LAFF", 4);
  detail::write_le<std::uint32_t>(os, kModelFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(config.size()));
  os.write(config.data(), static_cast<std::streamsize>(config.size()));
  for (double v : model.flat_values()) detail::write_le<double>(os, v);
  if (!os) throw FormatError("write failed: " + path);
}

FusionModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open model file " + path);
  detail::LeReader in(is, path);
  if (in.read_bytes(4, "magic") != "LAFF") in.fail(0, "bad magic (expected LAFF)");
  const auto version = in.read<std::uint32_t>("version");
  if (version != kModelFormatVersion) {
    in.fail(4, "unsupported model format version " + std::to_string(version));
  }
  const auto len = in.read<std::uint32_t>("config length");
  const auto config_at = in.offset();
  const std::string text = in.read_bytes(len, "config");
  ModelConfig config;
  try {
    config = model_config_from_json(Json::parse(text));
    config.validate();
  } catch (const Json::exception& e) {
    in.fail(config_at, std::string("invalid config JSON: ") + e.what());
  } catch (const ConfigError& e) {
    in.fail(config_at, std::string("invalid config: ") + e.what());
  }

  FusionModel model(config, 0);
  std::vector<double> values(model.parameter_count());
  for (double& v : values) {
    const auto at = in.offset();
    v = in.read<double>("parameters");
    if (!std::isfinite(v)) in.fail(at, "non-finite parameter");
  }
  if (!in.at_end()) in.fail(in.offset(), "trailing bytes after parameters");
  model.set_flat_values(values);
  return model;
}

void save_model_sidecar(const FusionModel& model, const std::string& path) {
  Json j = to_json(model.config());
  j["format_version"] = kModelFormatVersion;
  j["parameter_count"] = model.parameter_count();
  write_json_file(j, path);
}

}  // namespace laff

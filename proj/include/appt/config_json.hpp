#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <vector>

#include "appt/network.hpp"
#include "json.hpp"

namespace appt {

using Json = nlohmann::json;

inline constexpr int kConfigVersion = 1;

namespace detail {

[[noreturn]] inline void field_error(const std::string& field, const std::string& what) {
  throw ConfigError(field + ": " + what);
}

inline const Json* optional_field(const Json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

/// Accepts 0.25 or "1/4".
inline double parse_ratio(const Json& v, const std::string& field) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    const auto slash = s.find('/');
    if (slash != std::string::npos) {
      double num = 0, den = 0;
      auto a = std::from_chars(s.data(), s.data() + slash, num);
      auto b = std::from_chars(s.data() + slash + 1, s.data() + s.size(), den);
      if (a.ec == std::errc{} && b.ec == std::errc{} && a.ptr == s.data() + slash &&
          b.ptr == s.data() + s.size() && den != 0)
        return num / den;
    }
  }
  field_error(field, "expected a number or a \"p/q\" fraction");
}

inline std::vector<double> ratio_list(const Json& v, const std::string& field) {
  if (!v.is_array()) field_error(field, "expected an array");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(parse_ratio(v[i], field + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::vector<std::size_t> count_list(const Json& v, const std::string& field) {
  if (!v.is_array()) field_error(field, "expected an array");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer() || v[i].get<long long>() < 0)
      field_error(field + "[" + std::to_string(i) + "]", "expected a non-negative integer");
    out.push_back(v[i].get<std::size_t>());
  }
  return out;
}

inline std::size_t count_field(const Json& obj, const char* key, const std::string& path, std::size_t fallback) {
  const Json* v = optional_field(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer() || v->get<long long>() < 0) field_error(path + "." + key, "expected a non-negative integer");
  return v->get<std::size_t>();
}

inline std::uint64_t seed_field(const Json& obj, const char* key, const std::string& path, std::uint64_t fallback) {
  const Json* v = optional_field(obj, key);
  if (!v) return fallback;
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
    field_error(path + "." + key, "expected an unsigned integer");
  return v->get<std::uint64_t>();
}

inline double real_field(const Json& obj, const char* key, const std::string& path, double fallback) {
  const Json* v = optional_field(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) field_error(path + "." + key, "expected a number");
  return v->get<double>();
}

inline std::string string_field(const Json& obj, const char* key, const std::string& path, std::string fallback) {
  const Json* v = optional_field(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) field_error(path + "." + key, "expected a string");
  return v->get<std::string>();
}

}  // namespace detail

inline Json to_json(const NetworkConfig& cfg) {
  const auto& s = cfg.schedule;
  return Json{{"task", std::string(to_string(cfg.task))},
              {"input_width", cfg.input_width},
              {"num_classes", cfg.num_classes},
              {"neighbors", cfg.neighbors},
              {"arrangement", std::string(to_string(cfg.arrangement))},
              {"fusion", std::string(to_string(cfg.fusion))},
              {"seed", cfg.seed},
              {"stages",
               {{"depth", s.depth},
                {"channels", s.channels},
                {"global_ratio", s.global_ratio},
                {"sampling_ratio", s.sampling_ratio},
                {"stride", s.stride},
                {"decoder_depth", s.decoder_depth}}}};
}

/// Parses a network object. `"preset": "reference"` starts from the five-stage
/// schedule; explicit `stages` fields override it.
inline NetworkConfig network_from_json(const Json& j, const std::string& path = "network") {
  using namespace detail;
  if (!j.is_object()) field_error(path, "expected an object");
  NetworkConfig cfg;
  const std::string task = string_field(j, "task", path, "segmentation");
  if (task == "segmentation") cfg.task = Task::segmentation;
  else if (task == "classification") cfg.task = Task::classification;
  else field_error(path + ".task", "unknown task '" + task + "'");

  const std::string preset = string_field(j, "preset", path, "");
  if (preset == "reference") cfg.schedule = reference_schedule();
  else if (!preset.empty()) field_error(path + ".preset", "unknown preset '" + preset + "'");

  cfg.input_width = count_field(j, "input_width", path, 6);
  cfg.num_classes = count_field(j, "num_classes", path, 2);
  cfg.neighbors = count_field(j, "neighbors", path, 16);
  cfg.seed = seed_field(j, "seed", path, 0);

  const std::string arr = string_field(j, "arrangement", path, "parallel");
  if (arr == "parallel") cfg.arrangement = Arrangement::parallel;
  else if (arr == "serial") cfg.arrangement = Arrangement::serial;
  else field_error(path + ".arrangement", "expected \"parallel\" or \"serial\"");

  const std::string fus = string_field(j, "fusion", path, "concat");
  if (fus == "concat") cfg.fusion = Fusion::concat;
  else if (fus == "sum_mlp") cfg.fusion = Fusion::sum_mlp;
  else field_error(path + ".fusion", "expected \"concat\" or \"sum_mlp\"");

  if (const Json* st = optional_field(j, "stages")) {
    const std::string sp = path + ".stages";
    if (!st->is_object()) field_error(sp, "expected an object");
    auto& s = cfg.schedule;
    if (const Json* v = optional_field(*st, "depth")) s.depth = count_list(*v, sp + ".depth");
    if (const Json* v = optional_field(*st, "channels")) s.channels = count_list(*v, sp + ".channels");
    if (const Json* v = optional_field(*st, "global_ratio")) s.global_ratio = ratio_list(*v, sp + ".global_ratio");
    if (const Json* v = optional_field(*st, "sampling_ratio")) s.sampling_ratio = ratio_list(*v, sp + ".sampling_ratio");
    if (const Json* v = optional_field(*st, "stride")) s.stride = count_list(*v, sp + ".stride");
    if (const Json* v = optional_field(*st, "decoder_depth")) s.decoder_depth = count_list(*v, sp + ".decoder_depth");
  } else if (preset.empty()) {
    field_error(path + ".stages", "required unless a preset is given");
  }
  auto& s = cfg.schedule;
  if (s.stride.empty()) {
    s.stride.assign(s.depth.size(), 4);
    if (!s.stride.empty()) s.stride[0] = 1;
  }
  if (s.decoder_depth.empty()) s.decoder_depth.assign(s.depth.size(), 1);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + "." + e.what());
  }
  return cfg;
}

inline NetworkConfig from_json_network(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return network_from_json(j);
}

}  // namespace appt

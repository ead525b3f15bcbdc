#pragma once

// Flat `key = value` model configuration and number formatting helpers.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <string>
#include <string_view>
#include <system_error>

#include "fedbot/data.hpp"
#include "fedbot/error.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot {

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(std::string_view s, const std::string& what) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(what + ": not a number: '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_size(std::string_view s, const std::string& what) {
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw ConfigError(what + ": not a non-negative integer: '" + std::string(s) + "'");
  return v;
}

inline KeyValues to_key_values(const TransformerConfig& c) {
  return {{"vocab_size", std::to_string(c.vocab_size)},
          {"d_model", std::to_string(c.d_model)},
          {"n_heads", std::to_string(c.n_heads)},
          {"n_layers", std::to_string(c.n_layers)},
          {"d_ff", std::to_string(c.d_ff)},
          {"max_len", std::to_string(c.max_len)},
          {"dropout", format_double(c.dropout)},
          {"attention_dropout", format_double(c.attention_dropout)},
          {"activation_dropout", format_double(c.activation_dropout)}};
}

inline std::string format_config(const TransformerConfig& c) { return format_key_values(to_key_values(c)); }

/// Keys not present keep their defaults; unknown keys are an error so a typo
/// cannot silently fall back to a default.
inline TransformerConfig config_from_key_values(const KeyValues& kv, TransformerConfig c = {}) {
  for (const auto& [k, v] : kv) {
    if (k == "vocab_size") c.vocab_size = parse_size(v, k);
    else if (k == "d_model") c.d_model = parse_size(v, k);
    else if (k == "n_heads") c.n_heads = parse_size(v, k);
    else if (k == "n_layers") c.n_layers = parse_size(v, k);
    else if (k == "d_ff") c.d_ff = parse_size(v, k);
    else if (k == "max_len") c.max_len = parse_size(v, k);
    else if (k == "dropout") c.dropout = parse_double(v, k);
    else if (k == "attention_dropout") c.attention_dropout = parse_double(v, k);
    else if (k == "activation_dropout") c.activation_dropout = parse_double(v, k);
    else throw ConfigError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

inline TransformerConfig parse_config(std::string_view text, const std::string& origin = "config") {
  return config_from_key_values(parse_key_values(text, origin));
}

inline TransformerConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path), path.string());
}

}  // namespace fedbot

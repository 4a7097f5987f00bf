#pragma once

// Experiment configuration: plain key=value text, canonical serialization and
// a content hash so every artifact can name the exact config that produced it.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "sparsecode/hashing.hpp"
#include "sparsecode/reports.hpp"

namespace sparsecode {

struct ExperimentConfig {
  std::string data_dir;
  std::string out_dir = "out";
  std::vector<double> lambdas = {0.3};
  int n = 784;
  int train_count = 10000;  // desk-scale preset
  int dict_iters = 5000;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;
  bool start_single = true;
  std::uint64_t infer_max_iters = 200000;
  std::uint64_t infer_check_every = 10000;
  int samples = 500;  // sensitivity histogram samples, desk-scale
  Eigen::Index distortion_grid = 5;
  double distortion_std = 0.25;
  std::vector<int> k_grid = {1, 3, 10, 30, 100, 300, 1000, 3000};
  std::vector<double> lambda_w_grid = {1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  std::vector<std::uint64_t> eval_seeds = {1, 2, 3, 4, 5};
};

namespace detail {

template <typename T>
std::string join_list(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_same_v<T, double>)
      out += format_double(values[i]);
    else
      out += std::to_string(values[i]);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& key) {
  std::vector<T> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      if constexpr (std::is_same_v<T, double>)
        values.push_back(std::stod(item));
      else if constexpr (std::is_same_v<T, std::uint64_t>)
        values.push_back(std::stoull(item));
      else
        values.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad list entry for " + key + ": " + item);
    }
  }
  if (values.empty()) throw std::invalid_argument("config: empty list for " + key);
  return values;
}

}  // namespace detail

// Canonical form: fixed key order, full-precision floats. The config hash is
// the FNV-1a of this text, so equal hashes mean equal configs.
inline std::string serialize_config(const ExperimentConfig& c) {
  std::string out;
  const auto kv = [&](const std::string& key, const std::string& value) {
    out += key + "=" + value + "\n";
  };
  kv("data_dir", c.data_dir);
  kv("out_dir", c.out_dir);
  kv("lambdas", detail::join_list(c.lambdas));
  kv("n", std::to_string(c.n));
  kv("train_count", std::to_string(c.train_count));
  kv("dict_iters", std::to_string(c.dict_iters));
  kv("seed", std::to_string(c.seed));
  kv("checkpoint_every", std::to_string(c.checkpoint_every));
  kv("start_single", c.start_single ? "1" : "0");
  kv("infer_max_iters", std::to_string(c.infer_max_iters));
  kv("infer_check_every", std::to_string(c.infer_check_every));
  kv("samples", std::to_string(c.samples));
  kv("distortion_grid", std::to_string(c.distortion_grid));
  kv("distortion_std", format_double(c.distortion_std));
  kv("k_grid", detail::join_list(c.k_grid));
  kv("lambda_w_grid", detail::join_list(c.lambda_w_grid));
  kv("eval_seeds", detail::join_list(c.eval_seeds));
  return out;
}

inline std::string config_hash(const ExperimentConfig& c) {
  return hash_hex(fnv1a64(serialize_config(c)));
}

inline void apply_config_entry(ExperimentConfig& c, const std::string& key,
                               const std::string& value) {
  try {
    if (key == "data_dir") c.data_dir = value;
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "lambdas") c.lambdas = detail::parse_list<double>(value, key);
    else if (key == "n") c.n = std::stoi(value);
    else if (key == "train_count") c.train_count = std::stoi(value);
    else if (key == "dict_iters") c.dict_iters = std::stoi(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "checkpoint_every") c.checkpoint_every = std::stoi(value);
    else if (key == "start_single") c.start_single = value == "1" || value == "true";
    else if (key == "infer_max_iters") c.infer_max_iters = std::stoull(value);
    else if (key == "infer_check_every") c.infer_check_every = std::stoull(value);
    else if (key == "samples") c.samples = std::stoi(value);
    else if (key == "distortion_grid") c.distortion_grid = std::stoi(value);
    else if (key == "distortion_std") c.distortion_std = std::stod(value);
    else if (key == "k_grid") c.k_grid = detail::parse_list<int>(value, key);
    else if (key == "lambda_w_grid") c.lambda_w_grid = detail::parse_list<double>(value, key);
    else if (key == "eval_seeds") c.eval_seeds = detail::parse_list<std::uint64_t>(value, key);
    else throw std::invalid_argument("config: unknown key " + key);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value for " + key + ": " + value);
  }
}

// key=value lines; '#' starts a comment, blank lines skipped
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  ExperimentConfig c;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const std::size_t last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) + " is not key=value");
    apply_config_entry(c, line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

inline void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  out << serialize_config(c);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace sparsecode

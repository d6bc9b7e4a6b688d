#pragma once

// Checkpoint file layout (all integers and floats little-endian):
//
//   "CORDSEG-CKPT\n"  u32 version
//   u64 n, n bytes of JSON (training config, iteration counters)
//   u64 k, then k arrays: u32 name length, name, u64 count, count x f64
//   u64 FNV-1a 64 of every preceding byte

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "cordseg/config.hpp"
#include "cordseg/error.hpp"
#include "cordseg/io.hpp"
#include "cordseg/train.hpp"

namespace cordseg {

inline constexpr char kCheckpointMagic[] = "CORDSEG-CKPT\n";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void append_array(std::vector<std::uint8_t>& out, const std::string& name, const std::vector<double>& values) {
  append_le(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  append_le(out, static_cast<std::uint64_t>(values.size()));
  for (double v : values) append_le(out, v);
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    require(n <= end_ - pos_, ErrorCode::format,
            std::string("checkpoint truncated in ") + what + ": need " + std::to_string(n) + " bytes, " +
                std::to_string(end_ - pos_) + " remain");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  template <class T>
  T read(const char* what) {
    return read_le<T>(take(sizeof(T), what));
  }

  bool done() const { return pos_ == end_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + std::strlen(kCheckpointMagic));
  detail::append_le(out, kCheckpointVersion);
  const Json header{{"config", c.config},
                    {"iteration", c.iteration},
                    {"best_iteration", c.best_iteration},
                    {"log_rows", c.log.size()},
                    {"has_best", !c.best_params.empty()}};
  const std::string text = header.dump();
  detail::append_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());

  std::vector<std::pair<std::string, const std::vector<double>*>> arrays;
  for (const auto& [name, v] : c.params) arrays.emplace_back("param/" + name, &v);
  for (const auto& [name, v] : c.optimizer.mean_sq_grad) arrays.emplace_back("adadelta/mean_sq_grad/" + name, &v);
  for (const auto& [name, v] : c.optimizer.mean_sq_update) arrays.emplace_back("adadelta/mean_sq_update/" + name, &v);
  for (const auto& [name, v] : c.best_params) arrays.emplace_back("best/" + name, &v);
  std::map<std::string, std::vector<double>> columns;
  for (const LogRow& r : c.log) {
    columns["log/loss"].push_back(r.loss);
    columns["log/dice_term"].push_back(r.dice_term);
    columns["log/ce_term"].push_back(r.ce_term);
    columns["log/val_gm_dsc"].push_back(r.val_gm_dsc);
    columns["log/val_wm_dsc"].push_back(r.val_wm_dsc);
    columns["log/val_ce"].push_back(r.val_ce);
  }
  columns["state/best_score"] = {c.best_score};
  for (const auto& [name, v] : columns) arrays.emplace_back(name, &v);

  detail::append_le(out, static_cast<std::uint64_t>(arrays.size()));
  for (const auto& [name, v] : arrays) detail::append_array(out, name, *v);
  detail::append_le(out, fnv1a64(out.data(), out.size()));
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  require(bytes.size() >= magic_len && std::memcmp(bytes.data(), kCheckpointMagic, magic_len) == 0, ErrorCode::format,
          "not a cordseg checkpoint");
  require(bytes.size() >= magic_len + 4 + 8, ErrorCode::format,
          "checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  const std::size_t body = bytes.size() - 8;
  detail::ByteReader in(bytes, body);
  in.take(magic_len, "magic");
  const auto version = in.read<std::uint32_t>("version");
  require(version == kCheckpointVersion, ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
  const auto header_len = in.read<std::uint64_t>("header length");
  const auto* header_bytes = in.take(static_cast<std::size_t>(header_len), "header");
  const Json header = parse_json(std::string(header_bytes, header_bytes + header_len), "checkpoint header");

  Checkpoint c;
  std::size_t log_rows = 0;
  bool has_best = false;
  try {
    c.config = header.at("config").get<TrainConfig>();
    c.iteration = header.at("iteration").get<std::size_t>();
    c.best_iteration = header.at("best_iteration").get<std::size_t>();
    log_rows = header.at("log_rows").get<std::size_t>();
    has_best = header.at("has_best").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("checkpoint header: ") + e.what());
  }

  std::map<std::string, std::vector<double>> columns;
  const auto count = in.read<std::uint64_t>("array count");
  for (std::uint64_t a = 0; a < count; ++a) {
    const auto name_len = in.read<std::uint32_t>("array name length");
    const auto* name_bytes = in.take(name_len, "array name");
    const std::string name(name_bytes, name_bytes + name_len);
    const auto n = in.read<std::uint64_t>("array length");
    require(n <= body / 8, ErrorCode::format, "array " + name + " is longer than the file");
    std::vector<double> values(static_cast<std::size_t>(n));
    for (double& v : values) v = in.read<double>("array data");
    auto strip = [&name](const std::string& prefix) { return name.substr(prefix.size()); };
    if (name.rfind("param/", 0) == 0)
      c.params.emplace_back(strip("param/"), std::move(values));
    else if (name.rfind("adadelta/mean_sq_grad/", 0) == 0)
      c.optimizer.mean_sq_grad[strip("adadelta/mean_sq_grad/")] = std::move(values);
    else if (name.rfind("adadelta/mean_sq_update/", 0) == 0)
      c.optimizer.mean_sq_update[strip("adadelta/mean_sq_update/")] = std::move(values);
    else if (name.rfind("best/", 0) == 0)
      c.best_params.emplace_back(strip("best/"), std::move(values));
    else
      columns[name] = std::move(values);
  }
  require(in.done(), ErrorCode::format, "trailing bytes after the checkpoint arrays");
  require(has_best == !c.best_params.empty(), ErrorCode::format, "checkpoint best-parameter section is inconsistent");
  const auto stored = detail::read_le<std::uint64_t>(bytes.data() + body);
  require(stored == fnv1a64(bytes.data(), body), ErrorCode::integrity, "checkpoint checksum mismatch");

  auto column = [&](const char* name, std::size_t n) -> const std::vector<double>& {
    auto it = columns.find(name);
    require(it != columns.end() || n == 0, ErrorCode::format, std::string("checkpoint lacks ") + name);
    static const std::vector<double> empty;
    const auto& v = it == columns.end() ? empty : it->second;
    require(v.size() == n, ErrorCode::format, std::string("checkpoint column ") + name + " has the wrong length");
    return v;
  };
  c.best_score = column("state/best_score", 1)[0];
  const auto& loss = column("log/loss", log_rows);
  const auto& dice = column("log/dice_term", log_rows);
  const auto& ce = column("log/ce_term", log_rows);
  const auto& gm = column("log/val_gm_dsc", log_rows);
  const auto& wm = column("log/val_wm_dsc", log_rows);
  const auto& vce = column("log/val_ce", log_rows);
  for (std::size_t i = 0; i < log_rows; ++i) c.log.push_back({i + 1, loss[i], dice[i], ce[i], gm[i], wm[i], vce[i]});
  require(c.log.size() == c.iteration, ErrorCode::format, "checkpoint log does not cover every iteration");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + std::string(e.what()));
  }
}

/// Training log as CSV. Validation columns are empty on rows without validation.
inline void write_training_log(std::ostream& out, const std::vector<LogRow>& log) {
  out << "iteration,loss,dice_term,ce_term,val_gm_dsc,val_wm_dsc,val_ce\n";
  auto field = [](double v) { return std::isnan(v) ? std::string() : detail::format_double(v); };
  for (const LogRow& r : log)
    out << r.iteration << ',' << detail::format_double(r.loss) << ',' << detail::format_double(r.dice_term) << ','
        << detail::format_double(r.ce_term) << ',' << field(r.val_gm_dsc) << ',' << field(r.val_wm_dsc) << ','
        << field(r.val_ce) << '\n';
}

}  // namespace cordseg

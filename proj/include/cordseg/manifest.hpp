#pragma once

// Dataset manifests. On disk one entry per line:
//
//   # split subject scan slice rater image label
//   train 4 1 7 1 sub-04_scan-1_slice-07.mcs sub-04_scan-1_slice-07_rater-1.mcl
//
// Paths are relative to the manifest's directory.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"

namespace cordseg {

enum class Split { train, validation, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::validation;
  if (s == "test") return Split::test;
  throw Error(ErrorCode::format, "unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  Split split = Split::train;
  SliceId id;
  int rater = 1;
  std::filesystem::path image;
  std::filesystem::path label;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> select(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }
  std::vector<ManifestEntry> select(Split s, int rater) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s && e.rater == rater) out.push_back(e);
    return out;
  }
  std::set<int> subjects(Split s) const {
    std::set<int> out;
    for (const auto& e : entries)
      if (e.split == s) out.insert(e.id.subject);
    return out;
  }
  std::set<int> raters() const {
    std::set<int> out;
    for (const auto& e : entries) out.insert(e.rater);
    return out;
  }
};

/// Cross-validation groups; one group is held out for testing and one subject of the
/// remaining groups for validation (the lowest subject id unless given).
struct SplitSpec {
  std::vector<std::vector<int>> groups;
  std::size_t test_group = 0;
  std::optional<int> validation_subject;
};

inline std::string slice_file_name(const SliceId& id) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "sub-%02d_scan-%d_slice-%02d.mcs", id.subject, id.scan, id.slice);
  return buf;
}

inline std::string label_file_name(const SliceId& id, int rater) {
  char buf[80];
  std::snprintf(buf, sizeof buf, "sub-%02d_scan-%d_slice-%02d_rater-%d.mcl", id.subject, id.scan, id.slice, rater);
  return buf;
}

/// Every subject appears in at most one split.
inline void check_subject_disjoint(const DatasetManifest& m) {
  std::map<int, Split> seen;
  for (const auto& e : m.entries) {
    auto [it, inserted] = seen.emplace(e.id.subject, e.split);
    require(inserted || it->second == e.split, ErrorCode::split_conflict,
            "subject " + std::to_string(e.id.subject) + " appears in both " + std::string(to_string(it->second)) +
                " and " + std::string(to_string(e.split)));
  }
}

/// Slice/label pairs found in `root` (non-recursive), each with its split still unset.
inline std::vector<ManifestEntry> discover_entries(const std::filesystem::path& root) {
  require(std::filesystem::is_directory(root), ErrorCode::io, root.string() + " is not a directory");
  static const std::regex pattern(R"(sub-(\d+)_scan-(\d+)_slice-(\d+)_rater-(\d+)\.mcl)");
  std::vector<ManifestEntry> out;
  for (const auto& f : std::filesystem::directory_iterator(root)) {
    const std::string name = f.path().filename().string();
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) continue;
    ManifestEntry e;
    e.id = {std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
    e.rater = std::stoi(m[4]);
    e.label = f.path();
    e.image = root / slice_file_name(e.id);
    require(std::filesystem::exists(e.image), ErrorCode::io,
            "label " + name + " has no slice " + e.image.filename().string());
    out.push_back(std::move(e));
  }
  return out;
}

/// Assigns splits, rejecting duplicate (slice, rater) pairs and overlapping groups.
inline DatasetManifest build_manifest(std::vector<ManifestEntry> entries, const SplitSpec& spec) {
  require(!entries.empty(), ErrorCode::empty_input, "no slices to build a manifest from");
  require(spec.test_group < spec.groups.size(), ErrorCode::invalid_argument, "test group index out of range");

  std::map<int, std::size_t> group_of;
  for (std::size_t g = 0; g < spec.groups.size(); ++g)
    for (int s : spec.groups[g]) {
      auto [it, inserted] = group_of.emplace(s, g);
      require(inserted, ErrorCode::split_conflict,
              "subject " + std::to_string(s) + " is listed in groups " + std::to_string(it->second) + " and " +
                  std::to_string(g));
    }

  std::set<int> training;
  for (const auto& [s, g] : group_of)
    if (g != spec.test_group) training.insert(s);
  std::optional<int> validation = spec.validation_subject;
  if (!validation && !training.empty()) validation = *training.begin();
  if (validation)
    require(training.count(*validation) == 1, ErrorCode::split_conflict,
            "validation subject " + std::to_string(*validation) + " is not in a training group");

  std::set<std::tuple<std::filesystem::path, int>> seen;
  for (auto& e : entries) {
    require(seen.emplace(e.image.lexically_normal(), e.rater).second, ErrorCode::invalid_argument,
            "duplicate slice " + e.image.string() + " for rater " + std::to_string(e.rater));
    auto it = group_of.find(e.id.subject);
    require(it != group_of.end(), ErrorCode::invalid_argument,
            "subject " + std::to_string(e.id.subject) + " is not assigned to any group");
    if (it->second == spec.test_group)
      e.split = Split::test;
    else
      e.split = (validation && e.id.subject == *validation) ? Split::validation : Split::train;
  }
  std::sort(entries.begin(), entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
    return std::tie(a.split, a.id, a.rater) < std::tie(b.split, b.id, b.rater);
  });
  DatasetManifest m{std::move(entries)};
  check_subject_disjoint(m);
  return m;
}

inline DatasetManifest build_manifest(const std::filesystem::path& root, const SplitSpec& spec) {
  auto entries = discover_entries(root);
  require(!entries.empty(), ErrorCode::empty_input, "no labelled slices found in " + root.string());
  return build_manifest(std::move(entries), spec);
}

/// `count` consecutive subject ids starting at `first`, dealt into `groups` contiguous groups.
inline std::vector<std::vector<int>> contiguous_groups(int first, int count, int groups) {
  require(groups > 0 && count >= groups, ErrorCode::invalid_argument, "need at least one subject per group");
  std::vector<std::vector<int>> out(static_cast<std::size_t>(groups));
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i * groups / count)].push_back(first + i);
  return out;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  const std::filesystem::path base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  if (path.has_parent_path()) std::filesystem::create_directories(base);
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << "# split subject scan slice rater image label\n";
  auto rel = [&base](const std::filesystem::path& p) {
    return p.is_absolute() || p.has_parent_path() ? std::filesystem::proximate(p, base).generic_string()
                                                  : p.generic_string();
  };
  for (const auto& e : m.entries)
    out << to_string(e.split) << ' ' << e.id.subject << ' ' << e.id.scan << ' ' << e.id.slice << ' ' << e.rater << ' '
        << rel(e.image) << ' ' << rel(e.label) << '\n';
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + path.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  const std::filesystem::path base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  DatasetManifest m;
  std::set<std::tuple<std::filesystem::path, int>> seen;
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string split, image, label;
    ManifestEntry e;
    if (!(fields >> split)) continue;
    const std::string where = path.string() + ":" + std::to_string(number);
    require(static_cast<bool>(fields >> e.id.subject >> e.id.scan >> e.id.slice >> e.rater >> image >> label),
            ErrorCode::format, where + ": expected 7 columns");
    std::string extra;
    require(!(fields >> extra), ErrorCode::format, where + ": trailing column '" + extra + "'");
    e.split = parse_split(split);
    e.image = base / image;
    e.label = base / label;
    require(seen.emplace(e.image.lexically_normal(), e.rater).second, ErrorCode::invalid_argument,
            where + ": duplicate slice " + image + " for rater " + std::to_string(e.rater));
    m.entries.push_back(std::move(e));
  }
  require(!m.entries.empty(), ErrorCode::empty_input, path.string() + " lists no slices");
  check_subject_disjoint(m);
  return m;
}

}  // namespace cordseg

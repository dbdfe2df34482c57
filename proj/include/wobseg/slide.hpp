#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wobseg/error.hpp"
#include "wobseg/image.hpp"

namespace wobseg {

enum class ChannelRole { red, green, blue, epithelial, basal, amacr, dapi };

inline std::string_view role_name(ChannelRole r) {
  switch (r) {
    case ChannelRole::red: return "red";
    case ChannelRole::green: return "green";
    case ChannelRole::blue: return "blue";
    case ChannelRole::epithelial: return "CK8/18";
    case ChannelRole::basal: return "CK5/6+p63";
    case ChannelRole::amacr: return "AMACR";
    case ChannelRole::dapi: return "DAPI";
  }
  return "?";
}

inline ChannelRole parse_role(std::string_view s) {
  for (auto r : {ChannelRole::red, ChannelRole::green, ChannelRole::blue,
                 ChannelRole::epithelial, ChannelRole::basal,
                 ChannelRole::amacr, ChannelRole::dapi})
    if (role_name(r) == s) return r;
  throw config_error("unknown channel role '" + std::string(s) + "'");
}

struct Level {
  double mpp = 1.0;
  ByteImage image;
};

/// Pixel window on one pyramid level.
struct Region {
  int level = 0;
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

/// Multi-resolution slide: pyramid levels (finest first), channel roles and
/// binary mask layers keyed by name and level index.
class Slide {
 public:
  std::string id;
  std::vector<Level> levels;
  std::map<int, ChannelRole> channel_roles;
  std::map<std::string, std::map<int, ByteImage>> masks;

  const Level& level(int index) const {
    if (index < 0 || index >= static_cast<int>(levels.size()))
      throw config_error("slide '" + id + "' has no level " +
                         std::to_string(index));
    return levels[static_cast<std::size_t>(index)];
  }

  /// Index of the level tagged with mpp, or nullopt.
  std::optional<int> find_level(double mpp) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (std::abs(levels[i].mpp - mpp) <= 1e-9 * mpp)
        return static_cast<int>(i);
    return std::nullopt;
  }
  int level_index(double mpp) const {
    if (auto i = find_level(mpp)) return *i;
    throw config_error("slide '" + id + "' has no level at " +
                       std::to_string(mpp) + " mpp");
  }

  std::optional<int> find_channel(ChannelRole role) const {
    for (const auto& [idx, r] : channel_roles)
      if (r == role) return idx;
    return std::nullopt;
  }
  int channel(ChannelRole role) const {
    if (auto c = find_channel(role)) return *c;
    throw config_error("slide '" + id + "' lacks channel role " +
                       std::string(role_name(role)));
  }

  bool has_mask(const std::string& name, int level_index) const {
    auto it = masks.find(name);
    return it != masks.end() && it->second.count(level_index) > 0;
  }
  const ByteImage& mask(const std::string& name, int level_index) const {
    auto it = masks.find(name);
    if (it == masks.end() || !it->second.count(level_index))
      throw config_error("slide '" + id + "' has no mask '" + name +
                         "' at level " + std::to_string(level_index));
    return it->second.at(level_index);
  }

  /// Sets a mask on one level, validating geometry and the {0,1} encoding.
  void set_mask(const std::string& name, int level_index, ByteImage m) {
    const auto& lv = level(level_index);
    if (m.channels() != 1 || !m.same_shape(lv.image))
      throw config_error("mask '" + name + "' does not match level geometry");
    for (auto v : m.storage())
      if (v > 1) throw config_error("mask '" + name + "' has values outside {0,1}");
    masks[name][level_index] = std::move(m);
  }

  /// RGB view of one level (channels with red/green/blue roles, in that order).
  ByteImage rgb(int level_index) const {
    const auto& img = level(level_index).image;
    const int r = channel(ChannelRole::red);
    const int g = channel(ChannelRole::green);
    const int b = channel(ChannelRole::blue);
    ByteImage out(img.width(), img.height(), 3);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
      const auto base = i * static_cast<std::size_t>(img.channels());
      out.storage()[3 * i] = img.storage()[base + r];
      out.storage()[3 * i + 1] = img.storage()[base + g];
      out.storage()[3 * i + 2] = img.storage()[base + b];
    }
    return out;
  }

  bool operator==(const Slide& o) const {
    if (id != o.id || channel_roles != o.channel_roles || masks != o.masks ||
        levels.size() != o.levels.size())
      return false;
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i].mpp != o.levels[i].mpp ||
          !(levels[i].image == o.levels[i].image))
        return false;
    return true;
  }
};

/// Checks pyramid and mask invariants; throws on violation.
inline void validate_slide(const Slide& s) {
  if (s.levels.empty()) throw config_error("slide '" + s.id + "' has no levels");
  for (std::size_t i = 0; i < s.levels.size(); ++i) {
    const auto& lv = s.levels[i];
    if (!(lv.mpp > 0.0)) throw config_error("level mpp must be positive");
    if (lv.image.channels() != s.levels[0].image.channels())
      throw config_error("levels disagree on channel count");
    if (i > 0) {
      const auto& prev = s.levels[i - 1];
      if (lv.mpp != 2.0 * prev.mpp)
        throw config_error("non-power-of-two mpp chain at level " +
                           std::to_string(i));
      if (lv.image.width() != half_up(prev.image.width()) ||
          lv.image.height() != half_up(prev.image.height()))
        throw config_error("level " + std::to_string(i) +
                           " dims are not the ceiling half of level " +
                           std::to_string(i - 1));
    }
  }
  for (const auto& [idx, role] : s.channel_roles)
    if (idx < 0 || idx >= s.levels[0].image.channels())
      throw config_error("channel role index out of range");
  for (const auto& [name, per_level] : s.masks)
    for (const auto& [li, m] : per_level) {
      const auto& lv = s.level(li);
      if (m.channels() != 1 || !m.same_shape(lv.image))
        throw config_error("mask '" + name + "' does not match level geometry");
      for (auto v : m.storage())
        if (v > 1)
          throw config_error("mask '" + name + "' has values outside {0,1}");
    }
}

/// Builds a pyramid by repeated downsample2 from a finest level.
inline std::vector<Level> build_pyramid(ByteImage finest, double finest_mpp,
                                        int level_count) {
  std::vector<Level> levels;
  levels.push_back({finest_mpp, std::move(finest)});
  for (int i = 1; i < level_count; ++i) {
    const auto& prev = levels.back();
    levels.push_back({prev.mpp * 2.0, downsample2(prev.image)});
  }
  return levels;
}

/// Copy of a pixel window. Out-of-bounds windows are an error.
inline ByteImage read_region(const Slide& slide, const Region& r) {
  const auto& img = slide.level(r.level).image;
  if (r.x < 0 || r.y < 0 || r.width < 1 || r.height < 1 ||
      r.x + r.width > img.width() || r.y + r.height > img.height())
    throw config_error("region out of bounds for level " +
                       std::to_string(r.level));
  return crop(img, r.x, r.y, r.width, r.height);
}

/// Point mapping between levels: x' = floor(x * mpp_from / mpp_to).
inline std::pair<long, long> map_coords(const Slide& slide, int from_level,
                                        int to_level, long x, long y) {
  const double f = slide.level(from_level).mpp / slide.level(to_level).mpp;
  return {static_cast<long>(std::floor(static_cast<double>(x) * f)),
          static_cast<long>(std::floor(static_cast<double>(y) * f))};
}

// ---------------------------------------------------------------------------
// On-disk container: <dir>/manifest.json plus raw byte planes.

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw io_error("cannot open " + p.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file(const std::filesystem::path& p,
                       std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                          s.size()));
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw io_error("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(p.string() + ": " + e.what());
  }
}

inline ByteImage read_plane(const std::filesystem::path& p, int w, int h,
                            int c) {
  auto bytes = read_file(p);
  if (bytes.size() != static_cast<std::size_t>(w) * h * c)
    throw config_error("corrupt plane " + p.filename().string() + ": expected " +
                       std::to_string(static_cast<std::size_t>(w) * h * c) +
                       " bytes, found " + std::to_string(bytes.size()));
  return ByteImage(w, h, c, std::move(bytes));
}

}  // namespace detail

inline nlohmann::json slide_manifest(const Slide& s) {
  using nlohmann::json;
  json m;
  m["id"] = s.id;
  m["levels"] = json::array();
  for (std::size_t i = 0; i < s.levels.size(); ++i) {
    const auto& lv = s.levels[i];
    m["levels"].push_back({{"mpp", lv.mpp},
                           {"width", lv.image.width()},
                           {"height", lv.image.height()},
                           {"channels", lv.image.channels()},
                           {"file", "level_" + std::to_string(i) + ".raw"}});
  }
  m["masks"] = json::array();
  for (const auto& [name, per_level] : s.masks)
    for (const auto& [li, mask] : per_level)
      m["masks"].push_back(
          {{"name", name},
           {"level", li},
           {"file", "mask_" + name + "_" + std::to_string(li) + ".raw"}});
  json roles = json::object();
  for (const auto& [idx, role] : s.channel_roles)
    roles[std::to_string(idx)] = std::string(role_name(role));
  m["channel_roles"] = roles;
  return m;
}

/// Writes the slide into `dir`, creating it if needed. Existing files with the
/// same names are replaced; refusing to overwrite is the caller's policy.
inline void save_slide(const Slide& slide, const std::filesystem::path& dir) {
  validate_slide(slide);
  for (const auto& [name, per_level] : slide.masks)
    if (name.empty() || name.find_first_of("/\\") != std::string::npos)
      throw config_error("invalid mask name '" + name + "'");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io_error("cannot create " + dir.string() + ": " + ec.message());
  const auto manifest = slide_manifest(slide);
  for (std::size_t i = 0; i < slide.levels.size(); ++i)
    detail::write_file(dir / manifest["levels"][i]["file"].get<std::string>(),
                       slide.levels[i].image.storage());
  std::size_t k = 0;
  for (const auto& [name, per_level] : slide.masks)
    for (const auto& [li, mask] : per_level)
      detail::write_file(dir / manifest["masks"][k++]["file"].get<std::string>(),
                         mask.storage());
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Slide open_slide(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw io_error("missing manifest: " + manifest_path.string());
  const auto m = detail::read_json(manifest_path);
  Slide s;
  try {
    s.id = m.at("id").get<std::string>();
    for (const auto& lv : m.at("levels")) {
      const int w = lv.at("width").get<int>();
      const int h = lv.at("height").get<int>();
      const int c = lv.at("channels").get<int>();
      s.levels.push_back(
          {lv.at("mpp").get<double>(),
           detail::read_plane(dir / lv.at("file").get<std::string>(), w, h, c)});
    }
    for (const auto& [key, role] : m.at("channel_roles").items())
      s.channel_roles[std::stoi(key)] = parse_role(role.get<std::string>());
    for (const auto& mk : m.at("masks")) {
      const int li = mk.at("level").get<int>();
      const auto& lv = s.level(li);
      s.masks[mk.at("name").get<std::string>()][li] = detail::read_plane(
          dir / mk.at("file").get<std::string>(), lv.image.width(),
          lv.image.height(), 1);
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error("malformed manifest " + manifest_path.string() + ": " +
                       e.what());
  }
  validate_slide(s);
  return s;
}

}  // namespace wobseg

// MetaImage (.mhd/.raw) volumes and CSV point lists.
#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/correspondence.hpp"
#include "pulmoreg/image.hpp"

namespace pulmoreg {

class IoError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class MalformedHeaderError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class SizeMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class UnsupportedTypeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

enum class ElementType { kUInt8, kInt16, kUInt16, kFloat32, kFloat64 };

inline const char* met_name(ElementType t) {
  switch (t) {
    case ElementType::kUInt8: return "MET_UCHAR";
    case ElementType::kInt16: return "MET_SHORT";
    case ElementType::kUInt16: return "MET_USHORT";
    case ElementType::kFloat32: return "MET_FLOAT";
    default: return "MET_DOUBLE";
  }
}

inline std::size_t element_size(ElementType t) {
  switch (t) {
    case ElementType::kUInt8: return 1;
    case ElementType::kInt16:
    case ElementType::kUInt16: return 2;
    case ElementType::kFloat32: return 4;
    default: return 8;
  }
}

inline ElementType parse_element_type(const std::string& s) {
  if (s == "MET_UCHAR") return ElementType::kUInt8;
  if (s == "MET_SHORT") return ElementType::kInt16;
  if (s == "MET_USHORT") return ElementType::kUInt16;
  if (s == "MET_FLOAT") return ElementType::kFloat32;
  if (s == "MET_DOUBLE") return ElementType::kFloat64;
  throw UnsupportedTypeError("unsupported MetaImage element type '" + s + "'");
}

/// Raw contents of a MetaImage: grid, element type and channel-interleaved values.
struct MetaImage {
  Grid grid;
  ElementType type = ElementType::kFloat64;
  int channels = 1;
  std::vector<double> values;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
std::vector<T> parse_numbers(const std::string& key, const std::string& value, std::size_t expected) {
  std::istringstream in(value);
  std::vector<T> out;
  T v;
  while (in >> v) out.push_back(v);
  if (!in.eof() || out.size() != expected)
    throw MalformedHeaderError("header field " + key + " expects " + std::to_string(expected) + " numbers, got '" +
                               value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "True" || v == "true" || v == "1") return true;
  if (v == "False" || v == "false" || v == "0") return false;
  throw MalformedHeaderError("header field " + key + " is not a boolean: '" + v + "'");
}

template <class T>
double load_element(const unsigned char* p, bool swap) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if (swap) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return static_cast<double>(v);
}

template <class T>
void store_element(unsigned char* p, double value) {
  const T v = static_cast<T>(value);
  std::memcpy(p, &v, sizeof(T));
}

}  // namespace detail

inline MetaImage read_metaimage_raw(const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "raw IO assumes a little-endian host");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> header;
  std::string line;
  std::string data_file;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw MalformedHeaderError("header line without '=': '" + detail::trim(line) + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw MalformedHeaderError("header line with empty key");
    header[key] = value;
    if (key == "ElementDataFile") {
      data_file = value;
      break;
    }
  }
  if (data_file.empty()) throw MalformedHeaderError("header has no ElementDataFile entry");
  auto get = [&](const std::string& key) -> const std::string* {
    const auto it = header.find(key);
    return it == header.end() ? nullptr : &it->second;
  };
  if (const auto* nd = get("NDims"); !nd || *nd != "3") throw MalformedHeaderError("only 3-dimensional images are supported");
  const auto* dims = get("DimSize");
  if (!dims) throw MalformedHeaderError("header has no DimSize");
  if (get("CompressedData") && detail::parse_bool("CompressedData", *get("CompressedData")))
    throw UnsupportedTypeError("compressed MetaImage data is not supported");
  const auto* et = get("ElementType");
  if (!et) throw MalformedHeaderError("header has no ElementType");

  MetaImage img;
  img.type = parse_element_type(*et);
  const auto d = detail::parse_numbers<long long>("DimSize", *dims, 3);
  for (int a = 0; a < 3; ++a) {
    if (d[static_cast<std::size_t>(a)] < 1) throw MalformedHeaderError("DimSize entries must be positive");
    img.grid.dims[a] = static_cast<int>(d[static_cast<std::size_t>(a)]);
  }
  img.grid.spacing = Vec3{1.0, 1.0, 1.0};
  for (const char* key : {"ElementSpacing", "ElementSize"})
    if (const auto* v = get(key)) {
      const auto s = detail::parse_numbers<double>(key, *v, 3);
      img.grid.spacing = Vec3{s[0], s[1], s[2]};
      break;
    }
  for (const char* key : {"Offset", "Origin", "Position"})
    if (const auto* v = get(key)) {
      const auto o = detail::parse_numbers<double>(key, *v, 3);
      img.grid.origin = Vec3{o[0], o[1], o[2]};
      break;
    }
  for (const char* key : {"TransformMatrix", "Rotation", "Orientation"})
    if (const auto* v = get(key)) {
      const auto m = detail::parse_numbers<double>(key, *v, 9);
      for (int i = 0; i < 9; ++i)
        if (std::abs(m[static_cast<std::size_t>(i)] - ((i % 4 == 0) ? 1.0 : 0.0)) > 1e-6)
          throw UnsupportedTypeError("non-identity image orientation is not supported");
    }
  if (const auto* c = get("ElementNumberOfChannels")) {
    img.channels = detail::parse_numbers<int>("ElementNumberOfChannels", *c, 1)[0];
    if (img.channels < 1) throw MalformedHeaderError("ElementNumberOfChannels must be positive");
  }
  bool msb = false;
  for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"})
    if (const auto* v = get(key)) msb = msb || detail::parse_bool(key, *v);
  if (img.grid.spacing[0] <= 0 || img.grid.spacing[1] <= 0 || img.grid.spacing[2] <= 0)
    throw MalformedHeaderError("element spacing must be positive");

  const std::size_t count = img.grid.size() * static_cast<std::size_t>(img.channels);
  const std::size_t esize = element_size(img.type);
  std::vector<unsigned char> bytes;
  if (data_file == "LOCAL") {
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  } else {
    std::filesystem::path raw = data_file;
    if (raw.is_relative()) raw = path.parent_path() / raw;
    std::ifstream rin(raw, std::ios::binary);
    if (!rin) throw IoError("cannot open raw data file " + raw.string());
    bytes.assign(std::istreambuf_iterator<char>(rin), std::istreambuf_iterator<char>());
  }
  if (bytes.size() != count * esize)
    throw SizeMismatchError("raw data holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                            std::to_string(count * esize));
  img.values.resize(count);
  const unsigned char* p = bytes.data();
  for (std::size_t i = 0; i < count; ++i, p += esize) {
    switch (img.type) {
      case ElementType::kUInt8: img.values[i] = *p; break;
      case ElementType::kInt16: img.values[i] = detail::load_element<std::int16_t>(p, msb); break;
      case ElementType::kUInt16: img.values[i] = detail::load_element<std::uint16_t>(p, msb); break;
      case ElementType::kFloat32: img.values[i] = detail::load_element<float>(p, msb); break;
      case ElementType::kFloat64: img.values[i] = detail::load_element<double>(p, msb); break;
    }
  }
  return img;
}

/// Writes `path` (.mhd) and a companion .raw file next to it.
inline void write_metaimage_raw(const MetaImage& img, const std::filesystem::path& path) {
  const std::size_t count = img.grid.size() * static_cast<std::size_t>(img.channels);
  if (img.values.size() != count) throw ValidationError("MetaImage value count does not match its grid");
  std::filesystem::path raw = path;
  raw.replace_extension(".raw");
  {
    std::ofstream h(path);
    if (!h) throw IoError("cannot write " + path.string());
    h.precision(17);
    const auto& g = img.grid;
    h << "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
      << "CompressedData = False\nTransformMatrix = 1 0 0 0 1 0 0 0 1\n"
      << "Offset = " << g.origin[0] << ' ' << g.origin[1] << ' ' << g.origin[2] << '\n'
      << "ElementSpacing = " << g.spacing[0] << ' ' << g.spacing[1] << ' ' << g.spacing[2] << '\n'
      << "DimSize = " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n';
    if (img.channels != 1) h << "ElementNumberOfChannels = " << img.channels << '\n';
    h << "ElementType = " << met_name(img.type) << '\n' << "ElementDataFile = " << raw.filename().string() << '\n';
    if (!h) throw IoError("failed writing " + path.string());
  }
  const std::size_t esize = element_size(img.type);
  std::vector<unsigned char> bytes(count * esize);
  unsigned char* p = bytes.data();
  for (std::size_t i = 0; i < count; ++i, p += esize) {
    switch (img.type) {
      case ElementType::kUInt8: *p = static_cast<unsigned char>(img.values[i]); break;
      case ElementType::kInt16: detail::store_element<std::int16_t>(p, img.values[i]); break;
      case ElementType::kUInt16: detail::store_element<std::uint16_t>(p, img.values[i]); break;
      case ElementType::kFloat32: detail::store_element<float>(p, img.values[i]); break;
      case ElementType::kFloat64: detail::store_element<double>(p, img.values[i]); break;
    }
  }
  std::ofstream r(raw, std::ios::binary);
  if (!r) throw IoError("cannot write " + raw.string());
  r.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!r) throw IoError("failed writing " + raw.string());
}

inline Image3D read_metaimage(const std::filesystem::path& path) {
  auto m = read_metaimage_raw(path);
  if (m.channels != 1) throw ValidationError(path.string() + " has " + std::to_string(m.channels) + " channels, expected 1");
  m.grid.validate();
  return Image3D(m.grid, std::move(m.values));
}

inline void write_metaimage(const Image3D& img, const std::filesystem::path& path,
                            ElementType type = ElementType::kFloat32) {
  MetaImage m{img.grid(), type, 1, img.data()};
  write_metaimage_raw(m, path);
}

/// Three-channel displacement field (mm).
inline VectorField read_vector_field(const std::filesystem::path& path) {
  auto m = read_metaimage_raw(path);
  if (m.channels != 3) throw ValidationError(path.string() + " is not a 3-channel vector field");
  m.grid.validate();
  VectorField f(m.grid);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = Vec3{m.values[3 * i], m.values[3 * i + 1], m.values[3 * i + 2]};
  return f;
}

inline void write_vector_field(const VectorField& f, const std::filesystem::path& path,
                               ElementType type = ElementType::kFloat32) {
  MetaImage m{f.grid(), type, 3, std::vector<double>(3 * f.size())};
  for (std::size_t i = 0; i < f.size(); ++i)
    for (int a = 0; a < 3; ++a) m.values[3 * i + static_cast<std::size_t>(a)] = f[i][a];
  write_metaimage_raw(m, path);
}

namespace detail {

inline std::vector<std::vector<double>> read_csv_rows(const std::filesystem::path& path, std::size_t min_columns) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(t);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      cell = trim(cell);
      std::size_t used = 0;
      try {
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
      if (used != cell.size()) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty()) continue;  // header line
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": non-numeric entry");
    }
    if (row.size() < min_columns)
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(min_columns) + " columns");
    for (double v : row)
      if (!std::isfinite(v)) throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": non-finite value");
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// "x,y,z" per line (mm); blank lines, '#' comments and a leading header are skipped.
inline std::vector<Vec3> read_points(const std::filesystem::path& path) {
  std::vector<Vec3> out;
  for (const auto& r : detail::read_csv_rows(path, 3)) out.push_back(Vec3{r[0], r[1], r[2]});
  return out;
}

inline void write_points(const std::vector<Vec3>& pts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  for (const auto& p : pts) out << p[0] << ',' << p[1] << ',' << p[2] << '\n';
}

/// "x,y,z,dx,dy,dz,energy": source point, target minus source, refined marginal energy.
inline void write_correspondences(const CorrespondenceSet& corr, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "x,y,z,dx,dy,dz,energy\n";
  for (const auto& c : corr) {
    const Vec3 d = c.target - c.source;
    out << c.source[0] << ',' << c.source[1] << ',' << c.source[2] << ',' << d[0] << ',' << d[1] << ',' << d[2] << ','
        << c.energy << '\n';
  }
}

inline CorrespondenceSet read_correspondences(const std::filesystem::path& path) {
  CorrespondenceSet out;
  for (const auto& r : detail::read_csv_rows(path, 7)) {
    Correspondence c;
    c.source = Vec3{r[0], r[1], r[2]};
    c.target = c.source + Vec3{r[3], r[4], r[5]};
    c.displacement = c.target - c.source;
    c.energy = r[6];
    out.push_back(c);
  }
  return out;
}

}  // namespace pulmoreg

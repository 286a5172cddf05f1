#include "ftex/latent.hpp"

#include <cmath>
#include <fstream>

#include "binio.hpp"

namespace ftex {

namespace {

constexpr char kLatentMagic[9] = "FTEXWP01";

void require_same_grouping(const LatentCode& a, const LatentCode& b) {
  if (!a.layers().same_shape(b.layers()) || a.bounds() != b.bounds()) {
    throw ShapeError("latent codes differ in shape or grouping");
  }
}

}  // namespace

std::string_view group_name(Group g) {
  switch (g) {
    case Group::Coarse: return "coarse";
    case Group::Medium: return "medium";
    case Group::Fine: return "fine";
  }
  return "?";
}

Group parse_group(std::string_view name) {
  if (name == "coarse") return Group::Coarse;
  if (name == "medium") return Group::Medium;
  if (name == "fine") return Group::Fine;
  throw ConfigError("unknown latent group '" + std::string(name) + "'");
}

GroupBounds GroupBounds::standard() { return GroupBounds{{LayerRange{0, 4}, LayerRange{4, 8}, LayerRange{8, 18}}}; }

GroupBounds GroupBounds::scaled(std::size_t layers) {
  if (layers < 3) throw ShapeError("need at least 3 layers to form coarse/medium/fine groups");
  auto cut = [&](double frac) {
    return static_cast<std::size_t>(std::lround(frac * static_cast<double>(layers)));
  };
  std::size_t a = std::max<std::size_t>(1, cut(4.0 / 18.0));
  std::size_t b = std::max<std::size_t>(a + 1, cut(8.0 / 18.0));
  b = std::min(b, layers - 1);
  a = std::min(a, b - 1);
  return GroupBounds{{LayerRange{0, a}, LayerRange{a, b}, LayerRange{b, layers}}};
}

void GroupBounds::validate(std::size_t layers) const {
  std::size_t expect = 0;
  for (const auto& r : ranges) {
    if (r.begin != expect || r.end <= r.begin) {
      throw ShapeError("group bounds must partition [0, " + std::to_string(layers) +
                       ") in order without gaps or empty groups");
    }
    expect = r.end;
  }
  if (expect != layers) {
    throw ShapeError("group bounds cover " + std::to_string(expect) + " layers, latent has " +
                     std::to_string(layers));
  }
}

LatentCode::LatentCode(Matrix layers, GroupBounds bounds) : layers_(std::move(layers)), bounds_(bounds) {
  bounds_.validate(layers_.rows);
  for (float v : layers_.data)
    if (!std::isfinite(v)) throw NumericError("latent code contains a non-finite entry");
}

Matrix LatentCode::group(Group g) const {
  const LayerRange& r = bounds_[g];
  Matrix out(r.size(), layers_.cols);
  std::copy(layers_.data.begin() + static_cast<std::ptrdiff_t>(r.begin * layers_.cols),
            layers_.data.begin() + static_cast<std::ptrdiff_t>(r.end * layers_.cols), out.data.begin());
  return out;
}

LatentOffset LatentOffset::zeros(const LatentCode& w) {
  return {Matrix(w.bounds()[Group::Medium].size(), w.dim()), Matrix(w.bounds()[Group::Fine].size(), w.dim())};
}

LatentOffset LatentOffset::operator+(const LatentOffset& o) const {
  if (!delta_medium.same_shape(o.delta_medium) || !delta_fine.same_shape(o.delta_fine)) {
    throw ShapeError("latent offsets differ in shape");
  }
  LatentOffset r = *this;
  for (std::size_t i = 0; i < r.delta_medium.size(); ++i) r.delta_medium.data[i] += o.delta_medium.data[i];
  for (std::size_t i = 0; i < r.delta_fine.size(); ++i) r.delta_fine.data[i] += o.delta_fine.data[i];
  return r;
}

LatentOffset LatentOffset::operator-() const {
  LatentOffset r = *this;
  for (float& v : r.delta_medium.data) v = -v;
  for (float& v : r.delta_fine.data) v = -v;
  return r;
}

LatentCode split_latent(Matrix w, const GroupBounds& bounds) { return LatentCode(std::move(w), bounds); }

LatentCode apply_offsets(const LatentCode& w, const LatentOffset& off) {
  const LayerRange& med = w.bounds()[Group::Medium];
  const LayerRange& fine = w.bounds()[Group::Fine];
  if (off.delta_medium.rows != med.size() || off.delta_medium.cols != w.dim() ||
      off.delta_fine.rows != fine.size() || off.delta_fine.cols != w.dim()) {
    throw ShapeError("offset shapes " + off.delta_medium.shape_string() + " / " + off.delta_fine.shape_string() +
                     " do not match medium/fine groups");
  }
  Matrix out = w.layers();
  const std::size_t d = w.dim();
  for (std::size_t i = 0; i < off.delta_medium.size(); ++i) out.data[med.begin * d + i] += off.delta_medium.data[i];
  for (std::size_t i = 0; i < off.delta_fine.size(); ++i) out.data[fine.begin * d + i] += off.delta_fine.data[i];
  return LatentCode(std::move(out), w.bounds());
}

LatentCode style_mix(const LatentCode& source, const LatentCode& reference, Group group) {
  require_same_grouping(source, reference);
  Matrix out = source.layers();
  const LayerRange& r = source.bounds()[group];
  const std::size_t d = source.dim();
  std::copy(reference.layers().data.begin() + static_cast<std::ptrdiff_t>(r.begin * d),
            reference.layers().data.begin() + static_cast<std::ptrdiff_t>(r.end * d),
            out.data.begin() + static_cast<std::ptrdiff_t>(r.begin * d));
  return LatentCode(std::move(out), source.bounds());
}

void save_latent(const LatentCode& w, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(kLatentMagic, 8);
  binio::put_u32(out, static_cast<std::uint32_t>(w.num_layers()));
  binio::put_u32(out, static_cast<std::uint32_t>(w.dim()));
  binio::put_floats(out, w.layers().data);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

LatentCode load_latent(const std::filesystem::path& path, std::optional<GroupBounds> bounds) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  binio::expect_magic(in, kLatentMagic);
  const std::uint32_t l = binio::get_u32(in, "layer count");
  const std::uint32_t d = binio::get_u32(in, "channel count");
  if (l == 0 || d == 0 || static_cast<std::uint64_t>(l) * d > (1u << 26)) {
    throw FormatError("implausible latent shape header " + std::to_string(l) + "x" + std::to_string(d));
  }
  Matrix m(l, d);
  binio::get_floats(in, m.data, "latent payload");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after latent payload");
  GroupBounds b = bounds ? *bounds : GroupBounds::scaled(l);
  return LatentCode(std::move(m), b);
}

}  // namespace ftex

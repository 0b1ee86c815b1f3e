#pragma once

// Dense displacement field parameterised on a coarse control lattice.
//
// Control points sit at every `control_spacing`-th fixed-grid location along
// each axis (the last one at or beyond the grid end). The displacement at a
// fixed-grid location is the multilinear interpolation of the surrounding
// control displacements. Displacements are in physical units, one component
// per axis, and follow the backward convention: the moving image is sampled
// at v + u(v) to produce the warped image at fixed location v.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "promptreg/codec.hpp"
#include "promptreg/grid.hpp"
#include "promptreg/io.hpp"
#include "promptreg/transform.hpp"

namespace promptreg {

class DeformationField {
 public:
  DeformationField() = default;

  DeformationField(GridShape fixed_shape, int control_spacing)
      : fixed_(fixed_shape), spacing_(control_spacing) {
    if (spacing_ < 1) throw Error(Errc::InvalidArgument, "control spacing must be >= 1");
    std::vector<std::int64_t> cd;
    for (int a = 0; a < fixed_.ndim(); ++a) cd.push_back((fixed_.dim(a) - 1 + spacing_ - 1) / spacing_ + 1);
    control_ = GridShape(cd);
    params_.assign(control_.size() * static_cast<std::size_t>(fixed_.ndim()), 0.0);
    build_weights();
  }

  DeformationField(GridShape fixed_shape, int control_spacing, std::vector<double> params)
      : DeformationField(fixed_shape, control_spacing) {
    if (params.size() != params_.size()) throw Error(Errc::ShapeMismatch, "control parameter count mismatch");
    for (double v : params) {
      if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "non-finite control displacement");
    }
    params_ = std::move(params);
  }

  /// Field whose control lattice is the fixed grid itself.
  static DeformationField from_dense(GridShape fixed_shape, std::vector<double> dense) {
    return DeformationField(fixed_shape, 1, std::move(dense));
  }

  const GridShape& fixed_shape() const { return fixed_; }
  const GridShape& control_shape() const { return control_; }
  int control_spacing() const { return spacing_; }
  int ndim() const { return fixed_.ndim(); }
  std::span<const double> params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }

  DeformationField with_params(std::vector<double> params) const {
    return DeformationField(fixed_, spacing_, std::move(params));
  }

  /// Calls fn(control_linear_index, weight) for the lattice corners of a voxel.
  template <typename Fn>
  void for_each_control(std::size_t voxel, Fn&& fn) const {
    const GridIndex v = fixed_.unravel(voxel);
    const int nd = ndim();
    for (int corner = 0; corner < (1 << nd); ++corner) {
      double w = 1.0;
      GridIndex c;
      for (int a = 0; a < nd; ++a) {
        const auto& ax = weights_[static_cast<std::size_t>(a)][static_cast<std::size_t>(v[a])];
        const bool hi = (corner >> a) & 1;
        c[a] = ax.lo + (hi ? 1 : 0);
        w *= hi ? ax.frac : 1.0 - ax.frac;
      }
      if (w == 0.0) continue;
      fn(control_.linear(c), w);
    }
  }

  /// Displacement per fixed-grid location, `ndim` interleaved components.
  std::vector<double> dense() const {
    const auto nd = static_cast<std::size_t>(ndim());
    std::vector<double> out(fixed_.size() * nd, 0.0);
    for (std::size_t v = 0; v < fixed_.size(); ++v) {
      for_each_control(v, [&](std::size_t c, double w) {
        for (std::size_t d = 0; d < nd; ++d) out[v * nd + d] += w * params_[c * nd + d];
      });
    }
    return out;
  }

  /// Adjoint of dense(): pulls a per-voxel gradient back to the control lattice.
  std::vector<double> pullback(std::span<const double> dense_grad) const {
    const auto nd = static_cast<std::size_t>(ndim());
    std::vector<double> g(params_.size(), 0.0);
    for (std::size_t v = 0; v < fixed_.size(); ++v) {
      for_each_control(v, [&](std::size_t c, double w) {
        for (std::size_t d = 0; d < nd; ++d) g[c * nd + d] += w * dense_grad[v * nd + d];
      });
    }
    return g;
  }

  double max_norm() const {
    const auto d = dense();
    const auto nd = static_cast<std::size_t>(ndim());
    double m = 0.0;
    for (std::size_t v = 0; v < fixed_.size(); ++v) {
      double s = 0.0;
      for (std::size_t k = 0; k < nd; ++k) s += d[v * nd + k] * d[v * nd + k];
      m = std::max(m, std::sqrt(s));
    }
    return m;
  }

 private:
  struct AxisWeight {
    std::int64_t lo = 0;
    double frac = 0.0;
  };

  void build_weights() {
    for (int a = 0; a < fixed_.ndim(); ++a) {
      auto& w = weights_[static_cast<std::size_t>(a)];
      w.resize(static_cast<std::size_t>(fixed_.dim(a)));
      for (std::int64_t v = 0; v < fixed_.dim(a); ++v) {
        w[static_cast<std::size_t>(v)] = {v / spacing_, static_cast<double>(v % spacing_) / spacing_};
      }
    }
  }

  GridShape fixed_;
  GridShape control_;
  int spacing_ = 1;
  std::vector<double> params_ = std::vector<double>(2, 0.0);
  std::array<std::vector<AxisWeight>, kMaxAxes> weights_;
};

/// Backward warp of a moving-grid map onto the fixed grid with multilinear
/// sampling; samples outside the moving grid read 0.
inline ProbabilityMap warp(const ProbabilityMap& map, const DeformationField& field) {
  if (!map.shape().same_extent(field.fixed_shape())) throw Error(Errc::ShapeMismatch, "warp: map and field grids differ");
  const auto& shape = map.shape();
  const auto u = field.dense();
  const auto nd = static_cast<std::size_t>(shape.ndim());
  std::vector<double> out(map.size());
  for (std::size_t v = 0; v < out.size(); ++v) {
    const GridIndex idx = shape.unravel(v);
    std::array<double, 3> pos{};
    for (std::size_t a = 0; a < nd; ++a) {
      pos[a] = static_cast<double>(idx[static_cast<int>(a)]) + u[v * nd + a] / shape.spacing(static_cast<int>(a));
    }
    out[v] = std::clamp(detail::sample_linear(map.values(), shape, pos), 0.0, 1.0);
  }
  return ProbabilityMap(shape, std::move(out));
}

inline Image warp_image(const Image& img, const DeformationField& field) {
  if (!img.shape().same_extent(field.fixed_shape())) throw Error(Errc::ShapeMismatch, "warp_image: grids differ");
  const auto& shape = img.shape();
  const auto u = field.dense();
  const auto nd = static_cast<std::size_t>(shape.ndim());
  std::vector<float> out(img.size());
  for (std::size_t v = 0; v < out.size(); ++v) {
    const GridIndex idx = shape.unravel(v);
    std::array<double, 3> pos{};
    for (std::size_t a = 0; a < nd; ++a) {
      pos[a] = static_cast<double>(idx[static_cast<int>(a)]) + u[v * nd + a] / shape.spacing(static_cast<int>(a));
    }
    out[v] = static_cast<float>(detail::sample_linear(img.values(), shape, pos));
  }
  return Image(shape, std::move(out));
}

/// Nearest-neighbour backward warp of a label map (labels are not blended).
inline LabelMap warp_labels(const LabelMap& labels, const DeformationField& field) {
  if (!labels.shape().same_extent(field.fixed_shape())) throw Error(Errc::ShapeMismatch, "warp_labels: grids differ");
  const auto& shape = labels.shape();
  const auto u = field.dense();
  const auto nd = static_cast<std::size_t>(shape.ndim());
  std::vector<std::int32_t> out(labels.size(), 0);
  for (std::size_t v = 0; v < out.size(); ++v) {
    const GridIndex idx = shape.unravel(v);
    GridIndex src;
    for (std::size_t a = 0; a < nd; ++a) {
      const int ia = static_cast<int>(a);
      src[ia] = std::llround(static_cast<double>(idx[ia]) + u[v * nd + a] / shape.spacing(ia));
    }
    if (shape.contains(src)) out[v] = labels.at(src);
  }
  return LabelMap(shape, std::move(out));
}

// ---- serialisation: one JSON header line, then float32-LE control displacements

inline std::string encode_field(const DeformationField& field) {
  const auto& fs = field.fixed_shape();
  nlohmann::json hdr = {
      {"dims", std::vector<std::int64_t>(fs.dims().begin(), fs.dims().end())},
      {"spacing", std::vector<double>(fs.spacings().begin(), fs.spacings().end())},
      {"control_spacing", field.control_spacing()},
      {"control_dims",
       std::vector<std::int64_t>(field.control_shape().dims().begin(), field.control_shape().dims().end())},
  };
  return hdr.dump() + "\n" + codec::pack_f32_le(field.params());
}

inline DeformationField decode_field(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw Error(Errc::FormatError, "field file lacks a header line");
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(bytes.substr(0, nl));
    const auto dims = hdr.at("dims").get<std::vector<std::int64_t>>();
    std::vector<double> spacing;
    if (hdr.contains("spacing")) spacing = hdr["spacing"].get<std::vector<double>>();
    const int cs = hdr.at("control_spacing").get<int>();
    const auto values = codec::unpack_f32_le(bytes.substr(nl + 1));
    return DeformationField(GridShape(dims, spacing), cs, std::vector<double>(values.begin(), values.end()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("field header: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::FormatError) throw;
    throw Error(Errc::FormatError, e.what());
  }
}

inline void save_field(const std::filesystem::path& path, const DeformationField& field) {
  io::detail::write_file(path, encode_field(field));
}

inline DeformationField load_field(const std::filesystem::path& path) {
  return decode_field(io::detail::read_file(path));
}

}  // namespace promptreg

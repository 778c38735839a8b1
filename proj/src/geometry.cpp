#include "spx/geometry.hpp"

#include <numeric>

#include "spx/error.hpp"

namespace spx {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Moore ring offsets in row-major scan order, preceded by the containing cell.
constexpr int kOffY[NeighborMap::kSlots] = {0, -1, -1, -1, 0, 0, 1, 1, 1};
constexpr int kOffX[NeighborMap::kSlots] = {0, -1, 0, 1, -1, 1, -1, 0, 1};

}  // namespace

GeometryPtr build_grid(int h, int w, int ratio) {
  if (ratio < 2) throw DimensionError("build_grid: ratio must be >= 2");
  if (h < ratio || w < ratio) throw DimensionError("build_grid: grid smaller than ratio");

  auto geom = std::make_shared<Geometry>();
  GridSpec& g = geom->grid;
  g.h = h;
  g.w = w;
  g.ratio = ratio;
  g.sh = ceil_div(h, ratio);
  g.sw = ceil_div(w, ratio);

  const int n = g.n_pixels();
  const int nsp = g.n_superpixels();

  NeighborMap& nm = geom->neighbors;
  nm.index.assign(static_cast<std::size_t>(n) * NeighborMap::kSlots, -1);
  nm.valid.assign(static_cast<std::size_t>(n) * NeighborMap::kSlots, 0);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int pix = y * w + x;
      const int cy = y / ratio;
      const int cx = x / ratio;
      for (int s = 0; s < NeighborMap::kSlots; ++s) {
        const int sy = cy + kOffY[s];
        const int sx = cx + kOffX[s];
        if (sy < 0 || sy >= g.sh || sx < 0 || sx >= g.sw) continue;
        const std::size_t at = static_cast<std::size_t>(pix) * NeighborMap::kSlots + s;
        nm.index[at] = sy * g.sw + sx;
        nm.valid[at] = 1;
      }
    }
  }

  // Pair list, pixel-major over valid slots.
  PairList& pl = geom->pairs;
  pl.pixel_offsets.assign(n + 1, 0);
  for (int pix = 0; pix < n; ++pix) {
    for (int s = 0; s < NeighborMap::kSlots; ++s) {
      const std::size_t at = static_cast<std::size_t>(pix) * NeighborMap::kSlots + s;
      if (!nm.valid[at]) continue;
      pl.pixel.push_back(pix);
      pl.superpixel.push_back(nm.index[at]);
      pl.slot.push_back(s);
    }
    pl.pixel_offsets[pix + 1] = pl.count();
  }

  // Superpixel-major grouping of the same pairs, ascending pair id per group.
  std::vector<int> counts(nsp, 0);
  for (int e = 0; e < pl.count(); ++e) ++counts[pl.superpixel[e]];
  pl.sp_offsets.assign(nsp + 1, 0);
  for (int p = 0; p < nsp; ++p) pl.sp_offsets[p + 1] = pl.sp_offsets[p] + counts[p];
  pl.sp_order.assign(pl.count(), 0);
  std::vector<int> cursor(pl.sp_offsets.begin(), pl.sp_offsets.end() - 1);
  for (int e = 0; e < pl.count(); ++e) pl.sp_order[cursor[pl.superpixel[e]]++] = e;

  // Windows W_p fall out of the superpixel-major pair grouping.
  WindowMap& wm = geom->windows;
  wm.offsets = pl.sp_offsets;
  wm.pixels.resize(pl.count());
  for (int k = 0; k < pl.count(); ++k) wm.pixels[k] = pl.pixel[pl.sp_order[k]];

  return geom;
}

int count_superpixels(int image_h, int image_w, int stem_stride, int ratio) {
  const int h = ceil_div(image_h, stem_stride);
  const int w = ceil_div(image_w, stem_stride);
  return ceil_div(h, ratio) * ceil_div(w, ratio);
}

}  // namespace spx

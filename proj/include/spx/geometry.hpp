#pragma once

#include <cstdint>
#include <memory>
#include <vector>

namespace spx {

// Pixel-grid / superpixel-grid correspondence. The superpixel grid divides
// the pixel-feature grid by `ratio` with ceil semantics, so the last row and
// column of superpixels may cover truncated cells.
struct GridSpec {
  int h = 0;   // pixel-feature grid height
  int w = 0;   // pixel-feature grid width
  int sh = 0;  // superpixel grid height, ceil(h/ratio)
  int sw = 0;  // superpixel grid width, ceil(w/ratio)
  int ratio = 4;

  int n_pixels() const { return h * w; }
  int n_superpixels() const { return sh * sw; }
};

// Per-pixel neighbor lists over the superpixel grid. Slot 0 is always the
// containing superpixel; slots 1..8 scan the Moore ring in row-major order.
// Out-of-grid slots hold -1.
struct NeighborMap {
  static constexpr int kSlots = 9;
  std::vector<std::int32_t> index;  // n_pixels * 9, superpixel id or -1
  std::vector<std::uint8_t> valid;  // n_pixels * 9

  int count(int pixel) const {
    int c = 0;
    for (int s = 0; s < kSlots; ++s) c += valid[static_cast<std::size_t>(pixel) * kSlots + s];
    return c;
  }
};

// Dual of NeighborMap: for each superpixel p the pixels i with p in N_i,
// stored CSR-style in ascending pixel order.
struct WindowMap {
  std::vector<std::int32_t> offsets;  // n_superpixels + 1
  std::vector<std::int32_t> pixels;   // concatenated windows

  int window_size(int sp) const { return offsets[sp + 1] - offsets[sp]; }
};

// Flat list of all valid (pixel, neighbor-slot) pairs, pixel-major. Both
// cross-attention directions and pixelify run over this edge list; the
// superpixel-major ordering drives softmax groups over windows W_p.
struct PairList {
  std::vector<std::int32_t> pixel;        // E
  std::vector<std::int32_t> superpixel;   // E
  std::vector<std::int32_t> slot;         // E, neighbor slot within the pixel's list
  std::vector<std::int32_t> pixel_offsets;  // n_pixels + 1 (pairs are pixel-major)
  std::vector<std::int32_t> sp_order;     // E, pair ids grouped by superpixel
  std::vector<std::int32_t> sp_offsets;   // n_superpixels + 1

  int count() const { return static_cast<int>(pixel.size()); }
};

struct Geometry {
  GridSpec grid;
  NeighborMap neighbors;
  WindowMap windows;
  PairList pairs;
};

using GeometryPtr = std::shared_ptr<const Geometry>;

// Builds the full correspondence for an h x w pixel grid with the given
// superpixel ratio. Throws GridError-category errors for h,w < r or r < 2.
GeometryPtr build_grid(int h, int w, int ratio);

// Per-head hard assignment: pixel -> superpixel id.
struct HardAssignment {
  int heads = 0;
  int n_pixels = 0;
  std::vector<std::int32_t> label;  // heads * n_pixels

  std::int32_t at(int head, int pixel) const {
    return label[static_cast<std::size_t>(head) * n_pixels + pixel];
  }
};

// Superpixel count for an image processed by a stem of the given stride and
// a superpixel ratio (ceil division at both stages).
int count_superpixels(int image_h, int image_w, int stem_stride, int ratio);

}  // namespace spx

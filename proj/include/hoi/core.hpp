#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>

namespace hoi::core {

// Corner-format box in absolute pixels. Center-format inputs are converted at
// ingestion so only one convention exists inside the library.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double diagonal() const { return std::hypot(width(), height()); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x1 >= 0 && y1 >= 0 && x1 < x2 && y1 < y2;
  }
};

inline void require_valid(const BoundingBox& b, const char* who) {
  if (!b.valid()) throw std::invalid_argument(std::string(who) + ": degenerate or invalid box");
}

struct EntityDetection {
  BoundingBox box;
  int category = -1;
  double confidence = 0.0;
  Eigen::VectorXd instance_token;    // length d_z
  Eigen::VectorXd appearance_token;  // length d_a
};

struct HOITriplet {
  BoundingBox human_box;
  BoundingBox object_box;
  int object_category = -1;
  int verb = -1;
  double score = 0.0;
};

struct GeometryVector {
  Eigen::Matrix<double, 8, 1> values;
};

// Simple RGB raster, one matrix per channel, values in [0,1]. The synthetic
// scenes and all heatmap overlays use this.
struct Raster {
  int width = 0, height = 0;
  std::array<Eigen::MatrixXd, 3> channel;  // each height x width

  static Raster filled(int w, int h, double r, double g, double b) {
    Raster img;
    img.width = w;
    img.height = h;
    img.channel = {Eigen::MatrixXd::Constant(h, w, r), Eigen::MatrixXd::Constant(h, w, g),
                   Eigen::MatrixXd::Constant(h, w, b)};
    return img;
  }

  void fill_rect(const BoundingBox& box, double r, double g, double b) {
    int x1 = std::max(0, static_cast<int>(std::floor(box.x1)));
    int y1 = std::max(0, static_cast<int>(std::floor(box.y1)));
    int x2 = std::min(width, static_cast<int>(std::ceil(box.x2)));
    int y2 = std::min(height, static_cast<int>(std::ceil(box.y2)));
    if (x2 <= x1 || y2 <= y1) return;
    channel[0].block(y1, x1, y2 - y1, x2 - x1).setConstant(r);
    channel[1].block(y1, x1, y2 - y1, x2 - x1).setConstant(g);
    channel[2].block(y1, x1, y2 - y1, x2 - x1).setConstant(b);
  }
};

// Per-cell summary of a raster over a grid x grid partition: mean R, G, B and
// the normalized cell center. Rows are in row-major cell order. Both stand-in
// encoders (scene patches, detector backbone) derive their features from this.
inline Eigen::MatrixXd patch_summaries(const Raster& img, int grid) {
  if (grid <= 0 || img.width % grid != 0 || img.height % grid != 0)
    throw std::invalid_argument("patch_summaries: grid must evenly divide the raster");
  const int cw = img.width / grid, ch = img.height / grid;
  Eigen::MatrixXd out(grid * grid, 5);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      long row = gy * grid + gx;
      for (int c = 0; c < 3; ++c)
        out(row, c) = img.channel[c].block(gy * ch, gx * cw, ch, cw).mean();
      out(row, 3) = (gx + 0.5) / grid;
      out(row, 4) = (gy + 0.5) / grid;
    }
  return out;
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  double inter = intersection_area(a, b);
  double u = a.area() + b.area() - inter;
  return inter / u;
}

// Pairwise spatial cue vector: center offset (in units of the first box's
// diagonal), log scale ratios, overlap measures, and image-relative areas.
// Every entry is dimensionless, so jointly rescaling boxes and image leaves
// the output unchanged.
inline GeometryVector geometric_encoding(const BoundingBox& b_h, const BoundingBox& b_o,
                                         double image_w, double image_h) {
  require_valid(b_h, "geometric_encoding");
  require_valid(b_o, "geometric_encoding");
  if (!(image_w > 0) || !(image_h > 0))
    throw std::invalid_argument("geometric_encoding: image dimensions must be positive");

  const double diag = b_h.diagonal();
  const double inter = intersection_area(b_h, b_o);
  BoundingBox enclosing{std::min(b_h.x1, b_o.x1), std::min(b_h.y1, b_o.y1),
                        std::max(b_h.x2, b_o.x2), std::max(b_h.y2, b_o.y2)};
  const double image_area = image_w * image_h;

  GeometryVector g;
  g.values << (b_o.cx() - b_h.cx()) / diag, (b_o.cy() - b_h.cy()) / diag,
      std::log(b_o.width() / b_h.width()), std::log(b_o.height() / b_h.height()), iou(b_h, b_o),
      inter / enclosing.area(), b_h.area() / image_area, b_o.area() / image_area;
  return g;
}

}  // namespace hoi::core

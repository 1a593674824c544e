#include "cogs/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

namespace cogs::kernels {

namespace {

// Copies op(A) into a contiguous m x k row-major buffer.
void pack(bool trans, int rows, int cols, const double* src,
          std::vector<double>& dst) {
  dst.resize(static_cast<size_t>(rows) * cols);
  if (!trans) {
    std::copy(src, src + dst.size(), dst.begin());
    return;
  }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[size_t(r) * cols + c] = src[size_t(c) * rows + r];
}

// Lower envelope of parabolas over one line of squared distances.
void edt_1d(const double* f, int n, double* d, int* v, double* z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (f[v[0]] == kInf) {
      v[0] = q;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (f[v[0]] == kInf) {
    for (int q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

void edt_impl(const uint8_t* edges, int h, int w, double* out, bool parallel) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(size_t(h) * w);
  for (size_t i = 0; i < grid.size(); ++i) grid[i] = edges[i] ? 0.0 : kInf;

  const int n = std::max(h, w);
#pragma omp parallel if (parallel)
  {
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<int> v(n);
#pragma omp for schedule(static)
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) f[y] = grid[size_t(y) * w + x];
      edt_1d(f.data(), h, d.data(), v.data(), z.data());
      for (int y = 0; y < h; ++y) grid[size_t(y) * w + x] = d[y];
    }
#pragma omp for schedule(static)
    for (int y = 0; y < h; ++y) {
      double* row = grid.data() + size_t(y) * w;
      std::copy(row, row + w, f.begin());
      edt_1d(f.data(), w, d.data(), v.data(), z.data());
      for (int x = 0; x < w; ++x) out[size_t(y) * w + x] = std::sqrt(d[x]);
    }
  }
}

inline double sq_dist_row(const double* a, const double* b, int d) {
  double acc = 0.0;
  for (int j = 0; j < d; ++j) {
    const double diff = a[j] - b[j];
    acc += diff * diff;
  }
  return acc;
}

// Register-tiled product over packed column panels. Every output element is
// summed from 0.0 in ascending k, then stored or added to c, which is the
// order serial::gemm uses.
using V8 = double __attribute__((vector_size(64)));
constexpr int kMr = 4;
constexpr int kNr = 16;

// Packs op(B) (k x n) into ceil(n/kNr) panels of k x kNr, zero padded.
void pack_panels(bool trans, int k, int n, const double* b, std::vector<double>& dst) {
  const int panels = (n + kNr - 1) / kNr;
  dst.assign(size_t(panels) * k * kNr, 0.0);
  for (int jp = 0; jp < panels; ++jp) {
    double* out = dst.data() + size_t(jp) * k * kNr;
    const int j0 = jp * kNr, nb = std::min(kNr, n - j0);
    for (int p = 0; p < k; ++p)
      for (int jj = 0; jj < nb; ++jj)
        out[size_t(p) * kNr + jj] = trans ? b[size_t(j0 + jj) * k + p] : b[size_t(p) * n + j0 + jj];
  }
}

void panel_rows(int i0, int i1, int n, int k, const double* A, const double* panels, double* c,
                bool accumulate) {
  const int np = (n + kNr - 1) / kNr;
  for (int i = i0; i < i1; i += kMr) {
    const int mb = std::min(kMr, i1 - i);
    for (int jp = 0; jp < np; ++jp) {
      const double* bp = panels + size_t(jp) * k * kNr;
      const int j0 = jp * kNr, nb = std::min(kNr, n - j0);
      alignas(64) double t[kMr][kNr] = {};
      if (mb == kMr) {
        const double* a0 = A + size_t(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        V8 c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
        for (int p = 0; p < k; ++p) {
          const double* bv = bp + size_t(p) * kNr;
          V8 b0, b1;
          std::memcpy(&b0, bv, sizeof b0);
          std::memcpy(&b1, bv + 8, sizeof b1);
          const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
          c00 += x0 * b0;
          c01 += x0 * b1;
          c10 += x1 * b0;
          c11 += x1 * b1;
          c20 += x2 * b0;
          c21 += x2 * b1;
          c30 += x3 * b0;
          c31 += x3 * b1;
        }
        std::memcpy(t[0], &c00, 64);
        std::memcpy(t[0] + 8, &c01, 64);
        std::memcpy(t[1], &c10, 64);
        std::memcpy(t[1] + 8, &c11, 64);
        std::memcpy(t[2], &c20, 64);
        std::memcpy(t[2] + 8, &c21, 64);
        std::memcpy(t[3], &c30, 64);
        std::memcpy(t[3] + 8, &c31, 64);
      } else {
        for (int p = 0; p < k; ++p) {
          const double* bv = bp + size_t(p) * kNr;
          for (int r = 0; r < mb; ++r) {
            const double x = A[size_t(i + r) * k + p];
            for (int j = 0; j < kNr; ++j) t[r][j] += x * bv[j];
          }
        }
      }
      for (int r = 0; r < mb; ++r) {
        double* ci = c + size_t(i + r) * n + j0;
        if (accumulate) {
          for (int j = 0; j < nb; ++j) ci[j] += t[r][j];
        } else {
          for (int j = 0; j < nb; ++j) ci[j] = t[r][j];
        }
      }
    }
  }
}

// Single-threaded tiled gemm for callers that parallelize at a higher level.
void gemm_local(bool trans_a, bool trans_b, int m, int n, int k, const double* a, const double* b,
                double* c, std::vector<double>& pa, std::vector<double>& pb) {
  const double* A = a;
  if (trans_a) {
    pack(true, m, k, a, pa);
    A = pa.data();
  }
  pack_panels(trans_b, k, n, b, pb);
  panel_rows(0, m, n, k, A, pb.data(), c, false);
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
          const double* b, double* c, bool accumulate) {
  std::vector<double> pa, pb;
  const double* A = a;
  if (trans_a) {
    pack(true, m, k, a, pa);
    A = pa.data();
  }
  pack_panels(trans_b, k, n, b, pb);
  const int blocks = (m + kMr - 1) / kMr;
#pragma omp parallel for schedule(static) if (size_t(m) * n * k > 32768)
  for (int blk = 0; blk < blocks; ++blk)
    panel_rows(blk * kMr, std::min(m, (blk + 1) * kMr), n, k, A, pb.data(), c, accumulate);
}

void im2col(const double* x, const ConvShape& s, double* col) {
  const int oh = s.out_height(), ow = s.out_width();
  const int ohw = oh * ow;
  for (int c = 0; c < s.in_channels; ++c)
    for (int ky = 0; ky < s.kernel; ++ky)
      for (int kx = 0; kx < s.kernel; ++kx) {
        double* dst = col + (size_t(c * s.kernel + ky) * s.kernel + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            dst[oy * ow + ox] = (iy >= 0 && iy < s.height && ix >= 0 && ix < s.width)
                                    ? x[(size_t(c) * s.height + iy) * s.width + ix]
                                    : 0.0;
          }
        }
      }
}

void col2im(const double* col, const ConvShape& s, double* x) {
  const int oh = s.out_height(), ow = s.out_width();
  const int ohw = oh * ow;
  for (int c = 0; c < s.in_channels; ++c)
    for (int ky = 0; ky < s.kernel; ++ky)
      for (int kx = 0; kx < s.kernel; ++kx) {
        const double* src = col + (size_t(c * s.kernel + ky) * s.kernel + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.width) continue;
            x[(size_t(c) * s.height + iy) * s.width + ix] += src[oy * ow + ox];
          }
        }
      }
}

void conv2d_forward(const double* x, const double* w, const double* bias,
                    const ConvShape& s, double* y) {
  const int ohw = s.out_height() * s.out_width();
  const size_t in_size = size_t(s.in_channels) * s.height * s.width;
  const size_t out_size = size_t(s.out_channels) * ohw;
#pragma omp parallel if (s.batch > 1)
  {
    std::vector<double> col(size_t(s.patch()) * ohw), pa, pb;
#pragma omp for schedule(static)
    for (int b = 0; b < s.batch; ++b) {
      im2col(x + b * in_size, s, col.data());
      double* yb = y + b * out_size;
      gemm_local(false, false, s.out_channels, ohw, s.patch(), w, col.data(), yb, pa, pb);
      if (bias)
        for (int o = 0; o < s.out_channels; ++o)
          for (int i = 0; i < ohw; ++i) yb[size_t(o) * ohw + i] += bias[o];
    }
  }
}

void conv2d_backward(const double* x, const double* w, const double* dy,
                     const ConvShape& s, double* dx, double* dw, double* dbias) {
  const int ohw = s.out_height() * s.out_width();
  const size_t in_size = size_t(s.in_channels) * s.height * s.width;
  const size_t out_size = size_t(s.out_channels) * ohw;
  const size_t wsize = size_t(s.out_channels) * s.patch();

  // Per-image weight gradients are reduced in batch order afterwards so the
  // result does not depend on the thread count.
  std::vector<double> dw_parts(dw ? wsize * s.batch : 0);
#pragma omp parallel if (s.batch > 1)
  {
    std::vector<double> col(size_t(s.patch()) * ohw), pa, pb;
    std::vector<double> dcol(dx ? col.size() : 0);
#pragma omp for schedule(static)
    for (int b = 0; b < s.batch; ++b) {
      const double* dyb = dy + b * out_size;
      if (dw) {
        im2col(x + b * in_size, s, col.data());
        gemm_local(false, true, s.out_channels, s.patch(), ohw, dyb, col.data(),
                   dw_parts.data() + b * wsize, pa, pb);
      }
      if (dx) {
        gemm_local(true, false, s.patch(), ohw, s.out_channels, w, dyb, dcol.data(), pa, pb);
        col2im(dcol.data(), s, dx + b * in_size);
      }
    }
  }
  if (dw)
    for (int b = 0; b < s.batch; ++b)
      for (size_t i = 0; i < wsize; ++i) dw[i] += dw_parts[b * wsize + i];
  if (dbias)
    for (int b = 0; b < s.batch; ++b)
      for (int o = 0; o < s.out_channels; ++o) {
        const double* row = dy + b * out_size + size_t(o) * ohw;
        double acc = 0.0;
        for (int i = 0; i < ohw; ++i) acc += row[i];
        dbias[o] += acc;
      }
}

void nearest_rows(const double* queries, int n, const double* table, int k,
                  int d, int32_t* index, double* sq_dist) {
#pragma omp parallel for schedule(static) if (size_t(n) * k * d > 16384)
  for (int i = 0; i < n; ++i) {
    const double* q = queries + size_t(i) * d;
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int r = 0; r < k; ++r) {
      const double dist = sq_dist_row(q, table + size_t(r) * d, d);
      if (dist < best_d) {
        best_d = dist;
        best = r;
      }
    }
    index[i] = best;
    if (sq_dist) sq_dist[i] = best_d;
  }
}

void sq_distances(const double* q, const double* rows, int n, int d, double* out) {
#pragma omp parallel for schedule(static) if (size_t(n) * d > 16384)
  for (int i = 0; i < n; ++i) out[i] = sq_dist_row(q, rows + size_t(i) * d, d);
}

void distance_transform(const uint8_t* edges, int h, int w, double* out) {
  edt_impl(edges, h, w, out, true);
}

namespace serial {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
          const double* b, double* c, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a[size_t(p) * m + i] : a[size_t(i) * k + p];
        const double bv = trans_b ? b[size_t(j) * k + p] : b[size_t(p) * n + j];
        acc += av * bv;
      }
      double& cij = c[size_t(i) * n + j];
      cij = accumulate ? cij + acc : acc;
    }
}

void conv2d_forward(const double* x, const double* w, const double* bias,
                    const ConvShape& s, double* y) {
  const int oh = s.out_height(), ow = s.out_width();
  for (int b = 0; b < s.batch; ++b)
    for (int o = 0; o < s.out_channels; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < s.in_channels; ++c)
            for (int ky = 0; ky < s.kernel; ++ky)
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int iy = oy * s.stride - s.pad + ky;
                const int ix = ox * s.stride - s.pad + kx;
                if (iy < 0 || iy >= s.height || ix < 0 || ix >= s.width) continue;
                acc += w[((size_t(o) * s.in_channels + c) * s.kernel + ky) * s.kernel + kx] *
                       x[((size_t(b) * s.in_channels + c) * s.height + iy) * s.width + ix];
              }
          y[((size_t(b) * s.out_channels + o) * oh + oy) * ow + ox] = acc + (bias ? bias[o] : 0.0);
        }
}

void nearest_rows(const double* queries, int n, const double* table, int k,
                  int d, int32_t* index, double* sq_dist) {
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int r = 0; r < k; ++r) {
      const double dist = sq_dist_row(queries + size_t(i) * d, table + size_t(r) * d, d);
      if (dist < best_d) {
        best_d = dist;
        best = r;
      }
    }
    index[i] = best;
    if (sq_dist) sq_dist[i] = best_d;
  }
}

void distance_transform(const uint8_t* edges, int h, int w, double* out) {
  edt_impl(edges, h, w, out, false);
}

}  // namespace serial

}  // namespace cogs::kernels

#pragma once

// Dense numeric kernels. The unqualified functions are the OpenMP versions
// used by the library; `serial::` holds straightforward single-threaded
// references that tests and the benchmark compare against.
//
// All matrices are dense row-major. Per-element summation order in the
// parallel gemm matches serial::gemm, so the two agree bit-for-bit.

#include <cstdint>
#include <span>

namespace cogs::kernels {

struct ConvShape {
  int batch = 1;
  int in_channels = 1;
  int height = 1;
  int width = 1;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in_channels * kernel * kernel; }
};

// C[m,n] = op(A) * op(B)   (or C += ... when accumulate is set)
// op(A) is m x k; A is stored k x m when trans_a is set. Same for B.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
          const double* b, double* c, bool accumulate = false);

// col[c*kh*kw, oh*ow]
void im2col(const double* x, const ConvShape& s, double* col);
// Scatter-add of a column buffer back to image layout.
void col2im(const double* col, const ConvShape& s, double* x);

// x[B,C,H,W], w[O,C,k,k], bias[O] (may be null) -> y[B,O,OH,OW]
void conv2d_forward(const double* x, const double* w, const double* bias,
                    const ConvShape& s, double* y);
// Accumulates into dx, dw, dbias (any may be null).
void conv2d_backward(const double* x, const double* w, const double* dy,
                     const ConvShape& s, double* dx, double* dw, double* dbias);

// For each of n query rows (dim d) find the nearest of k table rows under
// squared Euclidean distance; ties resolve to the lowest row index.
void nearest_rows(const double* queries, int n, const double* table, int k,
                  int d, int32_t* index, double* sq_dist);

// out[i] = ||rows[i] - q||^2 for n rows.
void sq_distances(const double* q, const double* rows, int n, int d,
                  double* out);

// Exact Euclidean distance from every pixel to the nearest set pixel of
// `edges` (h x w, nonzero = edge). Requires at least one edge pixel.
void distance_transform(const uint8_t* edges, int h, int w, double* out);

namespace serial {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
          const double* b, double* c, bool accumulate = false);
void conv2d_forward(const double* x, const double* w, const double* bias,
                    const ConvShape& s, double* y);
void nearest_rows(const double* queries, int n, const double* table, int k,
                  int d, int32_t* index, double* sq_dist);
void distance_transform(const uint8_t* edges, int h, int w, double* out);

}  // namespace serial

int max_threads();

}  // namespace cogs::kernels

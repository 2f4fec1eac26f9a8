#pragma once

#include <cstddef>
#include <vector>

#include "evonas/tensor.hpp"

namespace evonas {

// Cross-correlation of input [C_in,H,W] with weight [C_out,C_in,k,k] (k odd).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);

// Window maximum; padded cells never win. Backward routes to the first maximum.
Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding);

// Cell (i,j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh)) and likewise columns.
Tensor adaptive_avg_pool2d(const Tensor& input, std::size_t out_h, std::size_t out_w);

// weight [D_out,D_in] times input [D_in] plus bias.
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

// The same affine map applied to every column of input [D_in,T].
Tensor frame_affine(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Stacks input columns t+offsets[0], t+offsets[1], ... for every t whose
// offsets stay inside [0,T). Result is [D*|offsets|, T - (max - min)].
Tensor splice(const Tensor& input, const std::vector<int>& offsets);

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
double sigmoid(double x);

// [D,T] -> [2D]: per-row mean then per-row population std sqrt(var + 1e-10).
Tensor stats_pool(const Tensor& input);
inline constexpr double kStatsPoolEpsilon = 1e-10;

// Scalar cosine similarity, value clamped into [-1,1].
Tensor cosine(const Tensor& a, const Tensor& b);
double cosine(std::span<const double> a, std::span<const double> b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// alpha * x + beta, elementwise.
Tensor affine(const Tensor& x, double alpha, double beta = 0.0);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// Elementwise mean of equally shaped tensors.
Tensor mean_of(const std::vector<Tensor>& xs);
// Elementwise sum of equally shaped tensors.
Tensor sum_of(const std::vector<Tensor>& xs);
// Largest of single-element tensors; gradient goes to the first maximum.
Tensor max_of(const std::vector<Tensor>& scalars);

}  // namespace evonas

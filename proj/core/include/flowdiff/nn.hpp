#pragma once

#include <span>
#include <string>
#include <vector>

#include "flowdiff/rng.hpp"
#include "flowdiff/tensor.hpp"

namespace flowdiff::nn {

// Trainable tensor with its gradient accumulator and Adam moments. Layers
// accumulate into grad; callers zero it between steps.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;

  Param() = default;
  explicit Param(std::string name) : name(std::move(name)) {}
  void init(std::vector<std::int64_t> shape) {
    value = Tensor(shape);
    grad = Tensor(shape);
    m = Tensor(shape);
    v = Tensor(std::move(shape));
  }
};

void zero_grads(std::span<Param* const> params);

// Adam with bias correction. Moments live in the params so that model
// serialization captures optimizer state alongside values.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr(lr), beta1(beta1), beta2(beta2), eps(eps) {}

  void step(std::span<Param* const> params);
  // Fresh optimizer: zero moments and restart bias correction.
  void reset(std::span<Param* const> params);

  double lr;
  double beta1;
  double beta2;
  double eps;
  std::uint64_t step_count = 0;
};

// 2D convolution, stride 1, zero "same" padding. Weight (Cout, Cin, kh, kw)
// with odd kh, kw; bias (Cout). backward(x, gout) accumulates weight/bias
// grads and returns the input gradient.
struct Conv2d {
  Param w;
  Param b;

  Conv2d() = default;
  Conv2d(std::string name, std::int64_t c_in, std::int64_t c_out, std::int64_t k);

  // He-style normal init scaled by fan-in; final layers use zero_init to
  // start blocks at identity / zero output.
  void init_random(RngStream& rng);
  void zero_init();

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& gout);

  std::vector<Param*> params() { return {&w, &b}; }
};

// Fully connected layer on (B, F_in) tensors.
struct Dense {
  Param w;  // (F_out, F_in)
  Param b;  // (F_out)

  Dense() = default;
  Dense(std::string name, std::int64_t f_in, std::int64_t f_out);

  void init_random(RngStream& rng);
  void zero_init();

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& gout);

  std::vector<Param*> params() { return {&w, &b}; }
};

// x * sigmoid(x), elementwise.
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& gout);

// 2x2 mean pooling; spatial dims must be even.
Tensor avg_pool2(const Tensor& x);
Tensor avg_pool2_backward(const Tensor& x, const Tensor& gout);

// Nearest-neighbor 2x upsampling.
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& x, const Tensor& gout);

// Channel concatenation of two (B, C, H, W) tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& x, std::int64_t c_first, Tensor& a, Tensor& b);

// Adds a per-(batch, channel) bias to x; bias is (B, C).
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
Tensor channel_bias_backward(const Tensor& gout);  // reduces gout to (B, C)

// Sinusoidal embedding of diffusion times. t in [0,1] is scaled by 1000
// before the standard sin/cos frequency ladder. Output (B, dim), dim even.
Tensor time_embedding(std::span<const double> t, std::int64_t dim);

}  // namespace flowdiff::nn

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "flowdiff/nn.hpp"
#include "flowdiff/rng.hpp"
#include "flowdiff/tensor.hpp"

namespace flowdiff {

// Architecture of the conditional invertible network G(z, y). The block list
// is derived from these fields at construction time.
struct FlowConfig {
  std::int64_t channels = 1;
  std::int64_t height = 8;
  std::int64_t width = 8;
  std::int64_t hidden_channels = 32;  // conditioner width
  std::int64_t embed_channels = 8;    // y-encoder output channels
  std::int64_t couplings_per_scale = 4;
  // unset: multiscale iff min(height, width) >= 16 (and divisible by 2)
  std::optional<bool> multiscale;
  bool use_1x1 = true;  // invertible 1x1 mixing at the squeezed scale
  double s_max = 2.0;   // coupling scale bound: s = s_max * tanh(raw)

  bool multiscale_effective() const;
};

enum class FlowBlockKind { coupling, channel_permute, invertible_1x1, squeeze, unsqueeze };

// Coupling masks. Checkerboard masks work at any channel count (parity of
// h+w selects the passive set); channel masks require C >= 2 and are used
// after squeezing.
enum class CouplingMask { checkerboard_even, checkerboard_odd, channel_first, channel_second };

struct FlowOutput {
  Tensor x_hat;                // same shape as z
  std::vector<double> logdet;  // per batch element, d log|det dx_hat/dz|
};

// -mean(logdet): the minimized entropy term. The base-density constant is
// dropped everywhere.
double entropy_loss(const FlowOutput& out);

// Forward activation cache for one flow_forward call; consumed by backward.
struct CouplingActs {
  Tensor x_in;
  Tensor cond_in;  // concat(masked x, y embedding)
  Tensor h1, a1, h2, a2;
  Tensor raw_sb;   // conditioner output, 2C channels
};

struct FlowActs {
  Tensor y;
  Tensor enc_h1, enc_a1;          // y-encoder intermediates
  std::vector<Tensor> block_in;   // state entering each block
  std::vector<CouplingActs> couplings;  // parallel to coupling blocks
  std::vector<std::int64_t> out_emb_shape;  // y-embedding shape at the output side
};

class ConditionalFlow {
 public:
  explicit ConditionalFlow(FlowConfig cfg);

  // Random conditioner trunks, zero-initialized final layers: the flow
  // starts as the identity map with logdet 0.
  void init_params(RngStream& rng);

  FlowOutput forward(const Tensor& z, const Tensor& y) const;
  FlowOutput forward(const Tensor& z, const Tensor& y, FlowActs* acts) const;
  // Block-reversed inverse; second member is -logdet of the forward pass
  // through the same point.
  std::pair<Tensor, std::vector<double>> inverse(const Tensor& x, const Tensor& y) const;

  // Reverse pass through a cached forward. gx_hat is dL/dx_hat, glogdet is
  // dL/dlogdet per batch element (either may be empty for zero). Accumulates
  // parameter gradients, returns dL/dz.
  Tensor backward(const FlowActs& acts, const Tensor& gx_hat, std::span<const double> glogdet);

  // n independent z ~ N(0, I) draws mapped through the flow.
  std::vector<Tensor> sample_posterior(const Tensor& y, int n_samples, RngStream& rng) const;

  std::vector<nn::Param*> params();
  const FlowConfig& config() const { return cfg_; }

 private:
  struct Block {
    FlowBlockKind kind;
    CouplingMask mask = CouplingMask::checkerboard_even;  // coupling only
    nn::Conv2d conv1, conv2, conv3;                       // coupling conditioner
    nn::Param w1x1;                                       // invertible_1x1 only
  };

  Tensor encode_y(const Tensor& y, FlowActs* acts) const;
  FlowOutput run_forward(const Tensor& z, const Tensor& y, FlowActs* acts) const;

  FlowConfig cfg_;
  std::vector<Block> blocks_;
  nn::Conv2d enc1_, enc2_;  // y encoder
};

// 2x2 space-to-depth and its inverse; pure permutations used by the flow
// and by the multiscale handling of y embeddings.
Tensor squeeze2(const Tensor& x);
Tensor unsqueeze2(const Tensor& x);

}  // namespace flowdiff

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "flowdiff/diffusion.hpp"
#include "flowdiff/nn.hpp"

namespace flowdiff {

// Small U-shaped eps-prediction network. One optional 2x downsampling stage
// (enabled when the spatial dims are even and >= 2); time enters through a
// sinusoidal embedding projected per stage onto channel biases.
struct ScoreNetworkConfig {
  std::int64_t channels = 1;
  std::int64_t height = 8;
  std::int64_t width = 8;
  std::int64_t base_channels = 16;
  std::int64_t emb_dim = 16;
  std::int64_t kernel = 3;
  bool temb_mlp = true;

  bool with_down() const {
    return height % 2 == 0 && width % 2 == 0 && height >= 2 && width >= 2;
  }
};

struct ScoreActs {
  Tensor x;
  Tensor temb0, temb_z, temb;  // raw embedding, pre-silu MLP output, stage input
  Tensor h_in;
  Tensor z1, e1;  // enc1 pre-activation (bias added) and activation
  Tensor pooled;
  Tensor z2, e2;
  Tensor z3, m;
  Tensor cat;
  Tensor z4, dc;
};

class ScoreNetwork {
 public:
  explicit ScoreNetwork(ScoreNetworkConfig cfg);

  void init_params(RngStream& rng);

  // Predicts the injected noise eps for x at times t (size B or 1).
  Tensor eps_forward(const Tensor& x, std::span<const double> t) const;
  Tensor eps_forward(const Tensor& x, std::span<const double> t, ScoreActs* acts) const;
  // Reverse pass; accumulates parameter gradients unless accumulate_params
  // is false (pure input-VJP mode). Returns dL/dx.
  Tensor eps_backward(const ScoreActs& acts, const Tensor& g_eps, bool accumulate_params = true);

  std::vector<nn::Param*> params();
  const ScoreNetworkConfig& config() const { return cfg_; }

 private:
  ScoreNetworkConfig cfg_;
  nn::Conv2d conv_in_, enc1_, enc2_, mid_, dec1_, conv_out_;
  nn::Dense temb_mlp_;
  nn::Dense d1_, d2_, d3_, d4_;
};

// ScoreModel adapter: s_theta(x, t) = -eps_theta(x, t) / sqrt(1 - alpha(t)).
class NetworkScoreModel : public ScoreModel {
 public:
  explicit NetworkScoreModel(ScoreNetwork& net) : net_(net) {}

  Tensor score(const DiffusionSpec& spec, const Tensor& x,
               std::span<const double> t) const override;
  Tensor score_vjp(const DiffusionSpec& spec, const Tensor& x, std::span<const double> t,
                   const Tensor& v) const override;

 private:
  ScoreNetwork& net_;
};

// dsm_loss with gradient accumulation into the network parameters. Draws
// the same rng sequence as dsm_loss, so values agree for equal streams.
double dsm_loss_grad(ScoreNetwork& net, const DiffusionSpec& spec, const Tensor& x0,
                     SMWeighting weighting, RngStream& rng);

enum class GradTarget { flow_input, score_params };

struct PriorLossResult {
  double loss = 0.0;
  Tensor gx_hat;  // dL/dx_hat in [0,1] units; zero when target=score_params
};

// The g_squared score-matching bound evaluated at flow outputs x_hat in
// [0,1] (mapped to diffusion space internally). Gradients flow only to the
// declared target: the flow input (score parameters untouched) or the score
// parameters (x_hat treated as data).
PriorLossResult prior_loss(ScoreNetwork& net, const DiffusionSpec& spec, const Tensor& x_hat,
                           GradTarget target, RngStream& rng);

}  // namespace flowdiff

#pragma once

#include "egmt/autodiff.hpp"
#include "egmt/entity.hpp"
#include "egmt/parameters.hpp"
#include "egmt/rng.hpp"

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace egmt {

struct ModelConfig {
  Index shallow_channels = 32;
  Index patch = 16;
  Index heads = 4;
  Index ffn_expansion = 2;
  Index num_labels = 9;
  double mask_ratio = 0.6;
  double leaky_slope = 0.2;
  double norm_eps = 1e-5;
  bool use_ca = true;
  bool use_ta = true;
  bool use_cgha = true;
  bool use_text = true;

  Index head_dim() const { return shallow_channels / heads; }
  Index shared_channels() const { return 2 * shallow_channels; }
  // (in, out) channels of the three reconstructor convolutions.
  std::array<std::pair<Index, Index>, 3> reconstructor_plan() const {
    const Index c = shallow_channels;
    return {{{2 * c, c}, {c, c / 2}, {c / 2, 1}}};
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Every trainable tensor, keyed by dotted name (see init_params for the layout).
template <typename Scalar>
ParameterSet<Scalar> init_params(const ModelConfig& cfg, Rng& rng);

// Parameters placed on a tape as leaves.
template <typename Scalar>
class BoundParams {
 public:
  BoundParams(Tape<Scalar>& tape, const ParameterSet<Scalar>& params, bool requires_grad);

  Var<Scalar> operator[](const std::string& name) const;
  Tape<Scalar>& tape() const { return *tape_; }
  // Gradients of every bound parameter after Tape::backward, in parameter order.
  ParameterSet<Scalar> gradients() const;

 private:
  Tape<Scalar>* tape_;
  std::vector<std::pair<std::string, Var<Scalar>>> vars_;
  std::map<std::string, std::size_t> index_;
};

// Output of an attention block plus its pre-FFN residual sum (input + attention), both C×H×W.
template <typename Scalar>
struct BlockOutput {
  Var<Scalar> output;
  Var<Scalar> attended;
};

template <typename Scalar>
struct CghaOutput {
  Var<Scalar> entity_guided;   // first stage result, C×H×W
  Var<Scalar> output;          // second stage result, C×H×W
  Var<Scalar> entity_context;  // first stage attention output, (H·W)×C, before the residual
};

template <typename Scalar>
struct ForwardTrace {
  Var<Scalar> shallow_ir, shallow_vi;
  Var<Scalar> channel_ir, channel_vi;
  Var<Scalar> token_ir, token_vi;
  Var<Scalar> entity_guided_ir, entity_guided_vi;  // invalid when CGHA is off
  Var<Scalar> interacted_ir, interacted_vi;
  Var<Scalar> shared;
  Var<Scalar> fused;
  Var<Scalar> probabilities;
};

template <typename Scalar>
Var<Scalar> encode_shallow(const BoundParams<Scalar>& p, const Var<Scalar>& image, Modality modality,
                           const ModelConfig& cfg);

template <typename Scalar>
std::pair<BlockOutput<Scalar>, BlockOutput<Scalar>> channel_cross_attention(const BoundParams<Scalar>& p,
                                                                            const Var<Scalar>& ir, const Var<Scalar>& vi,
                                                                            const ModelConfig& cfg,
                                                                            const AttentionProbe<Scalar>* probe = nullptr);

template <typename Scalar>
BlockOutput<Scalar> token_self_attention(const BoundParams<Scalar>& p, const Var<Scalar>& x, Modality modality,
                                         const ModelConfig& cfg, const AttentionProbe<Scalar>* probe = nullptr);

template <typename Scalar>
CghaOutput<Scalar> cgha(const BoundParams<Scalar>& p, const Var<Scalar>& x, const Var<Scalar>& entities,
                        Modality modality, const ModelConfig& cfg, const AttentionProbe<Scalar>* probe = nullptr);

template <typename Scalar>
Var<Scalar> assemble_shared(const Var<Scalar>& ir, const Var<Scalar>& vi);

template <typename Scalar>
Var<Scalar> reconstruct(const BoundParams<Scalar>& p, const Var<Scalar>& shared, const ModelConfig& cfg);

// Sigmoid probabilities for the label head. `entities` may be null (text disabled).
template <typename Scalar>
Var<Scalar> classify(const BoundParams<Scalar>& p, const Var<Scalar>& shared, const Var<Scalar>* entities,
                     const ModelConfig& cfg, bool training, Rng* rng);

template <typename Scalar>
ForwardTrace<Scalar> forward_full(const BoundParams<Scalar>& p, const Tensor<Scalar>& ir, const Tensor<Scalar>& vi,
                                  const Tensor<Scalar>& entities, const ModelConfig& cfg, bool training, Rng* rng,
                                  const AttentionProbe<Scalar>* probe = nullptr);

// Rows of an E×D matrix in lexicographic order; attention and pooling over
// entities consume this order so results do not depend on annotation order.
template <typename Scalar>
std::vector<Index> canonical_row_order(const Tensor<Scalar>& m);

}  // namespace egmt

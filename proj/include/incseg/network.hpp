#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "incseg/dataset.hpp"
#include "incseg/io.hpp"
#include "incseg/layers.hpp"

namespace incseg {

/// train: dropout on, batch statistics. eval: dropout off, running statistics.
/// mc: dropout on, running statistics (Monte-Carlo sampling).
enum class Mode { train, eval, mc };

struct NetworkConfig {
  int levels = 3;
  int base_filters = 8;
  int convs_per_level = 2;
  Real dropout_rate = 0.3;
  int input_height = 64;
  int input_width = 64;
  Real bn_momentum = 0.1;
  Real bn_eps = 1e-5;

  /// base_filters * 2^level
  int channels(int level) const { return base_filters << level; }
  int coarsest_height() const { return input_height >> (levels - 1); }
  int coarsest_width() const { return input_width >> (levels - 1); }
  void validate() const;

  json to_json() const;
  static NetworkConfig from_json(const json& j);
  bool operator==(const NetworkConfig&) const = default;
};

struct ForwardResult {
  std::vector<ClassId> heads;
  std::vector<Tensor> logits;         // (N, 2, H, W) per head
  std::vector<Tensor> probabilities;  // softmax of logits
  Tensor abstraction;                 // second layer at the coarsest level
  std::vector<Tensor> encoder_features;  // last block output of every encoder level

  const Tensor& probs(ClassId c) const;
  const Tensor& logit(ClassId c) const;
};

struct BlockCache {
  Tensor input;
  Tensor output;
  BatchNormCache bn;
};

/// Activations recorded by forward_train for backward.
struct Tape {
  std::vector<std::vector<BlockCache>> encoder;
  std::vector<std::vector<int>> pool_argmax;  // per level >= 1
  std::vector<std::vector<Real>> dropout;     // [0] coarsest, [1 + d] decoder d
  std::vector<BlockCache> up;
  std::vector<std::vector<BlockCache>> decoder;
  Tensor features;
  bool frozen_bn = false;
};

class SegmentationNetwork {
 public:
  SegmentationNetwork() = default;
  SegmentationNetwork(NetworkConfig config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  std::uint64_t body_seed() const { return body_seed_; }

  /// Appends a freshly initialized two-channel head.
  void add_head(ClassId id, std::uint64_t seed);
  bool has_head(ClassId id) const;
  std::vector<ClassId> head_ids() const;
  std::map<ClassId, std::uint64_t> head_seeds() const;
  std::size_t num_heads() const { return heads_.size(); }

  /// Inference-only forward (eval or mc); does not mutate the network. mc requires rng.
  ForwardResult forward(const Tensor& x, Mode mode, Rng* rng = nullptr) const;
  /// Training forward; records the tape and updates running statistics unless frozen_bn.
  ForwardResult forward_train(const Tensor& x, Rng& rng, Tape& tape, bool frozen_bn = false);
  /// Accumulates gradients for the given per-head logit gradients (missing heads count as zero).
  void backward(const Tape& tape, const std::map<ClassId, Tensor>& dlogits);

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Every stored tensor, trainable or not, in a stable order.
  std::vector<std::pair<std::string, std::vector<Real>*>> state();
  std::vector<std::pair<std::string, const std::vector<Real>*>> state() const;

  /// Direct head access (used by tests that zero or audit a head).
  Conv2d& head(ClassId id);
  const Conv2d& head(ClassId id) const;

 private:
  struct Block {
    Conv2d conv;
    BatchNorm2d bn;
  };
  struct Head {
    ClassId id;
    std::uint64_t seed = 0;
    Conv2d conv;
  };

  void check_input(const Tensor& x) const;
  template <class Self>
  static ForwardResult run(Self& self, const Tensor& x, Mode mode, Rng* rng, Tape* tape, bool frozen_bn);
  static Tensor block_backward(Block& b, const BlockCache& cache, Tensor dy, bool frozen_bn, bool need_dx);

  NetworkConfig config_;
  std::uint64_t body_seed_ = 0;
  std::vector<std::vector<Block>> encoder_;
  std::vector<Block> up_;
  std::vector<std::vector<Block>> decoder_;
  std::vector<Head> heads_;
};

/// A saved network plus its registry and free-form metadata (seeds, step).
struct Checkpoint {
  SegmentationNetwork network;
  ClassRegistry registry;
  json metadata = json::object();
};

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);
/// Loads parameters into an existing network of identical configuration and head set.
void load_parameters_into(const fs::path& path, SegmentationNetwork& net);
std::string parameter_hash(const SegmentationNetwork& net);

}  // namespace incseg

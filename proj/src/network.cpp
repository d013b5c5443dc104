#include "incseg/network.hpp"

#include <cstring>
#include <sstream>
#include <type_traits>

namespace incseg {

void NetworkConfig::validate() const {
  if (levels < 2) throw Error(ErrorKind::config, "network needs at least 2 levels");
  if (base_filters < 1) throw Error(ErrorKind::config, "base_filters must be >= 1");
  if (convs_per_level < 1) throw Error(ErrorKind::config, "convs_per_level must be >= 1");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) throw Error(ErrorKind::config, "dropout_rate must be in [0, 1)");
  const int div = 1 << (levels - 1);
  if (input_height <= 0 || input_width <= 0 || input_height % div != 0 || input_width % div != 0) {
    throw Error(ErrorKind::config, "input shape must be divisible by 2^(levels-1) = " + std::to_string(div));
  }
}

json NetworkConfig::to_json() const {
  return {{"levels", levels},
          {"base_filters", base_filters},
          {"convs_per_level", convs_per_level},
          {"dropout_rate", dropout_rate},
          {"input_height", input_height},
          {"input_width", input_width},
          {"bn_momentum", bn_momentum},
          {"bn_eps", bn_eps}};
}

NetworkConfig NetworkConfig::from_json(const json& j) {
  NetworkConfig c;
  c.levels = j.at("levels");
  c.base_filters = j.at("base_filters");
  c.convs_per_level = j.at("convs_per_level");
  c.dropout_rate = j.at("dropout_rate");
  c.input_height = j.at("input_height");
  c.input_width = j.at("input_width");
  c.bn_momentum = j.at("bn_momentum");
  c.bn_eps = j.at("bn_eps");
  c.validate();
  return c;
}

const Tensor& ForwardResult::probs(ClassId c) const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == c) return probabilities[i];
  }
  throw Error("no head for class " + to_string(c));
}

const Tensor& ForwardResult::logit(ClassId c) const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == c) return logits[i];
  }
  throw Error("no head for class " + to_string(c));
}

SegmentationNetwork::SegmentationNetwork(NetworkConfig config, std::uint64_t seed)
    : config_(config), body_seed_(seed) {
  config_.validate();
  Rng rng(seed);
  const int L = config_.levels;
  auto make_block = [&](const std::string& name, int in, int out) {
    Block b{Conv2d(name + ".conv", in, out, 3, false), BatchNorm2d(name + ".bn", out, config_.bn_momentum, config_.bn_eps)};
    b.conv.init(rng, InitScheme::he_uniform);
    return b;
  };
  int in = 1;
  encoder_.resize(L);
  for (int l = 0; l < L; ++l) {
    const int ch = config_.channels(l);
    for (int i = 0; i < config_.convs_per_level; ++i) {
      encoder_[l].push_back(make_block("enc" + std::to_string(l) + "." + std::to_string(i), in, ch));
      in = ch;
    }
  }
  decoder_.resize(L - 1);
  for (int d = 0; d < L - 1; ++d) {
    const int l = L - 2 - d;
    const int ch = config_.channels(l);
    up_.push_back(make_block("up" + std::to_string(l), in, ch));
    int cin = 2 * ch;
    for (int i = 0; i < config_.convs_per_level; ++i) {
      decoder_[d].push_back(make_block("dec" + std::to_string(l) + "." + std::to_string(i), cin, ch));
      cin = ch;
    }
    in = ch;
  }
}

void SegmentationNetwork::add_head(ClassId id, std::uint64_t seed) {
  if (has_head(id)) throw Error("network already has a head for class " + to_string(id));
  Head h{id, seed, Conv2d("head" + to_string(id), config_.channels(0), 2, 1, true)};
  Rng rng(seed);
  h.conv.init(rng, InitScheme::fan_in_uniform);
  heads_.push_back(std::move(h));
}

bool SegmentationNetwork::has_head(ClassId id) const {
  for (const auto& h : heads_) {
    if (h.id == id) return true;
  }
  return false;
}

std::vector<ClassId> SegmentationNetwork::head_ids() const {
  std::vector<ClassId> out;
  for (const auto& h : heads_) out.push_back(h.id);
  return out;
}

std::map<ClassId, std::uint64_t> SegmentationNetwork::head_seeds() const {
  std::map<ClassId, std::uint64_t> out;
  for (const auto& h : heads_) out[h.id] = h.seed;
  return out;
}

Conv2d& SegmentationNetwork::head(ClassId id) {
  for (auto& h : heads_) {
    if (h.id == id) return h.conv;
  }
  throw Error("no head for class " + to_string(id));
}

const Conv2d& SegmentationNetwork::head(ClassId id) const {
  return const_cast<SegmentationNetwork*>(this)->head(id);
}

void SegmentationNetwork::check_input(const Tensor& x) const {
  if (heads_.empty()) throw Error("network has no heads");
  if (x.c() != 1 || x.h() != config_.input_height || x.w() != config_.input_width || x.n() < 1) {
    std::ostringstream os;
    os << "input shape (" << x.n() << "," << x.c() << "," << x.h() << "," << x.w() << ") does not match network input ("
       << config_.input_height << "x" << config_.input_width << ")";
    throw Error(os.str());
  }
}

template <class Self>
ForwardResult SegmentationNetwork::run(Self& self, const Tensor& x, Mode mode, Rng* rng, Tape* tape, bool frozen_bn) {
  constexpr bool mutable_self = !std::is_const_v<Self>;
  self.check_input(x);
  const auto& cfg = self.config_;
  const int L = cfg.levels;
  const bool dropout_on = (mode == Mode::train || mode == Mode::mc) && cfg.dropout_rate > 0;
  if (dropout_on && rng == nullptr) throw Error("dropout sampling needs a random generator");

  auto block = [&](auto& b, const Tensor& in, BlockCache* cache) {
    Tensor z, y;
    b.conv.forward(in, z);
    if (mode == Mode::train && !frozen_bn) {
      if constexpr (mutable_self) {
        b.bn.forward_train(z, y, cache->bn);
      }
    } else {
      b.bn.forward_eval(z, y, cache != nullptr ? &cache->bn : nullptr);
    }
    relu_forward(y);
    if (cache != nullptr) {
      cache->input = in;
      cache->output = y;
    }
    return y;
  };
  auto dropout = [&](Tensor& t) {
    if (!dropout_on) return;
    auto scale = sample_spatial_dropout(t.n(), t.c(), cfg.dropout_rate, *rng);
    apply_channel_scale(t, scale);
    if (tape != nullptr) tape->dropout.push_back(std::move(scale));
  };

  if (tape != nullptr) {
    *tape = Tape{};
    tape->frozen_bn = frozen_bn;
    tape->encoder.resize(L);
    tape->pool_argmax.resize(L);
    tape->decoder.resize(L - 1);
    tape->up.resize(L - 1);
  }

  ForwardResult result;
  std::vector<Tensor> skips(L);
  Tensor h = x;
  const int abstraction_index = std::min(1, cfg.convs_per_level - 1);
  for (int l = 0; l < L; ++l) {
    if (l > 0) {
      Tensor pooled;
      maxpool2_forward(h, pooled, tape != nullptr ? &tape->pool_argmax[l] : nullptr);
      h = std::move(pooled);
    }
    if (tape != nullptr) tape->encoder[l].resize(self.encoder_[l].size());
    for (std::size_t i = 0; i < self.encoder_[l].size(); ++i) {
      h = block(self.encoder_[l][i], h, tape != nullptr ? &tape->encoder[l][i] : nullptr);
      if (l == L - 1 && static_cast<int>(i) == abstraction_index) result.abstraction = h;
    }
    skips[l] = h;
    result.encoder_features.push_back(h);
  }
  dropout(h);
  for (int d = 0; d < L - 1; ++d) {
    const int l = L - 2 - d;
    Tensor u;
    upsample2_forward(h, u);
    u = block(self.up_[d], u, tape != nullptr ? &tape->up[d] : nullptr);
    Tensor cat = concat_channels(skips[l], u);
    dropout(cat);
    if (tape != nullptr) tape->decoder[d].resize(self.decoder_[d].size());
    for (std::size_t i = 0; i < self.decoder_[d].size(); ++i) {
      cat = block(self.decoder_[d][i], cat, tape != nullptr ? &tape->decoder[d][i] : nullptr);
    }
    h = std::move(cat);
  }
  for (const auto& head : self.heads_) {
    Tensor z;
    head.conv.forward(h, z);
    result.heads.push_back(head.id);
    result.probabilities.push_back(softmax2(z));
    result.logits.push_back(std::move(z));
  }
  if (tape != nullptr) tape->features = std::move(h);
  return result;
}

ForwardResult SegmentationNetwork::forward(const Tensor& x, Mode mode, Rng* rng) const {
  if (mode == Mode::train) throw Error("use forward_train for training-mode passes");
  return run(*this, x, mode, rng, nullptr, false);
}

ForwardResult SegmentationNetwork::forward_train(const Tensor& x, Rng& rng, Tape& tape, bool frozen_bn) {
  return run(*this, x, Mode::train, &rng, &tape, frozen_bn);
}

Tensor SegmentationNetwork::block_backward(Block& b, const BlockCache& cache, Tensor dy, bool frozen_bn, bool need_dx) {
  relu_backward(cache.output, dy);
  Tensor dz;
  if (frozen_bn) {
    b.bn.backward_eval(dy, cache.bn, dz);
  } else {
    b.bn.backward_train(dy, cache.bn, dz);
  }
  Tensor dx;
  b.conv.backward(cache.input, dz, need_dx ? &dx : nullptr);
  return dx;
}

void SegmentationNetwork::backward(const Tape& tape, const std::map<ClassId, Tensor>& dlogits) {
  const int L = config_.levels;
  const bool frozen = tape.frozen_bn;
  const Tensor& features = tape.features;
  Tensor dh(features.n(), features.c(), features.h(), features.w());
  for (auto& head : heads_) {
    auto it = dlogits.find(head.id);
    Tensor zero;
    const Tensor* g = nullptr;
    if (it != dlogits.end()) {
      g = &it->second;
    } else {
      zero = Tensor(features.n(), 2, features.h(), features.w());
      g = &zero;
    }
    Tensor dfeat;
    head.conv.backward(features, *g, &dfeat);
    auto& acc = dh.values();
    const auto& add = dfeat.values();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += add[k];
  }

  const bool dropout_on = !tape.dropout.empty();
  std::vector<Tensor> dskip(L);
  for (int d = L - 2; d >= 0; --d) {
    const int l = L - 2 - d;
    for (int i = static_cast<int>(decoder_[d].size()) - 1; i >= 0; --i) {
      dh = block_backward(decoder_[d][i], tape.decoder[d][i], std::move(dh), frozen, true);
    }
    if (dropout_on) apply_channel_scale(dh, tape.dropout[1 + d]);
    Tensor du;
    split_channels(dh, config_.channels(l), dskip[l], du);
    du = block_backward(up_[d], tape.up[d], std::move(du), frozen, true);
    upsample2_backward(du, dh);
  }
  if (dropout_on) apply_channel_scale(dh, tape.dropout[0]);

  for (int l = L - 1; l >= 0; --l) {
    if (l < L - 1) {
      auto& acc = dh.values();
      const auto& add = dskip[l].values();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += add[k];
    }
    for (int i = static_cast<int>(encoder_[l].size()) - 1; i >= 0; --i) {
      const bool need_dx = !(l == 0 && i == 0);
      dh = block_backward(encoder_[l][i], tape.encoder[l][i], std::move(dh), frozen, need_dx);
    }
    if (l > 0) {
      const auto& below = tape.encoder[l - 1].back().output;
      Tensor dprev;
      maxpool2_backward(dh, tape.pool_argmax[l], below.h(), below.w(), dprev);
      dh = std::move(dprev);
    }
  }
}

std::vector<Param*> SegmentationNetwork::parameters() {
  std::vector<Param*> out;
  auto add_block = [&](Block& b) {
    out.push_back(&b.conv.weight());
    out.push_back(&b.bn.gamma());
    out.push_back(&b.bn.beta());
  };
  for (auto& level : encoder_) {
    for (auto& b : level) add_block(b);
  }
  for (std::size_t d = 0; d < up_.size(); ++d) {
    add_block(up_[d]);
    for (auto& b : decoder_[d]) add_block(b);
  }
  for (auto& h : heads_) {
    out.push_back(&h.conv.weight());
    out.push_back(&h.conv.bias());
  }
  return out;
}

std::vector<const Param*> SegmentationNetwork::parameters() const {
  auto mut = const_cast<SegmentationNetwork*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t SegmentationNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

void SegmentationNetwork::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

std::vector<std::pair<std::string, std::vector<Real>*>> SegmentationNetwork::state() {
  std::vector<std::pair<std::string, std::vector<Real>*>> out;
  auto add_block = [&](Block& b) {
    out.emplace_back(b.conv.weight().name, &b.conv.weight().value);
    out.emplace_back(b.bn.gamma().name, &b.bn.gamma().value);
    out.emplace_back(b.bn.beta().name, &b.bn.beta().value);
    const auto prefix = b.bn.gamma().name.substr(0, b.bn.gamma().name.size() - 6);
    out.emplace_back(prefix + ".running_mean", &b.bn.running_mean());
    out.emplace_back(prefix + ".running_var", &b.bn.running_var());
  };
  for (auto& level : encoder_) {
    for (auto& b : level) add_block(b);
  }
  for (std::size_t d = 0; d < up_.size(); ++d) {
    add_block(up_[d]);
    for (auto& b : decoder_[d]) add_block(b);
  }
  for (auto& h : heads_) {
    out.emplace_back(h.conv.weight().name, &h.conv.weight().value);
    out.emplace_back(h.conv.bias().name, &h.conv.bias().value);
  }
  return out;
}

std::vector<std::pair<std::string, const std::vector<Real>*>> SegmentationNetwork::state() const {
  std::vector<std::pair<std::string, const std::vector<Real>*>> out;
  for (auto& [name, v] : const_cast<SegmentationNetwork*>(this)->state()) out.emplace_back(name, v);
  return out;
}

namespace {

constexpr std::string_view kMagic = "INCSEG-CHECKPOINT";
constexpr int kCheckpointVersion = 1;

std::string blob_of(const SegmentationNetwork& net, json& tensors) {
  std::string blob;
  tensors = json::array();
  for (const auto& [name, values] : net.state()) {
    tensors.push_back({{"name", name}, {"count", values->size()}});
    blob.append(reinterpret_cast<const char*>(values->data()), values->size() * sizeof(Real));
  }
  return blob;
}

struct ParsedCheckpoint {
  json manifest;
  std::string blob;
};

ParsedCheckpoint parse_checkpoint_file(const fs::path& path) {
  const auto bytes = read_text_file(path);
  auto corrupt = [&](const std::string& why) {
    return Error(ErrorKind::runtime, "corrupt checkpoint " + path.string() + ": " + why);
  };
  const auto first = bytes.find('\n');
  if (first == std::string::npos || bytes.compare(0, first, kMagic) != 0) throw corrupt("bad magic");
  const auto second = bytes.find('\n', first + 1);
  if (second == std::string::npos) throw corrupt("truncated manifest");
  ParsedCheckpoint out;
  try {
    out.manifest = json::parse(bytes.substr(first + 1, second - first - 1));
  } catch (const json::exception& e) {
    throw corrupt(std::string("manifest: ") + e.what());
  }
  if (out.manifest.value("version", 0) != kCheckpointVersion) throw corrupt("unsupported version");
  out.blob = bytes.substr(second + 1);
  if (out.blob.size() != out.manifest.at("blob_bytes").get<std::size_t>()) throw corrupt("truncated parameter blob");
  if (sha256_hex(out.blob) != out.manifest.at("blob_sha256").get<std::string>()) throw corrupt("parameter checksum mismatch");
  return out;
}

void fill_state(SegmentationNetwork& net, const json& tensors, const std::string& blob, const fs::path& path) {
  auto state = net.state();
  if (tensors.size() != state.size()) {
    throw Error(ErrorKind::runtime, "checkpoint " + path.string() + " does not match the network architecture");
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& t = tensors[i];
    auto& [name, values] = state[i];
    if (t.at("name").get<std::string>() != name || t.at("count").get<std::size_t>() != values->size()) {
      throw Error(ErrorKind::runtime, "checkpoint tensor " + t.at("name").get<std::string>() + " does not match " + name);
    }
    std::memcpy(values->data(), blob.data() + offset, values->size() * sizeof(Real));
    offset += values->size() * sizeof(Real);
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json tensors;
  const auto blob = blob_of(ckpt.network, tensors);
  json heads = json::array();
  const auto seeds = ckpt.network.head_seeds();
  for (ClassId id : ckpt.network.head_ids()) heads.push_back({{"id", id.value}, {"seed", seeds.at(id)}});
  json manifest = {{"version", kCheckpointVersion},
                   {"config", ckpt.network.config().to_json()},
                   {"body_seed", ckpt.network.body_seed()},
                   {"heads", heads},
                   {"registry", ckpt.registry.to_json()},
                   {"metadata", ckpt.metadata},
                   {"tensors", tensors},
                   {"blob_bytes", blob.size()},
                   {"blob_sha256", sha256_hex(blob)}};
  std::string out(kMagic);
  out += "\n";
  out += manifest.dump();
  out += "\n";
  out += blob;
  write_text_file(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  auto parsed = parse_checkpoint_file(path);
  const auto& m = parsed.manifest;
  try {
    Checkpoint ckpt;
    ckpt.network = SegmentationNetwork(NetworkConfig::from_json(m.at("config")), m.at("body_seed").get<std::uint64_t>());
    for (const auto& h : m.at("heads")) ckpt.network.add_head(ClassId{h.at("id").get<int>()}, h.at("seed").get<std::uint64_t>());
    ckpt.registry = ClassRegistry::from_json(m.at("registry"));
    ckpt.metadata = m.at("metadata");
    fill_state(ckpt.network, m.at("tensors"), parsed.blob, path);
    return ckpt;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::runtime, "corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

void load_parameters_into(const fs::path& path, SegmentationNetwork& net) {
  auto parsed = parse_checkpoint_file(path);
  if (NetworkConfig::from_json(parsed.manifest.at("config")) != net.config()) {
    throw Error(ErrorKind::config, "checkpoint " + path.string() + " was saved with a different network configuration");
  }
  fill_state(net, parsed.manifest.at("tensors"), parsed.blob, path);
}

std::string parameter_hash(const SegmentationNetwork& net) {
  json tensors;
  return sha256_hex(blob_of(net, tensors));
}

}  // namespace incseg

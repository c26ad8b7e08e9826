#pragma once

#include <array>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "psnet/common.hpp"
#include "psnet/layers.hpp"
#include "psnet/rng.hpp"
#include "psnet/tensor.hpp"

namespace psnet {

/// Declarative PS-Net configuration: a U-Net-shaped trunk entered through a
/// strided-convolution stem, one global-max-pooling tap per depth feeding
/// three dense classification heads, and a deconvolution back to full
/// resolution for the segmentation head.
struct NetworkSpec {
  std::array<int, 3> input_shape{32, 32, 32};
  int input_channels = 4;
  std::array<int, 3> stem_kernel{9, 9, 9};
  std::array<int, 3> stem_stride{3, 3, 3};
  int depths = 3;
  std::vector<int> filter_schedule{8, 16, 32};
  std::array<int, 3> conv_kernel{3, 3, 3};
  int convs_per_level = 1;
  double dropout_rate = 0.25;
  double l2_strength = 1e-5;
  std::vector<std::pair<std::string, int>> classification_heads{
      {"idh", 2}, {"codeletion", 2}, {"grade", 3}};
  int segmentation_classes = 2;

  void validate() const {
    if (depths < 2) throw ConfigError("network depths must be >= 2");
    if (static_cast<int>(filter_schedule.size()) != depths)
      throw ConfigError(
          "filter_schedule length (" +
          std::to_string(filter_schedule.size()) +
          ") must equal depths (" + std::to_string(depths) + ")");
    for (int f : filter_schedule)
      if (f < 1) throw ConfigError("filter counts must be >= 1");
    if (convs_per_level < 1)
      throw ConfigError("convs_per_level must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("dropout_rate must be in [0,1)");
    if (l2_strength < 0.0) throw ConfigError("l2_strength must be >= 0");
    if (segmentation_classes != 2)
      throw ConfigError("segmentation output is binary (2 classes)");
  }

  /// The full-scale configuration: 152x182x145 atlas-cropped inputs, four
  /// depths with a doubling filter schedule. See count_parameters notes in
  /// the README for how its size compares to the published model.
  static NetworkSpec paper_preset() {
    NetworkSpec s;
    s.input_shape = {152, 182, 145};
    s.depths = 4;
    s.filter_schedule = {64, 128, 256, 512};
    s.convs_per_level = 1;
    s.dropout_rate = 0.25;
    s.l2_strength = 1e-5;
    return s;
  }

  /// Desk-scale configuration used by the synthetic end-to-end runs.
  static NetworkSpec toy_preset() {
    NetworkSpec s;
    s.input_shape = {32, 32, 32};
    s.depths = 3;
    s.filter_schedule = {8, 16, 32};
    s.convs_per_level = 1;
    s.dropout_rate = 0.1;
    s.l2_strength = 1e-6;
    return s;
  }

  json to_json() const {
    json j;
    j["input_shape"] = input_shape;
    j["input_channels"] = input_channels;
    j["stem_kernel"] = stem_kernel;
    j["stem_stride"] = stem_stride;
    j["depths"] = depths;
    j["filter_schedule"] = filter_schedule;
    j["conv_kernel"] = conv_kernel;
    j["convs_per_level"] = convs_per_level;
    j["dropout_rate"] = dropout_rate;
    j["l2_strength"] = l2_strength;
    json heads = json::object();
    for (const auto& [name, classes] : classification_heads)
      heads[name] = classes;
    j["classification_heads"] = heads;
    j["segmentation_classes"] = segmentation_classes;
    return j;
  }

  static NetworkSpec from_json(const json& j) {
    NetworkSpec s;
    s.input_shape = j.at("input_shape").get<std::array<int, 3>>();
    s.input_channels = j.at("input_channels").get<int>();
    s.stem_kernel = j.at("stem_kernel").get<std::array<int, 3>>();
    s.stem_stride = j.at("stem_stride").get<std::array<int, 3>>();
    s.depths = j.at("depths").get<int>();
    s.filter_schedule = j.at("filter_schedule").get<std::vector<int>>();
    s.conv_kernel = j.at("conv_kernel").get<std::array<int, 3>>();
    s.convs_per_level = j.at("convs_per_level").get<int>();
    s.dropout_rate = j.at("dropout_rate").get<double>();
    s.l2_strength = j.at("l2_strength").get<double>();
    s.classification_heads.clear();
    for (const std::string& name : {"idh", "codeletion", "grade"})
      s.classification_heads.emplace_back(
          name, j.at("classification_heads").at(name).get<int>());
    s.segmentation_classes = j.at("segmentation_classes").get<int>();
    return s;
  }
};

/// One registry row per layer: role, feature-map shape, parameter counts.
struct LayerInfo {
  std::string name;
  std::string role;
  int channels = 0;
  std::array<int, 3> shape{0, 0, 0};  // spatial; {0,0,0} for vector outputs
  size_t trainable = 0;
  size_t non_trainable = 0;
};

template <class T>
struct NetOutputs {
  Tensor<T> idh, codeletion, grade;  // (N, classes) probabilities
  Tensor<T> idh_logits, codeletion_logits, grade_logits;
  Tensor<T> seg;         // (N, 2, X, Y, Z) probabilities
  Tensor<T> seg_logits;  // same shape, pre-softmax
};

template <class T>
struct HeadGradients {
  // Gradients w.r.t. pre-softmax logits (the natural space for the losses
  // once the softmax Jacobian has been applied).
  Tensor<T> idh, codeletion, grade;
  Tensor<T> seg;
};

template <class T>
class PSNet {
 public:
  explicit PSNet(const NetworkSpec& spec) : spec_(spec) {
    spec_.validate();
    build();
  }

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<LayerInfo>& registry() const { return registry_; }

  const LayerInfo& registry_entry(const std::string& name) const {
    for (const auto& e : registry_)
      if (e.name == name) return e;
    std::string names;
    for (const auto& e : registry_)
      names += (names.empty() ? "" : ", ") + e.name;
    throw DataError("unknown layer '" + name + "' (registry: " + names + ")");
  }

  /// Deterministic weight initialization from a seed.
  void init(uint64_t seed) {
    Rng rng(seed);
    stem_->init(rng);
    for (auto& c : enc_convs_) c->init(rng);
    for (auto& u : upconvs_) u->init(rng);
    for (auto& c : dec_convs_) c->init(rng);
    final_deconv_->init(rng);
    final_conv_->init(rng);
    for (auto& h : heads_) h->init(rng);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    auto add = [&](std::vector<ParamRef<T>> v) {
      for (auto& p : v) out.push_back(p);
    };
    add(stem_->params());
    add(stem_bn_->params());
    for (auto& c : enc_convs_) add(c->params());
    for (auto& b : enc_bns_) add(b->params());
    for (auto& u : upconvs_) add(u->params());
    for (auto& c : dec_convs_) add(c->params());
    for (auto& b : dec_bns_) add(b->params());
    add(final_deconv_->params());
    add(final_conv_->params());
    for (auto& h : heads_) add(h->params());
    return out;
  }

  /// (trainable, non_trainable) parameter counts.
  std::pair<size_t, size_t> count_parameters() {
    size_t t = 0, nt = 0;
    for (const auto& p : params()) {
      if (p.trainable)
        t += p.value->size();
      else
        nt += p.value->size();
    }
    return {t, nt};
  }

  /// Request capture of one conv layer's pre-activation output on the next
  /// forward pass (conv output incl. bias, before normalization/activation).
  void capture_layer(const std::string& name) {
    registry_entry(name);  // throws with the registry listing if unknown
    capture_name_ = name;
  }

  const Tensor<T>& captured() const { return captured_; }

  /// Full forward pass. Batch layout (N, C, X, Y, Z) with spatial dims equal
  /// to the spec input shape.
  NetOutputs<T> forward(const Tensor<T>& x, NetMode mode, Rng& rng) {
    if (x.rank() != 5 || x.dim(1) != spec_.input_channels ||
        x.dim(2) != spec_.input_shape[0] || x.dim(3) != spec_.input_shape[1] ||
        x.dim(4) != spec_.input_shape[2])
      throw DataError("forward: batch shape does not match the network spec");
    const int n = x.dim(0);
    const int depths = spec_.depths;

    auto maybe_capture = [&](const std::string& name, const Tensor<T>& t) {
      if (capture_name_ == name) captured_ = t;
    };

    Tensor<T> cur = stem_->forward(x);
    maybe_capture("stem", cur);
    cur = stem_bn_->forward(cur, mode);
    cur = stem_relu_.forward(cur);

    std::vector<Tensor<T>> enc_out(depths);
    Tensor<T> taps({n, total_features_});
    int feat_off = 0;
    for (int d = 0; d < depths; ++d) {
      if (d > 0) cur = pools_[d - 1].forward(cur);
      for (int j = 0; j < spec_.convs_per_level; ++j) {
        int li = d * spec_.convs_per_level + j;
        cur = enc_convs_[li]->forward(cur);
        maybe_capture(enc_convs_[li]->name(), cur);
        cur = enc_bns_[li]->forward(cur, mode);
        cur = enc_relus_[li].forward(cur);
      }
      cur = enc_drops_[d].forward(cur, mode, rng);
      enc_out[d] = cur;
      Tensor<T> tap = enc_taps_[d].forward(cur);
      for (int s = 0; s < n; ++s)
        for (int c = 0; c < spec_.filter_schedule[d]; ++c)
          taps.at(s, feat_off + c) = tap.at(s, c);
      feat_off += spec_.filter_schedule[d];
    }

    Tensor<T> u = enc_out[depths - 1];
    for (int i = 0; i < depths - 1; ++i) {
      int d = depths - 2 - i;  // decoder level
      std::array<int, 3> target = {enc_out[d].dim(2), enc_out[d].dim(3),
                                   enc_out[d].dim(4)};
      u = upconvs_[i]->forward(u, target);
      u = concat_channels(u, enc_out[d]);
      for (int j = 0; j < spec_.convs_per_level; ++j) {
        int li = i * spec_.convs_per_level + j;
        u = dec_convs_[li]->forward(u);
        maybe_capture(dec_convs_[li]->name(), u);
        u = dec_bns_[li]->forward(u, mode);
        u = dec_relus_[li].forward(u);
      }
    }

    u = final_deconv_->forward(u, spec_.input_shape);
    maybe_capture("final_deconv", u);
    u = final_relu_.forward(u);
    Tensor<T> seg_logits = final_conv_->forward(u);
    maybe_capture("final_conv", seg_logits);

    NetOutputs<T> out;
    out.seg_logits = seg_logits;
    out.seg = softmax_voxels(seg_logits);
    out.idh_logits = heads_[0]->forward(taps);
    out.codeletion_logits = heads_[1]->forward(taps);
    out.grade_logits = heads_[2]->forward(taps);
    out.idh = softmax_rows(out.idh_logits);
    out.codeletion = softmax_rows(out.codeletion_logits);
    out.grade = softmax_rows(out.grade_logits);
    capture_name_.clear();
    return out;
  }

  /// Backward pass from logit-space gradients; accumulates parameter
  /// gradients and returns the gradient w.r.t. the input batch.
  Tensor<T> backward(const HeadGradients<T>& g, bool need_input_grad = false) {
    const int depths = spec_.depths;
    const int n = g.idh.dim(0);

    Tensor<T> dfeat({n, total_features_});
    auto add_head = [&](int h, const Tensor<T>& dlogits) {
      Tensor<T> d = heads_[h]->backward(dlogits);
      for (size_t i = 0; i < d.size(); ++i) dfeat[i] += d[i];
    };
    add_head(0, g.idh);
    add_head(1, g.codeletion);
    add_head(2, g.grade);

    // Accumulators at each encoder level's (post-dropout) output.
    std::vector<Tensor<T>> acc(depths);
    int feat_off = 0;
    for (int d = 0; d < depths; ++d) {
      int f = spec_.filter_schedule[d];
      Tensor<T> dtap({n, f});
      for (int s = 0; s < n; ++s)
        for (int c = 0; c < f; ++c) dtap.at(s, c) = dfeat.at(s, feat_off + c);
      feat_off += f;
      acc[d] = enc_taps_[d].backward(dtap);
    }

    // Segmentation path back to the decoder output.
    Tensor<T> du = final_conv_->backward(g.seg);
    du = final_relu_.backward(du);
    du = final_deconv_->backward(du);

    // Decoder levels in reverse construction order.
    for (int i = depths - 2; i >= 0; --i) {
      int d = depths - 2 - i;
      for (int j = spec_.convs_per_level - 1; j >= 0; --j) {
        int li = i * spec_.convs_per_level + j;
        du = dec_relus_[li].backward(du);
        du = dec_bns_[li]->backward(du);
        du = dec_convs_[li]->backward(du);
      }
      auto [dup, dskip] = split_channels(du, spec_.filter_schedule[d]);
      for (size_t k = 0; k < dskip.size(); ++k) acc[d][k] += dskip[k];
      du = upconvs_[i]->backward(dup);
    }
    for (size_t k = 0; k < du.size(); ++k) acc[depths - 1][k] += du[k];

    // Encoder levels top-down.
    Tensor<T> gcur = std::move(acc[depths - 1]);
    for (int d = depths - 1; d >= 0; --d) {
      Tensor<T> t = enc_drops_[d].backward(gcur);
      for (int j = spec_.convs_per_level - 1; j >= 0; --j) {
        int li = d * spec_.convs_per_level + j;
        t = enc_relus_[li].backward(t);
        t = enc_bns_[li]->backward(t);
        t = enc_convs_[li]->backward(t);
      }
      if (d > 0) {
        Tensor<T> below = pools_[d - 1].backward(t);
        gcur = std::move(acc[d - 1]);
        for (size_t k = 0; k < below.size(); ++k) gcur[k] += below[k];
      } else {
        gcur = std::move(t);
      }
    }
    gcur = stem_relu_.backward(gcur);
    gcur = stem_bn_->backward(gcur);
    if (!need_input_grad) return Tensor<T>();
    return stem_->backward(gcur);
  }

  void zero_grads() {
    for (auto& p : params())
      if (p.grad) p.grad->fill(T(0));
  }

  /// Decoupled inverse ordering helper for the trainer: gradients of the l2
  /// kernel penalty (l2 * sum of squared conv kernel weights).
  double l2_penalty() {
    if (spec_.l2_strength == 0.0) return 0.0;
    double acc = 0.0;
    for (const auto& p : params())
      if (p.l2)
        for (size_t i = 0; i < p.value->size(); ++i)
          acc += static_cast<double>((*p.value)[i]) * (*p.value)[i];
    return spec_.l2_strength * acc;
  }

  void add_l2_gradients() {
    if (spec_.l2_strength == 0.0) return;
    const T two_l2 = static_cast<T>(2.0 * spec_.l2_strength);
    for (auto& p : params())
      if (p.l2 && p.grad)
        for (size_t i = 0; i < p.value->size(); ++i)
          (*p.grad)[i] += two_l2 * (*p.value)[i];
  }

  // -- checkpointing --------------------------------------------------------

  void save_checkpoint(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint '" + path + "'");
    const uint32_t magic = 0x434e5350;  // "PSNC"
    f.write(reinterpret_cast<const char*>(&magic), 4);
    auto ps = params();
    uint32_t count = static_cast<uint32_t>(ps.size());
    f.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& p : ps) {
      uint32_t len = static_cast<uint32_t>(p.name.size());
      f.write(reinterpret_cast<const char*>(&len), 4);
      f.write(p.name.data(), len);
      uint64_t n = p.value->size();
      f.write(reinterpret_cast<const char*>(&n), 8);
      std::vector<double> buf(p.value->size());
      for (size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<double>((*p.value)[i]);
      f.write(reinterpret_cast<const char*>(buf.data()), buf.size() * 8);
    }
    if (!f) throw DataError("short write to checkpoint '" + path + "'");
  }

  void load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path + "'");
    uint32_t magic = 0;
    f.read(reinterpret_cast<char*>(&magic), 4);
    if (magic != 0x434e5350)
      throw DataError("'" + path + "' is not a PS-Net checkpoint");
    uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 4);
    std::map<std::string, Tensor<T>*> by_name;
    for (auto& p : params()) by_name[p.name] = p.value;
    for (uint32_t i = 0; i < count; ++i) {
      uint32_t len = 0;
      f.read(reinterpret_cast<char*>(&len), 4);
      std::string name(len, '\0');
      f.read(name.data(), len);
      uint64_t n = 0;
      f.read(reinterpret_cast<char*>(&n), 8);
      std::vector<double> buf(n);
      f.read(reinterpret_cast<char*>(buf.data()), n * 8);
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw DataError("checkpoint '" + path + "' has unknown tensor '" +
                        name + "'");
      if (it->second->size() != n)
        throw DataError("checkpoint tensor '" + name + "' has " +
                        std::to_string(n) + " values, expected " +
                        std::to_string(it->second->size()));
      for (size_t k = 0; k < n; ++k)
        (*it->second)[k] = static_cast<T>(buf[k]);
    }
    if (!f) throw DataError("truncated checkpoint '" + path + "'");
  }

  /// In-memory weight snapshot (best-epoch restore).
  std::vector<Tensor<T>> snapshot_weights() {
    std::vector<Tensor<T>> out;
    for (auto& p : params()) out.push_back(*p.value);
    return out;
  }

  void restore_weights(const std::vector<Tensor<T>>& snap) {
    auto ps = params();
    if (snap.size() != ps.size())
      throw NumericError("weight snapshot size mismatch");
    for (size_t i = 0; i < ps.size(); ++i) *ps[i].value = snap[i];
  }

 private:
  void build() {
    const int depths = spec_.depths;
    const auto& F = spec_.filter_schedule;
    total_features_ = 0;
    for (int f : F) total_features_ += f;

    std::array<int, 3> shape = spec_.input_shape;
    auto stem_geom = ConvGeom::same(shape, spec_.stem_kernel, spec_.stem_stride);
    shape = stem_geom.out;

    stem_ = std::make_unique<Conv3D<T>>("stem", spec_.input_channels, F[0],
                                        spec_.stem_kernel, spec_.stem_stride,
                                        spec_.l2_strength > 0.0);
    stem_bn_ = std::make_unique<BatchNorm3D<T>>("stem_bn", F[0]);
    add_registry("stem", "stem", F[0], shape, stem_->trainable_params(), 0);
    add_registry("stem_bn", "batchnorm", F[0], shape, 2 * F[0], 2 * F[0]);

    int in_ch = F[0];
    std::vector<std::array<int, 3>> level_shapes(depths);
    for (int d = 0; d < depths; ++d) {
      if (d > 0) {
        for (int dim = 0; dim < 3; ++dim)
          if (shape[dim] < 2)
            throw ConfigError(
                "network too deep for the input: dimension " +
                std::to_string(dim) + " has size 1 entering depth " +
                std::to_string(d + 1) + " and cannot be pooled");
        MaxPool3D<T> pool;
        shape = pool.output_shape(shape);
        pools_.emplace_back();
        add_registry("pool" + std::to_string(d), "pool", in_ch, shape, 0, 0);
      }
      for (int j = 0; j < spec_.convs_per_level; ++j) {
        std::string base =
            "enc" + std::to_string(d + 1) +
            (spec_.convs_per_level > 1 ? "_conv" + std::to_string(j + 1)
                                       : "_conv");
        enc_convs_.push_back(std::make_unique<Conv3D<T>>(
            base, in_ch, F[d], spec_.conv_kernel, std::array<int, 3>{1, 1, 1},
            spec_.l2_strength > 0.0));
        enc_bns_.push_back(std::make_unique<BatchNorm3D<T>>(base + "_bn", F[d]));
        enc_relus_.emplace_back();
        add_registry(base, "encoder_conv", F[d], shape,
                     enc_convs_.back()->trainable_params(), 0);
        add_registry(base + "_bn", "batchnorm", F[d], shape, 2 * F[d],
                     2 * F[d]);
        in_ch = F[d];
      }
      enc_drops_.emplace_back(spec_.dropout_rate);
      enc_taps_.emplace_back();
      add_registry("enc" + std::to_string(d + 1) + "_dropout", "dropout",
                   F[d], shape, 0, 0);
      add_registry("enc" + std::to_string(d + 1) + "_tap", "global_max_tap",
                   F[d], {0, 0, 0}, 0, 0);
      level_shapes[d] = shape;
    }

    for (int i = 0; i < depths - 1; ++i) {
      int d = depths - 2 - i;
      std::string uname = "up" + std::to_string(d + 1);
      upconvs_.push_back(std::make_unique<ConvTranspose3D<T>>(
          uname, in_ch, F[d], spec_.conv_kernel, std::array<int, 3>{2, 2, 2},
          spec_.l2_strength > 0.0));
      upconvs_.back()->check_shapes(
          i == 0 ? level_shapes[depths - 1] : level_shapes[d + 1],
          level_shapes[d]);
      shape = level_shapes[d];
      add_registry(uname, "upconv", F[d], shape,
                   upconvs_.back()->trainable_params(), 0);
      in_ch = 2 * F[d];  // concat with the skip connection
      for (int j = 0; j < spec_.convs_per_level; ++j) {
        std::string base =
            "dec" + std::to_string(d + 1) +
            (spec_.convs_per_level > 1 ? "_conv" + std::to_string(j + 1)
                                       : "_conv");
        dec_convs_.push_back(std::make_unique<Conv3D<T>>(
            base, in_ch, F[d], spec_.conv_kernel, std::array<int, 3>{1, 1, 1},
            spec_.l2_strength > 0.0));
        dec_bns_.push_back(std::make_unique<BatchNorm3D<T>>(base + "_bn", F[d]));
        dec_relus_.emplace_back();
        add_registry(base, "decoder_conv", F[d], shape,
                     dec_convs_.back()->trainable_params(), 0);
        add_registry(base + "_bn", "batchnorm", F[d], shape, 2 * F[d],
                     2 * F[d]);
        in_ch = F[d];
      }
    }

    final_deconv_ = std::make_unique<ConvTranspose3D<T>>(
        "final_deconv", in_ch, F[0], spec_.stem_kernel, spec_.stem_stride,
        spec_.l2_strength > 0.0);
    final_deconv_->check_shapes(level_shapes[0], spec_.input_shape);
    add_registry("final_deconv", "final_deconv", F[0], spec_.input_shape,
                 final_deconv_->trainable_params(), 0);
    // Last convolution: per-voxel classifier, exempt from l2 regularization.
    final_conv_ = std::make_unique<Conv3D<T>>(
        "final_conv", F[0], spec_.segmentation_classes,
        std::array<int, 3>{1, 1, 1}, std::array<int, 3>{1, 1, 1}, false);
    add_registry("final_conv", "final_conv", spec_.segmentation_classes,
                 spec_.input_shape, final_conv_->trainable_params(), 0);
    add_registry("seg_softmax", "segmentation_head", spec_.segmentation_classes,
                 spec_.input_shape, 0, 0);

    for (const auto& [name, classes] : spec_.classification_heads) {
      heads_.push_back(std::make_unique<Dense<T>>("head_" + name,
                                                  total_features_, classes));
      add_registry("head_" + name, "classification_head", classes, {0, 0, 0},
                   heads_.back()->trainable_params(), 0);
    }
  }

  void add_registry(const std::string& name, const std::string& role, int ch,
                    const std::array<int, 3>& shape, size_t trainable,
                    size_t non_trainable) {
    registry_.push_back({name, role, ch, shape, trainable, non_trainable});
  }

  static Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3), a.dim(4)});
    const size_t spatial = a.stride(1);
    for (int s = 0; s < n; ++s) {
      std::memcpy(out.data() + s * out.stride(0),
                  a.data() + s * a.stride(0), ca * spatial * sizeof(T));
      std::memcpy(out.data() + s * out.stride(0) + ca * spatial,
                  b.data() + s * b.stride(0), cb * spatial * sizeof(T));
    }
    return out;
  }

  static std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x,
                                                        int ca) {
    const int n = x.dim(0), c = x.dim(1);
    const int cb = c - ca;
    Tensor<T> a({n, ca, x.dim(2), x.dim(3), x.dim(4)});
    Tensor<T> b({n, cb, x.dim(2), x.dim(3), x.dim(4)});
    const size_t spatial = x.stride(1);
    for (int s = 0; s < n; ++s) {
      std::memcpy(a.data() + s * a.stride(0), x.data() + s * x.stride(0),
                  ca * spatial * sizeof(T));
      std::memcpy(b.data() + s * b.stride(0),
                  x.data() + s * x.stride(0) + ca * spatial,
                  cb * spatial * sizeof(T));
    }
    return {std::move(a), std::move(b)};
  }

  NetworkSpec spec_;
  std::vector<LayerInfo> registry_;
  int total_features_ = 0;

  std::unique_ptr<Conv3D<T>> stem_;
  std::unique_ptr<BatchNorm3D<T>> stem_bn_;
  ReLU<T> stem_relu_;
  std::vector<std::unique_ptr<Conv3D<T>>> enc_convs_;
  std::vector<std::unique_ptr<BatchNorm3D<T>>> enc_bns_;
  std::deque<ReLU<T>> enc_relus_;
  std::deque<Dropout<T>> enc_drops_;
  std::deque<GlobalMaxPool<T>> enc_taps_;
  std::deque<MaxPool3D<T>> pools_;
  std::vector<std::unique_ptr<ConvTranspose3D<T>>> upconvs_;
  std::vector<std::unique_ptr<Conv3D<T>>> dec_convs_;
  std::vector<std::unique_ptr<BatchNorm3D<T>>> dec_bns_;
  std::deque<ReLU<T>> dec_relus_;
  std::unique_ptr<ConvTranspose3D<T>> final_deconv_;
  ReLU<T> final_relu_;
  std::unique_ptr<Conv3D<T>> final_conv_;
  std::vector<std::unique_ptr<Dense<T>>> heads_;

  std::string capture_name_;
  Tensor<T> captured_;
};

}  // namespace psnet

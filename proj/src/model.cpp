#include "kd/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace kd {

using nlohmann::json;

void ReferenceNetConfig::validate() const {
  if (depth < 2) throw std::invalid_argument("ReferenceNetConfig: depth must be >= 2");
  if (base_channels < 4) throw std::invalid_argument("ReferenceNetConfig: base_channels must be >= 4");
  if (num_classes < 2) throw std::invalid_argument("ReferenceNetConfig: num_classes must be >= 2");
  const int n_stages = 2 * depth - 1;
  for (int s : tap_stages)
    if (s < 0 || s >= n_stages)
      throw std::invalid_argument("ReferenceNetConfig: tap stage " + std::to_string(s) +
                                  " out of range [0," + std::to_string(n_stages - 1) + "]");
}

namespace {

struct ConvSpec {
  std::string name;
  int c_in, c_out, kernel, stride, pad;
};

// Execution-ordered conv list for the encoder-decoder; one entry per
// parameterized layer.
std::vector<ConvSpec> conv_plan(const ReferenceNetConfig& cfg) {
  std::vector<ConvSpec> plan;
  std::vector<int> ch(static_cast<std::size_t>(cfg.depth));
  for (int s = 0; s < cfg.depth; ++s) ch[static_cast<std::size_t>(s)] = cfg.base_channels << s;

  plan.push_back({"enc0_a", 1, ch[0], 3, 1, 1});
  plan.push_back({"enc0_b", ch[0], ch[0], 3, 1, 1});
  for (int s = 1; s < cfg.depth; ++s) {
    plan.push_back({"enc" + std::to_string(s) + "_down", ch[static_cast<std::size_t>(s - 1)],
                    ch[static_cast<std::size_t>(s)], 3, 2, 1});
    plan.push_back({"enc" + std::to_string(s) + "_b", ch[static_cast<std::size_t>(s)],
                    ch[static_cast<std::size_t>(s)], 3, 1, 1});
  }
  for (int s = cfg.depth - 1; s >= 1; --s) {
    plan.push_back({"dec" + std::to_string(s - 1),
                    ch[static_cast<std::size_t>(s)] + ch[static_cast<std::size_t>(s - 1)],
                    ch[static_cast<std::size_t>(s - 1)], 3, 1, 1});
  }
  plan.push_back({"head", ch[0], cfg.num_classes, 1, 1, 0});
  return plan;
}

class ReferenceNet final : public SegmentationModelAdapter {
 public:
  ReferenceNet(ReferenceNetConfig cfg, unsigned seed, std::string name)
      : cfg_(std::move(cfg)), name_(std::move(name)) {
    cfg_.validate();
    std::mt19937 rng(seed);
    for (const ConvSpec& c : conv_plan(cfg_)) {
      Tensor w({c.c_out, c.c_in, c.kernel, c.kernel});
      const double stddev = std::sqrt(2.0 / (c.c_in * c.kernel * c.kernel));
      std::normal_distribution<double> dist(0.0, stddev);
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = dist(rng);
      params_.push_back(make_var(std::move(w), true));
      params_.push_back(make_var(Tensor::zeros({c.c_out}), true));
    }
  }

  const std::string& name() const override { return name_; }
  const ReferenceNetConfig& config() const { return cfg_; }
  void set_name(std::string n) { name_ = std::move(n); }

  ForwardResult forward(const Var& images, bool with_taps) override {
    const auto& s = images->value.shape();
    if (s.size() != 4 || s[1] != 1)
      throw std::invalid_argument("ReferenceNet: input must be [B,1,H,W], got " + shape_str(s));

    std::size_t pi = 0;
    auto conv = [&](const Var& x, int stride, int pad) {
      Var w = params_[pi++];
      Var b = params_[pi++];
      return conv2d(x, w, b, stride, pad);
    };
    auto block = [&](const Var& x, int stride, int pad) {
      return leaky_relu(conv(x, stride, pad), 0.01);
    };

    ForwardResult r;
    const std::vector<TapSpec> tap_list = taps_all();
    std::vector<char> want(tap_list.size(), 0);
    if (with_taps)
      for (int t : effective_taps()) want[static_cast<std::size_t>(t)] = 1;
    int stage = 0;
    auto record = [&](const Var& x) {
      if (want[static_cast<std::size_t>(stage)])
        r.taps.push_back({x, tap_list[static_cast<std::size_t>(stage)].layer_id,
                          tap_list[static_cast<std::size_t>(stage)].depth_fraction});
      ++stage;
    };

    std::vector<Var> enc(static_cast<std::size_t>(cfg_.depth));
    Var x = block(block(images, 1, 1), 1, 1);
    enc[0] = x;
    record(x);
    for (int st = 1; st < cfg_.depth; ++st) {
      x = block(x, 2, 1);  // down
      x = block(x, 1, 1);
      enc[static_cast<std::size_t>(st)] = x;
      record(x);
    }
    for (int st = cfg_.depth - 1; st >= 1; --st) {
      const Var& skip = enc[static_cast<std::size_t>(st - 1)];
      const int h = skip->value.dim(2), w = skip->value.dim(3);
      x = block(concat_channels(upsample_bilinear(x, h, w), skip), 1, 1);
      record(x);
    }
    r.logits = conv(x, 1, 0);  // head, no activation
    return r;
  }

  std::vector<TapSpec> taps() const override {
    std::vector<TapSpec> all = taps_all();
    std::vector<TapSpec> out;
    for (int t : effective_taps()) out.push_back(all[static_cast<std::size_t>(t)]);
    return out;
  }

  std::int64_t parameter_count() const override {
    std::int64_t n = 0;
    for (const Var& p : params_) n += p->value.numel();
    return n;
  }

  bool trainable() const override { return trainable_; }
  void set_trainable(bool t) override {
    trainable_ = t;
    for (Var& p : params_) p->requires_grad = t;
  }

  std::vector<Var>& parameters() override { return params_; }
  const std::vector<Var>& parameters() const override { return params_; }

  std::vector<LayerInfo> layers(int in_h, int in_w) const override {
    std::vector<LayerInfo> out;
    auto conv_out = [](int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; };
    auto push_conv = [&](const ConvSpec& c, int h, int w, int& ho, int& wo) {
      ho = conv_out(h, c.kernel, c.stride, c.pad);
      wo = conv_out(w, c.kernel, c.stride, c.pad);
      out.push_back({c.name, "conv2d", c.c_in, c.c_out, c.kernel, c.stride, c.pad, true, h, w, ho, wo});
    };
    auto push_act = [&](const std::string& nm, int c, int h, int w) {
      out.push_back({nm, "leaky_relu", c, c, 0, 1, 0, false, h, w, h, w});
    };

    const std::vector<ConvSpec> plan = conv_plan(cfg_);
    std::vector<int> ch(static_cast<std::size_t>(cfg_.depth));
    for (int s = 0; s < cfg_.depth; ++s) ch[static_cast<std::size_t>(s)] = cfg_.base_channels << s;

    std::size_t pi = 0;
    int h = in_h, w = in_w, ho = 0, wo = 0;
    std::vector<std::pair<int, int>> enc_dims(static_cast<std::size_t>(cfg_.depth));
    // encoder
    push_conv(plan[pi++], h, w, ho, wo);
    push_act("enc0_a_act", ch[0], ho, wo);
    push_conv(plan[pi++], ho, wo, ho, wo);
    push_act("enc0_b_act", ch[0], ho, wo);
    h = ho;
    w = wo;
    enc_dims[0] = {h, w};
    for (int s = 1; s < cfg_.depth; ++s) {
      push_conv(plan[pi++], h, w, ho, wo);
      push_act("enc" + std::to_string(s) + "_down_act", ch[static_cast<std::size_t>(s)], ho, wo);
      push_conv(plan[pi++], ho, wo, ho, wo);
      push_act("enc" + std::to_string(s) + "_b_act", ch[static_cast<std::size_t>(s)], ho, wo);
      h = ho;
      w = wo;
      enc_dims[static_cast<std::size_t>(s)] = {h, w};
    }
    // decoder
    for (int s = cfg_.depth - 1; s >= 1; --s) {
      const auto [sh, sw] = enc_dims[static_cast<std::size_t>(s - 1)];
      out.push_back({"up" + std::to_string(s - 1), "upsample_bilinear", ch[static_cast<std::size_t>(s)],
                     ch[static_cast<std::size_t>(s)], 0, 1, 0, false, h, w, sh, sw});
      out.push_back({"cat" + std::to_string(s - 1), "concat",
                     ch[static_cast<std::size_t>(s)] + ch[static_cast<std::size_t>(s - 1)],
                     ch[static_cast<std::size_t>(s)] + ch[static_cast<std::size_t>(s - 1)], 0, 1, 0,
                     false, sh, sw, sh, sw});
      push_conv(plan[pi++], sh, sw, ho, wo);
      push_act("dec" + std::to_string(s - 1) + "_act", ch[static_cast<std::size_t>(s - 1)], ho, wo);
      h = ho;
      w = wo;
    }
    push_conv(plan[pi++], h, w, ho, wo);  // head
    return out;
  }

 private:
  std::vector<TapSpec> taps_all() const {
    std::vector<TapSpec> all;
    const int n_stages = 2 * cfg_.depth - 1;
    for (int s = 0; s < cfg_.depth; ++s)
      all.push_back({"enc" + std::to_string(s), static_cast<double>(s + 1) / (n_stages + 1)});
    for (int s = cfg_.depth - 1; s >= 1; --s) {
      const int idx = cfg_.depth + (cfg_.depth - 1 - s);
      all.push_back({"dec" + std::to_string(s - 1), static_cast<double>(idx + 1) / (n_stages + 1)});
    }
    return all;
  }

  std::vector<int> effective_taps() const {
    if (!cfg_.tap_stages.empty()) {
      std::vector<int> t = cfg_.tap_stages;
      std::sort(t.begin(), t.end());
      return t;
    }
    std::vector<int> t(static_cast<std::size_t>(2 * cfg_.depth - 1));
    std::iota(t.begin(), t.end(), 0);
    return t;
  }

  ReferenceNetConfig cfg_;
  std::string name_;
  bool trainable_ = true;
  std::vector<Var> params_;
};

}  // namespace

std::int64_t reference_param_count(const ReferenceNetConfig& cfg) {
  cfg.validate();
  std::int64_t n = 0;
  for (const ConvSpec& c : conv_plan(cfg))
    n += static_cast<std::int64_t>(c.c_out) * c.c_in * c.kernel * c.kernel + c.c_out;
  return n;
}

ModelPtr build_reference_teacher(const ReferenceNetConfig& cfg, unsigned seed,
                                 const std::string& name) {
  return std::make_shared<ReferenceNet>(cfg, seed, name);
}

ModelPtr build_reference_student(const ReferenceNetConfig& cfg, unsigned seed,
                                 const std::string& name) {
  const std::int64_t budget = reference_param_count(default_teacher_config()) / 10;
  const std::int64_t count = reference_param_count(cfg);
  if (count > budget)
    throw std::invalid_argument("build_reference_student: " + std::to_string(count) +
                                " params exceeds budget " + std::to_string(budget));
  return std::make_shared<ReferenceNet>(cfg, seed, name);
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, json header, raw doubles, FNV-1a checksum.

namespace {

constexpr char kMagic[8] = {'K', 'D', 'C', 'K', 'P', 'T', '1', '\0'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void append_pod(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

json config_to_json(const ReferenceNetConfig& c) {
  return {{"base_channels", c.base_channels},
          {"depth", c.depth},
          {"num_classes", c.num_classes},
          {"tap_stages", c.tap_stages}};
}

ReferenceNetConfig config_from_json(const json& j) {
  ReferenceNetConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.tap_stages = j.at("tap_stages").get<std::vector<int>>();
  return c;
}

json read_checkpoint_header(const std::string& path, std::string* full = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t min_size = sizeof(kMagic) + 2 * sizeof(std::uint64_t);
  if (buf.size() < min_size || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not a KD checkpoint (bad magic)");
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof(stored), sizeof(stored));
  if (fnv1a(buf.data(), buf.size() - sizeof(stored)) != stored)
    throw std::runtime_error("checkpoint: '" + path + "' is corrupt (checksum mismatch)");
  std::uint64_t jlen = 0;
  std::memcpy(&jlen, buf.data() + sizeof(kMagic), sizeof(jlen));
  if (sizeof(kMagic) + sizeof(jlen) + jlen > buf.size())
    throw std::runtime_error("checkpoint: '" + path + "' is corrupt (truncated header)");
  json hdr = json::parse(buf.substr(sizeof(kMagic) + sizeof(jlen), jlen));
  if (full) *full = std::move(buf);
  return hdr;
}

}  // namespace

void save_checkpoint(const SegmentationModelAdapter& model, const std::string& path) {
  const auto* ref = dynamic_cast<const ReferenceNet*>(&model);
  if (!ref)
    throw std::invalid_argument("save_checkpoint: only reference-net adapters are serializable");
  json hdr = {{"format_version", 1},
              {"arch", "reference_unet_v1"},
              {"name", model.name()},
              {"param_count", model.parameter_count()},
              {"config", config_to_json(ref->config())}};
  const std::string hs = hdr.dump();

  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  append_pod(buf, static_cast<std::uint64_t>(hs.size()));
  buf += hs;
  append_pod(buf, static_cast<std::uint64_t>(model.parameter_count()));
  for (const Var& p : model.parameters())
    buf.append(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::size_t>(p->value.numel()) * sizeof(double));
  append_pod(buf, fnv1a(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

ModelPtr load_checkpoint(const std::string& path) {
  std::string buf;
  json hdr = read_checkpoint_header(path, &buf);
  if (hdr.at("arch").get<std::string>() != "reference_unet_v1")
    throw std::runtime_error("checkpoint: unsupported arch '" + hdr.at("arch").get<std::string>() +
                             "' in '" + path + "'");
  const ReferenceNetConfig cfg = config_from_json(hdr.at("config"));
  auto net = std::make_shared<ReferenceNet>(cfg, 0, hdr.at("name").get<std::string>());

  std::uint64_t jlen = 0;
  std::memcpy(&jlen, buf.data() + sizeof(kMagic), sizeof(jlen));
  std::size_t off = sizeof(kMagic) + sizeof(jlen) + jlen;
  std::uint64_t n_params = 0;
  std::memcpy(&n_params, buf.data() + off, sizeof(n_params));
  off += sizeof(n_params);
  if (static_cast<std::int64_t>(n_params) != net->parameter_count() ||
      off + n_params * sizeof(double) + sizeof(std::uint64_t) != buf.size())
    throw std::runtime_error("checkpoint: '" + path + "' is corrupt (parameter payload mismatch)");
  for (Var& p : net->parameters()) {
    std::memcpy(p->value.data(), buf.data() + off,
                static_cast<std::size_t>(p->value.numel()) * sizeof(double));
    off += static_cast<std::size_t>(p->value.numel()) * sizeof(double);
  }
  return net;
}

ReferenceNetConfig checkpoint_config(const std::string& path) {
  return config_from_json(read_checkpoint_header(path).at("config"));
}

}  // namespace kd

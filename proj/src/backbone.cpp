#include "ddi/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <sstream>

#include "ddi/errors.hpp"
#include "ddi/ops.hpp"

namespace ddi {

namespace {

int conv_out_extent(int extent, int k, int stride, int pad) {
  return (extent + 2 * pad - k) / stride + 1;
}

int unit_out_h(const Unit& u) {
  switch (u.kind) {
    case UnitKind::residual_transition: return conv_out_extent(u.hin, 3, 2, 1);
    case UnitKind::dense_transition: return u.hin / 2;
    default: return u.hin;
  }
}

int unit_out_w(const Unit& u) {
  switch (u.kind) {
    case UnitKind::residual_transition: return conv_out_extent(u.win, 3, 2, 1);
    case UnitKind::dense_transition: return u.win / 2;
    default: return u.win;
  }
}

std::vector<int> parse_int_list(const std::string& s, const char* key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stoi(item, &used));
      DDI_CHECK_T(ConfigError, used == item.size(), "trailing junk");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      fail<ConfigError>("arch text: bad integer '", item, "' for key ", key);
    }
  }
  DDI_CHECK_T(ConfigError, !out.empty(), "arch text: empty list for key ", key);
  return out;
}

int parse_single_int(const std::string& s, const char* key) {
  auto v = parse_int_list(s, key);
  DDI_CHECK_T(ConfigError, v.size() == 1, "arch text: key ", key,
              " expects one integer, got '", s, "'");
  return v[0];
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

// Copies channel planes from `body` where the sample's bit is open and from
// `keep` otherwise; straight data movement so closed channels are bitwise
// identical to their source.
Tensor hard_assemble(const Tensor& keep, const Tensor& body,
                     const std::vector<uint8_t>& layer_bits,
                     const std::vector<uint8_t>& channel_bits, int k) {
  Tensor out(keep.shape());
  int n = keep.dim(0), h = keep.dim(2), w = keep.dim(3);
  DDI_CHECK(keep.dim(1) == k, "hard_assemble: expected ", k, " channels, got ",
            shape_str(keep.shape()));
  int64_t plane = static_cast<int64_t>(h) * w;
  for (int ni = 0; ni < n; ++ni) {
    for (int c = 0; c < k; ++c) {
      bool take_body = layer_bits[ni] && channel_bits[ni * k + c];
      const Tensor& src = take_body ? body : keep;
      std::memcpy(out.data() + (static_cast<int64_t>(ni) * k + c) * plane,
                  src.data() + (static_cast<int64_t>(ni) * k + c) * plane,
                  sizeof(float) * plane);
    }
  }
  return out;
}

}  // namespace

void ArchConfig::validate() const {
  DDI_CHECK_T(ConfigError, !blocks_per_stage.empty(), "at least one stage required");
  for (int b : blocks_per_stage)
    DDI_CHECK_T(ConfigError, b >= 1, "every stage needs at least one unit");
  if (kind == BackboneKind::resnet) {
    DDI_CHECK_T(ConfigError, widths.size() == blocks_per_stage.size(),
                "resnet arch: ", blocks_per_stage.size(), " stages but ",
                widths.size(), " widths");
    for (int w : widths)
      DDI_CHECK_T(ConfigError, w >= 1, "stage widths must be positive");
  } else {
    DDI_CHECK_T(ConfigError, growth >= 1, "growth rate must be positive, got ",
                growth);
  }
  DDI_CHECK_T(ConfigError, num_classes >= 2, "need at least two classes, got ",
              num_classes);
  DDI_CHECK_T(ConfigError, in_channels >= 1, "input channels must be positive");
  DDI_CHECK_T(ConfigError, image_size >= 4, "image size too small: ", image_size);
  DDI_CHECK_T(ConfigError, lstm_hidden >= 1, "gate hidden width must be positive");
}

std::string ArchConfig::to_text() const {
  std::string out;
  out += "kind=";
  out += kind == BackboneKind::resnet ? "resnet" : "dense";
  out += "\nstages=" + join_ints(blocks_per_stage);
  out += "\nwidths=" + join_ints(widths);
  out += "\ngrowth=" + std::to_string(growth);
  out += "\nclasses=" + std::to_string(num_classes);
  out += "\nin_channels=" + std::to_string(in_channels);
  out += "\nimage=" + std::to_string(image_size);
  out += "\nhidden=" + std::to_string(lstm_hidden);
  out += "\n";
  return out;
}

ArchConfig ArchConfig::from_text(const std::string& text) {
  ArchConfig cfg;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    DDI_CHECK_T(ConfigError, eq != std::string::npos,
                "arch text: expected key=value, got '", line, "'");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "kind") {
      if (val == "resnet") cfg.kind = BackboneKind::resnet;
      else if (val == "dense") cfg.kind = BackboneKind::densenet;
      else fail<ConfigError>("arch text: unknown backbone kind '", val, "'");
    } else if (key == "stages") {
      cfg.blocks_per_stage = parse_int_list(val, "stages");
    } else if (key == "widths") {
      cfg.widths = parse_int_list(val, "widths");
    } else if (key == "growth") {
      cfg.growth = parse_single_int(val, "growth");
    } else if (key == "classes") {
      cfg.num_classes = parse_single_int(val, "classes");
    } else if (key == "in_channels") {
      cfg.in_channels = parse_single_int(val, "in_channels");
    } else if (key == "image") {
      cfg.image_size = parse_single_int(val, "image");
    } else if (key == "hidden") {
      cfg.lstm_hidden = parse_single_int(val, "hidden");
    } else {
      fail<ConfigError>("arch text: unknown key '", key, "'");
    }
  }
  cfg.validate();
  return cfg;
}

ArchConfig resnet_arch(int depth, int num_classes) {
  DDI_CHECK_T(ConfigError, depth >= 8 && (depth - 2) % 6 == 0,
              "residual depth must be 6n+2 with n >= 1, got ", depth);
  int n = (depth - 2) / 6;
  ArchConfig cfg;
  cfg.kind = BackboneKind::resnet;
  cfg.blocks_per_stage = {n, n, n};
  cfg.widths = {16, 32, 64};
  cfg.num_classes = num_classes;
  return cfg;
}

ArchConfig densenet_arch(int depth, int growth, int num_classes) {
  DDI_CHECK_T(ConfigError, growth >= 1, "growth rate must be positive, got ",
              growth);
  DDI_CHECK_T(ConfigError, depth >= 10 && (depth - 4) % 6 == 0,
              "bottleneck dense depth must satisfy (depth-4) % 6 == 0, got ",
              depth);
  int layers = (depth - 4) / 6;
  ArchConfig cfg;
  cfg.kind = BackboneKind::densenet;
  cfg.blocks_per_stage = {layers, layers, layers};
  cfg.growth = growth;
  cfg.num_classes = num_classes;
  return cfg;
}

DDINetwork::DDINetwork(const ArchConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  lgate_ = LayerGate(gate_params_, cfg_.lstm_hidden, rng);
  if (cfg_.kind == BackboneKind::resnet)
    build_resnet(rng);
  else
    build_densenet(rng);
  head_fc_ = Linear(backbone_params_, "head.fc", head_width_, cfg_.num_classes,
                    rng);
  place_branches(rng);
}

int DDINetwork::gated_units() const {
  int n = 0;
  for (const auto& u : units_) n += u.gated() ? 1 : 0;
  return n;
}

void DDINetwork::build_resnet(Rng& rng) {
  int h = cfg_.image_size, w = cfg_.image_size;
  stem_conv_ = Conv2d(backbone_params_, "stem.conv", cfg_.in_channels,
                      cfg_.widths[0], 3, 1, 1, false, rng);
  stem_bn_ = BatchNorm2d(backbone_params_, "stem.bn", cfg_.widths[0]);
  int cur = cfg_.widths[0];
  int uid = 0;
  for (size_t s = 0; s < cfg_.blocks_per_stage.size(); ++s) {
    int width = cfg_.widths[s];
    for (int b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
      Unit u;
      u.stage = static_cast<int>(s);
      u.unit_id = uid;
      u.in_channels = cur;
      u.hin = h;
      u.win = w;
      std::string base = "unit" + std::to_string(uid);
      bool transition = s > 0 && b == 0;
      if (transition) {
        DDI_CHECK_T(ConfigError, h >= 2 && w >= 2,
                    "feature map too small to downsample at stage ", s);
        u.kind = UnitKind::residual_transition;
        u.conv1 = Conv2d(backbone_params_, base + ".conv1", cur, width, 3, 2, 1,
                         false, rng);
        u.bn1 = BatchNorm2d(backbone_params_, base + ".bn1", width);
        u.conv2 = Conv2d(backbone_params_, base + ".conv2", width, width, 3, 1,
                         1, false, rng);
        u.bn2 = BatchNorm2d(backbone_params_, base + ".bn2", width);
        u.proj = Conv2d(backbone_params_, base + ".proj", cur, width, 1, 2, 0,
                        false, rng);
        u.bn_proj = BatchNorm2d(backbone_params_, base + ".bn_proj", width);
        h = conv_out_extent(h, 3, 2, 1);
        w = conv_out_extent(w, 3, 2, 1);
        cur = width;
      } else {
        // A skippable unit must preserve shape; first-stage entry already
        // sits at the stage width so every first-stage block is gated.
        DDI_CHECK_T(ConfigError, cur == width,
                    "gated residual block requires equal input/output width");
        u.kind = UnitKind::residual_gated;
        u.conv1 = Conv2d(backbone_params_, base + ".conv1", width, width, 3, 1,
                         1, false, rng);
        u.bn1 = BatchNorm2d(backbone_params_, base + ".bn1", width);
        u.conv2 = Conv2d(backbone_params_, base + ".conv2", width, width, 3, 1,
                         1, false, rng);
        u.bn2 = BatchNorm2d(backbone_params_, base + ".bn2", width);
        u.k = width;
        u.gate_slot = lgate_.register_unit(gate_params_, width, rng);
        ChannelGateConfig gc{ChannelGateConfig::Variant::resnet, width, width,
                             h, w};
        u.cgate = ChannelGate(gate_params_,
                              "gate.channel." + std::to_string(uid), gc, rng);
      }
      u.out_channels = width;
      units_.push_back(std::move(u));
      ++uid;
    }
  }
  head_width_ = cur;
  final_h_ = h;
  final_w_ = w;
}

void DDINetwork::build_densenet(Rng& rng) {
  int g = cfg_.growth;
  int h = cfg_.image_size, w = cfg_.image_size;
  int cur = 2 * g;
  stem_conv_ = Conv2d(backbone_params_, "stem.conv", cfg_.in_channels, cur, 3,
                      1, 1, false, rng);
  stem_bn_ = BatchNorm2d(backbone_params_, "stem.bn", cur);
  int uid = 0;
  for (size_t s = 0; s < cfg_.blocks_per_stage.size(); ++s) {
    for (int b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
      Unit u;
      u.kind = UnitKind::dense_gated;
      u.stage = static_cast<int>(s);
      u.unit_id = uid;
      u.in_channels = cur;
      u.out_channels = cur + g;
      u.k = g;
      u.hin = h;
      u.win = w;
      std::string base = "unit" + std::to_string(uid);
      int mid = 4 * g;
      u.conv1 = Conv2d(backbone_params_, base + ".conv1", cur, mid, 1, 1, 0,
                       false, rng);
      u.bn1 = BatchNorm2d(backbone_params_, base + ".bn1", mid);
      u.conv2 = Conv2d(backbone_params_, base + ".conv2", mid, g, 3, 1, 1,
                       false, rng);
      u.bn2 = BatchNorm2d(backbone_params_, base + ".bn2", g);
      u.gate_slot = lgate_.register_unit(gate_params_, cur, rng);
      ChannelGateConfig gc{ChannelGateConfig::Variant::densenet, cur, g, h, w};
      u.cgate = ChannelGate(gate_params_, "gate.channel." + std::to_string(uid),
                            gc, rng);
      units_.push_back(std::move(u));
      cur += g;
      ++uid;
    }
    if (s + 1 < cfg_.blocks_per_stage.size()) {
      DDI_CHECK_T(ConfigError, h >= 2 && w >= 2,
                  "feature map too small to downsample after dense block ", s);
      Unit t;
      t.kind = UnitKind::dense_transition;
      t.stage = static_cast<int>(s);
      t.unit_id = uid;
      t.in_channels = cur;
      t.out_channels = cur / 2;
      t.hin = h;
      t.win = w;
      std::string base = "unit" + std::to_string(uid);
      t.conv1 = Conv2d(backbone_params_, base + ".conv1", cur, cur / 2, 1, 1, 0,
                       false, rng);
      t.bn1 = BatchNorm2d(backbone_params_, base + ".bn1", cur / 2);
      units_.push_back(std::move(t));
      cur /= 2;
      h /= 2;
      w /= 2;
      ++uid;
    }
  }
  head_width_ = cur;
  final_h_ = h;
  final_w_ = w;
}

void DDINetwork::place_branches(Rng& rng) {
  int n_stages = static_cast<int>(cfg_.blocks_per_stage.size());
  // First global unit index of each stage (dense transitions carry the stage
  // index of the block they follow, so the scan still finds the first layer).
  std::vector<int> stage_first(n_stages, -1);
  for (size_t i = 0; i < units_.size(); ++i)
    if (stage_first[units_[i].stage] < 0)
      stage_first[units_[i].stage] = static_cast<int>(i);

  int bindex = 0;
  for (int s = 0; s < n_stages; ++s) {
    int d = cfg_.blocks_per_stage[s];
    std::vector<int> local;
    if (d == 1) {
      local = {1};
      warnings_.push_back("stage " + std::to_string(s) +
                          " has a single unit; placing one branch at its end");
    } else {
      auto clamp_pos = [d](double f) {
        return std::clamp<int>(static_cast<int>(std::llround(d * f)), 1, d - 1);
      };
      int lo = clamp_pos(0.25), hi = clamp_pos(0.75);
      if (lo == hi) {
        local = {lo};
        warnings_.push_back("stage " + std::to_string(s) +
                            " too shallow for two distinct branch positions; "
                            "placing one branch");
      } else {
        local = {lo, hi};
      }
    }
    for (int pos : local) {
      int after = stage_first[s] + pos - 1;
      const Unit& u = units_[after];
      Branch br;
      br.index = bindex;
      br.stage = s;
      br.after_unit = after;
      br.width = u.out_channels;
      br.pools = std::max(0, n_stages - 1 - s);
      br.hin = unit_out_h(u);
      br.win = unit_out_w(u);
      int bh = br.hin, bw = br.win;
      std::string base = "branch" + std::to_string(bindex);
      for (int p = 0; p < br.pools; ++p) {
        DDI_CHECK_T(ConfigError, bh >= 2 && bw >= 2,
                    "feature map too small for branch pooling at stage ", s);
        bh /= 2;
        bw /= 2;
        br.convs.emplace_back(branch_params_,
                              base + ".conv" + std::to_string(p), br.width,
                              br.width, 3, 1, 1, true, rng);
      }
      br.fc = Linear(branch_params_, base + ".fc", br.width, cfg_.num_classes,
                     rng);
      branches_.push_back(std::move(br));
      ++bindex;
    }
  }
}

ParamList DDINetwork::w_params() const {
  ParamList all = backbone_params_;
  all.insert(all.end(), branch_params_.begin(), branch_params_.end());
  return all;
}

ParamList DDINetwork::all_params() const {
  ParamList all = backbone_params_;
  all.insert(all.end(), gate_params_.begin(), gate_params_.end());
  all.insert(all.end(), branch_params_.begin(), branch_params_.end());
  return all;
}

Tensor DDINetwork::stem_forward(const Tensor& x, bool bn_training) {
  return relu(stem_bn_.forward(stem_conv_.forward(x), bn_training));
}

LayerGate::State DDINetwork::gate_initial_state(int batch) const {
  return lgate_.initial_state(batch);
}

std::pair<Tensor, LayerGate::State> DDINetwork::gate_step(
    int unit, const Tensor& x, const LayerGate::State& st) {
  const Unit& u = units_.at(unit);
  DDI_CHECK_T(ModelError, u.gated(), "unit ", unit, " has no layer gate");
  return lgate_.step(x, u.gate_slot, st);
}

Tensor DDINetwork::channel_gate_forward(int unit, const Tensor& x) {
  const Unit& u = units_.at(unit);
  DDI_CHECK_T(ModelError, u.gated(), "unit ", unit, " has no channel gate");
  return u.cgate.forward(x);
}

Tensor DDINetwork::unit_body(int unit, const Tensor& x, bool bn_training) {
  Unit& u = units_.at(unit);
  DDI_CHECK(x.rank() == 4 && x.dim(1) == u.in_channels, "unit ", unit,
            ": input ", shape_str(x.shape()), " expects ", u.in_channels,
            " channels");
  switch (u.kind) {
    case UnitKind::residual_gated: {
      Tensor h = relu(u.bn1.forward(u.conv1.forward(x), bn_training));
      Tensor m = u.bn2.forward(u.conv2.forward(h), bn_training);
      return relu(add(m, x));
    }
    case UnitKind::residual_transition: {
      Tensor h = relu(u.bn1.forward(u.conv1.forward(x), bn_training));
      Tensor m = u.bn2.forward(u.conv2.forward(h), bn_training);
      Tensor sc = u.bn_proj.forward(u.proj.forward(x), bn_training);
      return relu(add(m, sc));
    }
    case UnitKind::dense_gated: {
      Tensor h = relu(u.bn1.forward(u.conv1.forward(x), bn_training));
      return relu(u.bn2.forward(u.conv2.forward(h), bn_training));
    }
    case UnitKind::dense_transition: {
      Tensor h = relu(u.bn1.forward(u.conv1.forward(x), bn_training));
      return avg_pool2d(h, 2, 2);
    }
  }
  fail<ModelError>("unreachable unit kind");
}

Tensor DDINetwork::unit_hard_forward(int unit, const Tensor& x,
                                     uint8_t layer_bit,
                                     const std::vector<uint8_t>& channel_bits,
                                     int64_t* macs) {
  Unit& u = units_.at(unit);
  NoGradGuard ng;
  auto add_conv_macs = [&](const Conv2d& c, const Tensor& out, int64_t out_ch) {
    if (macs)
      *macs += static_cast<int64_t>(c.in_channels()) * out_ch * c.ksize() *
               c.ksize() * out.dim(2) * out.dim(3);
  };
  if (!u.gated()) {
    Tensor out = unit_body(unit, x, false);
    if (u.kind == UnitKind::residual_transition) {
      int64_t oh = unit_out_h(u), ow = unit_out_w(u);
      if (macs)
        *macs += static_cast<int64_t>(u.in_channels) * u.out_channels * 9 * oh *
                     ow +                                              // conv1
                 static_cast<int64_t>(u.out_channels) * u.out_channels * 9 *
                     oh * ow +                                         // conv2
                 static_cast<int64_t>(u.in_channels) * u.out_channels * oh * ow;
    } else {  // dense transition: 1x1 halving conv at full resolution
      if (macs)
        *macs += static_cast<int64_t>(u.in_channels) * u.out_channels * u.hin *
                 u.win;
    }
    return out;
  }
  DDI_CHECK(static_cast<int>(channel_bits.size()) == u.k, "unit ", unit,
            ": expected ", u.k, " channel bits, got ", channel_bits.size());
  if (!layer_bit) {
    // Whole unit skipped: bitwise passthrough (dense: re-append the trailing
    // slice, i.e. the most recent produced contribution).
    if (u.kind == UnitKind::residual_gated) return x;
    Tensor fallback = slice_channels(x, u.in_channels - u.k, u.k);
    return concat_channels({x, fallback});
  }
  if (u.kind == UnitKind::residual_gated) {
    Tensor h = relu(u.bn1.forward(u.conv1.forward(x), false));
    add_conv_macs(u.conv1, h, u.conv1.out_channels());
    Tensor c2 = u.conv2.forward_masked(h, channel_bits);
    int64_t open = std::count(channel_bits.begin(), channel_bits.end(), 1);
    add_conv_macs(u.conv2, c2, open);
    Tensor body = relu(add(u.bn2.forward(c2, false), x));
    std::vector<uint8_t> lb{1};
    return hard_assemble(x, body, lb, channel_bits, u.k);
  }
  // dense gated
  Tensor h = relu(u.bn1.forward(u.conv1.forward(x), false));
  add_conv_macs(u.conv1, h, u.conv1.out_channels());
  Tensor c2 = u.conv2.forward_masked(h, channel_bits);
  int64_t open = std::count(channel_bits.begin(), channel_bits.end(), 1);
  add_conv_macs(u.conv2, c2, open);
  Tensor body = relu(u.bn2.forward(c2, false));
  Tensor fallback = slice_channels(x, u.in_channels - u.k, u.k);
  std::vector<uint8_t> lb{1};
  Tensor slice = hard_assemble(fallback, body, lb, channel_bits, u.k);
  return concat_channels({x, slice});
}

Tensor DDINetwork::branch_forward(int branch, const Tensor& x) {
  Branch& br = branches_.at(branch);
  DDI_CHECK(x.rank() == 4 && x.dim(1) == br.width, "branch ", branch,
            ": input ", shape_str(x.shape()), " expects ", br.width,
            " channels");
  Tensor h = x;
  for (int p = 0; p < br.pools; ++p) {
    h = max_pool2d(h, 2, 2);
    h = relu(br.convs[p].forward(h));
  }
  return br.fc.forward(flatten2d(global_avg_pool(h)));
}

Tensor DDINetwork::head_forward(const Tensor& x) {
  return head_fc_.forward(flatten2d(global_avg_pool(x)));
}

ForwardResult DDINetwork::full_forward(const Tensor& input, ForwardMode mode,
                                       bool bn_training) {
  DDI_CHECK(input.rank() == 4 && input.dim(1) == cfg_.in_channels &&
                input.dim(2) == cfg_.image_size &&
                input.dim(3) == cfg_.image_size,
            "network expects [N,", cfg_.in_channels, ",", cfg_.image_size, ",",
            cfg_.image_size, "], got ", shape_str(input.shape()));
  DDI_CHECK_T(ModelError, mode != ForwardMode::hard || !bn_training,
              "hard mode requires frozen batch statistics (bn_training=false)");
  DDI_CHECK_T(ModelError, input.all_finite(),
              "input batch contains non-finite values");
  int n = input.dim(0);

  std::optional<NoGradGuard> ng;
  if (mode == ForwardMode::hard) ng.emplace();

  ForwardResult res;
  res.traces.assign(n, SkipTrace{});
  for (auto& t : res.traces) {
    t.branch_evaluated.assign(branches_.size(), 1);
    t.final_head_evaluated = true;
  }
  res.exit_logits.assign(branches_.size() + 1, Tensor());

  Tensor f = stem_forward(input, bn_training);
  auto state = lgate_.initial_state(n);
  size_t next_branch = 0;

  for (size_t i = 0; i < units_.size(); ++i) {
    Unit& u = units_[i];
    if (!u.gated()) {
      f = unit_body(static_cast<int>(i), f, bn_training);
      for (auto& t : res.traces) {
        BlockTraceEntry e;
        e.unit_id = static_cast<int>(i);
        e.gated = false;
        t.blocks.push_back(std::move(e));
      }
    } else if (mode == ForwardMode::vanilla) {
      Tensor body = unit_body(static_cast<int>(i), f, bn_training);
      f = u.kind == UnitKind::dense_gated ? concat_channels({f, body}) : body;
      for (auto& t : res.traces) {
        BlockTraceEntry e;
        e.unit_id = static_cast<int>(i);
        e.gated = true;
        e.layer_bit = 1;
        e.channel_bits.assign(u.k, 1);
        t.blocks.push_back(std::move(e));
      }
    } else {
      auto stepped = gate_step(static_cast<int>(i), f, state);
      Tensor soft_l = stepped.first;
      state = stepped.second;
      std::vector<uint8_t> lbits(n);
      for (int s = 0; s < n; ++s) lbits[s] = binarize(soft_l.data()[s]);

      if (mode == ForwardMode::soft) {
        Tensor soft_c = channel_gate_forward(static_cast<int>(i), f);
        res.soft_gates.push_back({static_cast<int>(i), soft_l, soft_c});
        Tensor body = unit_body(static_cast<int>(i), f, bn_training);
        Tensor gprod = mul(broadcast_cols(soft_l, u.k), soft_c);
        if (u.kind == UnitKind::residual_gated) {
          f = add(scale_channels(body, gprod),
                  scale_channels(f, one_minus(gprod)));
        } else {
          Tensor fallback = slice_channels(f, u.in_channels - u.k, u.k);
          Tensor slice = add(scale_channels(body, gprod),
                             scale_channels(fallback, one_minus(gprod)));
          f = concat_channels({f, slice});
        }
        for (int s = 0; s < n; ++s) {
          BlockTraceEntry e;
          e.unit_id = static_cast<int>(i);
          e.gated = true;
          e.layer_bit = lbits[s];
          e.soft_layer = soft_l.data()[s];
          e.channel_gate_evaluated = true;
          e.channel_bits.resize(u.k);
          for (int c = 0; c < u.k; ++c)
            e.channel_bits[c] =
                lbits[s] ? binarize(soft_c.data()[s * u.k + c]) : 0;
          res.traces[s].blocks.push_back(std::move(e));
        }
      } else {  // hard
        bool any_open = std::any_of(lbits.begin(), lbits.end(),
                                    [](uint8_t b) { return b != 0; });
        std::vector<uint8_t> cbits(static_cast<size_t>(n) * u.k, 0);
        Tensor soft_c;
        if (any_open) {
          soft_c = channel_gate_forward(static_cast<int>(i), f);
          for (int s = 0; s < n; ++s)
            if (lbits[s])
              for (int c = 0; c < u.k; ++c)
                cbits[s * u.k + c] = binarize(soft_c.data()[s * u.k + c]);
          Tensor body = unit_body(static_cast<int>(i), f, false);
          if (u.kind == UnitKind::residual_gated) {
            f = hard_assemble(f, body, lbits, cbits, u.k);
          } else {
            Tensor fallback = slice_channels(f, u.in_channels - u.k, u.k);
            Tensor slice = hard_assemble(fallback, body, lbits, cbits, u.k);
            f = concat_channels({f, slice});
          }
        } else {
          if (u.kind == UnitKind::dense_gated) {
            Tensor fallback = slice_channels(f, u.in_channels - u.k, u.k);
            f = concat_channels({f, fallback});
          }
          // residual: f unchanged, bitwise
        }
        for (int s = 0; s < n; ++s) {
          BlockTraceEntry e;
          e.unit_id = static_cast<int>(i);
          e.gated = true;
          e.layer_bit = lbits[s];
          e.soft_layer = soft_l.data()[s];
          e.channel_gate_evaluated = lbits[s] != 0;
          e.channel_bits.assign(cbits.begin() + static_cast<int64_t>(s) * u.k,
                                cbits.begin() + static_cast<int64_t>(s + 1) * u.k);
          res.traces[s].blocks.push_back(std::move(e));
        }
      }
    }
    while (next_branch < branches_.size() &&
           branches_[next_branch].after_unit == static_cast<int>(i)) {
      res.exit_logits[next_branch] =
          branch_forward(static_cast<int>(next_branch), f);
      ++next_branch;
    }
  }
  res.exit_logits.back() = head_forward(f);

  for (size_t e = 0; e < res.exit_logits.size(); ++e)
    DDI_CHECK_T(ModelError, res.exit_logits[e].all_finite(),
                "non-finite logits at exit ", e + 1,
                " (diverged or bad input)");
  return res;
}

Checkpoint DDINetwork::to_checkpoint(bool include_momentum) const {
  Checkpoint c;
  c.arch_text = cfg_.to_text();
  c.has_momentum = include_momentum;
  auto add_params = [&](const ParamList& ps) {
    for (const auto& p : ps) c.add(p->name, p->value);
  };
  add_params(backbone_params_);
  add_params(gate_params_);
  add_params(branch_params_);

  auto add_stats = [&](const BatchNorm2d& bn) {
    if (bn.channels() == 0) return;
    c.add(bn.stats_name() + ".running_mean", bn.running_mean());
    c.add(bn.stats_name() + ".running_var", bn.running_var());
  };
  add_stats(stem_bn_);
  for (const auto& u : units_) {
    add_stats(u.bn1);
    add_stats(u.bn2);
    add_stats(u.bn_proj);
  }

  if (include_momentum) {
    auto add_momentum = [&](const ParamList& ps) {
      for (const auto& p : ps)
        c.add(p->name + ".momentum", Tensor(p->value.shape(), p->momentum));
    };
    add_momentum(backbone_params_);
    add_momentum(gate_params_);
    add_momentum(branch_params_);
  }
  return c;
}

void DDINetwork::load_state(const Checkpoint& ckpt) {
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const Tensor* src = ckpt.find(name);
    DDI_CHECK_T(DataError, src != nullptr, "checkpoint missing tensor '", name,
                "'");
    DDI_CHECK_T(DataError, src->shape() == dst.shape(),
                "checkpoint tensor '", name, "' has shape ",
                shape_str(src->shape()), ", network expects ",
                shape_str(dst.shape()));
    dst.vec() = src->vec();
  };
  auto load_params = [&](const ParamList& ps) {
    for (const auto& p : ps) {
      copy_into(p->name, p->value);
      if (ckpt.has_momentum) {
        const Tensor* m = ckpt.find(p->name + ".momentum");
        DDI_CHECK_T(DataError, m != nullptr,
                    "checkpoint advertises momentum but lacks '", p->name,
                    ".momentum'");
        DDI_CHECK_T(DataError, m->numel() == static_cast<int64_t>(p->momentum.size()),
                    "momentum size mismatch for '", p->name, "'");
        p->momentum = m->vec();
      }
    }
  };
  load_params(backbone_params_);
  load_params(gate_params_);
  load_params(branch_params_);

  auto load_stats = [&](BatchNorm2d& bn) {
    if (bn.channels() == 0) return;
    copy_into(bn.stats_name() + ".running_mean", bn.running_mean());
    copy_into(bn.stats_name() + ".running_var", bn.running_var());
  };
  load_stats(stem_bn_);
  for (auto& u : units_) {
    load_stats(u.bn1);
    load_stats(u.bn2);
    load_stats(u.bn_proj);
  }
}

DDINetwork DDINetwork::from_checkpoint(const Checkpoint& ckpt) {
  ArchConfig cfg = ArchConfig::from_text(ckpt.arch_text);
  Rng rng(0);  // weights overwritten immediately
  DDINetwork net(cfg, rng);
  net.load_state(ckpt);
  return net;
}

// ---------------------------------------------------------------------------
// Static cost ledger.

namespace {

LayerCost macs_only(int64_t macs) {
  // Gate pipelines are tiny relative to their hosts; their memory traffic is
  // ignored (accesses zero) while arithmetic is counted exactly.
  LayerCost c;
  c.macs = macs;
  c.flops = 2 * macs;
  return c;
}

LayerCost conv_unit_cost(int cin, int cout, int k, int stride, int pad, int hin,
                         int win, const MemModelConfig& mem) {
  ConvDimsSpec d;
  d.cin = cin;
  d.cout = cout;
  d.kh = d.kw = k;
  d.hin = hin;
  d.win = win;
  d.hout = conv_out_extent(hin, k, stride, pad);
  d.wout = conv_out_extent(win, k, stride, pad);
  return conv_cost_mem(d, mem);
}

}  // namespace

CostLedger build_cost_ledger(const DDINetwork& net, const MemModelConfig& mem,
                             const EnergyParams& eparams) {
  eparams.validate();
  CostLedger L;
  L.mem = mem;
  L.eparams = eparams;
  const ArchConfig& cfg = net.config();

  int stem_out = cfg.kind == BackboneKind::resnet ? cfg.widths[0] : 2 * cfg.growth;
  L.stem = conv_unit_cost(cfg.in_channels, stem_out, 3, 1, 1, cfg.image_size,
                          cfg.image_size, mem);
  L.stem.id = -1;

  for (const auto& u : net.units()) {
    BlockCost b;
    b.unit_id = u.unit_id;
    b.stage = u.stage;
    b.gated = u.gated();
    b.k = u.k;
    switch (u.kind) {
      case UnitKind::residual_gated:
        b.uncond = conv_unit_cost(u.k, u.k, 3, 1, 1, u.hin, u.win, mem);
        b.cond = conv_unit_cost(u.k, u.k, 3, 1, 1, u.hin, u.win, mem);
        b.layer_gate = macs_only(
            gate_macs(LayerGateConfig{u.in_channels, cfg.lstm_hidden}));
        b.channel_gate = macs_only(gate_macs(ChannelGateConfig{
            ChannelGateConfig::Variant::resnet, u.in_channels, u.k, u.hin,
            u.win}));
        break;
      case UnitKind::residual_transition: {
        b.uncond = conv_unit_cost(u.in_channels, u.out_channels, 3, 2, 1, u.hin,
                                  u.win, mem);
        int oh = conv_out_extent(u.hin, 3, 2, 1), ow = conv_out_extent(u.win, 3, 2, 1);
        b.uncond += conv_unit_cost(u.out_channels, u.out_channels, 3, 1, 1, oh,
                                   ow, mem);
        b.uncond += conv_unit_cost(u.in_channels, u.out_channels, 1, 2, 0,
                                   u.hin, u.win, mem);
        break;
      }
      case UnitKind::dense_gated:
        b.uncond = conv_unit_cost(u.in_channels, 4 * u.k, 1, 1, 0, u.hin, u.win,
                                  mem);
        b.cond = conv_unit_cost(4 * u.k, u.k, 3, 1, 1, u.hin, u.win, mem);
        b.layer_gate = macs_only(
            gate_macs(LayerGateConfig{u.in_channels, cfg.lstm_hidden}));
        b.channel_gate = macs_only(gate_macs(ChannelGateConfig{
            ChannelGateConfig::Variant::densenet, u.in_channels, u.k, u.hin,
            u.win}));
        break;
      case UnitKind::dense_transition:
        b.uncond = conv_unit_cost(u.in_channels, u.out_channels, 1, 1, 0, u.hin,
                                  u.win, mem);
        break;
    }
    L.blocks.push_back(b);
  }

  for (const auto& br : net.branches()) {
    LayerCost c;
    int bh = br.hin, bw = br.win;
    for (int p = 0; p < br.pools; ++p) {
      bh /= 2;
      bw /= 2;
      c += conv_unit_cost(br.width, br.width, 3, 1, 1, bh, bw, mem);
    }
    c += conv_unit_cost(br.width, cfg.num_classes, 1, 1, 0, 1, 1, mem);
    c.id = br.index;
    L.branch.push_back(c);
    L.branch_after_unit.push_back(br.after_unit);
  }

  L.head = conv_unit_cost(net.head_width(), cfg.num_classes, 1, 1, 0, 1, 1, mem);
  return L;
}

}  // namespace ddi

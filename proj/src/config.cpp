#include "ddi/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ddi/errors.hpp"

namespace ddi {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t parse_i64(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  DDI_CHECK_T(ConfigError, ec == std::errc() && p == v.data() + v.size(),
              key, ": expected an integer, got '", v, "'");
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  DDI_CHECK_T(ConfigError, ec == std::errc() && p == v.data() + v.size(),
              key, ": expected a non-negative integer, got '", v, "'");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  int64_t x = parse_i64(key, v);
  DDI_CHECK_T(ConfigError, x >= INT32_MIN && x <= INT32_MAX,
              key, ": value out of range: ", x);
  return static_cast<int>(x);
}

double parse_f64(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  DDI_CHECK_T(ConfigError, ec == std::errc() && p == v.data() + v.size(),
              key, ": expected a number, got '", v, "'");
  return out;
}

float parse_f32(const std::string& key, const std::string& v) {
  return static_cast<float>(parse_f64(key, v));
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(parse_int(key, trim(item)));
  DDI_CHECK_T(ConfigError, !out.empty(), key, ": expected a comma-separated "
              "integer list, got '", v, "'");
  return out;
}

// Shortest round-trip decimal form.
std::string fmt(double x) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, p);
}
std::string fmt(float x) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, p);
}

std::string join(const std::vector<int>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

std::string augment_name(Augment a) {
  return a == Augment::crop_flip ? "crop_flip" : "none";
}

Augment parse_augment(const std::string& v) {
  if (v == "none") return Augment::none;
  if (v == "crop_flip") return Augment::crop_flip;
  fail<ConfigError>("train.augment: expected none or crop_flip, got '", v,
                    "'");
}

std::string kind_name(BackboneKind k) {
  return k == BackboneKind::densenet ? "densenet" : "resnet";
}

void resolve_preset(ArchConfig& arch, const std::string& preset) {
  auto depth_of = [&](const std::string& prefix) {
    return parse_int("arch.preset", preset.substr(prefix.size()));
  };
  if (preset.rfind("resnet", 0) == 0) {
    arch = resnet_arch(depth_of("resnet"), arch.num_classes);
  } else if (preset.rfind("densenet", 0) == 0) {
    arch = densenet_arch(depth_of("densenet"), arch.growth, arch.num_classes);
  } else {
    fail<ConfigError>("arch.preset: expected resnet<depth> or "
                      "densenet<depth>, got '", preset, "'");
  }
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    if (size_t hash = raw.find('#'); hash != std::string::npos)
      raw.resize(hash);
    std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      DDI_CHECK_T(ConfigError, line.back() == ']',
                  "config line ", lineno, ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      DDI_CHECK_T(ConfigError, !section.empty(),
                  "config line ", lineno, ": empty section name");
      out[section];  // sections may legitimately hold no keys
      continue;
    }
    size_t eq = line.find('=');
    DDI_CHECK_T(ConfigError, eq != std::string::npos,
                "config line ", lineno, ": expected key = value, got '", line,
                "'");
    DDI_CHECK_T(ConfigError, !section.empty(),
                "config line ", lineno, ": key outside any [section]");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    DDI_CHECK_T(ConfigError, !key.empty(),
                "config line ", lineno, ": empty key");
    DDI_CHECK_T(ConfigError, !out[section].count(key),
                "config line ", lineno, ": duplicate key '", section, ".",
                key, "'");
    out[section][key] = value;
  }
  return out;
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  size_t dot = dotted_key.find('.');
  DDI_CHECK_T(ConfigError, dot != std::string::npos,
              "configuration key must be section.key, got '", dotted_key,
              "'");
  std::string sec = dotted_key.substr(0, dot);
  std::string key = dotted_key.substr(dot + 1);
  const std::string& k = dotted_key;

  if (sec == "run") {
    if (key == "out") { out_dir = value; return; }
    if (key == "seed") { seed = parse_u64(k, value); return; }
    if (key == "metric") { metric = parse_metric(value); return; }
  } else if (sec == "arch") {
    if (key == "preset") {
      arch_preset = value;
      resolve_preset(arch, value);
      return;
    }
    if (key == "kind") {
      if (value == "resnet") { arch.kind = BackboneKind::resnet; return; }
      if (value == "densenet") { arch.kind = BackboneKind::densenet; return; }
      fail<ConfigError>("arch.kind: expected resnet or densenet, got '",
                        value, "'");
    }
    if (key == "blocks") { arch.blocks_per_stage = parse_int_list(k, value); return; }
    if (key == "widths") { arch.widths = parse_int_list(k, value); return; }
    if (key == "growth") { arch.growth = parse_int(k, value); return; }
    if (key == "classes") { arch.num_classes = parse_int(k, value); return; }
    if (key == "in_channels") { arch.in_channels = parse_int(k, value); return; }
    if (key == "image_size") { arch.image_size = parse_int(k, value); return; }
    if (key == "lstm_hidden") { arch.lstm_hidden = parse_int(k, value); return; }
  } else if (sec == "train") {
    if (key == "lr") { train.lr = parse_f32(k, value); return; }
    if (key == "momentum") { train.momentum = parse_f32(k, value); return; }
    if (key == "weight_decay") { train.weight_decay = parse_f32(k, value); return; }
    if (key == "batch_size") { train.batch_size = parse_int(k, value); return; }
    if (key == "alpha") { train.alpha_magnitude = parse_f32(k, value); return; }
    if (key == "target_skip") { train.target_skip_ratio = parse_f32(k, value); return; }
    if (key == "augment") { train.augment = parse_augment(value); return; }
    if (key == "pretrain_iters") { pretrain_iters = parse_int(k, value); return; }
    if (key == "warmup_iters") { warmup_iters = parse_int(k, value); return; }
    if (key == "iadi_iters") { iadi_iters = parse_int(k, value); return; }
    if (key == "ddi_iters") { ddi_iters = parse_int(k, value); return; }
  } else if (sec == "cost") {
    if (key == "e_dram") { eparams.e[0] = parse_f64(k, value); return; }
    if (key == "e_cache") { eparams.e[1] = parse_f64(k, value); return; }
    if (key == "e_reg") { eparams.e[2] = parse_f64(k, value); return; }
    if (key == "e_mac") { eparams.e_mac = parse_f64(k, value); return; }
    if (key == "cache_bytes") { mem.cache_bytes = parse_i64(k, value); return; }
    if (key == "regfile_bytes") { mem.regfile_bytes = parse_i64(k, value); return; }
  } else if (sec == "data") {
    if (key == "dataset") { data.dataset = value; return; }
    if (key == "root") { data.root = value; return; }
    if (key == "synthetic_train") { data.synthetic_train = parse_int(k, value); return; }
    if (key == "synthetic_eval") { data.synthetic_eval = parse_int(k, value); return; }
  }
  fail<ConfigError>("unknown configuration key '", dotted_key, "'");
}

RunConfig RunConfig::from_text(const std::string& text) {
  ConfigMap m = parse_config_text(text);
  RunConfig cfg;
  // The preset resolves first so explicit arch keys override its fields,
  // regardless of where they sit in the file.
  if (auto a = m.find("arch"); a != m.end()) {
    if (auto p = a->second.find("preset"); p != a->second.end())
      cfg.set("arch.preset", p->second);
  }
  for (const auto& [sec, kv] : m)
    for (const auto& [key, value] : kv)
      if (!(sec == "arch" && key == "preset"))
        cfg.set(sec + "." + key, value);
  if (cfg.data.root.empty()) {
    if (const char* env = std::getenv("DDI_DATA_ROOT")) cfg.data.root = env;
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  DDI_CHECK_T(ConfigError, in.good(), "cannot open config file '", path, "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void RunConfig::validate() const {
  DDI_CHECK_T(ConfigError, !out_dir.empty(), "run.out must not be empty");
  arch.validate();
  train.validate();
  DDI_CHECK_T(ConfigError,
              pretrain_iters >= 0 && warmup_iters >= 0 && iadi_iters >= 0 &&
                  ddi_iters >= 0,
              "phase iteration caps must be non-negative");
  eparams.validate();
  DDI_CHECK_T(ConfigError, mem.cache_bytes > 0 && mem.regfile_bytes > 0,
              "memory model sizes must be positive");
  DDI_CHECK_T(ConfigError,
              data.dataset == "synthetic" || data.dataset == "mnist" ||
                  data.dataset == "cifar10" || data.dataset == "file",
              "data.dataset: expected synthetic, mnist, cifar10, or file, "
              "got '", data.dataset, "'");
  DDI_CHECK_T(ConfigError, data.synthetic_train >= 1 && data.synthetic_eval >= 1,
              "synthetic dataset sizes must be positive");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "[run]\n"
     << "out = " << out_dir << "\n"
     << "seed = " << seed << "\n"
     << "metric = " << metric_name(metric) << "\n\n";
  os << "[arch]\n";
  if (!arch_preset.empty()) os << "preset = " << arch_preset << "\n";
  os << "kind = " << kind_name(arch.kind) << "\n"
     << "blocks = " << join(arch.blocks_per_stage) << "\n"
     << "widths = " << join(arch.widths) << "\n"
     << "growth = " << arch.growth << "\n"
     << "classes = " << arch.num_classes << "\n"
     << "in_channels = " << arch.in_channels << "\n"
     << "image_size = " << arch.image_size << "\n"
     << "lstm_hidden = " << arch.lstm_hidden << "\n\n";
  os << "[train]\n"
     << "lr = " << fmt(train.lr) << "\n"
     << "momentum = " << fmt(train.momentum) << "\n"
     << "weight_decay = " << fmt(train.weight_decay) << "\n"
     << "batch_size = " << train.batch_size << "\n"
     << "alpha = " << fmt(train.alpha_magnitude) << "\n"
     << "target_skip = " << fmt(train.target_skip_ratio) << "\n"
     << "augment = " << augment_name(train.augment) << "\n"
     << "pretrain_iters = " << pretrain_iters << "\n"
     << "warmup_iters = " << warmup_iters << "\n"
     << "iadi_iters = " << iadi_iters << "\n"
     << "ddi_iters = " << ddi_iters << "\n\n";
  os << "[cost]\n"
     << "e_dram = " << fmt(eparams.e[0]) << "\n"
     << "e_cache = " << fmt(eparams.e[1]) << "\n"
     << "e_reg = " << fmt(eparams.e[2]) << "\n"
     << "e_mac = " << fmt(eparams.e_mac) << "\n"
     << "cache_bytes = " << mem.cache_bytes << "\n"
     << "regfile_bytes = " << mem.regfile_bytes << "\n\n";
  os << "[data]\n"
     << "dataset = " << data.dataset << "\n"
     << "root = " << data.root << "\n"
     << "synthetic_train = " << data.synthetic_train << "\n"
     << "synthetic_eval = " << data.synthetic_eval << "\n";
  return os.str();
}

}  // namespace ddi

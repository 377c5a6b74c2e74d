#include "expertnet/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace expertnet {

namespace {

constexpr char kModelMagic[8] = {'X', 'P', 'N', 'M', '0', '0', '0', '1'};

constexpr std::string_view kCanonicalConfig = R"(# Canonical profile: 128x128 RGB input, seven expression classes.
input channels=3 height=128 width=128
elective mode=literal
conv name=Conv1 k=5 out=32 stride=1 act=relu
conv name=Conv2 k=3 out=32 stride=2 act=relu
exfeat name=ExFeat1
add name=Add1 skip=Conv2
conv name=Conv4 k=3 out=64 stride=2 act=relu
exfeat name=ExFeat2
add name=Add2 skip=Conv4
conv name=Conv5 k=3 out=96 stride=2 act=relu
exfeat name=ExFeat3
add name=Add3 skip=Conv5
conv name=Conv7 k=3 out=128 stride=2 act=relu
exfeat name=ExFeat4
add name=Add4 skip=Conv7
conv name=Conv9 k=3 out=184 stride=2 act=relu
conv name=Conv10 k=3 out=256 stride=2 act=relu
fc name=FC1 out=512 act=relu
fc name=FC2 out=1024 act=relu
classifier name=Classifier classes=7
)";

constexpr std::string_view kDeskConfig = R"(# Desk profile: 32x32 input, channel ladder 8/16/24/32, two ExFeat blocks.
input channels=3 height=32 width=32
elective mode=literal
conv name=Conv1 k=5 out=8 stride=1 act=relu
conv name=Conv2 k=3 out=8 stride=2 act=relu
exfeat name=ExFeat1
add name=Add1 skip=Conv2
conv name=Conv4 k=3 out=16 stride=2 act=relu
exfeat name=ExFeat2
add name=Add2 skip=Conv4
conv name=Conv5 k=3 out=24 stride=2 act=relu
conv name=Conv7 k=3 out=32 stride=2 act=relu
fc name=FC1 out=64 act=relu
fc name=FC2 out=64 act=relu
classifier name=Classifier classes=4
)";

constexpr ReferenceCount kReference[] = {
    {"Conv1", "2K", 2'000},       {"Conv2", "9K", 9'000},       {"ExFeat1", "86K", 86'000},
    {"Conv4", "18K", 18'000},     {"ExFeat2", "342K", 342'000}, {"Conv5", "55K", 55'000},
    {"ExFeat3", "773K", 773'000}, {"Conv7", "111K", 111'000},   {"ExFeat4", "1M", 1'000'000},
    {"Conv9", "212K", 212'000},   {"Conv10", "424K", 424'000},  {"FC1", "525K", 525'000},
    {"FC2", "525K", 525'000},
};

std::int64_t as_i64(std::size_t v) { return static_cast<std::int64_t>(v); }

// ---------------------------------------------------------------------------
// Config parsing

[[noreturn]] void config_fail(std::size_t line, const std::string& message) {
  throw ConfigError("config line " + std::to_string(line) + ": " + message);
}

struct Declaration {
  std::size_t line = 0;
  std::string kind;
  std::map<std::string, std::string> fields;
  std::set<std::string> used;

  const std::string* find(const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end()) return nullptr;
    used.insert(key);
    return &it->second;
  }

  std::string text(const std::string& key) {
    const std::string* v = find(key);
    if (!v) config_fail(line, kind + " requires " + key + "=");
    return *v;
  }

  std::size_t number(const std::string& key, std::optional<std::size_t> fallback = std::nullopt) {
    const std::string* v = find(key);
    if (!v) {
      if (fallback) return *fallback;
      config_fail(line, kind + " requires " + key + "=");
    }
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || ptr != v->data() + v->size()) {
      config_fail(line, key + "=" + *v + " is not a non-negative integer");
    }
    return out;
  }

  void reject_unused() const {
    for (const auto& [key, value] : fields) {
      if (!used.contains(key)) config_fail(line, "unknown key '" + key + "' for " + kind);
    }
  }
};

std::vector<Declaration> tokenize(std::string_view text) {
  std::vector<Declaration> out;
  std::istringstream lines{std::string(text)};
  std::string raw;
  std::size_t number = 0;
  while (std::getline(lines, raw)) {
    ++number;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream words(raw);
    std::string word;
    Declaration decl;
    decl.line = number;
    if (!(words >> decl.kind)) continue;
    while (words >> word) {
      const auto eq = word.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == word.size()) {
        config_fail(number, "expected key=value, got '" + word + "'");
      }
      const std::string key = word.substr(0, eq);
      if (decl.fields.contains(key)) config_fail(number, "duplicate key '" + key + "'");
      decl.fields[key] = word.substr(eq + 1);
    }
    out.push_back(std::move(decl));
  }
  return out;
}

std::string with_commas(std::size_t value) {
  std::string digits = std::to_string(value);
  for (int i = static_cast<int>(digits.size()) - 3; i > 0; i -= 3) digits.insert(i, ",");
  return digits;
}

std::string signed_with_commas(long long value) {
  return (value < 0 ? "-" : "+") + with_commas(static_cast<std::size_t>(std::llabs(value)));
}

std::string hwc(const Shape& s) {
  return std::to_string(s.h()) + "x" + std::to_string(s.w()) + "x" + std::to_string(s.c());
}

std::size_t param_slots(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv:
    case LayerKind::fc:
    case LayerKind::classifier:
      return 2;
    case LayerKind::exfeat:
      return 2 * kExfeatKernels.size();
    case LayerKind::add:
      return 0;
  }
  return 0;
}

void fnv_mix(std::uint64_t& h, std::uint8_t byte) {
  h ^= byte;
  h *= 0x100000001b3ULL;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv:
      return "conv";
    case LayerKind::exfeat:
      return "exfeat";
    case LayerKind::add:
      return "add";
    case LayerKind::fc:
      return "fc";
    case LayerKind::classifier:
      return "classifier";
  }
  return "?";
}

std::size_t ModelConfig::num_classes() const {
  if (layers.empty() || layers.back().kind != LayerKind::classifier) {
    throw ConfigError("config has no trailing classifier layer");
  }
  return layers.back().out;
}

Shape ModelConfig::input_shape(std::size_t batch) const {
  return Shape(as_i64(batch), as_i64(in_channels), as_i64(in_height), as_i64(in_width));
}

ModelConfig parse_config(std::string_view text) {
  ModelConfig config;
  bool have_input = false;
  for (auto& decl : tokenize(text)) {
    if (decl.kind == "input") {
      if (have_input) config_fail(decl.line, "duplicate input declaration");
      have_input = true;
      config.in_channels = decl.number("channels", 3);
      config.in_height = decl.number("height");
      config.in_width = decl.number("width");
    } else if (decl.kind == "elective") {
      try {
        config.elective_mode = ops::parse_elective_mode(decl.text("mode"));
      } catch (const ConfigError& e) {
        config_fail(decl.line, e.what());
      }
    } else {
      LayerSpec layer;
      layer.name = decl.text("name");
      if (decl.kind == "conv") {
        layer.kind = LayerKind::conv;
        layer.kernel = decl.number("k");
        layer.out = decl.number("out");
        layer.stride = static_cast<int>(decl.number("stride", 1));
      } else if (decl.kind == "exfeat") {
        layer.kind = LayerKind::exfeat;
      } else if (decl.kind == "add") {
        layer.kind = LayerKind::add;
        layer.skip = decl.text("skip");
      } else if (decl.kind == "fc") {
        layer.kind = LayerKind::fc;
        layer.out = decl.number("out");
      } else if (decl.kind == "classifier") {
        layer.kind = LayerKind::classifier;
        layer.out = decl.number("classes");
      } else {
        config_fail(decl.line, "unknown declaration '" + decl.kind + "'");
      }
      if (layer.kind == LayerKind::conv || layer.kind == LayerKind::fc) {
        if (const std::string* act = decl.find("act")) {
          try {
            layer.act = ops::parse_activation(*act);
          } catch (const ConfigError& e) {
            config_fail(decl.line, e.what());
          }
        }
      }
      config.layers.push_back(std::move(layer));
    }
    decl.reject_unused();
  }
  if (!have_input) throw ConfigError("config has no input declaration");
  propagate_shapes(config);
  return config;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string format_config(const ModelConfig& config) {
  std::ostringstream out;
  out << "input channels=" << config.in_channels << " height=" << config.in_height
      << " width=" << config.in_width << "\n";
  out << "elective mode=" << ops::to_string(config.elective_mode) << "\n";
  for (const auto& l : config.layers) {
    out << to_string(l.kind) << " name=" << l.name;
    switch (l.kind) {
      case LayerKind::conv:
        out << " k=" << l.kernel << " out=" << l.out << " stride=" << l.stride
            << " act=" << ops::to_string(l.act);
        break;
      case LayerKind::exfeat:
        break;
      case LayerKind::add:
        out << " skip=" << l.skip;
        break;
      case LayerKind::fc:
        out << " out=" << l.out << " act=" << ops::to_string(l.act);
        break;
      case LayerKind::classifier:
        out << " classes=" << l.out;
        break;
    }
    out << "\n";
  }
  return out.str();
}

std::string_view canonical_config_text() { return kCanonicalConfig; }
std::string_view desk_config_text() { return kDeskConfig; }

std::vector<LayerInfo> propagate_shapes(const ModelConfig& config) {
  if (config.in_channels == 0 || config.in_height == 0 || config.in_width == 0) {
    throw ConfigError("input extents must be >= 1");
  }
  if (config.layers.empty()) throw ConfigError("config declares no layers");

  std::vector<LayerInfo> infos;
  std::unordered_map<std::string, std::size_t> index;
  Shape cur = config.input_shape();
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    const std::string where = "layer '" + l.name + "'";
    if (l.name.empty()) throw ConfigError("layer " + std::to_string(i) + " has no name");
    if (index.contains(l.name)) throw ConfigError("duplicate layer name '" + l.name + "'");
    if (l.kind == LayerKind::classifier && i + 1 != config.layers.size()) {
      throw ConfigError(where + ": the classifier must be the last layer");
    }
    LayerInfo info{l.name, l.kind, cur, 0};
    const std::size_t c = cur.c();
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.kernel == 0 || l.kernel % 2 == 0) throw ConfigError(where + ": k must be odd");
        if (l.out == 0) throw ConfigError(where + ": out must be >= 1");
        if (l.stride != 1 && l.stride != 2) throw ConfigError(where + ": stride must be 1 or 2");
        const auto s = static_cast<std::size_t>(l.stride);
        std::size_t h = 0, w = 0;
        try {
          h = ops::conv_out_extent(cur.h(), l.kernel, l.kernel / 2, s);
          w = ops::conv_out_extent(cur.w(), l.kernel, l.kernel / 2, s);
        } catch (const ShapeError& e) {
          throw ConfigError(where + ": " + e.what());
        }
        info.output = Shape(1, as_i64(l.out), as_i64(h), as_i64(w));
        info.params = l.kernel * l.kernel * c * l.out + l.out;
        break;
      }
      case LayerKind::exfeat:
        for (std::size_t k : kExfeatKernels) info.params += k * k * c * c + c;
        break;
      case LayerKind::add: {
        auto it = index.find(l.skip);
        if (it == index.end()) {
          throw ConfigError(where + ": skip source '" + l.skip + "' is not an earlier layer");
        }
        const Shape& skip_shape = infos[it->second].output;
        if (skip_shape != cur) {
          throw ConfigError(where + ": skip source shape " + hwc(skip_shape) +
                            " differs from input " + hwc(cur));
        }
        break;
      }
      case LayerKind::fc:
      case LayerKind::classifier: {
        const std::size_t min_out = l.kind == LayerKind::classifier ? 2 : 1;
        if (l.out < min_out) {
          throw ConfigError(where + (l.kind == LayerKind::classifier ? ": classes must be >= 2"
                                                                      : ": out must be >= 1"));
        }
        info.output = Shape(1, as_i64(l.out), 1, 1);
        info.params = cur.item_size() * l.out + l.out;
        break;
      }
    }
    index[l.name] = i;
    infos.push_back(info);
    cur = info.output;
  }
  if (config.layers.back().kind != LayerKind::classifier) {
    throw ConfigError("the last layer must be a classifier");
  }
  return infos;
}

// ---------------------------------------------------------------------------

std::span<const ReferenceCount> reference_counts() { return kReference; }

ParamAudit audit_parameters(const ModelConfig& config) {
  ParamAudit audit;
  const auto infos = propagate_shapes(config);
  std::size_t found = 0;
  for (const auto& info : infos) {
    AuditRow row{info.name, info.kind, info.output, info.params, std::nullopt};
    for (const auto& p : kReference) {
      if (p.layer == info.name) {
        row.reference = p;
        ++found;
      }
    }
    audit.total += info.params;
    audit.rows.push_back(std::move(row));
  }
  audit.canonical = found == std::size(kReference) && config.in_channels == 3 &&
                    config.in_height == 128 && config.in_width == 128;
  for (auto& row : audit.rows) {
    if (!audit.canonical || !row.reference) {
      row.reference.reset();
      continue;
    }
    row.matches_reference = (row.params + 500) / 1000 == row.reference->nominal / 1000;
    row.delta = static_cast<long long>(row.params) - static_cast<long long>(row.reference->nominal);
  }
  return audit;
}

std::string format_audit(const ParamAudit& audit) {
  std::ostringstream out;
  out << std::left << std::setw(12) << "layer" << std::setw(12) << "kind" << std::setw(16)
      << "output" << std::right << std::setw(12) << "params";
  if (audit.canonical) out << "  " << std::setw(9) << "reference" << std::setw(12) << "delta" << "  status";
  out << "\n";
  for (const auto& row : audit.rows) {
    out << std::left << std::setw(12) << row.name << std::setw(12) << to_string(row.kind)
        << std::setw(16) << hwc(row.output) << std::right << std::setw(12)
        << (row.params ? with_commas(row.params) : std::string("-"));
    if (audit.canonical && row.reference) {
      out << "  " << std::setw(9) << row.reference->printed << std::setw(12)
          << signed_with_commas(row.delta) << "  "
          << (row.matches_reference ? "ok" : "DIFFERS (computed " + with_commas(row.params) + ")");
    }
    out << "\n";
  }
  out << std::left << std::setw(40) << "total" << std::right << std::setw(12)
      << with_commas(audit.total) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Network

template <Real T>
Network<T> Network<T>::zeros(const ModelConfig& config) {
  Network net;
  net.config_ = config;
  net.layers_ = propagate_shapes(config);
  net.params_.resize(config.layers.size());
  net.skip_index_.assign(config.layers.size(), 0);
  Shape in = config.input_shape();
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    LayerParams& p = net.params_[i];
    const auto c = as_i64(in.c());
    switch (l.kind) {
      case LayerKind::conv:
        p.convs.push_back({Tensor<T>(Shape(as_i64(l.out), c, as_i64(l.kernel), as_i64(l.kernel))),
                           Tensor<T>(Shape(1, 1, 1, as_i64(l.out))), l.stride});
        break;
      case LayerKind::exfeat:
        for (std::size_t k : kExfeatKernels) {
          p.convs.push_back(
              {Tensor<T>(Shape(c, c, as_i64(k), as_i64(k))), Tensor<T>(Shape(1, 1, 1, c)), 1});
        }
        break;
      case LayerKind::add:
        net.skip_index_[i] = net.layer_index(l.skip);
        break;
      case LayerKind::fc:
      case LayerKind::classifier:
        p.fc = ops::FcParams<T>{Tensor<T>(Shape(1, 1, as_i64(l.out), as_i64(in.item_size()))),
                                Tensor<T>(Shape(1, 1, 1, as_i64(l.out)))};
        break;
    }
    in = net.layers_[i].output;
  }
  return net;
}

template <Real T>
Network<T> Network<T>::build(const ModelConfig& config, SeededRng& rng) {
  Network net = zeros(config);
  for (auto& p : net.params_) {
    for (auto& conv : p.convs) {
      const Shape& s = conv.weights.shape();
      const double fan_in = static_cast<double>(s.c() * s.h() * s.w());
      conv.weights = Tensor<T>::randn(s, static_cast<T>(std::sqrt(2.0 / fan_in)), rng);
    }
    if (p.fc) {
      const Shape& s = p.fc->weights.shape();
      p.fc->weights = Tensor<T>::randn(s, static_cast<T>(std::sqrt(2.0 / static_cast<double>(s.w()))), rng);
    }
  }
  return net;
}

template <Real T>
std::size_t Network<T>::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    if (config_.layers[i].name == name) return i;
  }
  std::string valid;
  for (const auto& l : config_.layers) valid += (valid.empty() ? "" : ", ") + l.name;
  throw LookupError("unknown layer '" + std::string(name) + "' (valid: " + valid + ")");
}

template <Real T>
std::vector<Tensor<T>*> Network<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& p : params_) {
    for (auto& conv : p.convs) {
      out.push_back(&conv.weights);
      out.push_back(&conv.bias);
    }
    if (p.fc) {
      out.push_back(&p.fc->weights);
      out.push_back(&p.fc->bias);
    }
  }
  return out;
}

template <Real T>
std::vector<const Tensor<T>*> Network<T>::parameters() const {
  std::vector<const Tensor<T>*> out;
  for (Tensor<T>* t : const_cast<Network*>(this)->parameters()) out.push_back(t);
  return out;
}

template <Real T>
std::vector<std::string> Network<T>::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const LayerSpec& l = config_.layers[i];
    if (l.kind == LayerKind::exfeat) {
      for (std::size_t k : kExfeatKernels) {
        out.push_back(l.name + ".k" + std::to_string(k) + ".weights");
        out.push_back(l.name + ".k" + std::to_string(k) + ".bias");
      }
    } else if (param_slots(l.kind) == 2) {
      out.push_back(l.name + ".weights");
      out.push_back(l.name + ".bias");
    }
  }
  return out;
}

template <Real T>
std::size_t Network<T>::parameter_count() const {
  std::size_t total = 0;
  for (const Tensor<T>* t : parameters()) total += t->size();
  return total;
}

template <Real T>
typename Network<T>::ForwardResult Network<T>::forward(const Tensor<T>& batch,
                                                       const std::set<std::string>& capture) const {
  if (batch.shape().with_batch(1) != config_.input_shape()) {
    throw ShapeError("network input " + batch.shape().str() + " does not match configured " +
                     config_.input_shape(batch.shape().n()).str());
  }
  for (const auto& name : capture) layer_index(name);

  ForwardResult result;
  Trace& trace = result.trace;
  trace.input = batch;
  trace.layers.resize(config_.layers.size());
  const Tensor<T>* cur = &trace.input;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const LayerSpec& l = config_.layers[i];
    const LayerParams& p = params_[i];
    auto& slot = trace.layers[i];
    switch (l.kind) {
      case LayerKind::conv:
        slot.output = ops::conv2d(*cur, p.convs[0]);
        if (l.act == ops::Activation::relu) slot.output = ops::relu(slot.output);
        break;
      case LayerKind::exfeat:
        for (const auto& conv : p.convs) slot.branches.push_back(ops::conv2d(*cur, conv));
        slot.output = ops::elective_fuse<T>(slot.branches, config_.elective_mode);
        break;
      case LayerKind::add:
        slot.output = ops::additive(*cur, trace.layers[skip_index_[i]].output);
        break;
      case LayerKind::fc:
        slot.output = ops::fc_forward(*cur, *p.fc, l.act);
        break;
      case LayerKind::classifier:
        slot.output = ops::fc_forward(*cur, *p.fc, ops::Activation::identity);
        break;
    }
    if (capture.contains(l.name)) result.captures[l.name] = slot.output;
    cur = &slot.output;
  }
  result.logits = *cur;
  trace.valid = true;
  return result;
}

template <Real T>
std::vector<Tensor<T>> Network<T>::backward(const Trace& trace, const Tensor<T>& grad_logits) const {
  if (!trace.valid || trace.layers.size() != config_.layers.size()) {
    throw UsageError("backward called without a forward trace");
  }
  const std::size_t count = config_.layers.size();
  if (grad_logits.shape() != trace.layers.back().output.shape()) {
    throw ShapeError("backward: logits gradient " + grad_logits.shape().str() + " vs logits " +
                     trace.layers.back().output.shape().str());
  }

  std::vector<std::size_t> first_slot(count, 0);
  std::size_t slots = 0;
  for (std::size_t i = 0; i < count; ++i) {
    first_slot[i] = slots;
    slots += param_slots(config_.layers[i].kind);
  }
  std::vector<Tensor<T>> grads(slots);

  // Gradient w.r.t. each layer's output; filled by consumers.
  std::vector<std::optional<Tensor<T>>> upstream(count);
  upstream[count - 1] = grad_logits;
  auto accumulate = [&](std::size_t layer, Tensor<T>&& g) {
    if (upstream[layer]) {
      upstream[layer]->add_inplace(g);
    } else {
      upstream[layer] = std::move(g);
    }
  };

  for (std::size_t i = count; i-- > 0;) {
    const LayerSpec& l = config_.layers[i];
    const LayerParams& p = params_[i];
    const auto& slot = trace.layers[i];
    const Tensor<T>& input = i == 0 ? trace.input : trace.layers[i - 1].output;
    Tensor<T> g = upstream[i] ? std::move(*upstream[i]) : Tensor<T>(slot.output.shape());
    upstream[i].reset();
    const std::size_t s = first_slot[i];
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.act == ops::Activation::relu) g = ops::relu_backward(slot.output, g);
        auto cg = ops::conv2d_backward(input, p.convs[0], g);
        grads[s] = std::move(cg.weights);
        grads[s + 1] = std::move(cg.bias);
        if (i > 0) accumulate(i - 1, std::move(cg.input));
        break;
      }
      case LayerKind::exfeat: {
        auto eg = ops::elective_backward<T>(slot.branches, g, config_.elective_mode);
        Tensor<T> gin(input.shape());
        for (std::size_t b = 0; b < p.convs.size(); ++b) {
          auto cg = ops::conv2d_backward(input, p.convs[b], eg[b]);
          grads[s + 2 * b] = std::move(cg.weights);
          grads[s + 2 * b + 1] = std::move(cg.bias);
          gin.add_inplace(cg.input);
        }
        if (i > 0) accumulate(i - 1, std::move(gin));
        break;
      }
      case LayerKind::add:
        accumulate(skip_index_[i], Tensor<T>(g));
        if (i > 0) accumulate(i - 1, std::move(g));
        break;
      case LayerKind::fc:
      case LayerKind::classifier: {
        const auto act = l.kind == LayerKind::fc ? l.act : ops::Activation::identity;
        auto fg = ops::fc_backward(input, *p.fc, act, slot.output, g);
        grads[s] = std::move(fg.weights);
        grads[s + 1] = std::move(fg.bias);
        if (i > 0) accumulate(i - 1, std::move(fg.input));
        break;
      }
    }
  }
  return grads;
}

template <Real T>
std::uint64_t Network<T>::decision_signature(const Trace& trace) const {
  if (!trace.valid) throw UsageError("decision_signature needs a forward trace");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const LayerSpec& l = config_.layers[i];
    const auto& slot = trace.layers[i];
    if (l.kind == LayerKind::exfeat) {
      for (std::uint8_t code : ops::elective_decisions<T>(slot.branches)) fnv_mix(h, code);
    } else if ((l.kind == LayerKind::conv || l.kind == LayerKind::fc) &&
               l.act == ops::Activation::relu) {
      for (T v : slot.output.data()) fnv_mix(h, v > T(0) ? 1 : 0);
    }
  }
  return h;
}

template <Real T>
template <Real U>
Network<U> Network<T>::cast() const {
  Network<U> out;
  out.config_ = config_;
  out.layers_ = layers_;
  out.skip_index_ = skip_index_;
  for (const auto& p : params_) {
    typename Network<U>::LayerParams q;
    for (const auto& conv : p.convs) {
      q.convs.push_back({conv.weights.template cast<U>(), conv.bias.template cast<U>(), conv.stride,
                         conv.padding});
    }
    if (p.fc) q.fc = ops::FcParams<U>{p.fc->weights.template cast<U>(), p.fc->bias.template cast<U>()};
    out.params_.push_back(std::move(q));
  }
  return out;
}

template <Real T>
LossAndGrads<T> loss_and_gradients(const Network<T>& net, const Tensor<T>& batch,
                                   std::span<const std::size_t> labels) {
  auto fwd = net.forward(batch);
  auto xent = ops::softmax_xent_batch(fwd.logits, labels);
  auto grads = net.backward(fwd.trace, xent.grad_logits);
  return {xent.mean_loss, std::move(xent.losses), std::move(fwd.logits), std::move(grads)};
}

gradcheck::Report check_network(Network<double>& net, const TensorD& batch,
                                std::span<const std::size_t> labels, std::size_t coords,
                                SeededRng& rng, double eps) {
  const auto base = net.forward(batch);
  const std::uint64_t base_signature = net.decision_signature(base.trace);
  const auto analytic = loss_and_gradients(net, batch, labels).grads;

  auto params = net.parameters();
  const auto names = net.parameter_names();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const TensorD* t : params) {
    offsets.push_back(total);
    total += t->size();
  }

  auto probe = [&](std::uint64_t& signature) {
    const auto fwd = net.forward(batch);
    signature = net.decision_signature(fwd.trace);
    return ops::softmax_xent_batch(fwd.logits, labels).mean_loss;
  };

  gradcheck::Report report{"network", eps, {}};
  std::map<std::size_t, gradcheck::Entry> entries;
  constexpr int kMaxAttempts = 200;
  for (std::size_t k = 0; k < coords; ++k) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      const std::size_t flat = rng.uniform_index(total);
      const std::size_t t =
          static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) -
                                   offsets.begin()) - 1;
      const std::size_t i = flat - offsets[t];
      double& x = (*params[t])[i];
      const double saved = x;
      std::uint64_t sig_up = 0, sig_down = 0;
      x = saved + eps;
      const double up = probe(sig_up);
      x = saved - eps;
      const double down = probe(sig_down);
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("gradcheck network: non-finite loss probing " + names[t]);
      }
      if (sig_up != base_signature || sig_down != base_signature) continue;
      accepted = true;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double err = gradcheck::relative_error(a, numeric);
      auto [it, fresh] = entries.try_emplace(t, gradcheck::Entry{names[t], 0});
      auto& e = it->second;
      ++e.coordinates;
      if (fresh || err > e.max_rel_error) {
        e.max_rel_error = err;
        e.worst_index = i;
        e.worst_analytic = a;
        e.worst_numeric = numeric;
      }
    }
    if (!accepted) throw NumericError("gradcheck network: every probe crossed a kink");
  }
  for (auto& [t, e] : entries) report.entries.push_back(e);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

template <Real T>
void save_model(const Network<T>& net, std::ostream& out) {
  out.write(kModelMagic, 8);
  detail::write_u32(out, kModelFormatVersion);
  const std::string text = format_config(net.config());
  detail::write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_u32(out, sizeof(T) * 8);
  for (const Tensor<T>* t : net.parameters()) write_tensor(out, *t);
  if (!out) throw FormatError("save_model: stream failure");
}

template <Real T>
Network<T> load_model(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8)) throw FormatError("truncated model: missing magic");
  if (std::memcmp(magic, kModelMagic, 8) != 0) throw FormatError("not a model file (bad magic)");
  const std::uint32_t version = detail::read_u32(in, "model version");
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported model version " + std::to_string(version));
  }
  const std::uint32_t length = detail::read_u32(in, "config length");
  if (length > (1u << 24)) throw FormatError("config block too large");
  std::string text(length, '\0');
  if (!in.read(text.data(), length)) throw FormatError("truncated model: config block");
  ModelConfig config;
  try {
    config = parse_config(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model config block: ") + e.what());
  }
  const std::uint32_t precision = detail::read_u32(in, "precision tag");
  if (precision != 32 && precision != 64) {
    throw FormatError("unknown precision tag " + std::to_string(precision));
  }
  if (precision != sizeof(T) * 8) {
    throw FormatError("model precision is " + std::to_string(precision) + "-bit, expected " +
                      std::to_string(sizeof(T) * 8) + "-bit");
  }
  Network<T> net = Network<T>::zeros(config);
  for (Tensor<T>* t : net.parameters()) {
    Tensor<T> loaded = read_tensor<T>(in);
    if (loaded.shape() != t->shape()) {
      throw FormatError("parameter shape " + loaded.shape().str() + " does not match " +
                        t->shape().str());
    }
    *t = std::move(loaded);
  }
  return net;
}

template <Real T>
void save_model_file(const Network<T>& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write model " + path);
  save_model(net, out);
}

template <Real T>
Network<T> load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open model " + path);
  return load_model<T>(in);
}

// ---------------------------------------------------------------------------

template <Real T>
std::vector<GrayImage> dump_feature_maps(const FeatureCapture<T>& captures, std::string_view layer,
                                         std::size_t item) {
  auto it = captures.find(std::string(layer));
  if (it == captures.end()) {
    std::string valid;
    for (const auto& [name, t] : captures) valid += (valid.empty() ? "" : ", ") + name;
    throw LookupError("layer '" + std::string(layer) + "' was not captured (captured: " + valid + ")");
  }
  const Tensor<T>& t = it->second;
  const Shape& s = t.shape();
  if (item >= s.n()) throw LookupError("batch item out of range");
  std::vector<GrayImage> images;
  const std::size_t plane = s.h() * s.w();
  for (std::size_t c = 0; c < s.c(); ++c) {
    const T* v = t.raw() + t.index(item, c, 0, 0);
    const auto [lo, hi] = std::minmax_element(v, v + plane);
    GrayImage img{s.w(), s.h(), std::vector<std::uint8_t>(plane, 0)};
    if (*hi > *lo) {
      const double lo_v = *lo;
      const double range = static_cast<double>(*hi) - lo_v;
      for (std::size_t i = 0; i < plane; ++i) {
        img.pixels[i] = static_cast<std::uint8_t>(std::lround((v[i] - lo_v) / range * 255.0));
      }
    }
    images.push_back(std::move(img));
  }
  return images;
}

template class Network<float>;
template class Network<double>;
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;

#define EXPERTNET_INSTANTIATE_MODEL(T)                                                          \
  template LossAndGrads<T> loss_and_gradients(const Network<T>&, const Tensor<T>&,              \
                                              std::span<const std::size_t>);                    \
  template void save_model(const Network<T>&, std::ostream&);                                   \
  template Network<T> load_model<T>(std::istream&);                                             \
  template void save_model_file(const Network<T>&, const std::string&);                         \
  template Network<T> load_model_file<T>(const std::string&);                                   \
  template std::vector<GrayImage> dump_feature_maps(const FeatureCapture<T>&, std::string_view, \
                                                    std::size_t);

EXPERTNET_INSTANTIATE_MODEL(float)
EXPERTNET_INSTANTIATE_MODEL(double)

#undef EXPERTNET_INSTANTIATE_MODEL

}  // namespace expertnet

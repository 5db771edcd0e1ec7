// SPDX-License-Identifier: Apache-2.0

#include "cdistill/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cdistill/random.hpp"

namespace cdistill {

ContextWindowExceeded::ContextWindowExceeded(std::size_t len, std::size_t lim)
    : std::runtime_error("sequence of " + std::to_string(len) + " tokens exceeds context window of " +
                         std::to_string(lim)),
      length(len),
      limit(lim) {}

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("ModelConfig: " + what); };
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
    fail("all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_seq_len < 1) {
    fail("max_seq_len must be at least 1");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    fail("dropout_p must lie in [0, 1)");
  }
  if (!(init_std > 0.0)) {
    fail("init_std must be positive");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
                     {"dropout_p", c.dropout_p},   {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("dropout_p").get_to(c.dropout_p);
  c.init_std = j.value("init_std", 0.02);
}

const std::vector<std::string>& model_size_tags() {
  static const std::vector<std::string> tags{"S", "M", "L", "XL"};
  return tags;
}

std::size_t model_size_rank(std::string_view tag) {
  const auto& tags = model_size_tags();
  const auto it = std::find(tags.begin(), tags.end(), tag);
  return static_cast<std::size_t>(it - tags.begin());
}

ModelConfig model_config_for_size(std::string_view tag, std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  if (tag == "S") {
    c.d_model = 64, c.n_layers = 2, c.n_heads = 4;
  } else if (tag == "M") {
    c.d_model = 96, c.n_layers = 3, c.n_heads = 4;
  } else if (tag == "L") {
    c.d_model = 128, c.n_layers = 4, c.n_heads = 4;
  } else if (tag == "XL") {
    c.d_model = 192, c.n_layers = 4, c.n_heads = 6;
  } else {
    throw ContractError("unknown model size tag '" + std::string(tag) + "'");
  }
  c.d_ff = 4 * c.d_model;
  return c;
}

// ---- weights ------------------------------------------------------------------

namespace {

template <typename W, typename Fn>
void visit_parameters(W& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  fn("position_embedding", w.position_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.w_q", l.w_q);
    fn(p + "attn.b_q", l.b_q);
    fn(p + "attn.w_k", l.w_k);
    fn(p + "attn.b_k", l.b_k);
    fn(p + "attn.w_v", l.w_v);
    fn(p + "attn.b_v", l.b_v);
    fn(p + "attn.w_o", l.w_o);
    fn(p + "attn.b_o", l.b_o);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "mlp.w_fc", l.w_fc);
    fn(p + "mlp.b_fc", l.b_fc);
    fn(p + "mlp.w_proj", l.w_proj);
    fn(p + "mlp.b_proj", l.b_proj);
  }
  fn("ln_f.gain", w.lnf_gain);
  fn("ln_f.bias", w.lnf_bias);
}

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = rng.normal(0.0, stddev);
  }
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor& projection(LayerWeights& l, LoraTarget t) {
  switch (t) {
    case LoraTarget::query:
      return l.w_q;
    case LoraTarget::key:
      return l.w_k;
    case LoraTarget::value:
      return l.w_v;
    case LoraTarget::output:
      return l.w_o;
  }
  throw ContractError("unknown LoRA target");
}

}  // namespace

TransformerWeights TransformerWeights::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, f = config.d_ff;
  // Residual-branch output projections are scaled down with depth.
  const double proj_std = config.init_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  Rng rng(seed);
  TransformerWeights w;
  w.config = config;
  w.token_embedding = gaussian(rng, {config.vocab_size, d}, config.init_std);
  w.position_embedding = gaussian(rng, {config.max_seq_len, d}, config.init_std);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights l;
    l.ln1_gain = Tensor::full({d}, 1.0);
    l.ln1_bias = Tensor::zeros({d});
    l.w_q = gaussian(rng, {d, d}, config.init_std);
    l.b_q = Tensor::zeros({d});
    l.w_k = gaussian(rng, {d, d}, config.init_std);
    l.b_k = Tensor::zeros({d});
    l.w_v = gaussian(rng, {d, d}, config.init_std);
    l.b_v = Tensor::zeros({d});
    l.w_o = gaussian(rng, {d, d}, proj_std);
    l.b_o = Tensor::zeros({d});
    l.ln2_gain = Tensor::full({d}, 1.0);
    l.ln2_bias = Tensor::zeros({d});
    l.w_fc = gaussian(rng, {f, d}, config.init_std);
    l.b_fc = Tensor::zeros({f});
    l.w_proj = gaussian(rng, {d, f}, proj_std);
    l.b_proj = Tensor::zeros({d});
    w.layers.push_back(std::move(l));
  }
  w.lnf_gain = Tensor::full({d}, 1.0);
  w.lnf_bias = Tensor::zeros({d});
  return w;
}

std::vector<std::pair<std::string, Tensor>> TransformerWeights::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_parameters(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::size_t TransformerWeights::parameter_count() const {
  std::size_t n = 0;
  visit_parameters(*this, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

TransformerWeights TransformerWeights::deep_copy(bool requires_grad) const {
  TransformerWeights copy = *this;
  visit_parameters(copy, [&](const std::string&, Tensor& t) { t = t.clone_leaf(requires_grad); });
  return copy;
}

// ---- adapters -------------------------------------------------------------------

std::string_view to_string(LoraTarget target) {
  switch (target) {
    case LoraTarget::query:
      return "q";
    case LoraTarget::key:
      return "k";
    case LoraTarget::value:
      return "v";
    case LoraTarget::output:
      return "o";
  }
  return "?";
}

LoraTarget lora_target_from_string(std::string_view name) {
  if (name == "q") return LoraTarget::query;
  if (name == "k") return LoraTarget::key;
  if (name == "v") return LoraTarget::value;
  if (name == "o") return LoraTarget::output;
  throw ContractError("unknown LoRA target '" + std::string(name) + "' (expected q, k, v or o)");
}

void to_json(nlohmann::json& j, const LoraConfig& c) {
  std::vector<std::string> targets;
  for (auto t : c.targets) {
    targets.emplace_back(to_string(t));
  }
  j = nlohmann::json{{"rank", c.rank}, {"alpha", c.effective_alpha()}, {"targets", targets}, {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, LoraConfig& c) {
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", 0.0);
  c.init_std = j.value("init_std", c.init_std);
  if (j.contains("targets")) {
    c.targets.clear();
    for (const auto& t : j.at("targets")) {
      c.targets.push_back(lora_target_from_string(t.get<std::string>()));
    }
  }
}

std::string LoraAdapter::name() const {
  return "layers." + std::to_string(layer) + ".lora_" + std::string(to_string(target));
}

AdaptedModel::AdaptedModel(std::shared_ptr<const TransformerWeights> base, const LoraConfig& lora,
                           std::uint64_t seed)
    : base_(std::move(base)) {
  if (!base_) {
    throw ContractError("AdaptedModel: null base");
  }
  const std::size_t d = base_->config.d_model;
  if (lora.rank == 0 || lora.rank >= d) {
    throw ContractError("AdaptedModel: LoRA rank " + std::to_string(lora.rank) + " must satisfy 0 < r < " +
                        std::to_string(d));
  }
  if (lora.targets.empty()) {
    throw ContractError("AdaptedModel: no LoRA targets");
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < base_->layers.size(); ++i) {
    for (auto target : lora.targets) {
      LoraAdapter a;
      a.layer = i;
      a.target = target;
      a.rank = lora.rank;
      a.alpha = lora.effective_alpha();
      a.a = gaussian(rng, {lora.rank, d}, lora.init_std);
      a.a.set_requires_grad(true);
      a.b = Tensor::zeros({d, lora.rank}, true);
      adapters_.push_back(std::move(a));
    }
  }
}

std::vector<Tensor> AdaptedModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& a : adapters_) {
    out.push_back(a.a);
    out.push_back(a.b);
  }
  return out;
}

std::size_t AdaptedModel::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : adapters_) {
    n += a.a.numel() + a.b.numel();
  }
  return n;
}

// ---- forward ------------------------------------------------------------------------

namespace {

constexpr std::size_t kTargets = 4;
using AdapterTable = std::vector<std::array<const LoraAdapter*, kTargets>>;

AdapterTable index_adapters(std::size_t n_layers, std::span<const LoraAdapter> adapters) {
  AdapterTable table(n_layers);
  for (auto& row : table) {
    row.fill(nullptr);
  }
  for (const auto& a : adapters) {
    if (a.layer >= n_layers) {
      throw ContractError("adapter " + a.name() + " targets a missing layer");
    }
    table[a.layer][static_cast<std::size_t>(a.target)] = &a;
  }
  return table;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, const LoraAdapter* adapter) {
  Tensor y = add_row(matmul_nt(x, w), b);
  if (adapter) {
    Tensor delta = matmul_nt(matmul_nt(x, adapter->a), adapter->b);
    y = add(y, scale(delta, adapter->scaling()));
  }
  return y;
}

// Hidden states after the final layer norm; when `last_only`, just the final row.
Tensor trunk(const TransformerWeights& w, std::span<const LoraAdapter> adapters,
             std::span<const std::int64_t> tokens, const ForwardOptions& opt, bool last_only) {
  const auto& cfg = w.config;
  if (tokens.empty()) {
    throw ContractError("forward: empty token sequence");
  }
  if (tokens.size() > cfg.max_seq_len) {
    throw ContextWindowExceeded(tokens.size(), cfg.max_seq_len);
  }
  const auto table = index_adapters(w.layers.size(), adapters);
  const std::size_t T = tokens.size();
  std::vector<std::int64_t> positions(T);
  std::iota(positions.begin(), positions.end(), 0);

  const double p = cfg.dropout_p;
  Tensor h = add(embedding(w.token_embedding, tokens), embedding(w.position_embedding, positions));
  h = dropout(h, p, mix_seed(opt.dropout_seed, 0), opt.train);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    const auto& ad = table[i];
    Tensor a = layer_norm(h, l.ln1_gain, l.ln1_bias);
    Tensor q = linear(a, l.w_q, l.b_q, ad[static_cast<std::size_t>(LoraTarget::query)]);
    Tensor k = linear(a, l.w_k, l.b_k, ad[static_cast<std::size_t>(LoraTarget::key)]);
    Tensor v = linear(a, l.w_v, l.b_v, ad[static_cast<std::size_t>(LoraTarget::value)]);
    Tensor att = causal_attention(q, k, v, cfg.n_heads);
    Tensor o = linear(att, l.w_o, l.b_o, ad[static_cast<std::size_t>(LoraTarget::output)]);
    h = add(h, dropout(o, p, mix_seed(opt.dropout_seed, 1 + 2 * i), opt.train));
    Tensor m = layer_norm(h, l.ln2_gain, l.ln2_bias);
    Tensor ff = add_row(matmul_nt(gelu(add_row(matmul_nt(m, l.w_fc), l.b_fc)), l.w_proj), l.b_proj);
    h = add(h, dropout(ff, p, mix_seed(opt.dropout_seed, 2 + 2 * i), opt.train));
  }
  if (last_only) {
    h = slice_rows(h, T - 1, T);
  }
  return layer_norm(h, w.lnf_gain, w.lnf_bias);
}

}  // namespace

Tensor forward(const TransformerWeights& weights, std::span<const std::int64_t> tokens,
               const ForwardOptions& options) {
  return matmul_nt(trunk(weights, {}, tokens, options, false), weights.token_embedding);
}

Tensor forward(const AdaptedModel& model, std::span<const std::int64_t> tokens, const ForwardOptions& options) {
  return matmul_nt(trunk(model.base(), model.adapters(), tokens, options, false), model.base().token_embedding);
}

Tensor forward_last(const TransformerWeights& weights, std::span<const std::int64_t> tokens,
                    const ForwardOptions& options) {
  return row(matmul_nt(trunk(weights, {}, tokens, options, true), weights.token_embedding), 0);
}

Tensor forward_last(const AdaptedModel& model, std::span<const std::int64_t> tokens,
                    const ForwardOptions& options) {
  return row(matmul_nt(trunk(model.base(), model.adapters(), tokens, options, true), model.base().token_embedding),
             0);
}

Tensor last_token_logits(const Tensor& logits) {
  if (!logits.defined() || logits.rank() != 2) {
    throw ContractError("last_token_logits: expected [T, vocab] logits");
  }
  return row(logits, logits.dim(0) - 1);
}

TransformerWeights merge_adapters(const AdaptedModel& model) {
  TransformerWeights merged = model.base().deep_copy(false);
  for (const auto& a : model.adapters()) {
    Tensor& w = projection(merged.layers[a.layer], a.target);
    const std::size_t d_out = w.dim(0), d_in = w.dim(1), r = a.rank;
    const auto av = a.a.values(), bv = a.b.values();
    std::vector<double> values(w.values().begin(), w.values().end());
    const double s = a.scaling();
    for (std::size_t i = 0; i < d_out; ++i) {
      for (std::size_t j = 0; j < d_in; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < r; ++c) {
          acc += bv[i * r + c] * av[c * d_in + j];
        }
        values[i * d_in + j] += s * acc;
      }
    }
    w = Tensor::from(w.shape(), std::move(values));
  }
  return merged;
}

// ---- checkpoints ------------------------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "CDWT";
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  auto u = std::bit_cast<std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (pos + sizeof(T) > bytes.size()) {
    throw CheckpointError("checkpoint truncated");
  }
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<U>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return std::bit_cast<T>(u);
}

std::string write_container(nlohmann::json header, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}});
  }
  header["tensors"] = std::move(entries);
  const std::string head = header.dump();
  std::string out(kMagic);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, head.size());
  out += head;
  for (const auto& [name, t] : tensors) {
    for (double v : t.values()) {
      put_le<double>(out, v);
    }
  }
  return out;
}

struct Container {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

Container read_container(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) {
    throw CheckpointError("not a weight checkpoint (bad magic)");
  }
  std::size_t pos = kMagic.size();
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto head_len = get_le<std::uint64_t>(bytes, pos);
  if (pos + head_len > bytes.size()) {
    throw CheckpointError("checkpoint header truncated");
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(pos, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  pos += head_len;
  for (const auto& entry : c.header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
      v = get_le<double>(bytes, pos);
    }
    c.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor::from(shape, std::move(values)));
  }
  if (pos != bytes.size()) {
    throw CheckpointError("trailing bytes after checkpoint payload");
  }
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError("cannot write " + path.string());
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

std::string serialize_weights(const TransformerWeights& weights) {
  return write_container({{"kind", "transformer"}, {"config", weights.config}}, weights.named());
}

TransformerWeights deserialize_weights(std::string_view bytes) {
  Container c = read_container(bytes);
  if (c.header.value("kind", "") != "transformer") {
    throw CheckpointError("checkpoint does not hold transformer weights");
  }
  const auto config = c.header.at("config").get<ModelConfig>();
  TransformerWeights w = TransformerWeights::initialize(config, 0);
  std::size_t index = 0;
  visit_parameters(w, [&](const std::string& name, Tensor& t) {
    if (index >= c.tensors.size()) {
      throw CheckpointError("checkpoint is missing tensor " + name);
    }
    const auto& [stored_name, stored] = c.tensors[index++];
    if (stored_name != name) {
      throw CheckpointError("checkpoint tensor " + std::to_string(index - 1) + " is '" + stored_name +
                            "', expected '" + name + "'");
    }
    if (stored.shape() != t.shape()) {
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_to_string(stored.shape()) +
                            ", config requires " + shape_to_string(t.shape()));
    }
    t = stored;
  });
  if (index != c.tensors.size()) {
    throw CheckpointError("checkpoint holds unexpected extra tensors");
  }
  return w;
}

void save_weights(const std::filesystem::path& path, const TransformerWeights& weights) {
  write_file(path, serialize_weights(weights));
}

TransformerWeights load_weights(const std::filesystem::path& path) { return deserialize_weights(read_file(path)); }

std::string serialize_adapters(const AdaptedModel& model) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& a : model.adapters()) {
    tensors.emplace_back(a.name() + ".a", a.a);
    tensors.emplace_back(a.name() + ".b", a.b);
  }
  return write_container({{"kind", "lora"}}, tensors);
}

void save_adapters(const std::filesystem::path& path, const AdaptedModel& model) {
  write_file(path, serialize_adapters(model));
}

void load_adapters_into(AdaptedModel& model, std::string_view bytes) {
  Container c = read_container(bytes);
  if (c.header.value("kind", "") != "lora") {
    throw CheckpointError("checkpoint does not hold LoRA adapters");
  }
  auto& adapters = model.adapters();
  if (c.tensors.size() != 2 * adapters.size()) {
    throw CheckpointError("adapter checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model has " +
                          std::to_string(2 * adapters.size()));
  }
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    for (int part = 0; part < 2; ++part) {
      const auto& [name, stored] = c.tensors[2 * i + static_cast<std::size_t>(part)];
      Tensor& dst = part == 0 ? adapters[i].a : adapters[i].b;
      const std::string expected = adapters[i].name() + (part == 0 ? ".a" : ".b");
      if (name != expected || stored.shape() != dst.shape()) {
        throw CheckpointError("adapter checkpoint entry '" + name + "' does not match '" + expected + "'");
      }
      std::copy(stored.values().begin(), stored.values().end(), dst.mutable_values().begin());
    }
  }
}

}  // namespace cdistill

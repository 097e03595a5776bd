#include "segreg/models.hpp"

#include <bit>
#include <fstream>
#include <map>

namespace segreg {

using nn::Tensor;

SegModel::SegModel(const SegConfig& cfg) : cfg_(cfg) {
  require(cfg.depth >= 1 && cfg.base_width >= 1, "SegModel: invalid architecture");
  require(cfg.image_size % (1 << cfg.depth) == 0, "SegModel: image size not divisible by 2^depth");
  std::mt19937_64 rng(cfg.seed);
  auto w = [&](int s) { return cfg.base_width << s; };
  enc_.emplace_back("seg.enc0", 1, w(0), rng);
  for (int s = 1; s <= cfg.depth; ++s) enc_.emplace_back("seg.enc" + std::to_string(s), w(s - 1), w(s), rng);
  for (int s = 0; s < cfg.depth; ++s) dec_.emplace_back("seg.dec" + std::to_string(s), w(s + 1) + w(s), w(s), rng);
  head_ = nn::Conv2d("seg.head", w(0), 1, 1, rng);
}

Image SegModel::forward(const Image& img) {
  require(img.channels() == 1 && img.rows() == cfg_.image_size && img.cols() == cfg_.image_size,
          "seg_forward: expected a " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
              " single-channel image");
  const int depth = cfg_.depth;
  skips_.assign(depth + 1, Tensor{});
  pool_idx_.assign(depth, {});
  skips_[0] = enc_[0].forward(img);
  for (int s = 1; s <= depth; ++s) {
    skips_[s] = enc_[s].forward(nn::max_pool2x_forward(skips_[s - 1], &pool_idx_[s - 1]));
  }
  Tensor h = skips_[depth];
  for (int s = depth - 1; s >= 0; --s) {
    h = dec_[s].forward(nn::concat_channels(upsample2x(h, 1.0f), skips_[s]));
  }
  out_ = nn::sigmoid_forward(head_.forward(h));
  return out_;
}

void SegModel::backward(const Image& grad_mask) {
  require(grad_mask.same_shape(out_), "SegModel::backward: call forward first / gradient shape mismatch");
  const int depth = cfg_.depth;
  Tensor g = head_.backward(nn::sigmoid_backward(out_, grad_mask));
  std::vector<Tensor> g_skip(depth + 1);
  for (int s = 0; s < depth; ++s) {
    auto [g_up, g_s] = nn::split_channels(dec_[s].backward(g), cfg_.base_width << (s + 1));
    g_skip[s] = std::move(g_s);
    g = upsample2x_backward(g_up, skips_[s + 1].rows(), skips_[s + 1].cols(), 1.0f);
  }
  g_skip[depth] = std::move(g);
  for (int s = depth; s >= 0; --s) {
    Tensor g_in = enc_[s].backward(g_skip[s]);
    if (s > 0) nn::add_inplace(g_skip[s - 1], nn::max_pool2x_backward(skips_[s - 1], pool_idx_[s - 1], g_in));
  }
}

std::vector<nn::Parameter*> SegModel::parameters() {
  std::vector<nn::Parameter*> out;
  for (auto& b : enc_) b.collect(out);
  for (auto& b : dec_) b.collect(out);
  head_.collect(out);
  return out;
}

std::vector<const nn::Parameter*> SegModel::parameters() const {
  auto ps = const_cast<SegModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

RegModel::RegModel(const RegConfig& cfg) : cfg_(cfg) {
  require(cfg.levels >= 1 && cfg.base_width >= 1 && cfg.max_width >= cfg.base_width,
          "RegModel: invalid architecture");
  require(cfg.image_size % (1 << (cfg.levels - 1)) == 0, "RegModel: image size not divisible by 2^(K-1)");
  std::mt19937_64 rng(cfg.seed);
  const int k = cfg.levels;
  enc_.resize(k);
  dec_.resize(k);
  heads_.resize(k);
  enc_[k - 1] = nn::ResBlock("reg.enc" + std::to_string(k - 1), 2, width(k - 1), rng);
  for (int i = k - 2; i >= 0; --i) enc_[i] = nn::ResBlock("reg.enc" + std::to_string(i), width(i + 1), width(i), rng);
  for (int i = 1; i < k; ++i) {
    dec_[i] = nn::ResBlock("reg.dec" + std::to_string(i), width(i - 1) + width(i), width(i), rng);
  }
  for (int i = 0; i < k; ++i) heads_[i] = nn::Conv2d("reg.head" + std::to_string(i), width(i), 2, 3, rng, true);
}

int RegModel::width(int level) const {
  const int shift = cfg_.levels - 1 - level;
  return std::min(cfg_.max_width, cfg_.base_width << std::min(shift, 16));
}

DisplacementPyramid RegModel::forward(const Image& source, const Image& target) {
  const int n = cfg_.image_size;
  require(source.channels() == 1 && target.channels() == 1 && source.same_shape(target) && source.rows() == n &&
              source.cols() == n,
          "reg_forward: expected two " + std::to_string(n) + "x" + std::to_string(n) + " images");
  const int k = cfg_.levels;
  enc_out_.assign(k, Tensor{});
  dec_out_.assign(k, Tensor{});
  pool_idx_.assign(k, {});
  residual_.assign(k, Field{});
  upsampled_.assign(k, Field{});

  enc_out_[k - 1] = enc_[k - 1].forward(nn::concat_channels(source, target));
  for (int i = k - 2; i >= 0; --i) {
    enc_out_[i] = enc_[i].forward(nn::max_pool2x_forward(enc_out_[i + 1], &pool_idx_[i]));
  }
  DisplacementPyramid pyramid(k);
  dec_out_[0] = enc_out_[0];
  residual_[0] = heads_[0].forward(dec_out_[0]);
  pyramid[0] = residual_[0];
  for (int i = 1; i < k; ++i) {
    dec_out_[i] = dec_[i].forward(nn::concat_channels(upsample2x(dec_out_[i - 1], 1.0f), enc_out_[i]));
    residual_[i] = heads_[i].forward(dec_out_[i]);
    upsampled_[i] = upsample_field(pyramid[i - 1]);
    pyramid[i] = compose_fields(upsampled_[i], residual_[i]);
  }
  return pyramid;
}

void RegModel::backward(const std::vector<Field>& grad_pyramid) {
  const int k = cfg_.levels;
  require(static_cast<int>(grad_pyramid.size()) == k, "RegModel::backward: gradient pyramid depth mismatch");
  require(!residual_.empty() && !residual_[0].empty(), "RegModel::backward: call forward first");
  std::vector<Field> g_d = grad_pyramid;
  std::vector<Tensor> g_dec(k), g_enc(k);
  for (int i = 0; i < k; ++i) {
    g_dec[i] = Tensor(dec_out_[i].rows(), dec_out_[i].cols(), dec_out_[i].channels());
    g_enc[i] = Tensor(enc_out_[i].rows(), enc_out_[i].cols(), enc_out_[i].channels());
  }
  for (int i = k - 1; i >= 1; --i) {
    Field g_up(upsampled_[i].rows(), upsampled_[i].cols(), 2);
    Field g_r(residual_[i].rows(), residual_[i].cols(), 2);
    compose_fields_backward(upsampled_[i], residual_[i], g_d[i], &g_up, &g_r);
    nn::add_inplace(g_d[i - 1], upsample2x_backward(g_up, g_d[i - 1].rows(), g_d[i - 1].cols(), 2.0f));
    nn::add_inplace(g_dec[i], heads_[i].backward(g_r));
    auto [g_u, g_e] = nn::split_channels(dec_[i].backward(g_dec[i]), width(i - 1));
    nn::add_inplace(g_dec[i - 1], upsample2x_backward(g_u, dec_out_[i - 1].rows(), dec_out_[i - 1].cols(), 1.0f));
    nn::add_inplace(g_enc[i], g_e);
  }
  nn::add_inplace(g_dec[0], heads_[0].backward(g_d[0]));
  nn::add_inplace(g_enc[0], g_dec[0]);
  for (int i = 0; i < k; ++i) {
    Tensor g_in = enc_[i].backward(g_enc[i]);
    if (i + 1 < k) nn::add_inplace(g_enc[i + 1], nn::max_pool2x_backward(enc_out_[i + 1], pool_idx_[i], g_in));
  }
}

std::vector<nn::Parameter*> RegModel::parameters() {
  std::vector<nn::Parameter*> out;
  for (auto& b : enc_) b.collect(out);
  for (int i = 1; i < cfg_.levels; ++i) dec_[i].collect(out);
  for (auto& h : heads_) h.collect(out);
  return out;
}

std::vector<const nn::Parameter*> RegModel::parameters() const {
  auto ps = const_cast<RegModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

nlohmann::json to_json(const SegConfig& c) {
  return {{"kind", "seg"}, {"image_size", c.image_size}, {"base_width", c.base_width}, {"depth", c.depth},
          {"seed", c.seed}};
}

nlohmann::json to_json(const RegConfig& c) {
  return {{"kind", "reg"},           {"image_size", c.image_size}, {"levels", c.levels},
          {"base_width", c.base_width}, {"max_width", c.max_width},   {"seed", c.seed}};
}

void save_checkpoint(const std::filesystem::path& dir, const std::vector<const nn::Parameter*>& params,
                     const nlohmann::json& manifest) {
  std::filesystem::create_directories(dir);
  nlohmann::json m = manifest;
  m["tensors"] = nlohmann::json::array();
  for (const nn::Parameter* p : params) {
    std::ofstream os(dir / (p->name + ".bin"), std::ios::binary);
    require(static_cast<bool>(os), "save_checkpoint: cannot write " + (dir / p->name).string());
    for (float v : p->value) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                         static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
      os.write(b, 4);
    }
    m["tensors"].push_back({{"name", p->name}, {"shape", p->shape}});
  }
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

nlohmann::json load_checkpoint(const std::filesystem::path& dir, const std::vector<nn::Parameter*>& params) {
  std::ifstream ms(dir / "manifest.json");
  require(static_cast<bool>(ms), "load_checkpoint: missing manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(ms);
  std::map<std::string, std::vector<int>> shapes;
  for (const auto& t : manifest.at("tensors")) shapes[t.at("name")] = t.at("shape").get<std::vector<int>>();
  for (nn::Parameter* p : params) {
    require(shapes.count(p->name) && shapes[p->name] == p->shape, "load_checkpoint: shape mismatch for " + p->name);
    std::ifstream is(dir / (p->name + ".bin"), std::ios::binary);
    require(static_cast<bool>(is), "load_checkpoint: missing tensor " + p->name);
    for (float& v : p->value) {
      unsigned char b[4];
      is.read(reinterpret_cast<char*>(b), 4);
      require(static_cast<bool>(is), "load_checkpoint: truncated tensor " + p->name);
      v = std::bit_cast<float>(static_cast<std::uint32_t>(b[0] | (b[1] << 8) | (b[2] << 16)) |
                               (static_cast<std::uint32_t>(b[3]) << 24));
    }
  }
  return manifest;
}

void save_seg_model(const std::filesystem::path& dir, const SegModel& m, int iteration) {
  save_checkpoint(dir, m.parameters(), {{"architecture", to_json(m.config())}, {"seed", m.config().seed},
                                        {"iteration", iteration}});
}

void save_reg_model(const std::filesystem::path& dir, const RegModel& m, int iteration) {
  save_checkpoint(dir, m.parameters(), {{"architecture", to_json(m.config())}, {"seed", m.config().seed},
                                        {"iteration", iteration}});
}

namespace {
nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  require(static_cast<bool>(ms), "missing manifest in " + dir.string());
  return nlohmann::json::parse(ms);
}
}  // namespace

SegModel load_seg_model(const std::filesystem::path& dir) {
  const auto a = read_manifest(dir).at("architecture");
  require(a.at("kind") == "seg", "load_seg_model: not a segmentation checkpoint");
  SegModel m(SegConfig{a.at("image_size"), a.at("base_width"), a.at("depth"), a.at("seed")});
  load_checkpoint(dir, m.parameters());
  return m;
}

RegModel load_reg_model(const std::filesystem::path& dir) {
  const auto a = read_manifest(dir).at("architecture");
  require(a.at("kind") == "reg", "load_reg_model: not a registration checkpoint");
  RegModel m(RegConfig{a.at("image_size"), a.at("levels"), a.at("base_width"), a.at("max_width"), a.at("seed")});
  load_checkpoint(dir, m.parameters());
  return m;
}

}  // namespace segreg

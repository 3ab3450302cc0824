#include "docgeo/nn/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "docgeo/error.hpp"
#include "docgeo/formats.hpp"

namespace docgeo::nn {

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

void zero_grad(const ParamList& params) {
  for (const auto& p : params) p.tensor.node()->grad.clear();
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.node()->grad) ss += g * g;
  double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0) {
    double k = max_norm / norm;
    for (const auto& p : params)
      for (double& g : p.tensor.node()->grad) g *= k;
  }
  return norm;
}

AdamW::AdamW(ParamList params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
  require(opt_.lr > 0, ErrorCode::Config, "learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Node* n = params_[k].tensor.node();
    if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < n->value.size(); ++i) {
      const double g = n->grad[i];
      m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * g;
      v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * g * g;
      n->value[i] -= opt_.lr * opt_.weight_decay * n->value[i];
      n->value[i] -= opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
    }
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

constexpr char kMagic[4] = {'D', 'G', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& pos) {
  require(pos + sizeof(T) <= in.size(), ErrorCode::Format, "checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

template <class V>
void put_doubles(std::string& out, const V& v) {
  for (double d : v) put(out, std::bit_cast<std::uint64_t>(d));
}

template <class V>
void get_doubles(const std::string& in, std::size_t& pos, V& v) {
  for (double& d : v) d = std::bit_cast<double>(get<std::uint64_t>(in, pos));
}

struct Parsed {
  nlohmann::json header;
  std::size_t data_pos = 0;
};

Parsed parse_header(const std::string& bytes) {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::Format,
          "not a checkpoint file");
  std::size_t pos = 4;
  auto version = get<std::uint32_t>(bytes, pos);
  require(version == kVersion, ErrorCode::Format,
          "unsupported checkpoint version " + std::to_string(version));
  auto len = get<std::uint64_t>(bytes, pos);
  require(pos + len <= bytes.size(), ErrorCode::Format, "checkpoint header truncated");
  Parsed p;
  try {
    p.header = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("checkpoint header: ") + e.what());
  }
  p.data_pos = pos + len;
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamList& params, AdamW* opt,
                     const nlohmann::json& meta) {
  nlohmann::json h;
  h["meta"] = meta;
  h["params"] = nlohmann::json::array();
  for (const auto& p : params) h["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  h["optimizer"] = opt ? nlohmann::json{{"steps", opt->steps()}} : nlohmann::json(nullptr);
  const std::string hs = h.dump();
  std::string out(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint64_t>(hs.size()));
  out += hs;
  for (const auto& p : params) put_doubles(out, p.tensor.data());
  if (opt) {
    for (const auto& m : opt->first_moments()) put_doubles(out, m);
    for (const auto& v : opt->second_moments()) put_doubles(out, v);
  }
  formats::write_file_atomic(path, out);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  const auto raw = formats::read_file(path);
  return parse_header(std::string(raw.begin(), raw.end())).header;
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, const ParamList& params,
                               AdamW* opt) {
  const auto raw = formats::read_file(path);
  const std::string bytes(raw.begin(), raw.end());
  Parsed p = parse_header(bytes);
  const auto& entries = p.header.at("params");
  require(entries.size() == params.size(), ErrorCode::Format,
          "checkpoint has " + std::to_string(entries.size()) + " parameter blocks, model has " +
              std::to_string(params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto name = entries[k].at("name").get<std::string>();
    const auto shape = entries[k].at("shape").get<Shape>();
    require(name == params[k].name && shape == params[k].tensor.shape(), ErrorCode::Format,
            "checkpoint block " + name + shape_str(shape) + " does not match " + params[k].name +
                shape_str(params[k].tensor.shape()));
  }
  std::size_t pos = p.data_pos;
  for (const auto& prm : params) get_doubles(bytes, pos, prm.tensor.node()->value);
  const bool has_opt = !p.header.at("optimizer").is_null();
  if (has_opt && opt) {
    for (auto& m : opt->first_moments()) get_doubles(bytes, pos, m);
    for (auto& v : opt->second_moments()) get_doubles(bytes, pos, v);
    opt->set_steps(p.header["optimizer"].at("steps").get<std::int64_t>());
  } else if (!has_opt) {
    require(pos == bytes.size(), ErrorCode::Format, "trailing bytes in checkpoint");
  }
  return p.header.at("meta");
}

}  // namespace docgeo::nn

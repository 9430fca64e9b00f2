#include "egd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "egd/error.hpp"

namespace egd {
namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kFormatVersion = 1;

[[noreturn]] void fail(const std::string& msg) { throw Error("checkpoint", msg); }

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

void write_f64(const fs::path& file, std::span<const double> values) {
  std::ofstream out(file, std::ios::binary);
  if (!out) fail("cannot write " + file.string());
  for (double v : values) {
    const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.write(buf, 8);
  }
  if (!out) fail("short write to " + file.string());
}

void read_f64(const fs::path& file, std::span<double> values) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) fail("missing parameter file " + file.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != values.size() * 8)
    fail(file.filename().string() + ": expected " + std::to_string(values.size() * 8) + " bytes, found " +
         std::to_string(bytes));
  in.seekg(0);
  for (double& v : values) {
    char buf[8];
    in.read(buf, 8);
    std::uint64_t bits = 0;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(to_little(bits));
  }
}

ordered_json hp_json(const HyperParams& hp) {
  ordered_json j;
  j["channels"] = hp.channels;
  j["d_in"] = hp.d_in;
  j["d_channel"] = hp.d_channel;
  j["max_len"] = hp.max_len;
  j["window"] = hp.window;
  j["beta"] = hp.beta;
  j["dropout"] = hp.dropout;
  j["lr"] = hp.lr;
  j["batch_size"] = hp.batch_size;
  j["epochs"] = hp.epochs;
  j["seed"] = hp.seed;
  j["activation"] = to_string(hp.activation);
  return j;
}

HyperParams hp_from_json(const ordered_json& j) {
  HyperParams hp;
  hp.channels = j.at("channels").get<std::size_t>();
  hp.d_in = j.at("d_in").get<std::size_t>();
  hp.d_channel = j.at("d_channel").get<std::size_t>();
  hp.max_len = j.at("max_len").get<std::size_t>();
  hp.window = j.at("window").get<std::size_t>();
  hp.beta = j.at("beta").get<double>();
  hp.dropout = j.at("dropout").get<double>();
  hp.lr = j.at("lr").get<double>();
  hp.batch_size = j.at("batch_size").get<std::size_t>();
  hp.epochs = j.at("epochs").get<std::size_t>();
  hp.seed = j.at("seed").get<std::uint64_t>();
  hp.activation = parse_activation(j.at("activation").get<std::string>());
  return hp;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ModelParams& params, const CheckpointMeta& meta) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail("cannot create " + dir.string() + ": " + ec.message());

  ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["n_items"] = params.n_items();
  manifest["epoch"] = meta.epoch;
  manifest["seed"] = meta.hp.seed;
  manifest["ablation"] = to_string(meta.ablation);
  manifest["config_digest"] = meta.config_digest;
  manifest["hyperparams"] = hp_json(meta.hp);
  manifest["parameters"] = ordered_json::array();

  std::vector<double> channels;
  params.for_each([&](const std::string& name, const Tensor& t) {
    if (name.rfind("channel_W.", 0) == 0) {
      channels.insert(channels.end(), t.data().begin(), t.data().end());
      return;
    }
    write_f64(dir / (name + ".f64"), t.data());
    manifest["parameters"].push_back({{"name", name}, {"shape", t.shape()}, {"file", name + ".f64"}});
  });
  write_f64(dir / "channel_W.f64", channels);
  manifest["parameters"].push_back({{"name", "channel_W"},
                                    {"shape", {meta.hp.channels, meta.hp.d_in, meta.hp.d_channel}},
                                    {"file", "channel_W.f64"}});

  std::ofstream out(dir / "manifest.json");
  if (!out) fail("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail("no manifest.json in " + dir.string());
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail("malformed manifest.json: " + std::string(e.what()));
  }
  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) fail("unsupported checkpoint format version");
    ck.meta.hp = hp_from_json(manifest.at("hyperparams"));
    ck.meta.ablation = parse_ablation(manifest.at("ablation").get<std::string>());
    ck.meta.epoch = manifest.at("epoch").get<std::size_t>();
    ck.meta.config_digest = manifest.value("config_digest", "");
    const auto n_items = manifest.at("n_items").get<std::size_t>();
    ck.meta.hp.validate();
    ck.params = ModelParams::zeros(ck.meta.hp, n_items);
  } catch (const nlohmann::json::exception& e) {
    fail("incomplete manifest.json: " + std::string(e.what()));
  }

  ck.params.for_each([&](const std::string& name, Tensor& t) {
    if (name.rfind("channel_W.", 0) != 0) read_f64(dir / (name + ".f64"), t.storage());
  });
  const HyperParams& hp = ck.meta.hp;
  std::vector<double> channels(hp.channels * hp.d_in * hp.d_channel);
  read_f64(dir / "channel_W.f64", channels);
  const std::size_t block = hp.d_in * hp.d_channel;
  for (std::size_t k = 0; k < hp.channels; ++k)
    std::copy_n(channels.begin() + static_cast<std::ptrdiff_t>(k * block), block, ck.params.channel_W[k].storage().begin());
  if (!ck.params.all_finite()) fail("checkpoint contains non-finite values");
  return ck;
}

}  // namespace egd

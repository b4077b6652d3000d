#include "dspast/feature_io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace dspast {

using nlohmann::json;

namespace {

json config_to_json(const SpectroConfig& cfg) {
  return json{{"win_length", cfg.win_length}, {"hop", cfg.hop},       {"n_mels", cfg.n_mels},
              {"f_min", cfg.f_min},           {"f_max", cfg.f_max},   {"target_frames", cfg.target_frames},
              {"sample_rate", cfg.sample_rate}};
}

SpectroConfig config_from_json(const json& j) {
  SpectroConfig cfg;
  cfg.win_length = j.at("win_length").get<int>();
  cfg.hop = j.at("hop").get<int>();
  cfg.n_mels = j.at("n_mels").get<int>();
  cfg.f_min = j.at("f_min").get<double>();
  cfg.f_max = j.at("f_max").get<double>();
  cfg.target_frames = j.at("target_frames").get<int>();
  cfg.sample_rate = j.at("sample_rate").get<double>();
  return cfg;
}

}  // namespace

void write_feature_dump(const std::string& path, const FeatureStack& stack, const std::string& clip_id) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kFeatureMagic, 12);
  std::uint32_t version = kFeatureVersion;
  f.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(stack.channels()),
                                 static_cast<std::uint32_t>(stack.frames()),
                                 static_cast<std::uint32_t>(stack.mels())};
  f.write(reinterpret_cast<const char*>(dims), 12);
  f.write(reinterpret_cast<const char*>(stack.data.data()),
          static_cast<std::streamsize>(stack.data.v.size() * sizeof(float)));
  if (!f) throw IoError("write failed: " + path);

  json side{{"id", clip_id}, {"config", config_to_json(stack.config)}, {"feature_order", stack.features}};
  std::ofstream sf(path + ".json");
  if (!sf) throw IoError("cannot open for writing: " + path + ".json");
  sf << side.dump(2) << "\n";
}

FeatureDump read_feature_dump(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[12];
  std::uint32_t version = 0, dims[3] = {0, 0, 0};
  f.read(magic, 12);
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || std::memcmp(magic, kFeatureMagic, 12) != 0) throw IoError("bad feature file magic: " + path);
  if (version != kFeatureVersion) throw IoError("unsupported feature file version in " + path);
  f.read(reinterpret_cast<char*>(dims), 12);
  if (!f) throw IoError("truncated feature file: " + path);

  FeatureDump dump;
  dump.stack.data = Tensor<float>({dims[0], dims[1], dims[2]});
  f.read(reinterpret_cast<char*>(dump.stack.data.data()),
         static_cast<std::streamsize>(dump.stack.data.v.size() * sizeof(float)));
  if (!f) throw IoError("truncated feature data: " + path);

  std::ifstream sf(path + ".json");
  if (sf) {
    json side = json::parse(sf);
    dump.clip_id = side.value("id", "");
    if (side.contains("config")) dump.stack.config = config_from_json(side.at("config"));
    if (side.contains("feature_order"))
      dump.stack.features = side.at("feature_order").get<std::vector<std::string>>();
  }
  return dump;
}

}  // namespace dspast

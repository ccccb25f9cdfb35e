// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

#include "modnet/error.h"

namespace modnet {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'O', 'D', 'N', 'E', 'T', 'C', 'K'};

struct Writer {
  std::vector<double> payload;
  nlohmann::json sections = nlohmann::json::array();

  void add(const std::string& name, const std::vector<double>& v, const Shape& shape) {
    sections.push_back({{"name", name}, {"offset", payload.size()}, {"count", v.size()}, {"shape", shape}});
    payload.insert(payload.end(), v.begin(), v.end());
  }
  void add(const std::string& name, const Tensor& t) { add(name, t.storage(), t.shape()); }
};

struct Reader {
  std::vector<double> payload;
  std::map<std::string, nlohmann::json> sections;

  const nlohmann::json& entry(const std::string& name) const {
    auto it = sections.find(name);
    if (it == sections.end()) throw Error("checkpoint: missing section '" + name + "'");
    return it->second;
  }
  std::vector<double> get(const std::string& name) const {
    const auto& e = entry(name);
    const std::size_t off = e.at("offset"), count = e.at("count");
    if (off + count > payload.size()) throw Error("checkpoint: section '" + name + "' is truncated");
    return {payload.begin() + static_cast<std::ptrdiff_t>(off),
            payload.begin() + static_cast<std::ptrdiff_t>(off + count)};
  }
  Tensor tensor(const std::string& name) const {
    return Tensor(entry(name).at("shape").get<Shape>(), get(name));
  }
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  Writer w;
  const TrainerSnapshot& t = ck.trainer;
  for (std::size_t i = 0; i < ck.params.size(); ++i) w.add("param/" + ck.param_names[i], ck.params[i]);
  for (std::size_t i = 0; i < t.adam_m.size(); ++i) {
    w.add("adam_m/" + ck.param_names[i], t.adam_m[i]);
    w.add("adam_v/" + ck.param_names[i], t.adam_v[i]);
  }
  const auto& buf = t.buffer;
  std::vector<double> comps;
  Shape comp_shape{buf.size(), 0, 0};
  if (buf.size() > 0) {
    comp_shape = {buf.size(), buf.assignments[0].positions, buf.assignments[0].slots};
    for (const auto& c : buf.assignments) comps.insert(comps.end(), c.modules.begin(), c.modules.end());
  }
  w.add("buffer.assignments", comps, comp_shape);
  w.add("buffer.joint", buf.joint, {buf.joint.size()});
  w.add("scalars",
        {t.reinforce.ema, t.reinforce.initialized ? 1.0 : 0.0, t.improved_fraction, t.last_objective},
        {4});

  nlohmann::json header = {
      {"format", "modnet checkpoint"},
      {"library_version", ck.library_version},
      {"config", nlohmann::json::parse(ck.config_json)},
      {"iteration", t.iteration},
      {"adam_steps", t.adam_steps},
      {"consecutive_skips", t.consecutive_skips},
      {"rng_counters", {{"estep", std::to_string(t.estep_counter)},
                        {"trainer", std::to_string(t.trainer_counter)}}},
      {"param_names", ck.param_names},
      {"scalars", {"reinforce_ema", "reinforce_initialized", "improved_fraction", "last_objective"}},
      {"sections", w.sections}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot open '" + tmp.string() + "' for writing");
    const std::uint32_t version = kCheckpointVersion, reserved = 0;
    const std::uint64_t len = text.size();
    f.write(kMagic, 8);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&reserved), 4);
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.write(reinterpret_cast<const char*>(w.payload.data()),
            static_cast<std::streamsize>(w.payload.size() * sizeof(double)));
    if (!f) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  std::uint32_t version = 0, reserved = 0;
  std::uint64_t len = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&reserved), 4);
  f.read(reinterpret_cast<char*>(&len), 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) {
    throw Error("'" + path.string() + "' is not a modnet checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw Error("checkpoint version " + std::to_string(version) + " does not match supported version " +
                std::to_string(kCheckpointVersion));
  }
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw Error("checkpoint header is truncated");
  const auto header = nlohmann::json::parse(text);

  Reader r;
  std::size_t total = 0;
  for (const auto& s : header.at("sections")) {
    r.sections[s.at("name").get<std::string>()] = s;
    total = std::max<std::size_t>(total, s.at("offset").get<std::size_t>() + s.at("count").get<std::size_t>());
  }
  r.payload.resize(total);
  f.read(reinterpret_cast<char*>(r.payload.data()), static_cast<std::streamsize>(total * sizeof(double)));
  if (!f) throw Error("checkpoint payload is truncated");

  Checkpoint ck;
  ck.library_version = header.at("library_version");
  ck.config_json = header.at("config").dump();
  ck.param_names = header.at("param_names").get<std::vector<std::string>>();
  TrainerSnapshot& t = ck.trainer;
  for (const auto& name : ck.param_names) {
    ck.params.push_back(r.tensor("param/" + name));
    if (r.sections.count("adam_m/" + name)) {
      t.adam_m.push_back(r.tensor("adam_m/" + name));
      t.adam_v.push_back(r.tensor("adam_v/" + name));
    }
  }
  t.iteration = header.at("iteration");
  t.adam_steps = header.at("adam_steps");
  t.consecutive_skips = header.at("consecutive_skips");
  t.estep_counter = std::stoull(header.at("rng_counters").at("estep").get<std::string>());
  t.trainer_counter = std::stoull(header.at("rng_counters").at("trainer").get<std::string>());

  const Shape cs = r.entry("buffer.assignments").at("shape").get<Shape>();
  const auto comps = r.get("buffer.assignments");
  t.buffer.joint = r.get("buffer.joint");
  const std::size_t per = cs.at(1) * cs.at(2);
  for (std::size_t n = 0; n < cs.at(0); ++n) {
    Composition c(cs[1], cs[2]);
    for (std::size_t j = 0; j < per; ++j) c.modules[j] = static_cast<int>(comps[n * per + j]);
    t.buffer.assignments.push_back(std::move(c));
  }
  const auto scalars = r.get("scalars");
  t.reinforce.ema = scalars.at(0);
  t.reinforce.initialized = scalars.at(1) != 0.0;
  t.improved_fraction = scalars.at(2);
  t.last_objective = scalars.at(3);
  return ck;
}

}  // namespace modnet

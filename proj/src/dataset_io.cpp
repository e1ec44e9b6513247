#include <filesystem>
#include <fstream>

#include "neuroswap/io.hpp"
#include "neuroswap/synthdata.hpp"

namespace neuroswap {

namespace fs = std::filesystem;

void save_dataset(const MultiDomainDataset& data, const std::string& dir) {
  fs::create_directories(dir);
  {
    nlohmann::json world;
    world["version"] = 1;
    world["seed"] = data.seed;
    world["config"] = data.cfg;
    std::ofstream os(fs::path(dir) / "world.json");
    if (!os) throw IoError("cannot write world.json under " + dir);
    os << world.dump(2) << "\n";
  }
  for (int s = 0; s < (int)data.domains.size(); ++s) {
    const fs::path ddir = fs::path(dir) / ("domain_" + std::to_string(s));
    fs::create_directories(ddir);
    const DomainData& dom = data.domains[s];
    for (int t = 0; t < (int)dom.trials.size(); ++t) {
      const Trial& tr = dom.trials[t];
      const std::string stem = "trial_" + std::to_string(t);
      save_nswt((ddir / (stem + "_behavior.nswt")).string(),
                Tensor::from_data({tr.behavior_frames, data.cfg.joints, 3}, tr.behavior));
      save_nswt((ddir / (stem + "_neural.nswt")).string(),
                Tensor::from_data({tr.neural_frames, data.cfg.image_h, data.cfg.image_w}, tr.neural));
      nlohmann::json labels;
      labels["version"] = 1;
      labels["behavior_fps"] = data.cfg.behavior_fps;
      labels["neural_fps"] = data.cfg.neural_fps;
      labels["t0"] = 0.0;
      auto& intervals = labels["intervals"] = nlohmann::json::array();
      for (const auto& iv : tr.intervals)
        intervals.push_back({{"start", iv.t_start}, {"end", iv.t_end}, {"action", iv.action}});
      std::ofstream os(ddir / (stem + "_labels.json"));
      if (!os) throw IoError("cannot write labels for " + stem);
      os << labels.dump(2) << "\n";
    }
  }
}

MultiDomainDataset load_dataset(const std::string& dir) {
  MultiDomainDataset data;
  {
    std::ifstream is(fs::path(dir) / "world.json");
    if (!is) throw IoError("missing world.json under " + dir);
    nlohmann::json world = nlohmann::json::parse(is);
    if (world.value("version", 0) != 1) throw IoError("unsupported world.json version");
    data.seed = world.value("seed", 0ULL);
    data.cfg = world.at("config").get<WorldConfig>();
  }
  data.domains.resize(data.cfg.n_domains);
  for (int s = 0; s < data.cfg.n_domains; ++s) {
    const fs::path ddir = fs::path(dir) / ("domain_" + std::to_string(s));
    if (!fs::exists(ddir)) throw IoError("missing domain directory " + ddir.string());
    DomainData& dom = data.domains[s];
    for (int t = 0;; ++t) {
      const std::string stem = "trial_" + std::to_string(t);
      const fs::path bpath = ddir / (stem + "_behavior.nswt");
      if (!fs::exists(bpath)) break;
      Trial tr;
      auto behavior = load_nswt<float>(bpath.string());
      if (behavior.ndim() != 3 || behavior.dim(1) != data.cfg.joints || behavior.dim(2) != 3)
        throw IoError("unexpected behavior tensor shape in " + bpath.string());
      tr.behavior_frames = behavior.dim(0);
      tr.behavior.assign(behavior.data().begin(), behavior.data().end());
      auto neural = load_nswt<float>((ddir / (stem + "_neural.nswt")).string());
      if (neural.ndim() != 3 || neural.dim(1) != data.cfg.image_h || neural.dim(2) != data.cfg.image_w)
        throw IoError("unexpected neural tensor shape in " + stem);
      tr.neural_frames = neural.dim(0);
      tr.neural.assign(neural.data().begin(), neural.data().end());
      std::ifstream is(ddir / (stem + "_labels.json"));
      if (!is) throw IoError("missing labels for " + stem);
      nlohmann::json labels = nlohmann::json::parse(is);
      for (const auto& iv : labels.at("intervals"))
        tr.intervals.push_back(
            {iv.at("start").get<double>(), iv.at("end").get<double>(), iv.at("action").get<int>()});
      dom.trials.push_back(std::move(tr));
    }
    if (dom.trials.empty()) throw IoError("domain " + std::to_string(s) + " has no trials");
  }
  return data;
}

}  // namespace neuroswap

#include "alignclip/presets.hpp"

#include "alignclip/errors.hpp"

namespace alignclip {

namespace {

TrainConfig base_recipe() {
  TrainConfig cfg;  // defaults carry the shared recipe; presets adjust the rest
  cfg.loss = LossConfig{};
  cfg.model = SharedEncoderConfig::toy();
  return cfg;
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "clip", "sharedclip", "alignclip", "alignclip-no-rescale", "alignclip-tt",
      "alignclip-ii-tt",
  };
  return names;
}

TrainConfig make_preset(const std::string& name) {
  TrainConfig cfg = base_recipe();
  cfg.tag = name;
  if (name == "clip") {
    cfg.model.sharing = Sharing::unshared;
    cfg.loss.beta = 0.0;
    cfg.loss.mode = SeparationMode::none;
  } else if (name == "sharedclip") {
    cfg.model.sharing = Sharing::shared;
    cfg.loss.beta = 0.0;
    cfg.loss.mode = SeparationMode::none;
  } else if (name == "alignclip") {
    cfg.model.sharing = Sharing::shared;
    cfg.loss.mode = SeparationMode::image_only;
    cfg.loss.rescaling_enabled = true;
  } else if (name == "alignclip-no-rescale") {
    cfg.model.sharing = Sharing::shared;
    cfg.loss.mode = SeparationMode::image_only;
    cfg.loss.rescaling_enabled = false;
  } else if (name == "alignclip-tt") {
    cfg.model.sharing = Sharing::shared;
    cfg.loss.mode = SeparationMode::text_only;
  } else if (name == "alignclip-ii-tt") {
    cfg.model.sharing = Sharing::shared;
    cfg.loss.mode = SeparationMode::both;
  } else {
    std::string known;
    for (const std::string& n : preset_names()) {
      if (!known.empty()) known += ", ";
      known += n;
    }
    throw UnknownPreset("unknown preset '" + name + "' (known: " + known + ")");
  }
  cfg.validate();
  return cfg;
}

}  // namespace alignclip

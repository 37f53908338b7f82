#pragma once

#include <string>
#include <vector>

#include "alignclip/trainer.hpp"

namespace alignclip {

// Named model/objective variants sharing one training recipe, so runs differ
// only in the axes under study (parameter sharing, separation terms,
// semantic rescaling).
const std::vector<std::string>& preset_names();
TrainConfig make_preset(const std::string& name);

}  // namespace alignclip

#pragma once

#include <json.hpp>
#include <yaml-cpp/yaml.h>

namespace medpipe {

/// Conservative YAML-to-JSON conversion: quoted scalars stay strings, plain
/// scalars become bool/int/double only on exact matches.
nlohmann::json yaml_to_json(const YAML::Node& node);

} // namespace medpipe

#pragma once

// nlohmann/json bindings shared by the implementation files. Not installed.

#include <json.hpp>

#include "hsnn/datagen.hpp"
#include "hsnn/hsnn.hpp"
#include "hsnn/monn.hpp"
#include "hsnn/numerics.hpp"

namespace hsnn::detail {

using Json = nlohmann::ordered_json;

// Reads `key` into `out` when present; leaves the default otherwise.
template <class T>
void read_opt(const Json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->template get<T>();
}

Json world_config_to_json(const SyntheticWorldConfig& c);
SyntheticWorldConfig world_config_from_json(const Json& j);

Json item_to_json(const Item& it);
Item item_from_json(const Json& j);

Json tower_config_to_json(const TowerConfig& c);
TowerConfig tower_config_from_json(const Json& j);

Json hsnn_config_to_json(const HsnnConfig& c);
HsnnConfig hsnn_config_from_json(const Json& j);

// Rejects keys that are not in `allowed`, naming the section.
void check_keys(const Json& j, const char* section, std::initializer_list<const char*> allowed);

}  // namespace hsnn::detail

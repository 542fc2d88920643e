#include "rhp/transform_trainer.hpp"

namespace rhp {

std::string to_string(SignMode mode) {
  return mode == SignMode::straight_through ? "straight_through" : "linear";
}

SignMode parse_sign_mode(const std::string& name) {
  if (name == "straight_through") return SignMode::straight_through;
  if (name == "linear") return SignMode::linear;
  throw std::invalid_argument("unknown sign mode '" + name + "'");
}

}  // namespace rhp

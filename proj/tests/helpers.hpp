#pragma once

#include <functional>

#include "apc/common.hpp"

namespace apc_test {

// Runs f, expecting it to throw apc::Error, and returns the error code.
inline apc::errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const apc::Error& e) {
    return e.code();
  }
  throw std::runtime_error("expected an apc::Error, none was thrown");
}

}  // namespace apc_test

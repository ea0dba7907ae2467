#pragma once

#include <stdexcept>
#include <string>

namespace cacheproc {

// Throws std::runtime_error with the given message when cond is false.
inline void check(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::runtime_error(msg);
    }
}

}  // namespace cacheproc

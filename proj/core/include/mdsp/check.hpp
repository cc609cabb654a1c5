#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdsp {

/// Error type thrown by every precondition and shape check in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

}  // namespace mdsp

// Checks a condition and throws mdsp::Error with a streamed message.
// The message expression may use operator<< chains.
#define MDSP_CHECK(cond, msg)                    \
  do {                                           \
    if (!(cond)) {                               \
      std::ostringstream oss_;                   \
      oss_ << msg;                               \
      throw ::mdsp::Error(oss_.str());           \
    }                                            \
  } while (0)

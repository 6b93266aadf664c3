#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace flareon {

/// Raised when a caller breaks an operation's preconditions (bad shapes,
/// out-of-range labels, invalid hyperparameters).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed on-disk data: dataset records, checkpoints, trigger banks.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numeric quantity that must stay finite did not.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Parts>
std::string concat(const Parts&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

}  // namespace detail

template <typename... Parts>
inline void expect(bool condition, const Parts&... parts) {
  if (!condition) throw ContractViolation(detail::concat(parts...));
}

}  // namespace flareon

#pragma once

#include <string>
#include <vector>

namespace corrgress::testing {

struct BatteryResult {
  std::string name;
  double p_value;
};

/// KS p-values of 10^4 ARS draws against five log-concave reference densities.
std::vector<BatteryResult> ars_battery(int draws = 10000);

/// KS p-values of 10^4 truncated-normal draws on five truncation regions.
std::vector<BatteryResult> truncated_normal_battery(int draws = 10000);

}  // namespace corrgress::testing

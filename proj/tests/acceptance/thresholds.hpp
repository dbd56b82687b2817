// SPDX-License-Identifier: Apache-2.0
#pragma once

// Regression floors recorded from the overfit rig (float, seed 7), 0.5 dB
// under the recorded values.
//   distilled per-chunk PSNR  23.53 21.62 21.70 23.26 24.08 24.09 23.98 23.65
//   causal per-chunk PSNR     26.30 25.76 25.48 25.12 25.95 25.71 25.59 25.53
//   untrained per-chunk PSNR  16.10 15.08 14.89 15.23 15.47 15.38 15.51 15.55
//   return view               23.75 (two-chunk cache 23.78)
//   return frame vs oracle    best at frames 0 and 16; runner-up frame 12 at 21.61

namespace lbw::thresholds {

inline constexpr double kDistilledChunkPsnrFloor = 21.1;
inline constexpr double kReturnViewPsnrFloor = 23.2;

}  // namespace lbw::thresholds

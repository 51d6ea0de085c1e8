#pragma once

namespace pcgan {

#ifdef PCGAN_FLOAT32
using Real = float;
#else
using Real = double;
#endif

/// Bit width of the tensor scalar this build was compiled with (32 or 64).
inline constexpr int kPrecisionBits = static_cast<int>(sizeof(Real) * 8);

}  // namespace pcgan

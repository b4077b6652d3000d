#pragma once

// Iterative radix-2 FFT on std::complex<double>. Sizes must be powers of
// two, which covers every use in this project (STFT n_fft, GCC lag
// transform, frequency-domain binaural rendering). Self-contained so the
// numeric results are bit-identical across runs.

#include <complex>
#include <vector>

#include "dspast/common.hpp"

namespace dspast {

using cplx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

namespace detail {
inline void fft_radix2(std::vector<cplx>& a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_pow2(n)) throw InvalidInput("fft: size must be a power of two");
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const cplx wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        cplx u = a[i + k];
        cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (auto& x : a) x *= inv_n;
  }
}
}  // namespace detail

inline void fft_forward(std::vector<cplx>& a) { detail::fft_radix2(a, false); }
// Includes the 1/N normalization.
inline void fft_inverse(std::vector<cplx>& a) { detail::fft_radix2(a, true); }

}  // namespace dspast

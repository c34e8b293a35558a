#pragma once

#include <complex>
#include <cstddef>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include <fftw3.h>

namespace strokesight::fft {

namespace detail {

struct PlanCache {
    std::mutex mutex;
    std::map<std::size_t, fftw_plan> forward;
    std::map<std::size_t, fftw_plan> inverse;

    ~PlanCache()
    {
        for (auto& [n, p] : forward) fftw_destroy_plan(p);
        for (auto& [n, p] : inverse) fftw_destroy_plan(p);
    }
};

inline PlanCache& plan_cache()
{
    static PlanCache cache;
    return cache;
}

struct FftwFree {
    void operator()(void* p) const noexcept { fftw_free(p); }
};

template <typename T>
using fftw_buffer = std::unique_ptr<T[], FftwFree>;

template <typename T>
fftw_buffer<T> alloc(std::size_t n)
{
    return fftw_buffer<T>(static_cast<T*>(fftw_malloc(sizeof(T) * (n == 0 ? 1 : n))));
}

// The FFTW planner is not re-entrant; executing an existing plan on fresh
// (equally aligned) buffers is.
inline fftw_plan forward_plan(std::size_t n)
{
    auto& cache = plan_cache();
    std::lock_guard lock(cache.mutex);
    if (auto it = cache.forward.find(n); it != cache.forward.end()) return it->second;
    auto in = alloc<double>(n);
    auto out = alloc<fftw_complex>(n / 2 + 1);
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE);
    cache.forward.emplace(n, p);
    return p;
}

inline fftw_plan inverse_plan(std::size_t n)
{
    auto& cache = plan_cache();
    std::lock_guard lock(cache.mutex);
    if (auto it = cache.inverse.find(n); it != cache.inverse.end()) return it->second;
    auto in = alloc<fftw_complex>(n / 2 + 1);
    auto out = alloc<double>(n);
    fftw_plan p = fftw_plan_dft_c2r_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE);
    cache.inverse.emplace(n, p);
    return p;
}

} // namespace detail

/// Unnormalized real-to-complex DFT: X[k] = sum_n x[n] e^{-2 pi i k n / N},
/// k = 0..N/2.
inline std::vector<std::complex<double>> rfft(std::span<const double> x)
{
    const std::size_t n = x.size();
    auto in = detail::alloc<double>(n);
    auto out = detail::alloc<fftw_complex>(n / 2 + 1);
    std::memcpy(in.get(), x.data(), n * sizeof(double));
    fftw_execute_dft_r2c(detail::forward_plan(n), in.get(), out.get());
    std::vector<std::complex<double>> result(n / 2 + 1);
    for (std::size_t k = 0; k < result.size(); ++k) result[k] = {out[k][0], out[k][1]};
    return result;
}

/// Inverse of rfft including the 1/N factor; `n` is the real output length.
inline std::vector<double> irfft(std::span<const std::complex<double>> spectrum, std::size_t n)
{
    auto in = detail::alloc<fftw_complex>(n / 2 + 1);
    auto out = detail::alloc<double>(n);
    for (std::size_t k = 0; k < n / 2 + 1; ++k) {
        const auto v = k < spectrum.size() ? spectrum[k] : std::complex<double>{};
        in[k][0] = v.real();
        in[k][1] = v.imag();
    }
    fftw_execute_dft_c2r(detail::inverse_plan(n), in.get(), out.get());
    std::vector<double> result(n);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) result[i] = out[i] * scale;
    return result;
}

/// Smallest 2^a 3^b 5^c >= n.
inline std::size_t good_size(std::size_t n)
{
    std::size_t best = 1;
    while (best < n) best *= 2;
    for (std::size_t p5 = 1; p5 < best; p5 *= 5) {
        for (std::size_t p35 = p5; p35 < best; p35 *= 3) {
            std::size_t v = p35;
            while (v < n) v *= 2;
            if (v < best) best = v;
        }
    }
    return best;
}

/// Full linear convolution (length x + h - 1) through one zero-padded FFT.
inline std::vector<double> convolve(std::span<const double> x, std::span<const double> h)
{
    if (x.empty() || h.empty()) return {};
    const std::size_t full = x.size() + h.size() - 1;
    const std::size_t n = good_size(full);
    std::vector<double> xp(n, 0.0), hp(n, 0.0);
    std::copy(x.begin(), x.end(), xp.begin());
    std::copy(h.begin(), h.end(), hp.begin());
    auto xf = rfft(xp);
    const auto hf = rfft(hp);
    for (std::size_t k = 0; k < xf.size(); ++k) xf[k] *= hf[k];
    auto y = irfft(xf, n);
    y.resize(full);
    return y;
}

} // namespace strokesight::fft

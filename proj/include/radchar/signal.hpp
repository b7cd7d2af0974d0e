#ifndef RADCHAR_SIGNAL_HPP
#define RADCHAR_SIGNAL_HPP

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "radchar/codes.hpp"
#include "radchar/errors.hpp"
#include "radchar/rng.hpp"

namespace radchar {

inline constexpr double kSampleRateHz = 3.2e6;
inline constexpr int kSamplesPerFrame = 512;
inline constexpr double kFrameDurationS = kSamplesPerFrame / kSampleRateHz; // 160 us

// LFM sweep bandwidth: fs/4, up-chirp starting at 0 Hz.
inline constexpr double kLfmBandwidthHz = kSampleRateHz / 4.0;

enum class SignalClass : std::uint8_t {
    BarkerCoded = 0,
    PolyphaseBarkerCoded = 1,
    FrankCoded = 2,
    Lfm = 3,
    UnmodulatedCoherent = 4,
};

inline constexpr int kNumSignalClasses = 5;

inline const char* signal_class_name(SignalClass c) {
    switch (c) {
        case SignalClass::BarkerCoded: return "barker";
        case SignalClass::PolyphaseBarkerCoded: return "polyphase-barker";
        case SignalClass::FrankCoded: return "frank";
        case SignalClass::Lfm: return "lfm";
        case SignalClass::UnmodulatedCoherent: return "unmodulated";
    }
    return "?";
}

// Valid code lengths per class. LFM and unmodulated pulses carry a single
// implicit chip.
inline std::vector<int> valid_code_lengths(SignalClass c) {
    switch (c) {
        case SignalClass::BarkerCoded: return {2, 3, 4, 5, 7, 11, 13};
        case SignalClass::PolyphaseBarkerCoded:
            return {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
        // m=1 is excluded: a length-1 Frank code is indistinguishable from an
        // unmodulated pulse, which would make the class labels ambiguous.
        case SignalClass::FrankCoded: return {4, 9, 16};
        case SignalClass::Lfm:
        case SignalClass::UnmodulatedCoherent: return {1};
    }
    return {};
}

// Ground truth for one waveform.
struct SignalParams {
    SignalClass cls = SignalClass::UnmodulatedCoherent;
    double t_pw_s = 0.0;   // pulse width
    double t_pri_s = 0.0;  // pulse repetition interval
    int n_p = 0;           // number of pulses
    double t_d_s = 0.0;    // delay of first pulse
    int l_c = 1;           // code length in chips
    double snr_db = 0.0;
};

// Parameter bounds of the dataset recipe.
inline constexpr double kPwMinS = 10e-6, kPwMaxS = 16e-6;
inline constexpr double kPriMinS = 17e-6, kPriMaxS = 23e-6;
inline constexpr double kDelayMinS = 1e-6, kDelayMaxS = 10e-6;
inline constexpr int kNpMin = 2, kNpMax = 6;
inline constexpr double kSnrMinDb = -20.0, kSnrMaxDb = 20.0;

inline void validate_params(const SignalParams& p) {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid params: " + msg); };
    if (p.t_pw_s < kPwMinS || p.t_pw_s > kPwMaxS) fail("t_pw out of [10us,16us]");
    if (p.t_pri_s < kPriMinS || p.t_pri_s > kPriMaxS) fail("t_pri out of [17us,23us]");
    if (p.t_d_s < kDelayMinS || p.t_d_s > kDelayMaxS) fail("t_d out of [1us,10us]");
    if (p.n_p < kNpMin || p.n_p > kNpMax) fail("n_p out of [2,6]");
    if (p.snr_db < kSnrMinDb || p.snr_db > kSnrMaxDb) fail("snr out of [-20,20] dB");
    const auto lengths = valid_code_lengths(p.cls);
    bool ok = false;
    for (int l : lengths) ok = ok || (l == p.l_c);
    if (!ok) fail("code length " + std::to_string(p.l_c) + " invalid for class");
    if (p.t_d_s + (p.n_p - 1) * p.t_pri_s + p.t_pw_s > kFrameDurationS)
        fail("pulse train exceeds frame duration");
}

// Minimum sampling rate for a parameter set:
//   2 * max(l_c / t_pw, 1 / t_pri, 1 / t_d)
inline double min_sampling_rate(const SignalParams& p) {
    const double chip_bw = p.l_c / p.t_pw_s;
    const double pri_bw = 1.0 / p.t_pri_s;
    const double delay_bw = 1.0 / p.t_d_s;
    return 2.0 * std::max(chip_bw, std::max(pri_bw, delay_bw));
}

// Non-strict: the dataset's own extreme (Frank 16 chips over 10 us) sits
// exactly on the bound at 3.2 MHz.
inline bool sampling_rate_ok(const SignalParams& p, double f_s_hz = kSampleRateHz) {
    return f_s_hz >= min_sampling_rate(p) * (1.0 - 1e-12);
}

// One frame of baseband IQ.
struct IQFrame {
    std::array<double, kSamplesPerFrame> i{};
    std::array<double, kSamplesPerFrame> q{};

    double mean_power() const {
        double acc = 0.0;
        for (int n = 0; n < kSamplesPerFrame; ++n) acc += i[n] * i[n] + q[n] * q[n];
        return acc / kSamplesPerFrame;
    }
};

// Phase profile of one pulse, one entry per chip.
inline std::vector<double> chip_phases(SignalClass cls, int l_c) {
    switch (cls) {
        case SignalClass::BarkerCoded: {
            std::vector<double> phases;
            for (int chip : barker_code(l_c))
                phases.push_back(chip > 0 ? 0.0 : std::numbers::pi);
            return phases;
        }
        case SignalClass::PolyphaseBarkerCoded: return polyphase_barker_code(l_c);
        case SignalClass::FrankCoded: {
            const int m = static_cast<int>(std::lround(std::sqrt(double(l_c))));
            if (m * m != l_c)
                throw ConfigError("Frank code length must be a square, got " +
                                  std::to_string(l_c));
            return frank_code(m);
        }
        case SignalClass::UnmodulatedCoherent: return {0.0};
        case SignalClass::Lfm:
            throw ConfigError("LFM pulses have no chip structure");
    }
    throw ConfigError("unknown signal class");
}

// Complex envelope of a single pulse, round(t_pw * f_s) unit-modulus samples.
// Coded classes split the pulse into l_c equal-duration chips; chip c covers
// samples floor(c*N/l_c) .. floor((c+1)*N/l_c)-1. LFM applies the quadratic
// phase pi * (B / t_pw) * t^2.
inline std::vector<std::complex<double>> synthesize_pulse(const SignalParams& p) {
    validate_params(p);
    const int n = static_cast<int>(std::lround(p.t_pw_s * kSampleRateHz));
    std::vector<std::complex<double>> samples(static_cast<std::size_t>(n));
    if (p.cls == SignalClass::Lfm) {
        const double rate = kLfmBandwidthHz / p.t_pw_s;
        for (int s = 0; s < n; ++s) {
            const double t = s / kSampleRateHz;
            samples[static_cast<std::size_t>(s)] =
                std::polar(1.0, std::numbers::pi * rate * t * t);
        }
        return samples;
    }
    const std::vector<double> phases = chip_phases(p.cls, p.l_c);
    const int l = static_cast<int>(phases.size());
    for (int c = 0; c < l; ++c) {
        const int begin = static_cast<int>((static_cast<std::int64_t>(c) * n) / l);
        const int end = static_cast<int>((static_cast<std::int64_t>(c) + 1) * n / l);
        for (int s = begin; s < end; ++s)
            samples[static_cast<std::size_t>(s)] = std::polar(1.0, phases[static_cast<std::size_t>(c)]);
    }
    return samples;
}

// Sample index where pulse k starts.
inline int pulse_start_sample(const SignalParams& p, int k) {
    return static_cast<int>(std::lround((p.t_d_s + k * p.t_pri_s) * kSampleRateHz));
}

// Noiseless frame: pulses placed on the sample grid, zeros between, then the
// whole frame scaled to unity average power over all 512 samples.
inline IQFrame synthesize_frame(const SignalParams& p) {
    validate_params(p);
    const auto pulse = synthesize_pulse(p);
    IQFrame frame;
    for (int k = 0; k < p.n_p; ++k) {
        const int start = pulse_start_sample(p, k);
        if (start + static_cast<int>(pulse.size()) > kSamplesPerFrame)
            throw ConfigError("frame overflow: pulse " + std::to_string(k) +
                              " ends past sample 511");
        for (std::size_t s = 0; s < pulse.size(); ++s) {
            frame.i[static_cast<std::size_t>(start) + s] = pulse[s].real();
            frame.q[static_cast<std::size_t>(start) + s] = pulse[s].imag();
        }
    }
    const double power = frame.mean_power();
    if (power <= 0.0) throw NumericError("frame has zero power");
    const double scale = 1.0 / std::sqrt(power);
    for (int s = 0; s < kSamplesPerFrame; ++s) {
        frame.i[static_cast<std::size_t>(s)] *= scale;
        frame.q[static_cast<std::size_t>(s)] *= scale;
    }
    return frame;
}

// Complex circular AWGN: total noise power 10^(-snr/10) against the frame's
// unity signal power, split evenly between I and Q.
inline IQFrame apply_awgn(const IQFrame& frame, double snr_db, Rng& rng) {
    const double noise_power = std::pow(10.0, -snr_db / 10.0);
    const double sigma = std::sqrt(noise_power / 2.0);
    IQFrame out = frame;
    for (int s = 0; s < kSamplesPerFrame; ++s) {
        out.i[static_cast<std::size_t>(s)] += sigma * rng.normal();
        out.q[static_cast<std::size_t>(s)] += sigma * rng.normal();
    }
    return out;
}

} // namespace radchar

#endif

#ifndef RADCHAR_CODES_HPP
#define RADCHAR_CODES_HPP

#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "radchar/errors.hpp"

namespace radchar {

// Canonical biphase Barker sequences. Codes exist only for these lengths.
inline const std::array<int, 7>& barker_lengths() {
    static const std::array<int, 7> lengths = {2, 3, 4, 5, 7, 11, 13};
    return lengths;
}

// Biphase Barker code of length l as +/-1 chips. l=1 degenerates to {+1}.
inline std::vector<int> barker_code(int l) {
    switch (l) {
        case 1:  return {+1};
        case 2:  return {+1, -1};
        case 3:  return {+1, +1, -1};
        case 4:  return {+1, +1, -1, +1};
        case 5:  return {+1, +1, +1, -1, +1};
        case 7:  return {+1, +1, +1, -1, -1, +1, -1};
        case 11: return {+1, +1, +1, -1, -1, -1, +1, -1, -1, +1, -1};
        case 13: return {+1, +1, +1, +1, +1, -1, -1, +1, +1, -1, +1, -1, +1};
        default:
            throw ConfigError("no Barker code of length " + std::to_string(l));
    }
}

// Frank code phases for m^2 chips: phi[n*m + k] = (2*pi/m) * n * k.
inline std::vector<double> frank_code(int m) {
    if (m < 1 || m > 4)
        throw ConfigError("Frank code order must be in 1..4, got " + std::to_string(m));
    std::vector<double> phases(static_cast<std::size_t>(m) * m);
    for (int n = 0; n < m; ++n)
        for (int k = 0; k < m; ++k)
            phases[static_cast<std::size_t>(n) * m + k] =
                (2.0 * std::numbers::pi / m) * n * k;
    return phases;
}

// Generalized (polyphase) Barker phase tables for lengths 2..13, found by
// numerical minimisation of the inner autocorrelation sidelobes. The
// outermost lag of any unit-modulus sequence has magnitude exactly 1, so
// the generalized Barker bound |r_k| <= 1 holds with equality there. The
// sidelobe property is re-verified numerically by the test suite.
inline std::vector<double> polyphase_barker_code(int l) {
    static const std::vector<std::vector<double>> table = {
        {0.0, 5.2135145690976854},
        {0.0, 3.9322961764646909, 4.7229996997492751},
        {0.0, 4.4729884836864473, 4.4862682569395469, 0.0398392901184932},
        {0.0, 6.0278900877422146, 4.5180351438493389, 1.6011706652584463,
         3.7129316582208043},
        {0.0, 1.6981555438310469, 4.4435086421437626, 1.9528739778577369,
         0.5094368713840611, 0.1131973128219128},
        {0.0, 4.2825786770956080, 0.4253155076234805, 4.9427264325959817,
         5.3211076319051429, 1.5077925030689709, 2.1210051522920197},
        {0.0, 2.1699616962411516, 5.5964561143716214, 0.7023296084380384,
         1.2285575313096444, 0.8919542876716520, 4.8011007149061529,
         3.6835940148734481},
        {0.0, 6.0169786069266769, 0.3989991143135426, 6.2084873640161913,
         3.6509322029511209, 2.4224108428822686, 5.3932165230860889,
         0.9419338324826596, 3.7052489235568862},
        {0.0, 0.8222530318278557, 0.5282368465805960, 1.3648184890096429,
         4.6210816158979622, 5.6952386061489699, 2.9309582924670936,
         1.1033910054566922, 5.4991411489769657, 2.4524788240827302},
        {0.0, 4.5544241744731826, 4.9531414095714208, 3.3965990402360977,
         2.6434440142071725, 5.6531906784198735, 2.9974487716864475,
         4.3564315061977439, 5.6365160242840719, 5.6848610115601428,
         1.4958775870210743},
        {0.0, 4.6894433341332276, 3.8993644646676366, 3.4506339506501038,
         0.9276873949647518, 5.1814982887069494, 1.1647837917011021,
         0.5739631770473776, 1.9390199199669336, 2.8357768695591568,
         5.7700300057442746, 1.9330455569328053},
        {0.0, 4.8735109544220272, 4.0862169256919332, 3.5005046176180703,
         1.2773718477578990, 3.3732552036618006, 4.6192734315741966,
         1.7665288103232792, 4.0930234477731373, 3.6780069350727107,
         5.5088293380354898, 5.2201798146817397, 0.8613955748554503},
    };
    if (l == 1) return {0.0};
    if (l < 2 || l > 13)
        throw ConfigError("polyphase Barker length must be in 1..13, got " +
                          std::to_string(l));
    return table[static_cast<std::size_t>(l) - 2];
}

// Aperiodic autocorrelation magnitude at every lag 0..n-1. Used by tests as
// the sidelobe oracle and exposed here because it is generally useful.
inline std::vector<double> autocorrelation_magnitudes(
    const std::vector<std::complex<double>>& chips) {
    const std::size_t n = chips.size();
    std::vector<double> mags(n);
    for (std::size_t lag = 0; lag < n; ++lag) {
        std::complex<double> acc = 0.0;
        for (std::size_t i = 0; i + lag < n; ++i)
            acc += chips[i + lag] * std::conj(chips[i]);
        mags[lag] = std::abs(acc);
    }
    return mags;
}

inline std::vector<std::complex<double>> chips_from_phases(
    const std::vector<double>& phases) {
    std::vector<std::complex<double>> chips(phases.size());
    for (std::size_t i = 0; i < phases.size(); ++i)
        chips[i] = std::polar(1.0, phases[i]);
    return chips;
}

} // namespace radchar

#endif

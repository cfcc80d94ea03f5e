#include "corrgress/normal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <boost/math/special_functions/erf.hpp>

namespace corrgress {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kTwoPi = 6.28318530717958647693;
}  // namespace

double norm_pdf(double x) { return std::exp(-0.5 * x * x - kLogSqrt2Pi); }

double log_norm_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

double log_norm_cdf(double x) {
  if (x > -35.0) {
    if (x > 5.0) return std::log1p(-0.5 * std::erfc(x * kInvSqrt2));
    return std::log(0.5 * std::erfc(-x * kInvSqrt2));
  }
  // Asymptotic Mills-ratio series; the first omitted term is below 2e-15 for x <= -35.
  const double z2 = 1.0 / (x * x);
  const double series =
      1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2 * (1.0 - 9.0 * z2))));
  return log_norm_pdf(x) - std::log(-x) + std::log(series);
}

double norm_mills_inverse(double x) {
  if (x > -35.0) return norm_pdf(x) / norm_cdf(x);
  return std::exp(log_norm_pdf(x) - log_norm_cdf(x));
}

double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw std::domain_error("norm_quantile: p outside [0, 1]");
  }
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

double bvn_upper(double h, double k, double r) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (h == inf || k == inf) return 0.0;
  if (h == -inf) return k == -inf ? 1.0 : norm_cdf(-k);
  if (k == -inf) return norm_cdf(-h);
  if (r == 0.0) return norm_cdf(-h) * norm_cdf(-k);

  static const double w6[3] = {0.1713244923791705, 0.3607615730481384, 0.4679139345726904};
  static const double x6[3] = {0.9324695142031522, 0.6612093864662647, 0.2386191860831970};
  static const double w12[6] = {0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                                0.2031674267230659,  0.2334925365383547, 0.2491470458134029};
  static const double x12[6] = {0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                                0.5873179542866171, 0.3678314989981802, 0.1252334085114692};
  static const double w20[10] = {0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                                 0.08327674157670475, 0.1019301198172404,  0.1181945319615184,
                                 0.1316886384491766,  0.1420961093183821,  0.1491729864726037,
                                 0.1527533871307259};
  static const double x20[10] = {0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                                 0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                                 0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                                 0.07652652113349733};
  const double* w;
  const double* x;
  int ng;
  if (std::abs(r) < 0.3) {
    w = w6; x = x6; ng = 3;
  } else if (std::abs(r) < 0.75) {
    w = w12; x = x12; ng = 6;
  } else {
    w = w20; x = x20; ng = 10;
  }

  double hk = h * k;
  double bvn = 0.0;
  if (std::abs(r) < 0.925) {
    const double hs = (h * h + k * k) / 2.0;
    const double asr = std::asin(r) / 2.0;
    for (int i = 0; i < ng; ++i) {
      for (double sgn : {-1.0, 1.0}) {
        const double sn = std::sin(asr * (1.0 + sgn * x[i]));
        bvn += w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
      }
    }
    bvn = bvn * asr / kTwoPi + norm_cdf(-h) * norm_cdf(-k);
  } else {
    if (r < 0.0) {
      k = -k;
      hk = -hk;
    }
    if (std::abs(r) < 1.0) {
      const double as = 1.0 - r * r;
      double a = std::sqrt(as);
      const double bs = (h - k) * (h - k);
      const double c = (4.0 - hk) / 8.0;
      const double d = (12.0 - hk) / 80.0;
      double asr = -(bs / as + hk) / 2.0;
      if (asr > -100.0) bvn = a * std::exp(asr) * (1.0 - c * (bs - as) * (1.0 - d * bs) / 3.0 + c * d * as * as);
      if (hk > -100.0) {
        const double b = std::sqrt(bs);
        const double sp = std::sqrt(kTwoPi) * norm_cdf(-b / a);
        bvn -= std::exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
      }
      a /= 2.0;
      double acc = 0.0;
      for (int i = 0; i < ng; ++i) {
        for (double sgn : {-1.0, 1.0}) {
          const double xs = std::pow(a * (1.0 + sgn * x[i]), 2);
          const double asr_i = -(bs / xs + hk) / 2.0;
          if (asr_i <= -100.0) continue;
          const double sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
          const double rs = std::sqrt(1.0 - xs);
          const double ep = std::exp(-(hk / 2.0) * xs / ((1.0 + rs) * (1.0 + rs))) / rs;
          acc += w[i] * std::exp(asr_i) * (sp - ep);
        }
      }
      bvn = (a * acc - bvn) / kTwoPi;
    }
    if (r > 0.0) {
      bvn += norm_cdf(-std::max(h, k));
    } else if (h >= k) {
      bvn = -bvn;
    } else {
      const double l = h < 0.0 ? norm_cdf(k) - norm_cdf(h) : norm_cdf(-h) - norm_cdf(-k);
      bvn = l - bvn;
    }
  }
  return std::clamp(bvn, 0.0, 1.0);
}

double bvn_cdf(double h, double k, double r) { return bvn_upper(-h, -k, r); }

}  // namespace corrgress

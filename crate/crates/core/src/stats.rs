//! Special functions and random sampling: chi-square distribution, a
//! Kolmogorov-Smirnov helper, reproducible RNG streams and equicorrelated
//! Gaussian predictors.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const FPMIN: f64 = 1e-300;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn gamma_prefactor(a: f64, x: f64) -> f64 {
    (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Series for P(a, x); converges quickly for x < a + 1.
fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..10_000 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * gamma_prefactor(a, x)
}

/// Continued fraction for Q(a, x) (modified Lentz); converges quickly for x >= a + 1.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    gamma_prefactor(a, x) * h
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

fn check_df(df: usize) -> Result<()> {
    if df == 0 {
        return Err(Error::InvalidArgument(
            "chi-square degrees of freedom must be positive".into(),
        ));
    }
    Ok(())
}

/// Chi-square CDF with `df` degrees of freedom.
pub fn chi2_cdf(x: f64, df: usize) -> Result<f64> {
    check_df(df)?;
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "chi-square CDF needs x >= 0, got {x}"
        )));
    }
    Ok(gamma_p(df as f64 / 2.0, x / 2.0))
}

/// Upper tail 1 - CDF, computed directly so small p-values keep their precision.
pub fn chi2_sf(x: f64, df: usize) -> Result<f64> {
    check_df(df)?;
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "chi-square survival needs x >= 0, got {x}"
        )));
    }
    Ok(gamma_q(df as f64 / 2.0, x / 2.0))
}

fn chi2_pdf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return if df == 2 { 0.5 } else { 0.0 };
    }
    let k = df as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Quantile of the chi-square distribution: `q` with `chi2_cdf(q, df) == confidence`.
pub fn chi2_quantile(confidence: f64, df: usize) -> Result<f64> {
    check_df(df)?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    let k = df as f64;
    // Work on whichever tail is smaller so the residual keeps full precision.
    let upper = confidence > 0.5;
    let target = if upper { 1.0 - confidence } else { confidence };
    let residual = |q: f64| {
        if upper {
            gamma_q(k / 2.0, q / 2.0) - target
        } else {
            gamma_p(k / 2.0, q / 2.0) - target
        }
    };

    // Wilson-Hilferty start.
    let z = normal_quantile(confidence);
    let h = 2.0 / (9.0 * k);
    let mut q = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);

    let mut lo = 0.0_f64;
    let mut hi = q.max(1.0);
    while residual(hi) * if upper { 1.0 } else { -1.0 } > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let r = residual(q);
        if r.abs() <= 1e-15 * target.max(1e-300) {
            break;
        }
        // The residual is decreasing in q for the upper tail, increasing for the lower.
        let below = if upper { r > 0.0 } else { r < 0.0 };
        if below {
            lo = q;
        } else {
            hi = q;
        }
        let slope = chi2_pdf(q, df) * if upper { -1.0 } else { 1.0 };
        let mut next = q - r / slope;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - q).abs() <= 1e-15 * q.max(1.0) {
            q = next;
            break;
        }
        q = next;
    }
    Ok(q)
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9 relative error).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    let x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    x
}

/// One-sample Kolmogorov-Smirnov test. Returns `(statistic, asymptotic p-value)`.
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_survival(lambda))
}

fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Identifies the generator behind every [`RngStream`]; recorded in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha), 64-bit seed, stream id selects the ChaCha stream";

/// Reproducible random stream keyed by `(seed, stream_id)`.
///
/// Distinct stream ids select disjoint ChaCha8 keystreams for the same seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::gen::<f64>(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Lower feasibility bound for an equicorrelation coefficient over `s` variables.
pub fn equicorrelation_lower_bound(s: usize) -> f64 {
    if s <= 1 {
        -1.0
    } else {
        -1.0 / (s as f64 - 1.0)
    }
}

/// Draws `n` i.i.d. rows from N(0, (1 - rho) I + rho 11'), returned column-major (`s` columns of length `n`).
///
/// Uses the symmetric square root of the equicorrelation matrix,
/// `sqrt(1 - rho) I + c 11'` with `c = (sqrt(1 + (s - 1) rho) - sqrt(1 - rho)) / s`.
pub fn sample_correlated_normal(
    rng: &mut RngStream,
    n: usize,
    s: usize,
    rho: f64,
) -> Result<Vec<Vec<f64>>> {
    let lower = equicorrelation_lower_bound(s);
    if !(rho > lower && rho < 1.0) {
        return Err(Error::InfeasibleCorrelation { rho, s, lower });
    }
    let a = (1.0 - rho).sqrt();
    let c = if s == 0 {
        0.0
    } else {
        ((1.0 + (s as f64 - 1.0) * rho).sqrt() - a) / s as f64
    };
    let mut cols = vec![vec![0.0; n]; s];
    let mut z = vec![0.0; s];
    for t in 0..n {
        let mut total = 0.0;
        for zi in z.iter_mut() {
            *zi = rng.standard_normal();
            total += *zi;
        }
        for (col, zi) in cols.iter_mut().zip(&z) {
            col[t] = a * zi + c * total;
        }
    }
    Ok(cols)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of an unsorted sample (`prob` in [0, 1]).
pub fn quantile(xs: &[f64], prob: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! All three use the same scheme: shift the argument upward with the
//! recurrence until it reaches [`ASYMPTOTIC_THRESHOLD`], then evaluate the
//! asymptotic (Stirling / Bernoulli) series. The recurrence terms are folded
//! into a single product or rational so the hot path does one `ln` or one
//! division regardless of the shift length.

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function, `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let (z, prod) = shift_product(x);
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // 1/12z - 1/360z^3 + 1/1260z^5 - 1/1680z^7 + 1/1188z^9 - 691/360360z^11 + 1/156z^13
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2 * (-691.0 / 360_360.0 + inv2 / 156.0))))));
    let stirling = (z - 0.5) * z.ln() - z + HALF_LN_2PI + series;
    if prod == 1.0 {
        stirling
    } else {
        stirling - prod.ln()
    }
}

/// Digamma `psi(x) = d/dx ln Gamma(x)`, `x > 0`.
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    // sum_{k<n} 1/(x+k) accumulated as num/den
    let mut z = x;
    let mut num = 0.0;
    let mut den = 1.0;
    while z < ASYMPTOTIC_THRESHOLD {
        num = num * z + den;
        den *= z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    let asym = z.ln() - 0.5 * inv - series;
    if num == 0.0 {
        asym
    } else {
        asym - num / den
    }
}

/// Trigamma `psi'(x)`, `x > 0`.
pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut z = x;
    let mut acc = 0.0;
    while z < ASYMPTOTIC_THRESHOLD {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // 1/z + 1/2z^2 + 1/6z^3 - 1/30z^5 + 1/42z^7 - 1/30z^9 + 5/66z^11 - 691/2730z^13 + 7/6z^15
    let tail = inv2
        * inv
        * (1.0 / 6.0
            + inv2
                * (-1.0 / 30.0
                    + inv2
                        * (1.0 / 42.0
                            + inv2
                                * (-1.0 / 30.0
                                    + inv2
                                        * (5.0 / 66.0
                                            + inv2 * (-691.0 / 2730.0 + inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + tail
}

/// `(ln Gamma(x), psi(x), psi'(x))` sharing one recurrence shift.
#[inline]
pub fn gamma_family(x: f64) -> (f64, f64, f64) {
    if x.is_nan() || x <= 0.0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mut z = x;
    let mut prod = 1.0;
    let mut num = 0.0;
    let mut tri = 0.0;
    while z < ASYMPTOTIC_THRESHOLD {
        num = num * z + prod;
        prod *= z;
        tri += 1.0 / (z * z);
        z += 1.0;
    }
    let lg = ln_gamma(z) - if prod == 1.0 { 0.0 } else { prod.ln() };
    let dg = digamma(z) - if num == 0.0 { 0.0 } else { num / prod };
    let tg = trigamma(z) + tri;
    (lg, dg, tg)
}

/// `ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b)`.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Shift `x` up to the asymptotic region, returning the shifted argument and
/// the product `x (x+1) ... (z-1)` removed by the recurrence.
#[inline]
fn shift_product(x: f64) -> (f64, f64) {
    let mut z = x;
    let mut prod = 1.0;
    while z < ASYMPTOTIC_THRESHOLD {
        prod *= z;
        z += 1.0;
    }
    (z, prod)
}

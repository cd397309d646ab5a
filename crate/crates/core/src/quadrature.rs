//! Adaptive Gauss–Kronrod quadrature (7/15 point pair) and bracketing root
//! finders.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_3,
    0.949_107_912_342_758_524_526_189_684_047_9,
    0.864_864_423_359_769_072_789_712_788_640_9,
    0.741_531_185_599_394_439_863_864_773_280_8,
    0.586_087_235_467_691_130_294_144_845_693_0,
    0.405_845_151_377_397_166_906_606_412_076_9,
    0.207_784_955_007_898_467_600_689_403_773_2,
    0.000_000_000_000_000_000_000_000_000_000_0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_97,
    0.063_092_092_629_978_553_290_700_663_189_20,
    0.104_790_010_322_250_183_839_876_322_541_5,
    0.140_653_259_715_525_918_745_189_590_510_2,
    0.169_004_726_639_267_902_826_583_426_598_6,
    0.190_350_578_064_785_409_913_256_402_421_0,
    0.204_432_940_075_298_892_414_161_999_234_6,
    0.209_482_141_084_727_828_012_999_174_891_7,
];

// Gauss weights for the odd-indexed Kronrod nodes plus the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_1,
    0.279_705_391_489_276_667_901_467_771_423_8,
    0.381_830_050_505_118_944_950_369_775_489_0,
    0.417_959_183_673_469_387_755_102_040_816_3,
];

/// Integral estimate with its error bound.
#[derive(Debug, Clone, Copy)]
pub struct Quad<T> {
    pub value: T,
    pub error: T,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment<T> {
    a: T,
    b: T,
    value: T,
    error: T,
}

fn gk15<T: Scalar>(f: &mut impl FnMut(T) -> T, a: T, b: T) -> Segment<T> {
    let half = T::lit(0.5);
    let centre = half * (a + b);
    let radius = half * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for k in 0..7 {
        let dx = radius * T::lit(XGK[k]);
        let s = f(centre - dx) + f(centre + dx);
        kronrod = kronrod + s * T::lit(WGK[k]);
        if k % 2 == 1 {
            gauss = gauss + s * T::lit(WG[k / 2]);
        }
    }
    let value = kronrod * radius;
    let error = ((kronrod - gauss) * radius).abs();
    Segment { a, b, value, error }
}

/// Globally adaptive integration of `f` over `[a, b]` until the summed error
/// estimate drops below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<T: Scalar>(
    mut f: impl FnMut(T) -> T,
    a: T,
    b: T,
    abs_tol: T,
    rel_tol: T,
) -> Result<Quad<T>> {
    const MAX_SEGMENTS: usize = 4000;
    if a == b {
        return Ok(Quad {
            value: T::zero(),
            error: T::zero(),
            evaluations: 0,
        });
    }
    let mut segments = vec![gk15(&mut f, a, b)];
    let mut evaluations = 15;
    loop {
        let value: T = segments.iter().map(|s| s.value).sum();
        let error: T = segments.iter().map(|s| s.error).sum();
        if !value.is_finite() || !error.is_finite() {
            return Err(Error::NonFinite(format!(
                "integrand on [{a}, {b}] produced {value}"
            )));
        }
        let target = abs_tol.max(rel_tol * value.abs());
        if error <= target {
            return Ok(Quad {
                value,
                error,
                evaluations,
            });
        }
        let (worst, _) = segments
            .iter()
            .enumerate()
            .fold((0, -T::one()), |best, (k, s)| {
                if s.error > best.1 {
                    (k, s.error)
                } else {
                    best
                }
            });
        let s = segments.swap_remove(worst);
        let mid = T::lit(0.5) * (s.a + s.b);
        // segment too small to split further: accept what we have
        if !(mid > s.a && mid < s.b) || segments.len() >= MAX_SEGMENTS {
            segments.push(s);
            let value: T = segments.iter().map(|s| s.value).sum();
            let error: T = segments.iter().map(|s| s.error).sum();
            if error <= T::lit(10.0) * target {
                return Ok(Quad {
                    value,
                    error,
                    evaluations,
                });
            }
            return Err(Error::Quadrature {
                value: value.as_f64(),
                error: error.as_f64(),
                tol: target.as_f64(),
            });
        }
        segments.push(gk15(&mut f, s.a, mid));
        segments.push(gk15(&mut f, mid, s.b));
        evaluations += 30;
    }
}

/// Tensor-product integration over a rectangle: outer adaptive rule over `x`
/// of inner adaptive integrals over `y`.
pub fn integrate_2d<T: Scalar>(
    mut f: impl FnMut(T, T) -> T,
    x: (T, T),
    y: (T, T),
    abs_tol: T,
) -> Result<Quad<T>> {
    let mut inner_error = T::zero();
    let mut inner_evals = 0;
    let mut failure = None;
    let width = x.1 - x.0;
    let inner_tol = abs_tol / (T::lit(10.0) * width.max(T::one()));
    let outer = integrate(
        |xv| match integrate(|yv| f(xv, yv), y.0, y.1, inner_tol, T::zero()) {
            Ok(q) => {
                inner_error = inner_error.max(q.error);
                inner_evals += q.evaluations;
                q.value
            }
            Err(e) => {
                failure.get_or_insert(e);
                T::nan()
            }
        },
        x.0,
        x.1,
        abs_tol,
        T::zero(),
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let outer = outer?;
    Ok(Quad {
        value: outer.value,
        error: outer.error + inner_error * width,
        evaluations: inner_evals,
    })
}

/// Bisection for a sign change of `f` on `[lo, hi]`. Stops when
/// `|f(mid)| ≤ f_tol` or the bracket cannot shrink any further.
pub fn bisect<T: Scalar>(
    mut f: impl FnMut(T) -> Result<T>,
    mut lo: T,
    mut hi: T,
    f_tol: T,
) -> Result<T> {
    let mut flo = f(lo)?;
    let fhi = f(hi)?;
    if flo == T::zero() {
        return Ok(lo);
    }
    if fhi == T::zero() {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::RootFinding(format!(
            "no sign change on [{lo}, {hi}] (f = {flo}, {fhi})"
        )));
    }
    let mut best = (lo, flo.abs());
    for _ in 0..400 {
        let mid = T::lit(0.5) * (lo + hi);
        if !(mid > lo && mid < hi) {
            break;
        }
        let fm = f(mid)?;
        if fm.abs() < best.1 {
            best = (mid, fm.abs());
        }
        if fm.abs() <= f_tol {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(best.0)
}

/// Doubles `hi` from `start` until `f(hi) > 0`, returning the bracket.
pub fn bracket_up<T: Scalar>(
    mut f: impl FnMut(T) -> Result<T>,
    start: T,
    limit: T,
) -> Result<(T, T)> {
    let mut lo = start;
    if f(lo)? > T::zero() {
        return Err(Error::RootFinding(format!("function already positive at {start}")));
    }
    let mut hi = start * T::lit(2.0);
    while hi <= limit {
        if f(hi)? > T::zero() {
            return Ok((lo, hi));
        }
        lo = hi;
        hi = hi * T::lit(2.0);
    }
    Err(Error::RootFinding(format!(
        "no sign change found in [{start}, {limit}]"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let q = integrate(|x: f64| x * x * x - 2.0 * x, 0.0, 3.0, 1e-14, 0.0).unwrap();
        assert!((q.value - (81.0 / 4.0 - 9.0)).abs() < 1e-13);
    }

    #[test]
    fn gaussian_on_window() {
        let q = integrate(|x: f64| (-x * x / 2.0).exp(), -40.0, 40.0, 1e-13, 0.0).unwrap();
        assert!((q.value - std::f64::consts::TAU.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sharp_peak() {
        let q = integrate(|x: f64| 1.0 / (1e-6 + x * x), -1.0, 1.0, 1e-9, 1e-12).unwrap();
        let exact = 2.0 * (1.0f64 / 1e-3).atan() / 1e-3;
        assert!((q.value - exact).abs() / exact < 1e-10);
    }

    #[test]
    fn works_in_f32() {
        let q = integrate(|x: f32| x.sin(), 0.0, std::f32::consts::PI, 1e-5, 0.0).unwrap();
        assert!((q.value - 2.0).abs() < 1e-5);
    }

    #[test]
    fn two_dimensional() {
        let q = integrate_2d(|x: f64, y: f64| (-(x * x + y * y)).exp(), (-10.0, 10.0), (-10.0, 10.0), 1e-11)
            .unwrap();
        assert!((q.value - std::f64::consts::PI).abs() < 1e-10);
    }

    #[test]
    fn bisection_and_bracket() {
        let root = bisect(|x: f64| Ok(x * x - 2.0), 0.0, 2.0, 1e-14).unwrap();
        assert!((root - 2f64.sqrt()).abs() < 1e-13);
        let (lo, hi) = bracket_up(|x: f64| Ok(x - 5.0), 0.5, 1e3).unwrap();
        assert!(lo < 5.0 && hi > 5.0);
        assert!(bracket_up(|x: f64| Ok(-x), 0.5, 1e3).is_err());
        assert!(bisect(|x: f64| Ok(x * x + 1.0), -1.0, 1.0, 1e-10).is_err());
    }
}

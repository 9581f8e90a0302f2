//! Overflow-safe scalar primitives shared by the transform compiler and the
//! differentiation tape.
//!
//! Both the plain-`f64` forward path and the taped path route through these
//! functions, so constrained outputs are bit-identical whether or not a
//! gradient is being recorded.

/// `log(1 + exp(v))`, strictly positive for every finite input.
///
/// Branches on the sign of `v` so neither `exp` overflow (large `v`) nor
/// cancellation (very negative `v`) occurs.
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Logistic function; also the derivative of [`softplus`].
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverse offset `log(exp(b - a) - 1)` used to calibrate interval
/// transforms so that the output range is exactly `(a, b)`.
///
/// Finite for every `b > a`: the large-gap branch avoids `exp` overflow and
/// the small-gap branch avoids the `exp(u) - 1` cancellation.
pub fn softplus_offset(a: f64, b: f64) -> Option<f64> {
    let u = b - a;
    if !(u > 0.0) || !u.is_finite() {
        return None;
    }
    Some(ln_expm1(u))
}

/// `log(exp(u) - 1)` for `u > 0`.
pub fn ln_expm1(u: f64) -> f64 {
    if u > core::f64::consts::LN_2 {
        // exp(-u) < 1/2 here, so ln_1p(-exp(-u)) is well conditioned.
        u + (-(-u).exp()).ln_1p()
    } else {
        u.exp_m1().ln()
    }
}

/// Numerically stable `log(sum(exp(xs)))` via max-shift.
pub fn logsumexp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "logsumexp of an empty slice");
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Strictness guard for one-sided bounds.
///
/// Softplus is strictly positive in exact arithmetic, but in `f64` its tail
/// values (down to ~2e-22 for inputs near -50) are absorbed when added to a
/// bound of ordinary magnitude, which would turn a strict inequality into an
/// equality. The guard is the minimum offset kept between an output and its
/// bound; it dominates both the absorption threshold and the rounding error
/// of evaluating affine bound expressions at this scale.
pub fn bound_guard(bound: f64) -> f64 {
    bound.abs().max(1.0) * 1e-9
}

/// Strictness guard for interval endpoints: small relative to the interval
/// width (so saturation behavior is preserved to well below common
/// tolerances) but always representable against both endpoints.
pub fn interval_guard(a: f64, b: f64) -> f64 {
    let width = b - a;
    let ulp_scale = a.abs().max(b.abs()).max(1.0) * f64::EPSILON;
    (width * 1e-7).max(16.0 * ulp_scale).min(width * 0.25)
}

/// The interval squash `-g(-g(x) + k(a, b)) + b` with `g` = softplus.
///
/// Maps the real line strictly into `(a, b)`, approaching `a` as `x -> -inf`
/// and `b` as `x -> +inf`. `offset` must be `softplus_offset(a, b)`.
pub fn interval_transform(x: f64, offset: f64, b: f64) -> f64 {
    b - softplus(offset - softplus(x))
}

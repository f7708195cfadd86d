//! C-infinity transition functions built from `exp(-1/x)`.

/// `exp(-1/x)` for `x > 0`, zero otherwise.
fn flat(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// Smooth monotone step: 0 for `z <= 0`, 1 for `z >= 1`, all derivatives
/// vanish at both ends, and `step(1 - z) = 1 - step(z)`.
pub fn step(z: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        let a = flat(z);
        a / (a + flat(1.0 - z))
    }
}

/// `\int_0^z step`, which is `z - 1/2` for `z >= 1`.
pub fn step_integral(z: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    if z >= 1.0 {
        return z - 0.5;
    }
    adaptive_simpson(step, 0.0, z, 1e-14, 40)
}

/// Time bump for phasing out a flow: 1 for `t <= omega`, 0 for `t >= 2 omega`.
pub fn phase_out(t: f64, omega: f64) -> f64 {
    1.0 - step((t - omega) / omega)
}

/// Smoothed `min(theta, cap)`.
///
/// Equals `theta` for `theta <= cap - width`, equals `cap` for
/// `theta >= cap + width`, and never exceeds either. With `width == 0` this is
/// the plain minimum.
pub fn soft_min(theta: f64, cap: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return theta.min(cap);
    }
    let x = theta - cap;
    if x <= -width {
        theta
    } else if x >= width {
        cap
    } else {
        theta - 2.0 * width * step_integral((x + width) / (2.0 * width))
    }
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(&f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_symmetric_and_monotone() {
        assert_eq!(step(-1.0), 0.0);
        assert_eq!(step(2.0), 1.0);
        assert!((step(0.5) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 0..=100 {
            let z = i as f64 / 100.0;
            let s = step(z);
            assert!(s >= prev);
            assert!((s + step(1.0 - z) - 1.0).abs() < 1e-14);
            prev = s;
        }
    }

    #[test]
    fn integral_matches_midpoint_quadrature() {
        for &z in &[0.1, 0.3, 0.5, 0.77, 0.999] {
            let n = 200_000;
            let h = z / n as f64;
            let brute: f64 = (0..n).map(|i| step((i as f64 + 0.5) * h) * h).sum();
            assert!((step_integral(z) - brute).abs() < 1e-9, "z = {z}");
        }
        assert!((step_integral(1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn soft_min_bounds() {
        let cap = 1.2;
        let w = 0.1;
        for i in 0..=400 {
            let theta = i as f64 * std::f64::consts::PI / 400.0;
            let r = soft_min(theta, cap, w);
            assert!(r <= theta + 1e-15);
            assert!(r <= cap + 1e-15);
            assert!(r >= theta.min(cap) - w);
        }
        assert_eq!(soft_min(0.5, cap, w), 0.5);
        assert_eq!(soft_min(2.0, cap, w), cap);
        // continuity at both band edges
        assert!((soft_min(cap + w - 1e-9, cap, w) - cap).abs() < 1e-8);
        assert!((soft_min(cap - w + 1e-9, cap, w) - (cap - w)).abs() < 1e-8);
    }

    #[test]
    fn phase_out_support() {
        assert_eq!(phase_out(0.5, 1.0), 1.0);
        assert_eq!(phase_out(1.0, 1.0), 1.0);
        assert_eq!(phase_out(2.0, 1.0), 0.0);
        assert_eq!(phase_out(3.5, 1.0), 0.0);
        assert!((phase_out(1.5, 1.0) - 0.5).abs() < 1e-15);
    }
}

//! One-dimensional optimization and root finding.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub converged: bool,
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Brent's method on `[a, b]`: golden-section steps with parabolic
/// interpolation once the bracket is well behaved.
pub fn brent_min(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64, max_iter: usize) -> Minimum {
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return Minimum { x, fx, converged: true };
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else if d > 0.0 { x + tol1 } else { x - tol1 };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Minimum { x, fx, converged: false }
}

/// Scans `points` equally spaced values on `[lo, hi]`, then refines around
/// the best one with [`brent_min`]. Guards against multimodal profiles.
pub fn grid_brent_min(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
    tol: f64,
    max_iter: usize,
) -> Minimum {
    let points = points.max(3);
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let best = (0..points)
        .min_by(|&i, &j| values[i].total_cmp(&values[j]))
        .expect("nonempty grid");
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(points - 1)];
    let refined = brent_min(&mut f, a, b, tol, max_iter);
    if refined.fx <= values[best] {
        refined
    } else {
        Minimum { x: grid[best], fx: values[best], converged: refined.converged }
    }
}

/// Root of `f` on `[a, b]` given opposite signs at the ends, by the Illinois
/// variant of false position with bisection fallback.
pub fn find_root(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> Option<f64> {
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() || !fa.is_finite() || !fb.is_finite() {
        return None;
    }
    let mut side = 0i8;
    for i in 0..max_iter {
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !c.is_finite() || c <= a.min(b) || c >= a.max(b) || i % 8 == 7 {
            c = 0.5 * (a + b);
        }
        let fc = f(c);
        if fc == 0.0 || (b - a).abs() < tol * (1.0 + c.abs()) {
            return Some(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Some(0.5 * (a + b))
}

/// Where a one-dimensional profile attains its maximum on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileMax {
    /// Interior stationary point.
    Interior(f64),
    /// The profile decreases from the lower end.
    Lower,
    /// The profile still increases at the upper end.
    Upper,
}

/// Maximizes a smooth profile given its value and derivative. A grid scan
/// picks the best cell, and the derivative root inside the adjacent cells
/// locates the maximum to `tol`. The derivative is used because it pins the
/// optimum far more precisely than comparing function values.
pub fn maximize_profile(
    mut f: impl FnMut(f64) -> Option<(f64, f64)>,
    lo: f64,
    hi: f64,
    points: usize,
    tol: f64,
) -> ProfileMax {
    let points = points.max(3);
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let evals: Vec<Option<(f64, f64)>> = grid.iter().map(|&t| f(t)).collect();
    let value = |i: usize| evals[i].map_or(f64::NEG_INFINITY, |e| e.0);
    let best = (0..points).max_by(|&i, &j| value(i).total_cmp(&value(j)).then(j.cmp(&i))).expect("grid");
    let slope = |i: usize| evals[i].map_or(f64::NAN, |e| e.1);
    if best == points - 1 && slope(best) >= 0.0 {
        return ProfileMax::Upper;
    }
    if best == 0 && slope(0) <= 0.0 {
        return ProfileMax::Lower;
    }
    let (a, b) = if slope(best) > 0.0 { (best, best + 1) } else { (best - 1, best) };
    let root = find_root(|t| f(t).map_or(f64::NAN, |e| e.1), grid[a], grid[b], tol, 200);
    match root {
        Some(t) => ProfileMax::Interior(t),
        None => {
            let lo_i = best.saturating_sub(1);
            let hi_i = (best + 1).min(points - 1);
            let m = brent_min(|t| f(t).map_or(f64::INFINITY, |e| -e.0), grid[lo_i], grid[hi_i], tol, 200);
            ProfileMax::Interior(m.x)
        }
    }
}

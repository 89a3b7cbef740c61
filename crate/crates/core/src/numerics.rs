//! Small dense helpers shared by the geometry, solver and oracle code.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Golden-section minimisation of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`; the endpoints are always compared as well.
pub(crate) fn golden_min<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if b - a <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for t in [lo, hi] {
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    best
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projection of `y` onto the convex hull of `vertices`, by accelerated
/// projected gradient on the barycentric weights. The returned point is an
/// exact convex combination, so it always lies in the hull.
pub(crate) fn project_hull(vertices: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = vertices.len();
    let n = y.len();
    if m == 1 {
        return (vertices[0].clone(), vec![1.0]);
    }
    let lip: f64 = vertices.iter().map(|v| dot(v, v)).sum::<f64>().max(1e-12);
    let step = 1.0 / lip;
    let combine = |w: &[f64]| {
        let mut p = vec![0.0; n];
        for (wi, v) in w.iter().zip(vertices) {
            for (pj, vj) in p.iter_mut().zip(v) {
                *pj += wi * vj;
            }
        }
        p
    };
    let mut w = vec![1.0 / m as f64; m];
    let mut z = w.clone();
    let mut t = 1.0_f64;
    for _ in 0..20_000 {
        let p = combine(&z);
        let r: Vec<f64> = p.iter().zip(y).map(|(a, b)| a - b).collect();
        let grad: Vec<f64> = vertices.iter().map(|v| dot(v, &r)).collect();
        let trial: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| zi - step * gi).collect();
        let w_next = project_simplex(&trial);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let change = w_next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = w_next
            .iter()
            .zip(&w)
            .map(|(a, b)| a + (t - 1.0) / t_next * (a - b))
            .collect();
        w = w_next;
        t = t_next;
        if change < 1e-15 {
            break;
        }
    }
    (combine(&w), w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, v) = golden_min(|t| (t - 0.3) * (t - 0.3) + 1.0, 0.0, 1.0, 200);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn golden_checks_endpoints() {
        let (x, _) = golden_min(|t| t, 0.0, 1.0, 200);
        assert_eq!(x, 0.0);
    }

    #[test]
    fn simplex_projection_sums_to_one() {
        let p = project_simplex(&[0.9, 0.8, -3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.55).abs() < 1e-12 && (p[1] - 0.45).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn hull_projection_of_square() {
        let v = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let (p, _) = project_hull(&v, &[2.0, 0.5]);
        assert!((p[0] - 1.0).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
        let (q, _) = project_hull(&v, &[0.25, 0.75]);
        assert!((q[0] - 0.25).abs() < 1e-6 && (q[1] - 0.75).abs() < 1e-6);
    }
}

//! Upper concave hulls of 1D point sets (monotone chain).

/// Vertex indices of the upper concave hull of points with strictly
/// increasing `xs`. Collinear points are dropped.
pub fn upper_hull(xs: &[f64], ys: &[f64]) -> Vec<usize> {
    assert_eq!(xs.len(), ys.len());
    let mut h: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while h.len() >= 2 {
            let a = h[h.len() - 2];
            let b = h[h.len() - 1];
            let cross = (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
            if cross >= 0.0 {
                h.pop();
            } else {
                break;
            }
        }
        h.push(i);
    }
    h
}

/// For every input point, the hull segment `(left, right)` (positions in
/// `verts`) whose x-range contains it, and the hull value there.
pub fn hull_values(xs: &[f64], ys: &[f64], verts: &[usize]) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(xs.len());
    let mut s = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        if verts.len() == 1 {
            out.push((0, ys[verts[0]]));
            continue;
        }
        while s + 2 < verts.len() && xs[verts[s + 1]] <= x {
            s += 1;
        }
        let (a, b) = (verts[s], verts[s + 1]);
        let v = if i == a {
            ys[a]
        } else if i == b {
            ys[b]
        } else {
            ys[a] + (ys[b] - ys[a]) * (x - xs[a]) / (xs[b] - xs[a])
        };
        out.push((s, v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_convex_points_is_the_chord() {
        let xs: Vec<f64> = (0..11).map(|k| k as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x - 0.5) * (x - 0.5)).collect();
        assert_eq!(upper_hull(&xs, &ys), vec![0, 10]);
    }

    #[test]
    fn hull_of_concave_points_keeps_all() {
        let xs: Vec<f64> = (0..11).map(|k| k as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -(x - 0.5) * (x - 0.5)).collect();
        assert_eq!(upper_hull(&xs, &ys).len(), 11);
    }

    #[test]
    fn hull_values_interpolate() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, 0.0, 2.0, 0.0];
        let v = upper_hull(&xs, &ys);
        assert_eq!(v, vec![0, 2, 3]);
        let hv = hull_values(&xs, &ys, &v);
        assert_eq!(hv[1], (0, 1.0));
        assert_eq!(hv[2].1, 2.0);
        assert_eq!(hv[3], (1, 0.0));
    }
}

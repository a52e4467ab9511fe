//! Parameter-free sinusoidal encodings of 2-D positions.

/// Frequencies `pi * 2^(8k/F)`, spanning eight octaves above one half-cycle
/// per image.
fn frequency(k: usize, count: usize) -> f64 {
    std::f64::consts::PI * 2f64.powf(8.0 * k as f64 / count as f64)
}

/// Encodes a normalised coordinate pair `(u, v)` in `[0, 1]` as
/// `[sin(w u), cos(w u)]` for every frequency, then the same for `v`.
/// Output width is `4 * count`.
pub fn encode_point(u: f64, v: f64, count: usize, out: &mut Vec<f64>) {
    for c in [u, v] {
        for k in 0..count {
            let a = frequency(k, count) * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
}

/// Dense `[h, w, 4 * count]` grid encoding of cell centres, row-major.
pub fn encode_grid(h: usize, w: usize, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 4 * count);
    for y in 0..h {
        for x in 0..w {
            encode_point((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, count, &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_point_encoding() {
        let grid = encode_grid(3, 5, 4);
        assert_eq!(grid.len(), 3 * 5 * 16);
        let mut p = Vec::new();
        encode_point(3.5 / 5.0, 1.5 / 3.0, 4, &mut p);
        assert_eq!(&grid[(5 + 3) * 16..(5 + 4) * 16], p.as_slice());
    }

    #[test]
    fn distinct_positions_get_distinct_codes() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        encode_point(0.25, 0.5, 64, &mut a);
        encode_point(0.26, 0.5, 64, &mut b);
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}

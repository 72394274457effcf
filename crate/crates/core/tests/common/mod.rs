#![allow(dead_code)]

use difflab::numerics::Tensor;

/// Largest `|g - fd| / max(|g|, |fd|, floor)` over all coordinates, with
/// central differences of step `h`.
pub fn max_fd_rel_error(loss: impl Fn(&Tensor) -> f64, at: &Tensor, grad: &Tensor, h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = at.clone();
    for i in 0..at.len() {
        let base = at.data()[i];
        p.data_mut()[i] = base + h;
        let up = loss(&p);
        p.data_mut()[i] = base - h;
        let down = loss(&p);
        p.data_mut()[i] = base;
        let fd = (up - down) / (2.0 * h);
        let g = grad.data()[i];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(floor));
    }
    worst
}

/// Column means and unbiased covariance of a two-column sample matrix.
pub fn moments2(s: &Tensor) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = s.rows() as f64;
    let mut m = [0.0; 2];
    for i in 0..s.rows() {
        m[0] += s.at(i, 0);
        m[1] += s.at(i, 1);
    }
    m[0] /= n;
    m[1] /= n;
    let mut c = [[0.0; 2]; 2];
    for i in 0..s.rows() {
        let d = [s.at(i, 0) - m[0], s.at(i, 1) - m[1]];
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += d[a] * d[b] / (n - 1.0);
            }
        }
    }
    (m, c)
}

/// Points of the 256-level grid, picked by a simple hash of the index.
pub fn grid_batch(rows: usize, cols: usize, salt: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| -1.0 + 2.0 * ((i * 97 + salt * 31 + 11) % 256) as f64 / 255.0)
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

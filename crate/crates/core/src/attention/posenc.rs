//! Fixed sinusoidal embeddings of normalized coordinates.

use std::f64::consts::PI;

use crate::tensor::Tensor;

const TEMPERATURE: f64 = 10000.0;

/// Writes `feats` interleaved sin/cos features of `v ∈ [0, 1]` into `out`.
fn embed_scalar(v: f64, feats: usize, out: &mut Vec<f64>) {
    let x = v * 2.0 * PI;
    for i in 0..feats {
        let dim_t = TEMPERATURE.powf((2 * (i / 2)) as f64 / feats as f64);
        let a = x / dim_t;
        out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
    }
}

/// `[N, c]` embedding of points: `c/2` features of x followed by `c/2` of y.
pub fn sine_embed_points(points: &[[f64; 2]], c: usize) -> Tensor {
    let half = c / 2;
    let mut data = Vec::with_capacity(points.len() * c);
    for p in points {
        embed_scalar(p[0], half, &mut data);
        embed_scalar(p[1], half, &mut data);
    }
    Tensor::from_parts(vec![points.len(), 2 * half], data)
}

/// `[N, 5·feats]` embedding of boxes given as `(cx, cy, w, h, θ/π)`.
pub fn sine_embed_boxes(coords: &[[f64; 5]], feats: usize) -> Tensor {
    let mut data = Vec::with_capacity(coords.len() * 5 * feats);
    for b in coords {
        for &v in b {
            embed_scalar(v, feats, &mut data);
        }
    }
    Tensor::from_parts(vec![coords.len(), 5 * feats], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_origin() {
        let t = sine_embed_points(&[[0.0, 0.0], [0.5, 0.25]], 8);
        assert_eq!(t.shape(), &[2, 8]);
        assert_eq!(&t.row(0)[..4], &[0.0, 1.0, 0.0, 1.0]);
        let b = sine_embed_boxes(&[[0.1, 0.2, 0.3, 0.4, 0.5]], 6);
        assert_eq!(b.shape(), &[1, 30]);
    }

    #[test]
    fn distinct_points_embed_differently() {
        let t = sine_embed_points(&[[0.3, 0.3], [0.31, 0.3]], 16);
        assert_ne!(t.row(0), t.row(1));
    }
}

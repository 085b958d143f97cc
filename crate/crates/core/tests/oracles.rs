mod common;

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};

use common::*;
use rand::Rng;
use rotdetr::geom::{rotated_iou, OrientedBox};
use rotdetr::harness::{average_precision, voc07_ap, Detection};
use rotdetr::matching::hungarian;
use rotdetr::nn::ParamStore;
use rotdetr::proposals::{opr_align, ReceptiveBlock};

#[test]
fn rotated_iou_agrees_with_monte_carlo() {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = random_box(&mut r);
        // half the pairs share a neighbourhood so overlaps are common
        let b = if r.random_bool(0.5) {
            let mut b = random_box(&mut r);
            b.cx = a.cx + r.random_range(-0.1..0.1);
            b.cy = a.cy + r.random_range(-0.1..0.1);
            b
        } else {
            random_box(&mut r)
        };
        let exact = rotated_iou(&a.canonicalize(), &b.canonicalize());
        let mc = mc_iou(&a, &b, 1_000_000, &mut r);
        worst = worst.max((exact - mc).abs());
    }
    assert!(worst <= 2e-3, "worst deviation {worst}");
}

#[test]
fn forty_five_degree_square() {
    let a = OrientedBox::new(0.5, 0.5, 1.0, 1.0, 0.0);
    let b = OrientedBox::new(0.5, 0.5, 1.0, 1.0, FRAC_PI_4);
    // octagon area 2(√2 − 1) over union 2 − 2(√2 − 1)
    let oct = 2.0 * (2f64.sqrt() - 1.0);
    assert!((oct / (2.0 - oct) - FRAC_1_SQRT_2).abs() < 1e-15);
    assert!((rotated_iou(&a, &b) - FRAC_1_SQRT_2).abs() < 1e-9);
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut r = rng(11);
    for n in 2..=7 {
        for trial in 0..200 {
            // square and wide matrices; small integer costs create ties
            let m = if trial % 2 == 0 { n } else { n + r.random_range(1..=2) };
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| if trial % 3 == 0 { r.random_range(0..5) as f64 } else { r.random_range(-10.0..10.0) })
                        .collect()
                })
                .collect();
            if m > 7 {
                continue;
            }
            let a = hungarian(&cost).unwrap();
            let brute = brute_force_min(&cost);
            let sum: f64 = a.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            assert_eq!(a.pairs.len(), n);
            assert!((a.cost - brute).abs() <= 1e-9 * brute.abs().max(1.0), "n={n}: {} vs {brute}", a.cost);
            assert!((sum - a.cost).abs() <= 1e-9 * sum.abs().max(1.0));
        }
    }
}

#[test]
fn deformable_attention_matches_literal_loop() {
    let mut r = rng(21);
    for _ in 0..50 {
        let case = random_deform_case(&mut r);
        let lib = library_attention(&case);
        let oracle: Vec<f64> = deform_attn_oracle(&case).into_iter().flatten().collect();
        assert_eq!(lib.len(), oracle.len());
        for (a, b) in lib.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

/// Direct-loop convolution, `w: [kh, kw, cin, cout]`, same padding.
fn conv_oracle(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], b: &[f64], kh: usize, kw: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            for o in 0..cout {
                let mut acc = b[o];
                for di in 0..kh {
                    for dj in 0..kw {
                        let (y, xx) = (i as i64 + di as i64 - (kh / 2) as i64, j as i64 + dj as i64 - (kw / 2) as i64);
                        if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[((y as usize) * w + xx as usize) * cin + ci] * k[((di * kw + dj) * cin + ci) * cout + o];
                        }
                    }
                }
                out[(i * w + j) * cout + o] = acc;
            }
        }
    }
    out
}

#[test]
fn receptive_block_matches_literal_composition() {
    let mut r = rng(5);
    let c = 3;
    let (h, w) = (6, 9);
    let mut store = ParamStore::new();
    let rb = ReceptiveBlock::new(&mut store, &mut r, "rb", c);
    for id in [rb.br1.b, rb.br2.b, rb.br3.b, rb.eps.b] {
        let v = randn(&mut r, store.get(id).shape());
        *store.get_mut(id) = v;
    }
    let x = randn(&mut r, &[h, w, c]);
    let mut s = store.session(false);
    let xv = s.graph.constant(x.clone());
    let y = rb.forward(&mut s, xv).unwrap();
    let got = s.graph.value(y).data().to_vec();

    let conv = |layer: &rotdetr::nn::Conv2d, input: &[f64], cin: usize| {
        let k = store.get(layer.w);
        let sh = k.shape();
        conv_oracle(input, h, w, cin, k.data(), store.get(layer.b).data(), sh[0], sh[1], sh[3])
    };
    let b1 = conv(&rb.br1, x.data(), c);
    let b2 = conv(&rb.br2, x.data(), c);
    let b3 = conv(&rb.br3, x.data(), c);
    assert_eq!(store.get(rb.br2.w).shape()[..2], [1, 5]);
    assert_eq!(store.get(rb.br3.w).shape()[..2], [1, 7]);
    let cat: Vec<f64> = (0..h * w)
        .flat_map(|p| {
            b1[p * c..(p + 1) * c]
                .iter()
                .chain(&b2[p * c..(p + 1) * c])
                .chain(&b3[p * c..(p + 1) * c])
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let e = conv(&rb.eps, &cat, 3 * c);
    for (i, g) in got.iter().enumerate() {
        let expect = (b1[i] + e[i]).max(0.0);
        assert!((g - expect).abs() < 1e-12, "{i}: {g} vs {expect}");
    }
}

#[test]
fn alignment_matches_scalar_reference() {
    let mut r = rng(9);
    let (h, w, c) = (5, 7, 3);
    let feat = randn(&mut r, &[h, w, c]);
    let boxes: Vec<OrientedBox> = (0..h * w)
        .map(|_| {
            OrientedBox::new(
                r.random_range(0.0..1.0),
                r.random_range(0.0..1.0),
                r.random_range(0.02..0.6),
                r.random_range(0.02..0.6),
                r.random_range(-3.0..3.0),
            )
        })
        .collect();
    let mut g = rotdetr::tensor::Graph::new();
    let f = g.constant(feat.clone());
    let y = opr_align(&mut g, f, &boxes).unwrap();
    let got = g.value(y).data();
    for (p, b) in boxes.iter().enumerate() {
        let (s, co) = b.theta.sin_cos();
        // corners from the vertex formula with a = (1, 1, −1, −1), b = (−1, 1, 1, −1)
        let mut pts = vec![(b.cx, b.cy)];
        for (aj, bj) in [(1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            pts.push((
                b.cx + 0.5 * (co * aj * b.w - s * bj * b.h),
                b.cy + 0.5 * (s * aj * b.w + co * bj * b.h),
            ));
        }
        let mut mean = vec![0.0; c];
        for (x, y) in pts {
            let v = bilinear_oracle(feat.data(), h, w, c, x * w as f64 - 0.5, y * h as f64 - 0.5);
            for ch in 0..c {
                mean[ch] += v[ch] / 5.0;
            }
        }
        for ch in 0..c {
            let expect = feat.data()[p * c + ch] + mean[ch];
            assert!((got[p * c + ch] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn eleven_point_ap_matches_hand_computation() {
    // ranked hits T F T F F T against 4 positives:
    // recall .25 .25 .5 .5 .5 .75, precision 1 .5 2/3 .5 .4 .5
    // r ∈ {0, .1, .2} → 1; {.3, .4, .5} → 2/3; {.6, .7} → .5; {.8, .9, 1} → 0
    let expect = (3.0 + 2.0 + 1.0) / 11.0;
    let tp = [true, false, true, false, false, true];
    assert!((voc07_ap(&tp, 4) - expect).abs() < 1e-15);
    assert!((ap11_oracle(&tp, 4) - expect).abs() < 1e-15);

    // the same ranking produced by box matching over two images
    let gt = |x: f64| OrientedBox::new(x, 0.5, 0.1, 0.2, 0.3);
    let truths = vec![vec![(0, gt(0.2)), (0, gt(0.5))], vec![(0, gt(0.3)), (0, gt(0.7))]];
    let far = OrientedBox::new(0.9, 0.9, 0.05, 0.05, 0.0);
    let d = |score: f64, bbox: OrientedBox| Detection { class: 0, score, bbox };
    let dets = vec![
        vec![d(0.9, gt(0.2)), d(0.8, gt(0.2)), d(0.5, far)],
        vec![d(0.7, gt(0.3)), d(0.6, far), d(0.4, gt(0.7))],
    ];
    let ap = average_precision(&dets, &truths, 1, 0.5);
    assert!((ap[0].unwrap() - expect).abs() < 1e-15);

    let mut r = rng(3);
    for _ in 0..200 {
        let n = r.random_range(1..20);
        let tp: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let npos = tp.iter().filter(|&&t| t).count() + r.random_range(0..4);
        if npos == 0 {
            continue;
        }
        assert!((voc07_ap(&tp, npos) - ap11_oracle(&tp, npos)).abs() < 1e-15);
    }
}

use super::*;
use ndarray::Array2;
use rand::Rng as _;

use crate::seeded_rng;

fn small_config(input_dim: usize, output_dim: usize) -> BackboneConfig {
    BackboneConfig {
        input_dim,
        output_dim,
        width: 12,
        time_dim: 4,
        layers: 2,
        heads: 3,
        ffn_dim: 10,
    }
}

fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
}

fn random_params(cfg: BackboneConfig, seed: u64) -> NetworkParams<f64> {
    let mut p = NetworkParams::<f64>::init(cfg, seed).unwrap();
    p.randomize_output(seed + 1);
    // non-trivial LayerNorm affine parameters
    let mut rng = seeded_rng(seed + 2);
    for b in &mut p.blocks {
        b.ln1_gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        b.ln2_beta.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        b.qkv_b.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    p
}

#[test]
fn zero_output_projection_gives_zero_field() {
    let p = NetworkParams::<f64>::init(small_config(5, 3), 7).unwrap();
    let out = forward(&p, &random_input(9, 5, 1), 0.3).unwrap();
    assert_eq!(out.dim(), (9, 3));
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn time_changes_output() {
    let p = random_params(small_config(5, 3), 11);
    let x = random_input(6, 5, 2);
    let a = forward(&p, &x, 0.0).unwrap();
    let b = forward(&p, &x, 1.0).unwrap();
    assert!((&a - &b).iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let p = random_params(small_config(4, 2), 3);
    for rows in [1, 2, 17] {
        let x = random_input(rows, 4, rows as u64);
        let a = forward(&p, &x, 0.42).unwrap();
        let b = forward(&p, &x, 0.42).unwrap();
        assert_eq!(a.nrows(), rows);
        assert_eq!(a, b);
    }
}

#[test]
fn rejects_bad_shapes_and_times() {
    let p = random_params(small_config(4, 2), 3);
    assert!(matches!(
        forward(&p, &random_input(5, 3, 0), 0.5),
        Err(Error::Shape { .. })
    ));
    assert!(forward(&p, &random_input(5, 4, 0), 1.2).is_err());
    let tape = p
        .forward_taped(&random_input(5, 4, 0), &Layout::single(5, 0.1))
        .unwrap()
        .1;
    assert!(p.backward_tape(tape, &Array2::zeros((5, 3))).is_err());
}

#[test]
fn segments_do_not_interact() {
    let p = random_params(small_config(4, 3), 5);
    let a = random_input(7, 4, 1);
    let b = random_input(3, 4, 2);
    let stacked = ndarray::concatenate![ndarray::Axis(0), a, b];
    let layout = Layout::new(&[7, 3], &[0.2, 0.9]).unwrap();
    let both = p.forward_layout(&stacked, &layout).unwrap();
    let fa = forward(&p, &a, 0.2).unwrap();
    let fb = forward(&p, &b, 0.9).unwrap();
    let err_a = (&both.slice(s![..7, ..]) - &fa).mapv(f64::abs).sum();
    let err_b = (&both.slice(s![7.., ..]) - &fb).mapv(f64::abs).sum();
    assert!(err_a < 1e-12 && err_b < 1e-12);
}

/// Loop-level re-implementation of the forward pass, written independently
/// of the ndarray code path.
fn naive_forward(p: &NetworkParams<f64>, x: &Array2<f64>, t: f64) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let (rows, w, pd, td) = (x.nrows(), cfg.width, cfg.proj_dim(), cfg.time_dim);
    let matvec = |v: &[f64], m: &Array2<f64>, b: &ndarray::Array1<f64>| -> Vec<f64> {
        (0..m.ncols())
            .map(|j| b[j] + (0..m.nrows()).map(|i| v[i] * m[[i, j]]).sum::<f64>())
            .collect()
    };
    let ln = |v: &[f64], g: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>| -> Vec<f64> {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(i, a)| (a - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    };
    let gelu = |z: f64| {
        0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())
    };

    let half_t = td / 2;
    let mut sin = vec![0.0; td];
    for j in 0..half_t {
        let f = if half_t == 1 {
            1.0
        } else {
            1000f64.powf(j as f64 / (half_t - 1) as f64)
        };
        sin[j] = (f * t).sin();
        sin[half_t + j] = (f * t).cos();
    }
    let temb = matvec(&sin, &p.time_w, &p.time_b);
    let half_p = pd / 2;
    let mut h: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let xi: Vec<f64> = x.row(i).to_vec();
            let mut v = matvec(&xi, &p.in_w, &p.in_b);
            for j in 0..half_p {
                let f = 10000f64.powf(-(j as f64) / half_p as f64);
                v[j] += (i as f64 * f).sin();
                v[half_p + j] += (i as f64 * f).cos();
            }
            v.extend_from_slice(&temb);
            v
        })
        .collect();

    let dh = w / cfg.heads;
    for b in &p.blocks {
        let a: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &b.ln1_gamma, &b.ln1_beta)).collect();
        let qkv: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &b.qkv_w, &b.qkv_b)).collect();
        let mut o = vec![vec![0.0; w]; rows];
        for hd in 0..cfg.heads {
            for i in 0..rows {
                let scores: Vec<f64> = (0..rows)
                    .map(|j| {
                        (0..dh)
                            .map(|c| qkv[i][hd * dh + c] * qkv[j][w + hd * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    o[i][hd * dh + c] = (0..rows)
                        .map(|j| e[j] / z * qkv[j][2 * w + hd * dh + c])
                        .sum();
                }
            }
        }
        for i in 0..rows {
            let proj = matvec(&o[i], &b.attn_out_w, &b.attn_out_b);
            for c in 0..w {
                h[i][c] += proj[c];
            }
            let cn = ln(&h[i], &b.ln2_gamma, &b.ln2_beta);
            let g: Vec<f64> = matvec(&cn, &b.ff1_w, &b.ff1_b)
                .into_iter()
                .map(gelu)
                .collect();
            let f = matvec(&g, &b.ff2_w, &b.ff2_b);
            for c in 0..w {
                h[i][c] += f[c];
            }
        }
    }
    h.iter()
        .map(|r| matvec(&ln(r, &p.lnf_gamma, &p.lnf_beta), &p.out_w, &p.out_b))
        .collect()
}

#[test]
fn forward_matches_naive_oracle() {
    for seed in 0..4 {
        let p = random_params(small_config(5, 3), 100 + seed);
        let x = random_input(6 + seed as usize, 5, seed);
        let t = 0.15 + 0.2 * seed as f64;
        let fast = forward(&p, &x, t).unwrap();
        let slow = naive_forward(&p, &x, t);
        for (i, row) in slow.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((fast[[i, j]] - v).abs() < 1e-10, "seed {seed} at ({i},{j})");
            }
        }
    }
}

#[test]
fn zero_output_grad_gives_zero_gradients() {
    let p = random_params(small_config(4, 2), 9);
    let x = random_input(5, 4, 9);
    let g = backward(&p, &x, 0.6, &Array2::zeros((5, 2))).unwrap();
    assert_eq!(g.sq_norm(), 0.0);
}

#[test]
fn gradients_are_linear_in_output_grad() {
    let p = random_params(small_config(4, 2), 13);
    let x = random_input(5, 4, 13);
    let og = random_input(5, 2, 14);
    let g1 = backward(&p, &x, 0.6, &og).unwrap();
    let g2 = backward(&p, &x, 0.6, &(&og * 2.0)).unwrap();
    for ((_, a), (_, b)) in g1.tensors().iter().zip(g2.tensors().iter()) {
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}

/// Central finite differences of `L = sum(out * weights)` against backprop.
pub(crate) fn check_gradients(cfg: BackboneConfig, rows: &[usize], seed: u64) -> f64 {
    let p = random_params(cfg.clone(), seed);
    let total: usize = rows.iter().sum();
    let times: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, _)| 0.1 + 0.37 * i as f64 % 0.9)
        .collect();
    let layout = Layout::new(rows, &times).unwrap();
    let x = random_input(total, cfg.input_dim, seed + 7);
    let weights = random_input(total, cfg.output_dim, seed + 8);
    let loss = |q: &NetworkParams<f64>, xin: &Array2<f64>| -> f64 {
        (q.forward_layout(xin, &layout).unwrap() * &weights).sum()
    };
    let (_, tape) = p.forward_taped(&x, &layout).unwrap();
    let (grads, dinput) = p.backward_tape(tape, &weights).unwrap();

    let eps = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
    let mut worst = 0.0f64;
    let n_tensors = p.tensors().len();
    for ti in 0..n_tensors {
        let len = p.tensors()[ti].1.len();
        for idx in 0..len {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.tensors_mut()[ti].as_slice_mut().unwrap()[idx] += eps;
            minus.tensors_mut()[ti].as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * eps);
            let an = grads.tensors()[ti].1.as_slice().unwrap()[idx];
            worst = worst.max(rel(an, fd));
        }
    }
    for idx in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        xm.as_slice_mut().unwrap()[idx] -= eps;
        let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
        worst = worst.max(rel(dinput.as_slice().unwrap()[idx], fd));
    }
    worst
}

#[test]
fn backprop_matches_finite_differences() {
    let worst = check_gradients(small_config(5, 3), &[4, 1, 3], 21);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

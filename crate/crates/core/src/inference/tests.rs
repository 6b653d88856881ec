use super::*;
use crate::model::{Architecture, ModelDims};
use crate::numeric::Mlp;

fn arch() -> Architecture {
    Architecture {
        prior_hidden: 3,
        trunk_hidden: 4,
        head_hidden: 4,
        decoder_hidden: 8,
        slope: 0.5,
    }
}

fn model(classes: usize, seed: u64) -> LacimModel {
    let dims = ModelDims {
        q_x: 4,
        q_s: 2,
        q_z: 1,
        target: TargetKind::Classification { classes },
        m: 2,
    };
    LacimModel::new(dims, arch(), seed).unwrap()
}

/// A decoder that is linear with identity-like mean `x ≈ [s, z, 0]` and unit
/// variance, so the objective is a concave quadratic with a known maximizer.
fn linear_decoder(m: &mut LacimModel) {
    use crate::numeric::Layer;
    let q = m.dims.q_sz();
    let qx = m.dims.q_x;
    let w = Matrix::from_fn(q, 2 * qx, |i, j| if i == j { 1.0 } else { 0.0 });
    m.dec_x = Mlp::from_layers(
        vec![Layer {
            weight: w,
            bias: Matrix::zeros(1, 2 * qx),
        }],
        0.5,
        false,
    )
    .unwrap();
}

#[test]
fn zero_steps_single_start_returns_the_draw() {
    let m = model(2, 1);
    let cfg = InferConfig {
        k_starts: 1,
        iterations: 0,
        ..InferConfig::default()
    };
    let x = [0.3, -0.2, 1.0, 0.5];
    let mut rng = RngStream::new(7, 7);
    let r = infer_latents(&m, &x, &cfg, &mut rng).unwrap();
    let draw = RngStream::new(7, 7).normal_matrix(1, 3);
    assert_eq!(r.s, draw.row(0)[..2].to_vec());
    assert_eq!(r.z, draw.row(0)[2..].to_vec());
    assert_eq!(r.trace.len(), 1);
}

#[test]
fn best_start_is_kept() {
    let m = model(2, 2);
    let x = [0.3, -0.2, 1.0, 0.5];
    let cfg = InferConfig {
        k_starts: 6,
        iterations: 0,
        ..InferConfig::default()
    };
    let r = infer_latents(&m, &x, &cfg, &mut RngStream::new(3, 0)).unwrap();
    let cands = RngStream::new(3, 0).normal_matrix(6, 3);
    let xs = Matrix::from_fn(6, 4, |_, j| x[j]);
    let vals = objective(&m, &xs, &cands, &cfg).unwrap();
    let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.objective, best);
}

#[test]
fn objective_never_decreases_from_start() {
    let m = model(2, 4);
    let x = [1.0, 0.0, -0.5, 2.0];
    let r = infer_latents(&m, &x, &InferConfig::default(), &mut RngStream::new(1, 0)).unwrap();
    assert_eq!(r.trace.len(), 51);
    assert!(r.objective >= r.trace[0]);
    assert_eq!(r.objective, r.trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn recovers_the_quadratic_maximizer() {
    let mut m = model(2, 5);
    linear_decoder(&mut m);
    // With x ≈ [s, z, ·] and σ = 1, the penalized maximizer is x_j / (1 + 2λ).
    let lambda = 0.05;
    let cfg = InferConfig {
        iterations: 3000,
        lr: 0.01,
        weight_decay: 0.0,
        lambda_s: lambda,
        lambda_z: lambda,
        ..InferConfig::default()
    };
    let x = [0.8, -1.2, 0.4, 3.0];
    let r = infer_latents(&m, &x, &cfg, &mut RngStream::new(2, 0)).unwrap();
    let got = [r.s[0], r.s[1], r.z[0]];
    for j in 0..3 {
        let want = x[j] / (1.0 + 2.0 * lambda);
        assert!((got[j] - want).abs() < 1e-3, "component {j}: {} vs {want}", got[j]);
    }
}

#[test]
fn batch_rows_match_single_runs() {
    let m = model(3, 6);
    let mut rng = RngStream::new(11, 0);
    let xs = rng.normal_matrix(5, 4);
    let cfg = InferConfig {
        iterations: 10,
        ..InferConfig::default()
    };
    let batch = predict_batch(&m, &xs, &cfg).unwrap();
    for i in 0..5 {
        let one = predict_batch(&m, &Matrix::row_vector(xs.row(i)), &cfg).unwrap();
        assert_eq!(one.latents[0], batch.latents[i]);
        let single = infer_latents(&m, xs.row(i), &cfg, &mut sample_stream(xs.row(i), cfg.seed)).unwrap();
        assert_eq!(single, batch.latents[i]);
    }
}

#[test]
fn batch_is_permutation_invariant() {
    let m = model(3, 7);
    let xs = RngStream::new(12, 0).normal_matrix(6, 4);
    let perm = [3, 0, 5, 1, 4, 2];
    let shuffled = xs.select_rows(&perm);
    let cfg = InferConfig {
        iterations: 8,
        ..InferConfig::default()
    };
    let a = predict_batch(&m, &xs, &cfg).unwrap();
    let b = predict_batch(&m, &shuffled, &cfg).unwrap();
    let (Targets::Labels(pa), Targets::Labels(pb)) = (&a.predictions, &b.predictions) else {
        panic!("labels expected")
    };
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(pb[k], pa[i]);
        assert_eq!(b.latents[k], a.latents[i]);
    }
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
    assert_eq!(argmax(&[-1.0, -3.0, 5.0]), 2);
}

#[test]
fn config_is_validated() {
    let m = model(2, 8);
    let x = [0.0; 4];
    let bad_k = InferConfig {
        k_starts: 0,
        ..InferConfig::default()
    };
    assert!(infer_latents(&m, &x, &bad_k, &mut RngStream::new(0, 0)).is_err());
    let bad_sign = InferConfig {
        penalty_sign: 0.5,
        ..InferConfig::default()
    };
    assert!(infer_latents(&m, &x, &bad_sign, &mut RngStream::new(0, 0)).is_err());
    assert!(infer_latents(&m, &[0.0; 3], &InferConfig::default(), &mut RngStream::new(0, 0)).is_err());
    assert!(predict(&m, &Matrix::zeros(1, 3)).is_err());
}

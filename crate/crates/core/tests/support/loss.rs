use mrine_core::diffcore::{Graph, Matrix};
use mrine_core::model::*;
use mrine_core::objective::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_S: usize = 3;
const N_Y: usize = 2;

/// Random counts and Gaussian values with gaps in both masks.
pub fn batch(len: usize, trials: usize, seed: u64) -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Vec::new();
    let mut y = Vec::new();
    for _ in 0..trials {
        let vs = Matrix::from_vec(len, N_S, (0..len * N_S).map(|_| rng.gen_range(0..3) as f64).collect());
        let vy = Matrix::from_vec(len, N_Y, (0..len * N_Y).map(|_| rng.gen_range(-1.5..1.5)).collect());
        let ms = (0..len).map(|_| rng.gen_bool(0.85)).collect();
        let my = (0..len).map(|t| t % 3 == 0).collect();
        s.push(MaskedSequence::new(vs, ms).unwrap());
        y.push(MaskedSequence::new(vy, my).unwrap());
    }
    let s: Vec<&MaskedSequence> = s.iter().collect();
    let y: Vec<&MaskedSequence> = y.iter().collect();
    LossBatch::new(ModelInput { s: Some(SeqBatch::from_sequences(&s).unwrap()), y: Some(SeqBatch::from_sequences(&y).unwrap()) })
}

/// Every term switched on.
pub fn full_config() -> LossConfig {
    LossConfig {
        horizons: vec![1, 2, 3],
        tau: 1.3,
        gamma_s: 5.0,
        gamma_y: 2.0,
        gamma_x: 3.0,
        gamma_r: 1e-2,
        ..LossConfig::default()
    }
}

/// Relative error (vector norm over all parameters) between the backward
/// pass of the total loss and central differences; T = 10, n_a = n_x = 4.
pub fn loss_gradient_error() -> f64 {
    let cfg = full_config();
    let b = batch(10, 2, 1);
    let mut cfg_m = ModelConfig::multiscale(N_S, N_Y, 4, 4, MlpShape::new(1, 6));
    cfg_m.learn_initial_state = true;
    let mut model = MrineModel::init(&cfg_m, 2).unwrap();

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let (loss, _) = loss_total_graph(&mut g, &bound, &b, &cfg, None).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = bound
        .leaves
        .iter()
        .flat_map(|&t| g.grad(t).map_or_else(|| vec![0.0; g.shape(t).numel()], <[f64]>::to_vec))
        .collect();

    let h = 1e-5;
    let mut numeric = Vec::new();
    let n_params = model.params_mut().len();
    for p in 0..n_params {
        let len = model.params_mut()[p].data.len();
        for i in 0..len {
            let orig = model.params_mut()[p].data[i];
            model.params_mut()[p].data[i] = orig + h;
            let up = loss_total(&model, &b, &cfg).unwrap().total;
            model.params_mut()[p].data[i] = orig - h;
            let down = loss_total(&model, &b, &cfg).unwrap().total;
            model.params_mut()[p].data[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm
}

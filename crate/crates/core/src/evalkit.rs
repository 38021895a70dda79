//! Evaluation: linear readouts, correlation and R², spike AUC, timescale
//! alignment, missing-sample sweeps and the one-sided Wilcoxon test.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::diffcore::kernels::Lu;
use crate::diffcore::Matrix;
use crate::model::{infer, InferenceMode, InferenceResult, ModelError, MrineModel};
use crate::trainer::{drop_mask, TrainError, TrialSet};

/// Ridge strength used when the plain normal equations are singular.
pub const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("need at least {need} nonzero differences, got {got}")]
    TooFewDifferences { need: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, EvalError>;

/// `y ≈ x·W + b`, fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReadout {
    pub weights: Matrix,
    pub intercept: Vec<f64>,
    /// True when every input column was constant and only the intercept
    /// carries information.
    pub degenerate: bool,
}

impl LinearReadout {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weights);
        for i in 0..y.rows {
            for (j, b) in self.intercept.iter().enumerate() {
                y.data[i * y.cols + j] += b;
            }
        }
        y
    }
}

/// Rows of all `parts`, in order.
pub fn stack(parts: &[Matrix]) -> Matrix {
    let cols = parts.first().map_or(0, |m| m.cols);
    let rows = parts.iter().map(|m| m.rows).sum();
    Matrix::from_vec(rows, cols, parts.iter().flat_map(|m| m.data.iter().copied()).collect())
}

fn column_means(x: &Matrix) -> Vec<f64> {
    let mut m = vec![0.0; x.cols];
    for i in 0..x.rows {
        m.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|v| *v /= x.rows.max(1) as f64);
    m
}

/// Ordinary least squares with intercept; falls back to ridge `RIDGE` when
/// the centered Gram matrix is singular.
pub fn fit_readout(x: &Matrix, y: &Matrix) -> Result<LinearReadout> {
    if x.rows != y.rows {
        return Err(EvalError::RowMismatch(x.rows, y.rows));
    }
    if x.rows == 0 {
        return Err(EvalError::Empty);
    }
    let (d, k) = (x.cols, y.cols);
    let (mx, my) = (column_means(x), column_means(y));
    let mut xc = x.clone();
    let mut yc = y.clone();
    for i in 0..x.rows {
        xc.data[i * d..(i + 1) * d].iter_mut().zip(&mx).for_each(|(v, m)| *v -= m);
        yc.data[i * k..(i + 1) * k].iter_mut().zip(&my).for_each(|(v, m)| *v -= m);
    }
    let xt = xc.transpose();
    let gram = xt.matmul(&xc);
    let rhs = xt.matmul(&yc);
    let degenerate = gram.data.iter().all(|&v| v == 0.0);
    let solve = |ridge: f64| {
        let mut a = gram.data.clone();
        (0..d).for_each(|i| a[i * d + i] += ridge);
        Lu::factor(&a, d).map(|lu| lu.solve(&rhs.data, k))
    };
    let w = solve(0.0).or_else(|| solve(RIDGE)).ok_or_else(|| EvalError::Invalid("readout system is singular".into()))?;
    let weights = Matrix::from_vec(d, k, w);
    let intercept = (0..k).map(|j| my[j] - (0..d).map(|i| mx[i] * weights.get(i, j)).sum::<f64>()).collect();
    Ok(LinearReadout { weights, intercept, degenerate })
}

/// Pearson correlation. A constant input has no linear relation to
/// anything and yields 0.
pub fn pearson_cc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Coefficient of determination of `pred` for `target`.
pub fn r_squared(target: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(target.len(), pred.len());
    let m = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|v| (v - m) * (v - m)).sum();
    let ss_res: f64 = target.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

fn column(m: &Matrix, j: usize) -> Vec<f64> {
    (0..m.rows).map(|i| m.get(i, j)).collect()
}

/// Per-dimension CC over concatenated rows, averaged over dimensions.
pub fn mean_cc(target: &Matrix, pred: &Matrix) -> f64 {
    (0..target.cols).map(|j| pearson_cc(&column(target, j), &column(pred, j))).sum::<f64>() / target.cols as f64
}

/// Per-dimension R² over concatenated rows, averaged over dimensions.
pub fn mean_r2(target: &Matrix, pred: &Matrix) -> f64 {
    (0..target.cols).map(|j| r_squared(&column(target, j), &column(pred, j))).sum::<f64>() / target.cols as f64
}

/// Fits a readout from inferred to true latents on the training trials and
/// scores the test trials: CC per trial and dimension, averaged over trials,
/// then over dimensions.
pub fn latent_recon_score(
    train_inferred: &[Matrix],
    train_true: &[Matrix],
    test_inferred: &[Matrix],
    test_true: &[Matrix],
) -> Result<f64> {
    if test_inferred.len() != test_true.len() || test_true.is_empty() {
        return Err(EvalError::RowMismatch(test_inferred.len(), test_true.len()));
    }
    let readout = fit_readout(&stack(train_inferred), &stack(train_true))?;
    let dims = test_true[0].cols;
    let mut per_dim = vec![0.0; dims];
    for (inf, tru) in test_inferred.iter().zip(test_true) {
        let pred = readout.apply(inf);
        for (j, acc) in per_dim.iter_mut().enumerate() {
            *acc += pearson_cc(&column(tru, j), &column(&pred, j));
        }
    }
    Ok(per_dim.iter().map(|v| v / test_true.len() as f64).sum::<f64>() / dims as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeScore {
    pub cc: f64,
    pub r2: f64,
    pub per_dim_cc: Vec<f64>,
}

/// Fits on training trials, scores concatenated test rows.
pub fn decode_score(
    train_inferred: &[Matrix],
    train_target: &[Matrix],
    test_inferred: &[Matrix],
    test_target: &[Matrix],
) -> Result<DecodeScore> {
    let readout = fit_readout(&stack(train_inferred), &stack(train_target))?;
    let pred = readout.apply(&stack(test_inferred));
    let tgt = stack(test_target);
    if pred.rows != tgt.rows {
        return Err(EvalError::RowMismatch(pred.rows, tgt.rows));
    }
    let per_dim_cc = (0..tgt.cols).map(|j| pearson_cc(&column(&tgt, j), &column(&pred, j))).collect();
    Ok(DecodeScore { cc: mean_cc(&tgt, &pred), r2: mean_r2(&tgt, &pred), per_dim_cc })
}

/// Midranks (1-based) of `v`.
fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// ROC AUC of `scores` for binary `labels`, via midranks. `None` when one
/// class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let r = midranks(scores);
    let rank_sum: f64 = r.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Spike/no-spike AUC per channel (columns) over all trials and steps,
/// averaged over channels that contain both classes.
pub fn spike_recon_auc(rates: &[Matrix], spikes: &[Matrix]) -> Result<f64> {
    if rates.len() != spikes.len() || rates.is_empty() {
        return Err(EvalError::RowMismatch(rates.len(), spikes.len()));
    }
    let (r, s) = (stack(rates), stack(spikes));
    if r.rows != s.rows || r.cols != s.cols {
        return Err(EvalError::RowMismatch(r.rows, s.rows));
    }
    let scores: Vec<f64> = (0..r.cols)
        .filter_map(|j| {
            let labels: Vec<bool> = column(&s, j).iter().map(|&v| v > 0.0).collect();
            auc(&column(&r, j), &labels)
        })
        .collect();
    if scores.is_empty() {
        return Err(EvalError::Invalid("no channel has both spike and no-spike bins".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Align {
    None,
    Downsample(usize),
    AvgPool(usize),
}

impl std::str::FromStr for Align {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || EvalError::Invalid(format!("alignment {s:?}"));
        if s == "none" {
            return Ok(Align::None);
        }
        let (kind, r) = s.split_once(':').ok_or_else(bad)?;
        let r: usize = r.parse().map_err(|_| bad())?;
        if r == 0 {
            return Err(bad());
        }
        match kind {
            "downsample" => Ok(Align::Downsample(r)),
            "avg_pool" => Ok(Align::AvgPool(r)),
            _ => Err(bad()),
        }
    }
}

/// Brings base-step rows to a coarser step: keep every `r`-th row, or
/// average consecutive blocks of `r` rows (a trailing partial block is
/// averaged over the rows it has).
pub fn align_timescales(x: &Matrix, align: Align) -> Matrix {
    match align {
        Align::None | Align::Downsample(1) | Align::AvgPool(1) => x.clone(),
        Align::Downsample(r) => {
            let rows: Vec<usize> = (0..x.rows).step_by(r).collect();
            Matrix::from_vec(rows.len(), x.cols, rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect())
        }
        Align::AvgPool(r) => {
            let mut data = Vec::new();
            for start in (0..x.rows).step_by(r) {
                let end = (start + r).min(x.rows);
                for j in 0..x.cols {
                    data.push((start..end).map(|i| x.get(i, j)).sum::<f64>() / (end - start) as f64);
                }
            }
            Matrix::from_vec(data.len() / x.cols.max(1), x.cols, data)
        }
    }
}

fn extend(dst: &mut Option<Vec<Matrix>>, src: Option<Vec<Matrix>>) {
    if let (Some(d), Some(s)) = (dst.as_mut(), src) {
        d.extend(s);
    }
}

/// Inference over every trial in `set`, with availability entries dropped
/// at random (probabilities `drop_s`, `drop_y`) beforehand.
pub fn infer_dropped(
    model: &MrineModel,
    set: &TrialSet,
    mode: InferenceMode,
    drop_s: f64,
    drop_y: f64,
    seed: u64,
) -> Result<InferenceResult> {
    if set.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut merged: Option<InferenceResult> = None;
    for chunk in idx.chunks(64) {
        let mut input = set.input(chunk, model.topology()).map_err(Box::new)?;
        if let Some(s) = input.s.as_mut() {
            *s = s.with_mask(drop_mask(&s.mask, drop_s, &mut rng));
        }
        if let Some(y) = input.y.as_mut() {
            *y = y.with_mask(drop_mask(&y.mask, drop_y, &mut rng));
        }
        let r = infer(model, &input, mode)?;
        match merged.as_mut() {
            None => merged = Some(r),
            Some(m) => {
                extend(&mut m.a_s_filt, r.a_s_filt);
                extend(&mut m.a_y_filt, r.a_y_filt);
                m.a_fused.extend(r.a_fused);
                m.x.extend(r.x);
                extend(&mut m.x_var, r.x_var);
                m.a_out.extend(r.a_out);
                extend(&mut m.rates, r.rates);
                extend(&mut m.means, r.means);
            }
        }
    }
    Ok(merged.expect("at least one chunk"))
}

/// Latents `x` of every trial in `set`; see [`infer_dropped`].
pub fn infer_latents(
    model: &MrineModel,
    set: &TrialSet,
    mode: InferenceMode,
    drop_s: f64,
    drop_y: f64,
    seed: u64,
) -> Result<Vec<Matrix>> {
    Ok(infer_dropped(model, set, mode, drop_s, drop_y, seed)?.x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub drop_s: f64,
    pub drop_y: f64,
    pub cc: f64,
    pub r2: f64,
}

/// Scores decoding of `test_targets` while availability entries are
/// dropped at inference only. The readout is fitted once, on training
/// latents inferred without drops.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    model: &MrineModel,
    train: &TrialSet,
    train_targets: &[Matrix],
    test: &TrialSet,
    test_targets: &[Matrix],
    grid: &[(f64, f64)],
    mode: InferenceMode,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    for &(ps, py) in grid {
        if !(0.0..=1.0).contains(&ps) || !(0.0..=1.0).contains(&py) {
            return Err(EvalError::Invalid(format!("drop probabilities ({ps}, {py})")));
        }
    }
    let train_lat = infer_latents(model, train, mode, 0.0, 0.0, seed)?;
    let readout = fit_readout(&stack(&train_lat), &stack(train_targets))?;
    let tgt = stack(test_targets);
    grid.iter()
        .map(|&(ps, py)| {
            let lat = infer_latents(model, test, mode, ps, py, seed)?;
            let pred = readout.apply(&stack(&lat));
            Ok(SweepPoint { drop_s: ps, drop_y: py, cc: mean_cc(&tgt, &pred), r2: mean_r2(&tgt, &pred) })
        })
        .collect()
}

/// One-sided Wilcoxon signed-rank p-value for "differences tend to be
/// positive". Zeros are discarded. Exact for up to 12 differences, normal
/// approximation with tie correction beyond.
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<f64> {
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    if d.len() < 5 {
        return Err(EvalError::TooFewDifferences { need: 5, got: d.len() });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let n = d.len();
    if n <= 12 {
        let mut hits = 0u64;
        for pattern in 0u32..(1 << n) {
            let w: f64 = (0..n).filter(|&i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w >= w_plus - 1e-9 {
                hits += 1;
            }
        }
        return Ok(hits as f64 / (1u64 << n) as f64);
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (w_plus - mean) / var.sqrt();
    Ok(1.0 - Normal::new(0.0, 1.0).expect("unit normal").cdf(z))
}

/// Evaluation summary, serialized as JSON; sweep grids also as CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Option<String>,
    pub fold_cc: Vec<f64>,
    pub fold_r2: Vec<f64>,
    pub per_dim_cc: Vec<f64>,
    pub mean_cc: Option<f64>,
    pub mean_r2: Option<f64>,
    pub auc: Option<f64>,
    pub gaussian_cc: Option<f64>,
    pub wilcoxon_p: Option<f64>,
    pub sweep: Vec<SweepPoint>,
}

impl MetricReport {
    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("drop_s,drop_y,cc,r2\n");
        for p in &self.sweep {
            out.push_str(&format!("{},{},{:.16e},{:.16e}\n", p.drop_s, p.drop_y, p.cc, p.r2));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cc_and_r2_basics() {
        let a = [1.0, 2.0, 4.0, 3.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_cc(&a, &a) - 1.0).abs() < 1e-15);
        assert!((pearson_cc(&a, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(r_squared(&a, &a), 1.0);
        assert_eq!(pearson_cc(&a, &[2.0; 4]), 0.0);
    }

    #[test]
    fn auc_hand_cases() {
        // Two time steps by two channels.
        let rates = Matrix::from_vec(2, 2, vec![0.9, 0.8, 0.1, 0.2]);
        let spikes = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(spike_recon_auc(&[rates], &[spikes]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, false, false, true]), Some(0.75));
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2, 0.3], &[false, true, true]), Some(1.0));
    }

    #[test]
    fn alignment() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(align_timescales(&x, Align::AvgPool(4)).data, vec![2.5]);
        assert_eq!(align_timescales(&x, Align::Downsample(2)).data, vec![1.0, 3.0]);
        assert_eq!(align_timescales(&x, Align::None), x);
        assert_eq!("avg_pool:5".parse::<Align>().unwrap(), Align::AvgPool(5));
        assert!("downsample:0".parse::<Align>().is_err());
    }

    #[test]
    fn wilcoxon_cases() {
        assert_eq!(wilcoxon_one_sided(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), 0.03125);
        assert!(wilcoxon_one_sided(&[0.0; 8]).is_err());
        let p = wilcoxon_one_sided(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
        assert!((0.4..=0.65).contains(&p), "{p}");
    }

    #[test]
    fn readout_recovers_linear_map() {
        let x = Matrix::from_vec(5, 2, vec![0.0, 1.0, 1.0, 0.5, 2.0, -1.0, 3.0, 0.2, -1.0, 0.7]);
        let w = Matrix::from_vec(2, 1, vec![2.0, -3.0]);
        let mut y = x.matmul(&w);
        y.data.iter_mut().for_each(|v| *v += 0.5);
        let r = fit_readout(&x, &y).unwrap();
        assert!(r.weights.max_abs_diff(&w) < 1e-10);
        assert!((r.intercept[0] - 0.5).abs() < 1e-10);
        let c = fit_readout(&Matrix::filled(5, 2, 1.0), &y).unwrap();
        assert!(c.degenerate);
    }
}

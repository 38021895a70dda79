use mrine_core::diffcore::{Graph, Matrix, Shape};
use mrine_core::statespace::{kalman_filter, kalman_smooth, BatchMask, Ldm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense LDM description for the oracle, independent of the graph.
#[derive(Clone)]
pub struct Spec {
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub w: Vec<f64>,
    pub r: Vec<f64>,
    pub x0: Vec<f64>,
    pub s0: Vec<f64>,
}

pub fn mm(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = (0..k).map(|p| a[i * k + p] * b[p * c + j]).sum();
        }
    }
    out
}

pub fn tr(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Gauss–Jordan solve of `K X = B`, used only by the oracle.
pub fn gj_solve(k: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let w = n + c;
    let mut aug = vec![0.0; n * w];
    for i in 0..n {
        aug[i * w..i * w + n].copy_from_slice(&k[i * n..(i + 1) * n]);
        aug[i * w + n..(i + 1) * w].copy_from_slice(&b[i * c..(i + 1) * c]);
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| aug[x * w + col].abs().total_cmp(&aug[y * w + col].abs())).unwrap();
        for j in 0..w {
            aug.swap(col * w + j, piv * w + j);
        }
        let d = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = aug[row * w + col];
                for j in 0..w {
                    aug[row * w + j] -= f * aug[col * w + j];
                }
            }
        }
    }
    let mut x = vec![0.0; n * c];
    for i in 0..n {
        x[i * c..(i + 1) * c].copy_from_slice(&aug[i * w + n..(i + 1) * w]);
    }
    x
}

/// Posterior means and covariances of every `x_t` given the observations
/// at `cond` (time indices), by conditioning the joint Gaussian.
pub fn oracle_posterior(s: &Spec, obs: &[Vec<f64>], cond: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (n, m, len) = (s.n, s.m, obs.len());
    // Prior means and marginal covariances.
    let mut means = Vec::with_capacity(len);
    let mut covs = Vec::with_capacity(len);
    let (mut mu, mut v) = (s.x0.clone(), s.s0.clone());
    let at = tr(&s.a, n, n);
    for _ in 0..len {
        mu = mm(&s.a, &mu, n, n, 1);
        v = mm(&mm(&s.a, &v, n, n, n), &at, n, n, n);
        for i in 0..n * n {
            v[i] += s.w[i];
        }
        means.push(mu.clone());
        covs.push(v.clone());
    }
    // Cov(x_t, x_u) = A^{t-u} V_u for t ≥ u.
    let cross = |t: usize, u: usize| -> Vec<f64> {
        if t >= u {
            let mut out = covs[u].clone();
            for _ in u..t {
                out = mm(&s.a, &out, n, n, n);
            }
            out
        } else {
            let mut out = covs[t].clone();
            for _ in t..u {
                out = mm(&s.a, &out, n, n, n);
            }
            tr(&out, n, n)
        }
    };
    let ct = tr(&s.c, m, n);
    let q = cond.len() * m;
    let mut k = vec![0.0; q * q];
    for (bi, &ti) in cond.iter().enumerate() {
        for (bj, &tj) in cond.iter().enumerate() {
            let mut blk = mm(&mm(&s.c, &cross(ti, tj), m, n, n), &ct, m, n, m);
            if ti == tj {
                for i in 0..m * m {
                    blk[i] += s.r[i];
                }
            }
            for i in 0..m {
                for j in 0..m {
                    k[(bi * m + i) * q + bj * m + j] = blk[i * m + j];
                }
            }
        }
    }
    let mut resid = vec![0.0; q];
    for (bi, &ti) in cond.iter().enumerate() {
        let pred = mm(&s.c, &means[ti], m, n, 1);
        for i in 0..m {
            resid[bi * m + i] = obs[ti][i] - pred[i];
        }
    }
    (0..len)
        .map(|t| {
            if q == 0 {
                return (means[t].clone(), covs[t].clone());
            }
            // Cov(x_t, a_cond): n × q
            let mut cxa = vec![0.0; n * q];
            for (bj, &tj) in cond.iter().enumerate() {
                let blk = mm(&cross(t, tj), &ct, n, n, m);
                for i in 0..n {
                    for j in 0..m {
                        cxa[i * q + bj * m + j] = blk[i * m + j];
                    }
                }
            }
            let alpha = gj_solve(&k, &resid, q, 1);
            let mean: Vec<f64> = (0..n).map(|i| means[t][i] + (0..q).map(|j| cxa[i * q + j] * alpha[j]).sum::<f64>()).collect();
            let kinv_ax = gj_solve(&k, &tr(&cxa, n, q), q, n);
            let red = mm(&cxa, &kinv_ax, n, q, n);
            let cov: Vec<f64> = covs[t].iter().zip(&red).map(|(a, b)| a - b).collect();
            (mean, cov)
        })
        .collect()
}

pub fn random_spec(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Spec {
    let mut a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rho = mrine_core::statespace::spectral_radius(&Matrix::from_vec(n, n, a.clone()));
    let target = rng.gen_range(0.5..0.95);
    a.iter_mut().for_each(|v| *v *= target / rho.max(1e-9));
    let diag = |rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64| {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = rng.gen_range(lo..hi);
        }
        v
    };
    Spec {
        n,
        m,
        c: (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        w: diag(rng, n, 0.05, 0.5),
        r: diag(rng, m, 0.1, 1.0),
        x0: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        s0: diag(rng, n, 0.5, 2.0),
        a,
    }
}

pub fn bind(g: &mut Graph, s: &Spec) -> Ldm {
    let (n, m) = (s.n, s.m);
    Ldm::from_matrices(
        g,
        &Matrix::from_vec(n, n, s.a.clone()),
        &Matrix::from_vec(m, n, s.c.clone()),
        &Matrix::from_vec(n, n, s.w.clone()),
        &Matrix::from_vec(m, m, s.r.clone()),
        &Matrix::from_vec(n, 1, s.x0.clone()),
        &Matrix::from_vec(n, n, s.s0.clone()),
    )
}

pub fn random_obs(rng: &mut ChaCha8Rng, len: usize, m: usize) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

pub fn obs_tensor(g: &mut Graph, obs: &[Vec<f64>]) -> mrine_core::diffcore::Tensor {
    let m = obs[0].len();
    g.constant(Shape::new(1, obs.len(), m), obs.concat()).unwrap()
}

/// Runs 25 random stable LDMs, with and without masks, against the oracle.
pub fn oracle_sweep(with_masks: bool) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed + if with_masks { 500 } else { 0 });
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=4);
        let len = rng.gen_range(2..=8);
        let spec = random_spec(&mut rng, n, m);
        let obs = random_obs(&mut rng, len, m);
        let mask: Vec<bool> = (0..len).map(|_| !with_masks || rng.gen_bool(0.6)).collect();

        let mut g = Graph::new();
        let ldm = bind(&mut g, &spec);
        let ot = obs_tensor(&mut g, &obs);
        let bm = BatchMask::from_rows(std::slice::from_ref(&mask));
        let f = kalman_filter(&mut g, &ldm, ot, &bm).unwrap();
        let sm = kalman_smooth(&mut g, &ldm, &f).unwrap();

        let observed: Vec<usize> = (0..len).filter(|&t| mask[t]).collect();
        let smooth_post = oracle_posterior(&spec, &obs, &observed);
        for t in 0..len {
            let upto: Vec<usize> = observed.iter().copied().filter(|&u| u <= t).collect();
            let filt_post = oracle_posterior(&spec, &obs, &upto);
            for i in 0..n {
                worst = worst.max((g.value(f.x_filt[t])[i] - filt_post[t].0[i]).abs());
                worst = worst.max((g.value(sm.x_smooth[t])[i] - smooth_post[t].0[i]).abs());
            }
            for i in 0..n * n {
                worst = worst.max((g.value(f.sigma_filt[t])[i] - filt_post[t].1[i]).abs());
                worst = worst.max((g.value(sm.sigma_smooth[t])[i] - smooth_post[t].1[i]).abs());
            }
        }
    }
    worst
}


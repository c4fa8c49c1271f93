//! Soft fusion gates between blocks and hard Top-N base selection.

use super::spec::SecondPath;
use crate::nn::ops::softmax;
use crate::tensor::{Param, Tensor};
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cross_path(prev: &[Tensor], mode: SecondPath) -> Tensor {
    let mut s = Tensor::zeros(&prev[0].shape);
    for o in prev {
        s.add_assign(o);
    }
    if mode == SecondPath::Avg {
        s.scale(1.0 / prev.len() as f64);
    }
    s
}

fn check_branches(prev: &[Tensor], theta: &[f64]) -> Result<()> {
    if prev.is_empty() || prev.len() != theta.len() {
        return Err(Error::shape("soft gate branches", &[theta.len()], &[prev.len()]));
    }
    for o in &prev[1..] {
        prev[0].same_shape(o, "soft gate branch outputs")?;
    }
    Ok(())
}

/// `x_i = C_i o_i + (1 - C_i) S` with `C_i = sigmoid(theta_i)` and `S` the
/// sum (or mean) of all branch outputs `o_j`.
pub fn soft_gate_forward(prev: &[Tensor], theta: &[f64], mode: SecondPath) -> Result<Vec<Tensor>> {
    check_branches(prev, theta)?;
    let s = cross_path(prev, mode);
    Ok(prev
        .iter()
        .zip(theta)
        .map(|(o, &t)| {
            let c = sigmoid(t);
            let mut x = s.clone().scaled(1.0 - c);
            x.axpy(c, o);
            x
        })
        .collect())
}

/// Gradients of [`soft_gate_forward`]: `(d prev, d theta)`.
pub fn soft_gate_backward(
    prev: &[Tensor],
    theta: &[f64],
    mode: SecondPath,
    grads: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    check_branches(prev, theta)?;
    let s = cross_path(prev, mode);
    let w = match mode {
        SecondPath::Sum => 1.0,
        SecondPath::Avg => 1.0 / prev.len() as f64,
    };
    let mut shared = Tensor::zeros(&prev[0].shape);
    let mut dtheta = Vec::with_capacity(theta.len());
    for ((o, g), &t) in prev.iter().zip(grads).zip(theta) {
        let c = sigmoid(t);
        shared.axpy(w * (1.0 - c), g);
        let diff: f64 = g.data.iter().zip(o.data.iter().zip(&s.data)).map(|(g, (o, s))| g * (o - s)).sum();
        dtheta.push(c * (1.0 - c) * diff);
    }
    let dprev = grads
        .iter()
        .zip(theta)
        .map(|(g, &t)| {
            let mut d = shared.clone();
            d.axpy(sigmoid(t), g);
            d
        })
        .collect();
    Ok((dprev, dtheta))
}

/// Soft gate parameters for one inter-block connection.
#[derive(Clone, Debug)]
pub struct SoftGate {
    pub theta: Param,
}

impl SoftGate {
    /// `theta = 0`, i.e. both paths weighted 0.5.
    pub fn new(name: &str, bases: usize) -> Self {
        SoftGate {
            theta: Param::new(format!("{name}.theta"), Tensor::zeros(&[bases]), false),
        }
    }

    pub fn gates(&self) -> Vec<f64> {
        self.theta.data().iter().map(|&t| sigmoid(t)).collect()
    }
}

/// Input-conditioned Top-N selector over K bases.
#[derive(Clone, Debug)]
pub struct HardGate {
    /// `c_in x K` projection of pooled features to base scores.
    pub nu: Param,
    pub n_select: usize,
}

/// Forward quantities needed by [`hard_gate_backward`].
#[derive(Clone, Debug)]
pub struct HardGateCache {
    pub input_shape: Vec<usize>,
    pub pooled: Tensor,
    pub scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct HardGateOutput {
    /// `N x K` row-major 0/1 mask.
    pub mask: Vec<u8>,
    /// Selected bases of every sample, ascending.
    pub selected: Vec<Vec<usize>>,
    pub cache: HardGateCache,
}

#[derive(Clone, Debug)]
pub struct HardGateGrads {
    pub scores: Tensor,
    pub nu: Vec<f64>,
    /// Gradient with respect to the gate input.
    pub input: Tensor,
}

/// Indices of the `n` largest values, ties toward the lower index, ascending.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut sel = order[..n.min(scores.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// `p * (u - <p, u>)` with `p = softmax(s)`: the softmax Jacobian applied to `u`.
pub fn softmax_vjp(scores: &[f64], upstream: &[f64]) -> Vec<f64> {
    let p = softmax(scores);
    let inner: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
    p.iter().zip(upstream).map(|(p, u)| p * (u - inner)).collect()
}

impl HardGate {
    pub fn new(name: &str, c_in: usize, bases: usize, n_select: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if n_select == 0 || n_select > bases {
            return Err(Error::invalid(format!("n_select {n_select} must be in 1..={bases}")));
        }
        let nu = crate::nn::layers::init_uniform(rng, &[c_in, bases], c_in);
        Ok(HardGate {
            nu: Param::new(format!("{name}.nu"), nu, false),
            n_select,
        })
    }

    pub fn bases(&self) -> usize {
        self.nu.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.nu.shape()[0]
    }

    /// Per-sample channel means and their projection onto the bases.
    pub fn scores(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                format!("{} input channels", self.nu.name),
                &[self.in_channels()],
                &[c],
            ));
        }
        let pooled = crate::nn::ops::global_avg_pool(x)?;
        let k = self.bases();
        let nu = self.nu.data();
        let mut scores = Tensor::zeros(&[n, k]);
        for b in 0..n {
            for ch in 0..c {
                let v = pooled.data[b * c + ch];
                for j in 0..k {
                    scores.data[b * k + j] += v * nu[ch * k + j];
                }
            }
        }
        Ok((pooled, scores))
    }
}

/// Scores every sample and keeps its Top-N bases.
pub fn hard_gate_forward(x: &Tensor, gate: &HardGate) -> Result<HardGateOutput> {
    let k = gate.bases();
    if gate.n_select == 0 || gate.n_select > k {
        return Err(Error::invalid(format!("n_select {} must be in 1..={k}", gate.n_select)));
    }
    let (pooled, scores) = gate.scores(x)?;
    let n = x.shape[0];
    let mut mask = vec![0u8; n * k];
    let mut selected = Vec::with_capacity(n);
    for b in 0..n {
        let sel = top_n(&scores.data[b * k..][..k], gate.n_select);
        for &i in &sel {
            mask[b * k + i] = 1;
        }
        selected.push(sel);
    }
    Ok(HardGateOutput {
        mask,
        selected,
        cache: HardGateCache {
            input_shape: x.shape.clone(),
            pooled,
            scores,
        },
    })
}

/// Backward through the selector with the softmax surrogate: the upstream
/// gradient on the `N x K` mask is pushed through the softmax Jacobian of
/// the scores, so every column of `nu` receives gradient.
///
/// Accumulates into `gate.nu` and returns all intermediate gradients.
pub fn hard_gate_backward(
    gate: &mut HardGate,
    cache: Option<&HardGateCache>,
    grad_mask: &[f64],
) -> Result<HardGateGrads> {
    let cache = cache.ok_or(Error::MissingTape)?;
    let k = gate.bases();
    let c = gate.in_channels();
    let n = cache.scores.shape[0];
    if grad_mask.len() != n * k {
        return Err(Error::shape("hard gate mask gradient", &[n * k], &[grad_mask.len()]));
    }
    let mut gs = Tensor::zeros(&[n, k]);
    for b in 0..n {
        let row = softmax_vjp(&cache.scores.data[b * k..][..k], &grad_mask[b * k..][..k]);
        gs.data[b * k..][..k].copy_from_slice(&row);
    }
    let nu = gate.nu.data().to_vec();
    let mut gnu = vec![0.0; c * k];
    let mut gpooled = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for ch in 0..c {
            let v = cache.pooled.data[b * c + ch];
            let mut acc = 0.0;
            for j in 0..k {
                let g = gs.data[b * k + j];
                gnu[ch * k + j] += v * g;
                acc += nu[ch * k + j] * g;
            }
            gpooled.data[b * c + ch] = acc;
        }
    }
    gate.nu.accumulate(&gnu);
    let input = crate::nn::ops::global_avg_pool_backward(&cache.input_shape, &gpooled);
    Ok(HardGateGrads { scores: gs, nu: gnu, input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn half_gate_two_scalars() {
        let (a, b) = (3.0, -1.0);
        let x = soft_gate_forward(&[scalar(a), scalar(b)], &[0.0, 0.0], SecondPath::Sum).unwrap();
        assert_eq!(x[0].data[0], 0.5 * a + 0.5 * (a + b));
        assert_eq!(x[1].data[0], 0.5 * b + 0.5 * (a + b));
    }

    #[test]
    fn saturated_gates() {
        let prev = [scalar(2.0), scalar(5.0), scalar(-1.0)];
        let own = soft_gate_forward(&prev, &[30.0; 3], SecondPath::Sum).unwrap();
        let shared = soft_gate_forward(&prev, &[-30.0; 3], SecondPath::Sum).unwrap();
        for i in 0..3 {
            assert!((own[i].data[0] - prev[i].data[0]).abs() < 1e-6);
            assert!((shared[i].data[0] - 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rt = |rng: &mut ChaCha8Rng| Tensor::new(&[4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let prev: Vec<Tensor> = (0..3).map(|_| rt(&mut rng)).collect();
        let probes: Vec<Tensor> = (0..3).map(|_| rt(&mut rng)).collect();
        let theta = vec![0.3, -0.7, 1.1];
        for mode in [SecondPath::Sum, SecondPath::Avg] {
            let loss = |p: &[Tensor], t: &[f64]| -> f64 {
                soft_gate_forward(p, t, mode).unwrap().iter().zip(&probes).map(|(x, g)| x.dot(g)).sum()
            };
            let (dp, dt) = soft_gate_backward(&prev, &theta, mode, &probes).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let mut tp = theta.clone();
                tp[i] += h;
                let mut tm = theta.clone();
                tm[i] -= h;
                assert!(((loss(&prev, &tp) - loss(&prev, &tm)) / (2.0 * h) - dt[i]).abs() < 1e-8);
                for e in 0..4 {
                    let mut pp = prev.clone();
                    pp[i].data[e] += h;
                    let mut pm = prev.clone();
                    pm[i].data[e] -= h;
                    let num = (loss(&pp, &theta) - loss(&pm, &theta)) / (2.0 * h);
                    assert!((num - dp[i].data[e]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn top_n_ties_go_low() {
        assert_eq!(top_n(&[1.0, 3.0, 3.0, 0.0], 1), vec![1]);
        assert_eq!(top_n(&[2.0, 2.0, 2.0, 2.0], 2), vec![0, 1]);
        assert_eq!(top_n(&[0.0, 5.0, 1.0, 4.0], 2), vec![1, 3]);
    }

    #[test]
    fn two_way_softmax_jacobian() {
        // softmax Jacobian at equal scores is [[.25, -.25], [-.25, .25]]
        let g = softmax_vjp(&[0.7, 0.7], &[1.0, 0.0]);
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
        let g = softmax_vjp(&[0.7, 0.7], &[0.0, 1.0]);
        assert!((g[0] + 0.25).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn missing_cache_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = HardGate::new("g", 3, 4, 2, &mut rng).unwrap();
        assert!(matches!(hard_gate_backward(&mut g, None, &[0.0; 4]), Err(Error::MissingTape)));
        assert!(HardGate::new("g", 3, 4, 5, &mut rng).is_err());
    }
}

//! Feed-forward domain classifiers with the residual parameterization
//! `q_SAS = softmax(f_SAS(s,a,s') + f_SA(s,a))`, `q_SA = softmax(f_SA(s,a))`.
//!
//! Backpropagation and the adaptive-moment optimizer are written out by hand;
//! both networks are tiny and the whole thing runs on `f64` slices.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{clamp_delta, CorrectionError, DeltaR, DomainClassifier, MarginalClassifier, Provenance};

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

struct Cache {
    /// Input followed by each hidden layer's post-activation.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output sizes");
        let mut params = Vec::with_capacity(Self::count(sizes));
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let scale = (2.0 / n_in.max(1) as f64).sqrt();
            for _ in 0..n_in * n_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(z * scale);
            }
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, CorrectionError> {
        if sizes.len() < 2 || params.len() != Self::count(sizes) {
            return Err(CorrectionError::Config(format!(
                "layer sizes {sizes:?} need {} parameters, got {}",
                Self::count(sizes),
                params.len()
            )));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn run(&self, x: &[f64], mut cache: Option<&mut Cache>) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut off = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            if let Some(c) = cache.as_deref_mut() {
                c.acts.push(h.clone());
            }
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut out = bias.to_vec();
            for (o, out_o) in out.iter_mut().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                *out_o += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            h = out;
            off += n_in * n_out + n_out;
        }
        h
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, None)
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Cache) {
        let mut cache = Cache { acts: Vec::with_capacity(self.sizes.len()) };
        let out = self.run(x, Some(&mut cache));
        (out, cache)
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.sizes.len() - 1);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dout.to_vec();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.acts[l];
            let off = offsets[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in gw.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *p += d * w;
                }
            }
            // ReLU gate: the cached input of layer l is the post-activation of layer l-1
            for (p, x) in prev.iter_mut().zip(input) {
                if *x <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// Per-feature affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fits mean and standard deviation per column; constant columns keep unit scale.
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(dim: usize, rows: I) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for j in 0..dim {
                let d = row[j] - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (row[j] - mean[j]);
            }
        }
        let std = m2
            .iter()
            .map(|&v| {
                let sd = if n > 1 { (v / (n - 1) as f64).sqrt() } else { 0.0 };
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// One-hot features for tabular domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotEncoder {
    pub num_states: usize,
    pub num_actions: usize,
    /// When false the action block is dropped, giving action-unconditioned classifiers.
    pub include_action: bool,
}

impl OneHotEncoder {
    pub fn sa_dim(&self) -> usize {
        self.num_states + if self.include_action { self.num_actions } else { 0 }
    }

    pub fn sas_dim(&self) -> usize {
        self.sa_dim() + self.num_states
    }

    pub fn sa(&self, s: usize, a: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.sa_dim()];
        x[s] = 1.0;
        if self.include_action {
            x[self.num_states + a] = 1.0;
        }
        x
    }

    pub fn sas(&self, s: usize, a: usize, s_next: usize) -> Vec<f64> {
        let mut x = self.sa(s, a);
        x.resize(self.sas_dim(), 0.0);
        x[self.sa_dim() + s_next] = 1.0;
        x
    }

    pub fn example(&self, s: usize, a: usize, s_next: usize) -> Example {
        Example { sa: self.sa(s, a), sas: self.sas(s, a, s_next) }
    }
}

/// Features of one transition for the two classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sa: Vec<f64>,
    pub sas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    /// Std of Gaussian noise added to normalized inputs during training.
    pub noise_std: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Fit input normalization on the source buffer.
    pub standardize: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            noise_std: 1.0,
            learning_rate: 3e-4,
            batch_size: 128,
            steps: 1000,
            standardize: false,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl NetConfig {
    /// Settings for the archery classifier: one hidden layer of 32 units.
    pub fn archery() -> Self {
        Self {
            hidden: vec![32],
            noise_std: 0.0,
            learning_rate: 3e-3,
            batch_size: 1024,
            steps: 3000,
            standardize: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CorrectionError> {
        let bad = |m: String| Err(CorrectionError::Config(m));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    fn layers(&self, input: usize) -> Vec<usize> {
        let mut v = vec![input];
        v.extend(&self.hidden);
        v.push(2);
        v
    }
}

/// The two classifiers plus their input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NetClassifierPair {
    pub sa_net: Mlp,
    pub sas_net: Mlp,
    pub noise_std: f64,
    pub sa_norm: Standardizer,
    pub sas_norm: Standardizer,
    pub encoder: Option<OneHotEncoder>,
    pub clamp: Option<f64>,
}

fn log_softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let l = log_softmax2(z);
    [l[0].exp(), l[1].exp()]
}

impl NetClassifierPair {
    pub fn new<R: Rng + ?Sized>(sa_dim: usize, sas_dim: usize, cfg: &NetConfig, rng: &mut R) -> Self {
        Self {
            sa_net: Mlp::new(&cfg.layers(sa_dim), rng),
            sas_net: Mlp::new(&cfg.layers(sas_dim), rng),
            noise_std: cfg.noise_std,
            sa_norm: Standardizer::identity(sa_dim),
            sas_norm: Standardizer::identity(sas_dim),
            encoder: None,
            clamp: None,
        }
    }

    pub fn with_encoder(mut self, encoder: OneHotEncoder) -> Self {
        self.encoder = Some(encoder);
        self
    }

    pub fn with_clamp(mut self, clamp: Option<f64>) -> Self {
        self.clamp = clamp;
        self
    }

    /// Raw logits `(f_SA, f_SAS + f_SA)` for already-normalized inputs.
    fn logits_normalized(&self, sa: &[f64], sas: &[f64]) -> ([f64; 2], [f64; 2]) {
        let la = self.sa_net.forward(sa);
        let ls = self.sas_net.forward(sas);
        ([la[0], la[1]], [ls[0] + la[0], ls[1] + la[1]])
    }

    /// `(log q_SA, log q_SAS)` as `[source, target]` pairs, evaluation mode.
    pub fn log_probs(&self, sa: &[f64], sas: &[f64]) -> ([f64; 2], [f64; 2]) {
        let (la, ls) = self.logits_normalized(&self.sa_norm.apply(sa), &self.sas_norm.apply(sas));
        (log_softmax2(la), log_softmax2(ls))
    }

    /// Four-term correction from raw features, clipped to the pair's clamp.
    pub fn delta_r_features(&self, sa: &[f64], sas: &[f64]) -> f64 {
        let ([sa_s, sa_t], [sas_s, sas_t]) = self.log_probs(sa, sas);
        clamp_delta(sas_t - sa_t - sas_s + sa_s, self.clamp)
    }

    /// SAS-only variant from raw features.
    pub fn sas_only_features(&self, sa: &[f64], sas: &[f64]) -> f64 {
        let (_, [sas_s, sas_t]) = self.log_probs(sa, sas);
        clamp_delta(sas_t - sas_s, self.clamp)
    }

    fn encoder(&self) -> Result<&OneHotEncoder, CorrectionError> {
        self.encoder
            .as_ref()
            .ok_or(CorrectionError::Unsupported("network has no tabular encoder"))
    }

    /// Serializes architecture, normalization and parameters as text.
    pub fn to_text(&self) -> String {
        let mut out = String::from("darc-classifier v1\n");
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let floats = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "sa_layers {}", join(self.sa_net.sizes())).unwrap();
        writeln!(out, "sas_layers {}", join(self.sas_net.sizes())).unwrap();
        writeln!(out, "noise_std {:.16e}", self.noise_std).unwrap();
        match self.clamp {
            Some(c) => writeln!(out, "clamp {c:.16e}").unwrap(),
            None => out.push_str("clamp none\n"),
        }
        match self.encoder {
            Some(e) => writeln!(out, "encoder onehot {} {} {}", e.num_states, e.num_actions, u8::from(e.include_action)).unwrap(),
            None => out.push_str("encoder none\n"),
        }
        writeln!(out, "sa_mean {}", floats(&self.sa_norm.mean)).unwrap();
        writeln!(out, "sa_std {}", floats(&self.sa_norm.std)).unwrap();
        writeln!(out, "sas_mean {}", floats(&self.sas_norm.mean)).unwrap();
        writeln!(out, "sas_std {}", floats(&self.sas_norm.std)).unwrap();
        writeln!(out, "sa_params {}", floats(self.sa_net.params())).unwrap();
        writeln!(out, "sas_params {}", floats(self.sas_net.params())).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CorrectionError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let perr = |line: usize, msg: &str| CorrectionError::Parse { line, msg: msg.to_string() };
        let mut next = |key: &str| -> Result<(usize, Vec<String>), CorrectionError> {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, "unexpected end of checkpoint"))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(key) {
                return Err(perr(ln, &format!("expected `{key}`")));
            }
            Ok((ln, parts.map(str::to_string).collect()))
        };
        let (ln, v) = next("darc-classifier")?;
        if v != ["v1"] {
            return Err(perr(ln, "unsupported version"));
        }
        let usizes = |ln: usize, v: &[String]| -> Result<Vec<usize>, CorrectionError> {
            v.iter().map(|x| x.parse().map_err(|_| perr(ln, "bad integer"))).collect()
        };
        let floats = |ln: usize, v: &[String]| -> Result<Vec<f64>, CorrectionError> {
            v.iter().map(|x| x.parse().map_err(|_| perr(ln, "bad number"))).collect()
        };
        let (ln, v) = next("sa_layers")?;
        let sa_layers = usizes(ln, &v)?;
        let (ln, v) = next("sas_layers")?;
        let sas_layers = usizes(ln, &v)?;
        let (ln, v) = next("noise_std")?;
        let noise_std = *floats(ln, &v)?.first().ok_or_else(|| perr(ln, "missing value"))?;
        let (ln, v) = next("clamp")?;
        let clamp = match v.first().map(String::as_str) {
            Some("none") => None,
            _ => Some(*floats(ln, &v)?.first().ok_or_else(|| perr(ln, "missing value"))?),
        };
        let (ln, v) = next("encoder")?;
        let encoder = match v.first().map(String::as_str) {
            Some("none") => None,
            Some("onehot") if v.len() == 4 => {
                let n = usizes(ln, &v[1..])?;
                Some(OneHotEncoder { num_states: n[0], num_actions: n[1], include_action: n[2] != 0 })
            }
            _ => return Err(perr(ln, "bad encoder line")),
        };
        let (ln, v) = next("sa_mean")?;
        let sa_mean = floats(ln, &v)?;
        let (ln, v) = next("sa_std")?;
        let sa_std = floats(ln, &v)?;
        let (ln, v) = next("sas_mean")?;
        let sas_mean = floats(ln, &v)?;
        let (ln, v) = next("sas_std")?;
        let sas_std = floats(ln, &v)?;
        let (ln, v) = next("sa_params")?;
        let sa_params = floats(ln, &v)?;
        let (ln, v) = next("sas_params")?;
        let sas_params = floats(ln, &v)?;
        Ok(Self {
            sa_net: Mlp::from_params(&sa_layers, sa_params)?,
            sas_net: Mlp::from_params(&sas_layers, sas_params)?,
            noise_std,
            sa_norm: Standardizer { mean: sa_mean, std: sa_std },
            sas_norm: Standardizer { mean: sas_mean, std: sas_std },
            encoder,
            clamp,
        })
    }
}

impl DomainClassifier for NetClassifierPair {
    fn sas_log_probs(&self, s: usize, a: usize, s_next: usize) -> Result<[f64; 2], CorrectionError> {
        let e = self.encoder()?;
        if s >= e.num_states || s_next >= e.num_states || a >= e.num_actions {
            return Err(CorrectionError::OutOfRange { s, a, s_next });
        }
        Ok(self.log_probs(&e.sa(s, a), &e.sas(s, a, s_next)).1)
    }

    fn sa_log_probs(&self, s: usize, a: usize) -> Result<[f64; 2], CorrectionError> {
        let e = self.encoder()?;
        if s >= e.num_states || a >= e.num_actions {
            return Err(CorrectionError::OutOfRange { s, a, s_next: 0 });
        }
        Ok(self.log_probs(&e.sa(s, a), &e.sas(s, a, 0)).0)
    }
}

impl MarginalClassifier for NetClassifierPair {
    /// Only defined for networks trained without the action features.
    fn ss_log_probs(&self, s: usize, s_next: usize) -> Result<[f64; 2], CorrectionError> {
        if self.encoder()?.include_action {
            return Err(CorrectionError::Unsupported("action-conditioned network has no (s, s') classifier"));
        }
        self.sas_log_probs(s, 0, s_next)
    }

    fn s_log_probs(&self, s: usize) -> Result<[f64; 2], CorrectionError> {
        if self.encoder()?.include_action {
            return Err(CorrectionError::Unsupported("action-conditioned network has no (s) classifier"));
        }
        self.sa_log_probs(s, 0)
    }
}

impl DeltaR for NetClassifierPair {
    fn delta_r(&self, s: usize, a: usize, s_next: usize) -> f64 {
        super::classifier_delta_r(self, s, a, s_next, self.clamp).unwrap_or(0.0)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Learned
    }

    fn clamp_bound(&self) -> Option<f64> {
        self.clamp
    }
}

/// Adaptive-moment optimizer state for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m_sa: Vec<f64>,
    pub v_sa: Vec<f64>,
    pub m_sas: Vec<f64>,
    pub v_sas: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(pair: &NetClassifierPair, cfg: &NetConfig) -> Self {
        let n_sa = pair.sa_net.params().len();
        let n_sas = pair.sas_net.params().len();
        Self {
            m_sa: vec![0.0; n_sa],
            v_sa: vec![0.0; n_sa],
            m_sas: vec![0.0; n_sas],
            v_sas: vec![0.0; n_sas],
            step: 0,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    fn apply(&mut self, pair: &mut NetClassifierPair, grad_sa: &[f64], grad_sas: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        update(pair.sa_net.params_mut(), &mut self.m_sa, &mut self.v_sa, grad_sa);
        update(pair.sas_net.params_mut(), &mut self.m_sas, &mut self.v_sas, grad_sas);
    }
}

/// Labelled, normalized (and possibly noised) inputs of one batch.
struct Batch {
    sa: Vec<Vec<f64>>,
    sas: Vec<Vec<f64>>,
    target: Vec<bool>,
}

fn prepare<R: Rng + ?Sized>(
    pair: &NetClassifierPair,
    source: &[&Example],
    target: &[&Example],
    noise: Option<(f64, &mut R)>,
) -> Batch {
    let mut b = Batch { sa: Vec::new(), sas: Vec::new(), target: Vec::new() };
    for (ex, is_target) in source.iter().map(|e| (e, false)).chain(target.iter().map(|e| (e, true))) {
        b.sa.push(pair.sa_norm.apply(&ex.sa));
        b.sas.push(pair.sas_norm.apply(&ex.sas));
        b.target.push(is_target);
    }
    if let Some((std, rng)) = noise {
        if std > 0.0 {
            for x in b.sa.iter_mut().chain(b.sas.iter_mut()) {
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += std * z;
                }
            }
        }
    }
    b
}

/// Per-half weights so each loss is `E_target[·] + E_source[·]`.
fn half_weights(batch: &Batch) -> (f64, f64) {
    let n_t = batch.target.iter().filter(|&&t| t).count().max(1) as f64;
    let n_s = batch.target.iter().filter(|&&t| !t).count().max(1) as f64;
    (1.0 / n_s, 1.0 / n_t)
}

/// `(ℓ_SAS, ℓ_SA)` on a prepared batch.
fn batch_loss(pair: &NetClassifierPair, batch: &Batch) -> (f64, f64) {
    let (w_s, w_t) = half_weights(batch);
    let (mut l_sas, mut l_sa) = (0.0, 0.0);
    for i in 0..batch.target.len() {
        let (la, ls) = pair.logits_normalized(&batch.sa[i], &batch.sas[i]);
        let k = usize::from(batch.target[i]);
        let w = if batch.target[i] { w_t } else { w_s };
        l_sa -= w * log_softmax2(la)[k];
        l_sas -= w * log_softmax2(ls)[k];
    }
    (l_sas, l_sa)
}

/// Loss and gradients of `ℓ_SAS + ℓ_SA`. The SAS loss reaches `f_SA`
/// through the residual sum.
fn batch_loss_grad(pair: &NetClassifierPair, batch: &Batch) -> ((f64, f64), Vec<f64>, Vec<f64>) {
    let (w_s, w_t) = half_weights(batch);
    let mut g_sa = vec![0.0; pair.sa_net.params().len()];
    let mut g_sas = vec![0.0; pair.sas_net.params().len()];
    let (mut l_sas, mut l_sa) = (0.0, 0.0);
    for i in 0..batch.target.len() {
        let (out_a, cache_a) = pair.sa_net.forward_cached(&batch.sa[i]);
        let (out_s, cache_s) = pair.sas_net.forward_cached(&batch.sas[i]);
        let la = [out_a[0], out_a[1]];
        let ls = [out_s[0] + la[0], out_s[1] + la[1]];
        let k = usize::from(batch.target[i]);
        let w = if batch.target[i] { w_t } else { w_s };
        l_sa -= w * log_softmax2(la)[k];
        l_sas -= w * log_softmax2(ls)[k];
        let mut d_la = softmax2(la);
        d_la[k] -= 1.0;
        let mut d_ls = softmax2(ls);
        d_ls[k] -= 1.0;
        let d_sas = [w * d_ls[0], w * d_ls[1]];
        let d_sa = [w * (d_la[0] + d_ls[0]), w * (d_la[1] + d_ls[1])];
        pair.sas_net.backward(&cache_s, &d_sas, &mut g_sas);
        pair.sa_net.backward(&cache_a, &d_sa, &mut g_sa);
    }
    ((l_sas, l_sa), g_sa, g_sas)
}

/// Network pair plus optimizer, advanced one batch at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct NetTrainer {
    pub pair: NetClassifierPair,
    pub optimizer: OptimizerState,
    noise_std: f64,
}

impl NetTrainer {
    pub fn new(pair: NetClassifierPair, cfg: &NetConfig) -> Self {
        let optimizer = OptimizerState::new(&pair, cfg);
        Self { pair, optimizer, noise_std: cfg.noise_std }
    }

    /// One update on a balanced batch drawn with replacement from both buffers.
    /// Returns `(ℓ_SAS, ℓ_SA)` before the step.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        source: &[Example],
        target: &[Example],
        rng: &mut R,
    ) -> Result<(f64, f64), CorrectionError> {
        if source.is_empty() {
            return Err(CorrectionError::EmptyBuffer("source"));
        }
        if target.is_empty() {
            return Err(CorrectionError::EmptyBuffer("target"));
        }
        let half = self.optimizer.batch_size / 2;
        let src: Vec<&Example> = (0..half).map(|_| source.choose(rng).unwrap()).collect();
        let tgt: Vec<&Example> = (0..half).map(|_| target.choose(rng).unwrap()).collect();
        let batch = prepare(&self.pair, &src, &tgt, Some((self.noise_std, rng)));
        let (losses, g_sa, g_sas) = batch_loss_grad(&self.pair, &batch);
        if !(losses.0.is_finite() && losses.1.is_finite()) {
            return Err(CorrectionError::Diverged {
                step: self.optimizer.step as usize,
                loss: losses.0 + losses.1,
            });
        }
        self.optimizer.apply(&mut self.pair, &g_sa, &g_sas);
        Ok(losses)
    }

    /// Noise-free `(ℓ_SAS, ℓ_SA)` on whole buffers.
    pub fn evaluate(&self, source: &[Example], target: &[Example]) -> (f64, f64) {
        let s: Vec<&Example> = source.iter().collect();
        let t: Vec<&Example> = target.iter().collect();
        batch_loss(&self.pair, &prepare::<rand_chacha::ChaCha8Rng>(&self.pair, &s, &t, None))
    }
}

/// Trains a fresh pair for `cfg.steps` updates. Returns the pair and the
/// per-step `(ℓ_SAS, ℓ_SA)` history.
pub fn train_net_pair<R: Rng + ?Sized>(
    source: &[Example],
    target: &[Example],
    cfg: &NetConfig,
    encoder: Option<OneHotEncoder>,
    rng: &mut R,
) -> Result<(NetClassifierPair, Vec<(f64, f64)>), CorrectionError> {
    cfg.validate()?;
    let first = source.first().ok_or(CorrectionError::EmptyBuffer("source"))?;
    if target.is_empty() {
        return Err(CorrectionError::EmptyBuffer("target"));
    }
    if cfg.steps == 0 {
        return Err(CorrectionError::Config("steps must be at least 1".into()));
    }
    let mut pair = NetClassifierPair::new(first.sa.len(), first.sas.len(), cfg, rng);
    if let Some(e) = encoder {
        pair = pair.with_encoder(e);
    }
    if cfg.standardize {
        pair.sa_norm = Standardizer::fit(first.sa.len(), source.iter().map(|e| e.sa.as_slice()));
        pair.sas_norm = Standardizer::fit(first.sas.len(), source.iter().map(|e| e.sas.as_slice()));
    }
    let mut trainer = NetTrainer::new(pair, cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        history.push(trainer.train_step(source, target, rng)?);
    }
    Ok((trainer.pair, history))
}

/// Outcome of comparing backpropagated gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares `coords` randomly chosen coordinates of the analytic gradient of
/// `ℓ_SAS + ℓ_SA` (noise off) with central finite differences of step `h`.
/// Relative error is `|g - ĝ| / max(|g|, |ĝ|, 1e-6)`.
pub fn gradient_check<R: Rng + ?Sized>(
    pair: &NetClassifierPair,
    source: &[Example],
    target: &[Example],
    coords: usize,
    h: f64,
    rng: &mut R,
) -> GradientCheck {
    let s: Vec<&Example> = source.iter().collect();
    let t: Vec<&Example> = target.iter().collect();
    let batch = prepare::<R>(pair, &s, &t, None);
    let (_, g_sa, g_sas) = batch_loss_grad(pair, &batch);
    let n_sa = g_sa.len();
    let total = n_sa + g_sas.len();
    let mut probe = pair.clone();
    let mut max_rel: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.random_range(0..total);
        let (analytic, slot): (f64, &mut f64) = if i < n_sa {
            (g_sa[i], &mut probe.sa_net.params_mut()[i])
        } else {
            (g_sas[i - n_sa], &mut probe.sas_net.params_mut()[i - n_sa])
        };
        let orig = *slot;
        *slot = orig + h;
        let plus = {
            let (a, b) = batch_loss(&probe, &batch);
            a + b
        };
        let slot = if i < n_sa { &mut probe.sa_net.params_mut()[i] } else { &mut probe.sas_net.params_mut()[i - n_sa] };
        *slot = orig - h;
        let minus = {
            let (a, b) = batch_loss(&probe, &batch);
            a + b
        };
        let slot = if i < n_sa { &mut probe.sa_net.params_mut()[i] } else { &mut probe.sas_net.params_mut()[i - n_sa] };
        *slot = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    GradientCheck { checked: coords, max_rel_error: max_rel }
}

//! Two-stage feature compression.
//!
//! Stage 1 is a pretrained MLP autoencoder taking D-dimensional features to
//! an intermediate code (768 → 32 by default); it stays frozen during a
//! run. Stage 2 is a small online-learned autoencoder (32 → 15 by default)
//! trained incrementally on keyframes: one initial burst of Adam
//! iterations, then one iteration per frame with samples from two random
//! past keyframes mixed in against forgetting.
//!
//! Hidden layers use a leaky rectifier (slope 0.01); code and output
//! layers are linear. All math is f64; the codec file stores f32.

use crate::config::CodecSection;
use crate::error::{Result, SplatError};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

pub const LEAKY_SLOPE: f64 = 0.01;
const COS_EPS: f64 = 1e-8;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// One dense layer, row-major weights (rows × cols).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Linear {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Linear {
            rows,
            cols,
            w: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
            b: vec![0.0; rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Linear::zeros(n, n);
        for i in 0..n {
            l.w[i * n + i] = 1.0;
        }
        l
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out[r] = acc;
        }
    }
}

/// Stacked encoder/decoder MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCodec {
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
}

/// Geometric width schedule from `input` down to `code` over `layers`
/// weight layers.
pub fn taper_widths(input: usize, code: usize, layers: usize) -> Vec<usize> {
    assert!(layers >= 1 && code <= input);
    let mut widths = Vec::with_capacity(layers + 1);
    let (li, lc) = ((input as f64).ln(), (code as f64).ln());
    for i in 0..=layers {
        let t = i as f64 / layers as f64;
        widths.push((li * (1.0 - t) + lc * t).exp().round() as usize);
    }
    widths[0] = input;
    widths[layers] = code;
    widths
}

impl MlpCodec {
    /// Mirrored autoencoder with `enc_layers` weight layers per side.
    pub fn new(input: usize, code: usize, enc_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = taper_widths(input, code, enc_layers);
        let encoder = (0..enc_layers)
            .map(|i| Linear::xavier(widths[i + 1], widths[i], rng))
            .collect();
        let decoder = (0..enc_layers)
            .map(|i| Linear::xavier(widths[enc_layers - 1 - i], widths[enc_layers - i], rng))
            .collect();
        MlpCodec { encoder, decoder }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.first().map_or(0, |l| l.cols)
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.rows)
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.last().map_or(0, |l| l.rows)
    }

    fn run_stack(stack: &[Linear], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (li, layer) in stack.iter().enumerate() {
            let mut next = vec![0.0; layer.rows];
            layer.apply(&cur, &mut next);
            if li + 1 < stack.len() {
                for v in &mut next {
                    *v = leaky(*v);
                }
            }
            cur = next;
        }
        cur
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        Self::run_stack(&self.encoder, x)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        Self::run_stack(&self.decoder, z)
    }

    /// Per-row encode of an n×input batch, parallel over rows.
    pub fn encode_batch(&self, x: &[f64], n: usize) -> Vec<f64> {
        let d = self.input_dim();
        let k = self.code_dim();
        assert_eq!(x.len(), n * d);
        let mut out = vec![0.0; n * k];
        out.par_chunks_mut(k)
            .zip(x.par_chunks(d))
            .for_each(|(o, xi)| o.copy_from_slice(&self.encode(xi)));
        out
    }

    pub fn decode_batch(&self, z: &[f64], n: usize) -> Vec<f64> {
        let k = self.code_dim();
        let d = self.output_dim();
        assert_eq!(z.len(), n * k);
        let mut out = vec![0.0; n * d];
        out.par_chunks_mut(d)
            .zip(z.par_chunks(k))
            .for_each(|(o, zi)| o.copy_from_slice(&self.decode(zi)));
        out
    }
}

// --- reconstruction loss -----------------------------------------------------

/// How a batch is laid out, for the optional smoothness term.
#[derive(Debug, Clone, Copy)]
pub enum BatchShape {
    /// n independent vectors of width `dim`.
    Vectors { n: usize, dim: usize },
    /// H×W map with `c` channels; adds the spatial smoothness term.
    Map { h: usize, w: usize, c: usize },
}

impl BatchShape {
    fn counts(&self) -> (usize, usize) {
        match *self {
            BatchShape::Vectors { n, dim } => (n, dim),
            BatchShape::Map { h, w, c } => (h * w, c),
        }
    }
}

/// Combined reconstruction loss 0.8·L_cos + L_L1 (+ 0.01·L_TV on maps) and
/// its gradient with respect to the prediction.
///
/// The cosine term averages 1 − cos(x, x̂) per vector with an ε = 1e-8 norm
/// guard; L1 and the smoothness term average over elements.
pub fn recon_loss(target: &[f64], pred: &[f64], shape: BatchShape) -> (f64, Vec<f64>) {
    let (n, dim) = shape.counts();
    assert_eq!(target.len(), n * dim);
    assert_eq!(pred.len(), n * dim);
    let mut grad = vec![0.0; pred.len()];
    let mut cos_total = 0.0;
    let mut l1_total = 0.0;
    let w_cos = 0.8 / n as f64;
    let w_l1 = 1.0 / (n * dim) as f64;
    for i in 0..n {
        let x = &target[i * dim..(i + 1) * dim];
        let xh = &pred[i * dim..(i + 1) * dim];
        let g = &mut grad[i * dim..(i + 1) * dim];
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
        let nxh = xh.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
        let dot: f64 = x.iter().zip(xh).map(|(a, b)| a * b).sum();
        let cos = dot / (nx * nxh);
        cos_total += 1.0 - cos;
        for k in 0..dim {
            // d(1-cos)/dx̂ = -x/(|x||x̂|) + cos·x̂/|x̂|²
            g[k] += w_cos * (-x[k] / (nx * nxh) + cos * xh[k] / (nxh * nxh));
            let d = xh[k] - x[k];
            l1_total += d.abs();
            g[k] += w_l1 * sign(d);
        }
    }
    let mut loss = 0.8 * cos_total / n as f64 + l1_total / (n * dim) as f64;
    if let BatchShape::Map { h, w, c } = shape {
        let w_tv = 0.01;
        let mut tv = 0.0;
        let mut terms = 0usize;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let idx = (y * w + x) * c + ch;
                    if x + 1 < w {
                        let j = (y * w + x + 1) * c + ch;
                        tv += (pred[idx] - pred[j]).abs();
                        terms += 1;
                    }
                    if y + 1 < h {
                        let j = ((y + 1) * w + x) * c + ch;
                        tv += (pred[idx] - pred[j]).abs();
                        terms += 1;
                    }
                }
            }
        }
        if terms > 0 {
            let norm = w_tv / terms as f64;
            loss += w_tv * tv / terms as f64;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let idx = (y * w + x) * c + ch;
                        if x + 1 < w {
                            let j = (y * w + x + 1) * c + ch;
                            let s = sign(pred[idx] - pred[j]);
                            grad[idx] += norm * s;
                            grad[j] -= norm * s;
                        }
                        if y + 1 < h {
                            let j = ((y + 1) * w + x) * c + ch;
                            let s = sign(pred[idx] - pred[j]);
                            grad[idx] += norm * s;
                            grad[j] -= norm * s;
                        }
                    }
                }
            }
        }
    }
    (loss, grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean round-trip cosine similarity of a codec over an n×d batch.
pub fn eval_cosine(codec: &MlpCodec, samples: &[f64], n: usize) -> f64 {
    let d = codec.input_dim();
    let recon = codec.decode_batch(&codec.encode_batch(samples, n), n);
    let mut total = 0.0;
    for i in 0..n {
        let x = &samples[i * d..(i + 1) * d];
        let xh = &recon[i * d..(i + 1) * d];
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
        let nxh = xh.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
        let dot: f64 = x.iter().zip(xh).map(|(a, b)| a * b).sum();
        total += dot / (nx * nxh);
    }
    total / n as f64
}

// --- training ----------------------------------------------------------------

/// Adam moments plus the plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct CodecTrainer {
    m: Vec<Linear>,
    v: Vec<Linear>,
    t: u64,
    pub lr: f64,
    lr_floor: f64,
    plateau_threshold: f64,
    plateau_window: usize,
    window_losses: Vec<f64>,
    prev_window_mean: Option<f64>,
    pub iterations_run: usize,
}

impl CodecTrainer {
    pub fn new(
        codec: &MlpCodec,
        lr: f64,
        plateau_threshold: f64,
        plateau_window: usize,
        lr_floor: f64,
    ) -> Self {
        let zeros: Vec<Linear> = codec
            .encoder
            .iter()
            .chain(codec.decoder.iter())
            .map(|l| Linear::zeros(l.rows, l.cols))
            .collect();
        CodecTrainer {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            lr_floor,
            plateau_threshold,
            plateau_window,
            window_losses: Vec::new(),
            prev_window_mean: None,
            iterations_run: 0,
        }
    }

    /// One Adam iteration on a minibatch (n rows of codec.input_dim()).
    /// Returns the batch loss.
    pub fn step(&mut self, codec: &mut MlpCodec, batch: &[f64], n: usize) -> f64 {
        let d = codec.input_dim();
        assert_eq!(batch.len(), n * d);
        let n_enc = codec.encoder.len();

        let (loss, grads) = {
            let layers: Vec<&Linear> = codec.encoder.iter().chain(codec.decoder.iter()).collect();
            let n_all = layers.len();

            // batched forward, keeping each layer's input and preactivation
            let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_all);
            let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_all);
            let mut cur = batch.to_vec();
            for (gi, layer) in layers.iter().enumerate() {
                let mut pre = vec![0.0; n * layer.rows];
                pre.par_chunks_mut(layer.rows)
                    .zip(cur.par_chunks(layer.cols))
                    .for_each(|(o, x)| layer.apply(x, o));
                inputs.push(std::mem::take(&mut cur));
                let is_linear = gi + 1 == n_enc || gi + 1 == n_all;
                cur = if is_linear {
                    pre.clone()
                } else {
                    pre.iter().map(|v| leaky(*v)).collect()
                };
                preacts.push(pre);
            }

            let (loss, d_out) = recon_loss(batch, &cur, BatchShape::Vectors { n, dim: d });

            // batched backward: delta flows layer by layer; weight gradients
            // accumulate row-parallel with a fixed sample order
            let mut grads: Vec<Linear> =
                layers.iter().map(|l| Linear::zeros(l.rows, l.cols)).collect();
            let mut delta = d_out;
            for gi in (0..n_all).rev() {
                let layer = layers[gi];
                let (rows, cols) = (layer.rows, layer.cols);
                let is_linear = gi + 1 == n_enc || gi + 1 == n_all;
                if !is_linear {
                    delta
                        .par_iter_mut()
                        .zip(preacts[gi].par_iter())
                        .for_each(|(dv, pv)| *dv *= leaky_deriv(*pv));
                }
                let x = &inputs[gi];
                let g = &mut grads[gi];
                g.w.par_chunks_mut(cols).enumerate().for_each(|(r, grow)| {
                    for s in 0..n {
                        let dv = delta[s * rows + r];
                        if dv == 0.0 {
                            continue;
                        }
                        let xrow = &x[s * cols..(s + 1) * cols];
                        for (gw, xv) in grow.iter_mut().zip(xrow) {
                            *gw += dv * xv;
                        }
                    }
                });
                for r in 0..rows {
                    let mut acc = 0.0;
                    for s in 0..n {
                        acc += delta[s * rows + r];
                    }
                    g.b[r] = acc;
                }
                if gi > 0 {
                    let mut prev = vec![0.0; n * cols];
                    prev.par_chunks_mut(cols)
                        .zip(delta.par_chunks(rows))
                        .for_each(|(pv, dv)| {
                            for r in 0..rows {
                                let dvr = dv[r];
                                if dvr == 0.0 {
                                    continue;
                                }
                                let wrow = &layer.w[r * cols..(r + 1) * cols];
                                for (p, wv) in pv.iter_mut().zip(wrow) {
                                    *p += dvr * wv;
                                }
                            }
                        });
                    delta = prev;
                }
            }
            (loss, grads)
        };

        self.t += 1;
        let bc1 = 1.0 - crate::grad::ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - crate::grad::ADAM_BETA2.powi(self.t as i32);
        for (gi, layer) in codec
            .encoder
            .iter_mut()
            .chain(codec.decoder.iter_mut())
            .enumerate()
        {
            let g = &grads[gi];
            let m = &mut self.m[gi];
            let v = &mut self.v[gi];
            for (idx, wv) in layer.w.iter_mut().enumerate() {
                let gv = g.w[idx];
                m.w[idx] = crate::grad::ADAM_BETA1 * m.w[idx] + (1.0 - crate::grad::ADAM_BETA1) * gv;
                v.w[idx] = crate::grad::ADAM_BETA2 * v.w[idx] + (1.0 - crate::grad::ADAM_BETA2) * gv * gv;
                *wv -= self.lr * (m.w[idx] / bc1) / ((v.w[idx] / bc2).sqrt() + crate::grad::ADAM_EPS);
            }
            for (idx, bv) in layer.b.iter_mut().enumerate() {
                let gv = g.b[idx];
                m.b[idx] = crate::grad::ADAM_BETA1 * m.b[idx] + (1.0 - crate::grad::ADAM_BETA1) * gv;
                v.b[idx] = crate::grad::ADAM_BETA2 * v.b[idx] + (1.0 - crate::grad::ADAM_BETA2) * gv * gv;
                *bv -= self.lr * (m.b[idx] / bc1) / ((v.b[idx] / bc2).sqrt() + crate::grad::ADAM_EPS);
            }
        }
        self.iterations_run += 1;

        // reduce-on-plateau: halve when a window's mean loss stops improving
        self.window_losses.push(loss);
        if self.window_losses.len() >= self.plateau_window {
            let mean = self.window_losses.iter().sum::<f64>() / self.window_losses.len() as f64;
            if let Some(prev) = self.prev_window_mean {
                if prev - mean < self.plateau_threshold {
                    self.lr = (self.lr * 0.5).max(self.lr_floor);
                }
            }
            self.prev_window_mean = Some(mean);
            self.window_losses.clear();
        }
        loss
    }
}

/// Train a mirrored autoencoder on a corpus of feature vectors.
pub fn train_stage1_offline(
    corpus: &[f64],
    dim: usize,
    code: usize,
    enc_layers: usize,
    iters: usize,
    minibatch: usize,
    lr: f64,
    seed: u64,
) -> Result<(MlpCodec, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(SplatError::Contract("empty training corpus".into()));
    }
    let n = corpus.len() / dim;
    let mut rng = crate::rng::stream(seed, "stage1-train");
    let mut codec = MlpCodec::new(dim, code, enc_layers, &mut rng);
    // offline training wants a gentler plateau schedule than the online
    // stage: long windows and a floor that leaves room to keep learning
    let mut trainer = CodecTrainer::new(&codec, lr, 1e-5, 60, lr * 0.02);
    let bs = minibatch.min(n);
    let mut batch = vec![0.0; bs * dim];
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        for row in 0..bs {
            let pick = rng.gen_range(0..n);
            batch[row * dim..(row + 1) * dim].copy_from_slice(&corpus[pick * dim..(pick + 1) * dim]);
        }
        trace.push(trainer.step(&mut codec, &batch, bs));
    }
    Ok((codec, trace))
}

// --- two-stage codec ----------------------------------------------------------

/// Reservoir of per-keyframe stage-1 codes for replay during online training.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    /// (keyframe id, flattened codes).
    entries: Vec<(usize, Vec<f64>)>,
    code_dim: usize,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Pretrained stage plus online-learned stage.
#[derive(Debug, Clone)]
pub struct TwoStageCodec {
    pub stage1: MlpCodec,
    pub stage2: MlpCodec,
    pub replay: ReplayBuffer,
    trainer: Option<CodecTrainer>,
    cfg: CodecSection,
    rng: ChaCha8Rng,
    pub initialized: bool,
    /// Schedule audit: iterations spent in the initial phase.
    pub init_iterations: usize,
    /// Schedule audit: (frame iterations, replay keyframes used) per step.
    pub step_log: Vec<(usize, usize)>,
}

impl TwoStageCodec {
    pub fn new(stage1: MlpCodec, cfg: &CodecSection, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, "olae");
        let stage2 = MlpCodec::new(cfg.code_mid, cfg.code_final, 1, &mut rng);
        TwoStageCodec {
            stage1,
            stage2,
            replay: ReplayBuffer::default(),
            trainer: None,
            cfg: cfg.clone(),
            rng,
            initialized: false,
            init_iterations: 0,
            step_log: Vec::new(),
        }
    }

    pub fn code_dim(&self) -> usize {
        self.stage2.code_dim()
    }

    pub fn feat_dim(&self) -> usize {
        self.stage1.input_dim()
    }

    /// stage2(stage1(x)) per vector; input is n rows of D floats.
    pub fn encode2(&self, features: &[f64], n: usize) -> Result<Vec<f64>> {
        if features.len() != n * self.feat_dim() {
            return Err(SplatError::Contract(format!(
                "encode2 width mismatch: expected {} floats per vector",
                self.feat_dim()
            )));
        }
        let mid = self.stage1.encode_batch(features, n);
        Ok(self.stage2.encode_batch(&mid, n))
    }

    /// stage1-decoder(stage2-decoder(z)) per vector.
    pub fn decode2(&self, codes: &[f64], n: usize) -> Result<Vec<f64>> {
        if codes.len() != n * self.code_dim() {
            return Err(SplatError::Contract(format!(
                "decode2 width mismatch: expected {} floats per vector",
                self.code_dim()
            )));
        }
        let mid = self.stage2.decode_batch(codes, n);
        Ok(self.stage1.decode_batch(&mid, n))
    }

    /// Subsample a keyframe's feature map, push its stage-1 codes into the
    /// replay reservoir.
    pub fn buffer_keyframe(&mut self, features: &[f32], dim: usize, keyframe_id: usize) -> Result<()> {
        if dim != self.feat_dim() {
            return Err(SplatError::Contract("keyframe feature width mismatch".into()));
        }
        let n = features.len() / dim;
        let take = self.cfg.samples_per_keyframe.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = self.rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let mut raw = vec![0.0f64; take * dim];
        for (row, &src) in idx[..take].iter().enumerate() {
            for k in 0..dim {
                raw[row * dim + k] = features[src * dim + k] as f64;
            }
        }
        let codes = self.stage1.encode_batch(&raw, take);
        self.replay.code_dim = self.stage1.code_dim();
        self.replay.entries.push((keyframe_id, codes));
        Ok(())
    }

    fn pooled_codes(&self, sets: &[&[f64]]) -> Vec<f64> {
        let mut pool = Vec::new();
        for s in sets {
            pool.extend_from_slice(s);
        }
        pool
    }

    fn ensure_trainer(&mut self) {
        if self.trainer.is_none() {
            self.trainer = Some(CodecTrainer::new(
                &self.stage2,
                self.cfg.lr,
                self.cfg.plateau_threshold,
                self.cfg.plateau_window,
                self.cfg.lr_floor,
            ));
        }
    }

    /// Initial online training phase over the buffered keyframes
    /// (the first `init_keyframes` or fewer): `init_iters` Adam iterations
    /// on minibatches of their pooled stage-1 codes. Stage 2 starts from
    /// the top-K principal directions of the pool.
    pub fn init_online(&mut self) -> Result<Vec<f64>> {
        if self.replay.is_empty() {
            return Err(SplatError::Contract(
                "online init requires at least one buffered keyframe".into(),
            ));
        }
        let sets: Vec<&[f64]> = self
            .replay
            .entries
            .iter()
            .take(self.cfg.init_keyframes)
            .map(|(_, c)| c.as_slice())
            .collect();
        let pool = self.pooled_codes(&sets);
        let dim = self.stage1.code_dim();
        let n = pool.len() / dim;
        self.init_stage2_from_principal_directions(&pool, n);

        let mut trace = Vec::with_capacity(self.cfg.init_iters);
        let bs = self.cfg.minibatch.min(n);
        let mut batch = vec![0.0; bs * dim];
        for _ in 0..self.cfg.init_iters {
            for row in 0..bs {
                let pick = self.rng.gen_range(0..n);
                batch[row * dim..(row + 1) * dim].copy_from_slice(&pool[pick * dim..(pick + 1) * dim]);
            }
            self.ensure_trainer();
            let loss = self
                .trainer
                .as_mut()
                .unwrap()
                .step(&mut self.stage2, &batch, bs);
            trace.push(loss);
            self.init_iterations += 1;
        }
        self.initialized = true;
        Ok(trace)
    }

    /// One online iteration on the current frame's features pooled with
    /// samples from `replay_keyframes` random past keyframes.
    pub fn step_online(&mut self, frame_features: &[f32], dim: usize) -> Result<f64> {
        if !self.initialized {
            return Err(SplatError::Contract("online stage not initialized".into()));
        }
        if dim != self.feat_dim() {
            return Err(SplatError::Contract("frame feature width mismatch".into()));
        }
        let n = frame_features.len() / dim;
        let take = self.cfg.samples_per_keyframe.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = self.rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let mut raw = vec![0.0f64; take * dim];
        for (row, &src) in idx[..take].iter().enumerate() {
            for k in 0..dim {
                raw[row * dim + k] = frame_features[src * dim + k] as f64;
            }
        }
        let fresh = self.stage1.encode_batch(&raw, take);

        let mut pool = fresh;
        // distinct random past keyframes, fewer when the buffer is short
        let avail = self.replay.entries.len();
        let want = self.cfg.replay_keyframes.min(avail);
        let mut picks: Vec<usize> = (0..avail).collect();
        for i in 0..want {
            let j = self.rng.gen_range(i..avail);
            picks.swap(i, j);
        }
        for &pick in &picks[..want] {
            pool.extend_from_slice(&self.replay.entries[pick].1);
        }
        let replayed = want;
        let cdim = self.stage1.code_dim();
        let total = pool.len() / cdim;
        let bs = self.cfg.minibatch.min(total);
        let mut batch = vec![0.0; bs * cdim];
        for row in 0..bs {
            let pick = self.rng.gen_range(0..total);
            batch[row * cdim..(row + 1) * cdim].copy_from_slice(&pool[pick * cdim..(pick + 1) * cdim]);
        }
        self.ensure_trainer();
        let loss = self
            .trainer
            .as_mut()
            .unwrap()
            .step(&mut self.stage2, &batch, bs);
        self.step_log.push((1, replayed));
        Ok(loss)
    }

    /// Top-K principal directions of the pooled codes as the stage-2
    /// starting point (encoder rows = components, decoder = transpose,
    /// biases remove/restore the mean).
    fn init_stage2_from_principal_directions(&mut self, pool: &[f64], n: usize) {
        let dim = self.stage1.code_dim();
        let k = self.cfg.code_final;
        let mut mean = vec![0.0; dim];
        for i in 0..n {
            for d in 0..dim {
                mean[d] += pool[i * dim + d];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            for a in 0..dim {
                let xa = pool[i * dim + a] - mean[a];
                for b in a..dim {
                    let xb = pool[i * dim + b] - mean[b];
                    cov[(a, b)] += xa * xb;
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        cov /= n as f64;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let enc = &mut self.stage2.encoder[0];
        let dec = &mut self.stage2.decoder[0];
        for (row, &comp) in order.iter().take(k).enumerate() {
            for c in 0..dim {
                enc.w[row * dim + c] = eig.eigenvectors[(c, comp)];
                dec.w[c * k + row] = eig.eigenvectors[(c, comp)];
            }
        }
        for row in 0..k {
            let mut acc = 0.0;
            for c in 0..dim {
                acc += enc.w[row * dim + c] * mean[c];
            }
            enc.b[row] = -acc;
        }
        dec.b.copy_from_slice(&mean);
    }
}

// --- codec file ----------------------------------------------------------------

const MLPC_MAGIC: &[u8; 4] = b"MLPC";
const MLPC_VERSION: u32 = 1;

/// Write a codec: magic, version, layer count, then per layer
/// (rows, cols, row-major f32 weights, f32 biases), little-endian.
/// Encoder layers come first; the encoder/decoder boundary is after the
/// layer with the smallest output width.
pub fn save_codec(codec: &MlpCodec, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SplatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let err = |e| SplatError::io(path, e);
    w.write_all(MLPC_MAGIC).map_err(err)?;
    w.write_all(&MLPC_VERSION.to_le_bytes()).map_err(err)?;
    let layers: Vec<&Linear> = codec.encoder.iter().chain(codec.decoder.iter()).collect();
    w.write_all(&(layers.len() as u32).to_le_bytes()).map_err(err)?;
    for l in layers {
        w.write_all(&(l.rows as u32).to_le_bytes()).map_err(err)?;
        w.write_all(&(l.cols as u32).to_le_bytes()).map_err(err)?;
        for v in &l.w {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(err)?;
        }
        for v in &l.b {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

pub fn load_codec(path: &Path) -> Result<MlpCodec> {
    let bytes = std::fs::read(path).map_err(|e| SplatError::io(path, e))?;
    let mut off = 0usize;
    let need = |off: usize, n: usize| -> Result<()> {
        if off + n > bytes.len() {
            Err(SplatError::format(
                path,
                format!("truncated at byte {off}, need {n} more"),
            ))
        } else {
            Ok(())
        }
    };
    need(off, 8)?;
    if &bytes[0..4] != MLPC_MAGIC {
        return Err(SplatError::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MLPC_VERSION {
        return Err(SplatError::format(path, format!("unsupported version {version}")));
    }
    off = 8;
    need(off, 4)?;
    let n_layers = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        need(off, 8)?;
        let rows = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let count = rows * cols + rows;
        need(off, count * 4)?;
        let mut l = Linear::zeros(rows, cols);
        for idx in 0..rows * cols {
            l.w[idx] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        for idx in 0..rows {
            l.b[idx] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        layers.push(l);
    }
    if off != bytes.len() {
        return Err(SplatError::format(path, format!("{} trailing bytes", bytes.len() - off)));
    }
    // encoder/decoder split after the narrowest output
    let split = layers
        .iter()
        .enumerate()
        .min_by_key(|(_, l)| l.rows)
        .map(|(i, _)| i + 1)
        .unwrap_or(0);
    let decoder = layers.split_off(split);
    Ok(MlpCodec {
        encoder: layers,
        decoder,
    })
}

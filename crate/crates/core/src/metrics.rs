//! SSIM, Fréchet distance between feature sets, and the real-vs-generated
//! detector probe.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{AdamW, ParamVars, Params};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean structural similarity over channels and all valid 7×7 windows,
/// after mapping `[-1, 1]` to `[0, 1]` (dynamic range 1). Window statistics
/// use uniform weights and population moments.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let px = |img: &ImageGrid, y: usize, x: usize| (img.get(y, x, ch) + 1.0) / 2.0;
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        sa += px(a, y, x);
                        sb += px(b, y, x);
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (px(a, y, x) - ma, px(b, y, x) - mb);
                        va += p * p / n;
                        vb += q * q / n;
                        cov += p * q / n;
                    }
                }
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn moments(feats: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = feats.shape();
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mu.iter_mut().zip(feats.row(r)) {
            *m += x / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        let row = feats.row(r);
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if n <= d {
        for i in 0..d {
            cov[(i, i)] += 1e-6;
        }
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})` between two `n×d` sets, with
/// the trace of the cross term computed as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`
/// so only symmetric square roots are needed.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.cols(), b.cols())));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Empty("Fréchet distance needs at least two samples per set".into()));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let s = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&s * &cov_b * &s));
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Hyperparameters of the detector probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub channels: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub split: (f64, f64, f64),
    pub min_per_class: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { channels: 8, batch_size: 128, learning_rate: 3e-4, epochs: 15, split: (0.8, 0.05, 0.15), min_per_class: 200 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorReport {
    pub f1_fake: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_size: usize,
}

/// `(h·w)×(9·c)` 3×3 neighbourhoods with zero padding, `(dy, dx, c)` order.
fn im2col(img: &ImageGrid) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        out.extend(std::iter::repeat_n(0.0, c));
                    } else {
                        out.extend_from_slice(img.pixel(yy as usize, xx as usize));
                    }
                }
            }
        }
    }
    out
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Conv 3×3 → global max pool → linear → 2 logits, with `U(±1/√fan_in)`
/// initialization.
fn detector_params(in_ch: usize, cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> Params {
    let fan = (9 * in_ch) as f64;
    let mut p = Params::new();
    p.insert("conv.w".into(), uniform(9 * in_ch, cfg.channels, 1.0 / fan.sqrt(), rng));
    p.insert("conv.b".into(), uniform(1, cfg.channels, 1.0 / fan.sqrt(), rng));
    let fan = cfg.channels as f64;
    p.insert("head.w".into(), uniform(cfg.channels, 2, 1.0 / fan.sqrt(), rng));
    p.insert("head.b".into(), uniform(1, 2, 1.0 / fan.sqrt(), rng));
    p
}

struct Example {
    cols: Vec<f64>,
    label: usize,
}

/// Mean loss and the logits of a batch; records a graph when `train`.
fn detector_batch(params: &Params, batch: &[&Example], pixels: usize, train: bool) -> (f64, Tensor, Option<std::collections::BTreeMap<String, Tensor>>) {
    let k = batch[0].cols.len() / pixels;
    let mut data = Vec::with_capacity(batch.len() * pixels * k);
    for e in batch {
        data.extend_from_slice(&e.cols);
    }
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut g = if train { Graph::new() } else { Graph::inference() };
    let pv = ParamVars::bind(&mut g, params, train);
    let x = g.constant(Tensor::from_vec(batch.len() * pixels, k, data));
    let h = g.linear(x, pv.get("conv.w"), Some(pv.get("conv.b")));
    let pooled = g.max_seg(h, pixels);
    let logits = g.linear(pooled, pv.get("head.w"), Some(pv.get("head.b")));
    let loss = g.cross_entropy(logits, &labels);
    let lv = g.value(loss).get(0, 0);
    let logits_v = g.value(logits).clone();
    let grads = train.then(|| {
        let mut gr = g.backward(loss);
        pv.collect_grads(&g, &mut gr)
    });
    (lv, logits_v, grads)
}

/// Shifts the fake-class bias so the mean initial logit gap over `train`
/// equals the log prior ratio of the two classes.
fn match_class_prior(params: &mut Params, train: &[Example], pixels: usize) {
    let refs: Vec<&Example> = train.iter().collect();
    let (_, logits, _) = detector_batch(params, &refs, pixels, false);
    let gap = (0..logits.rows()).map(|r| logits.get(r, 1) - logits.get(r, 0)).sum::<f64>() / logits.rows() as f64;
    let fakes = train.iter().filter(|e| e.label == 1).count() as f64;
    let prior = (fakes / (train.len() as f64 - fakes)).ln();
    let b = params.get_mut("head.b").expect("detector head bias");
    b.set(0, 1, b.get(0, 1) - gap + prior);
}

/// F1 of the positive class.
pub fn f1_score(predicted: &[usize], actual: &[usize], positive: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p == positive, a == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Trains the conv/max-pool/linear probe to tell `fake` (class 1) from
/// `real` (class 0) and reports test F1 on the fake class, using the
/// parameters of the epoch with the lowest validation loss.
pub fn train_detector(real: &[ImageGrid], fake: &[ImageGrid], cfg: &DetectorConfig, seed: u64) -> Result<DetectorReport> {
    let (nr, nf) = (real.len(), fake.len());
    if nr < cfg.min_per_class || nf < cfg.min_per_class {
        return Err(Error::Empty(format!("detector needs {} images per class, got {nr} real and {nf} fake", cfg.min_per_class)));
    }
    if nr.max(nf) > 10 * nr.min(nf) {
        return Err(Error::Config(format!("class imbalance {nr}:{nf} exceeds 10:1")));
    }
    let shape = real[0].shape();
    if real.iter().chain(fake).any(|i| i.shape() != shape) {
        return Err(Error::Shape("detector images have mixed shapes".into()));
    }
    let pixels = shape.0 * shape.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Example> = real
        .iter()
        .map(|i| Example { cols: im2col(i), label: 0 })
        .chain(fake.iter().map(|i| Example { cols: im2col(i), label: 1 }))
        .collect();
    all.shuffle(&mut rng);
    let n = all.len();
    let n_train = (cfg.split.0 * n as f64).round() as usize;
    let n_val = ((cfg.split.1 * n as f64).round() as usize).max(1);
    let (train, rest) = all.split_at(n_train);
    let (val, test) = rest.split_at(n_val.min(rest.len()));
    if test.is_empty() {
        return Err(Error::Empty("detector test split is empty".into()));
    }

    let mut params = detector_params(shape.2, cfg, &mut rng);
    match_class_prior(&mut params, train, pixels);
    let mut opt = AdamW::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_refs: Vec<&Example> = val.iter().collect();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (_, _, grads) = detector_batch(&params, &batch, pixels, true);
            opt.update(&mut params, &grads.expect("training batch records gradients"));
        }
        let (val_loss, _, _) = detector_batch(&params, &val_refs, pixels, false);
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        }
    }
    let (best_val_loss, best_epoch, params) = best;
    let test_refs: Vec<&Example> = test.iter().collect();
    let (_, logits, _) = detector_batch(&params, &test_refs, pixels, false);
    let predicted: Vec<usize> = (0..logits.rows()).map(|r| usize::from(logits.get(r, 1) > logits.get(r, 0))).collect();
    let actual: Vec<usize> = test.iter().map(|e| e.label).collect();
    let correct = predicted.iter().zip(&actual).filter(|(p, a)| p == a).count();
    Ok(DetectorReport {
        f1_fake: f1_score(&predicted, &actual, 1),
        test_accuracy: correct as f64 / actual.len() as f64,
        best_epoch,
        best_val_loss,
        test_size: actual.len(),
    })
}

/// Summary statistics over one declared sample set. Entries a suite did not
/// compute are `None` and written as `nan`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub fid: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub fidelity_mean: Option<f64>,
    pub detector_f1_fake: Option<f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub const HEADER: &'static str = "fid,ssim_mean,fidelity_mean,detector_f1_fake,n_samples";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x}"));
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::HEADER);
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            f(self.fid),
            f(self.ssim_mean),
            f(self.fidelity_mean),
            f(self.detector_f1_fake),
            self.n_samples
        );
        s
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

//! Old-to-new feature alignment with a per-item uncertainty head.
//!
//! [`train_head`] fits a linear softmax classifier on new-model features.
//! [`train_alignment`] then trains an MLP `h` from old to new feature space
//! together with a linear head reading `h`'s output and predicting
//! `s = log σ²`. The classifier head stays frozen; its cross entropy on `h`
//! backpropagates into `h` and orients alignment errors toward the right
//! class clusters.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, PairedFeatureSet};
use crate::losses::{loss_combined, loss_disc, loss_l2, loss_uncertain, LossConfig, LossKind};
use crate::store::Cursor;
use crate::tensornet::{
    decode_net_from, encode_net, Activation, Adam, Dense, DenseNet, LrSchedule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Replaced by a derived per-run seed in experiments.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Hidden widths of the alignment MLP; `None` means two layers of width `4d`.
    #[serde(default)]
    pub hidden_layers: Option<Vec<usize>>,
}

impl TrainConfig {
    pub fn alignment_default() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            base_lr: 1e-3,
            warmup_epochs: 2,
            seed: 0,
            loss: LossConfig::default(),
            hidden_layers: None,
        }
    }

    pub fn head_default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            base_lr: 1e-2,
            warmup_epochs: 1,
            seed: 0,
            loss: LossConfig::default(),
            hidden_layers: None,
        }
    }

    /// The pairwise-only baseline objective with the same schedule.
    pub fn l2_baseline(&self) -> Self {
        Self {
            loss: LossConfig {
                loss_kind: LossKind::L2,
                uncertainty: false,
                ..self.loss
            },
            ..self.clone()
        }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.batch_size > train_len {
            return Err(Error::config(
                "batch_size",
                format!(
                    "{} exceeds the {} training items",
                    self.batch_size, train_len
                ),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs", "exceeds epochs"));
        }
        if let Some(h) = &self.hidden_layers {
            if h.contains(&0) {
                return Err(Error::config("hidden_layers", "widths must be positive"));
            }
        }
        self.loss.validate()
    }

    fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
        }
    }
}

/// Linear softmax head over new-model features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `k × d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, feats: ArrayView2<f64>) -> Result<Array2<f64>> {
        if feats.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: feats.ncols(),
            });
        }
        let z = feats.dot(&self.weights.t()) + &self.bias;
        Ok(z.as_standard_layout().into_owned())
    }

    /// Top-1 predictions.
    pub fn predict(&self, feats: ArrayView2<f64>) -> Result<Vec<u32>> {
        let logits = self.logits(feats)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0 as u32
            })
            .collect())
    }

    pub fn accuracy(&self, set: &FeatureSet) -> Result<f64> {
        if set.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(set.to_matrix().view())?;
        let hits = pred
            .iter()
            .zip(set.labels())
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / set.len() as f64)
    }

    fn as_net(&self) -> DenseNet {
        DenseNet::new(vec![Dense {
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            activation: Activation::Identity,
        }])
        .expect("head parameters are finite")
    }

    /// One-layer `FFN1` network.
    pub fn encode(&self) -> Vec<u8> {
        encode_net(&self.as_net())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let net = decode_net_from(&mut cur)?;
        if net.layers().len() != 1 || net.layers()[0].activation != Activation::Identity {
            return Err(Error::format(
                4,
                "classifier head must be one identity layer",
            ));
        }
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes after head"));
        }
        let l = &net.layers()[0];
        Ok(Self {
            weights: l.weights.clone(),
            bias: l.bias.clone(),
        })
    }
}

fn check_labels(set: &FeatureSet) -> Result<usize> {
    let k = set.num_classes();
    if k < 2 {
        return Err(Error::invalid(
            "classifier training needs at least two classes",
        ));
    }
    let mut present = vec![false; k];
    for &l in set.labels() {
        present[l as usize] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::invalid(format!(
            "labels must be contiguous 0..{k}; class {missing} is missing"
        )));
    }
    Ok(k)
}

fn batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Fits a linear softmax head with plain cross entropy (no smoothing).
pub fn train_head(train_new: &FeatureSet, cfg: &TrainConfig) -> Result<ClassifierHead> {
    let k = check_labels(train_new)?;
    cfg.validate(train_new.len())?;
    let d = train_new.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Dense::glorot(d, k, Activation::Identity, &mut rng);
    let mut head = ClassifierHead {
        weights: init.weights,
        bias: init.bias,
    };
    let x = train_new.to_matrix();
    let labels = train_new.labels();
    let n = x.nrows();
    let steps_per_epoch = batches(n, cfg.batch_size);
    let mut adam = Adam::new(k * d + k, cfg.schedule(steps_per_epoch));
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather_rows(&x, chunk);
            let logits = head.logits(xb.view())?;
            let b = chunk.len() as f64;
            let mut g = Array2::<f64>::zeros((chunk.len(), k));
            for (r, &i) in chunk.iter().enumerate() {
                let lg = loss_disc(
                    logits.row(r).as_slice().expect("contiguous"),
                    labels[i] as usize,
                    0.0,
                )?;
                for j in 0..k {
                    g[[r, j]] = lg.grad[j] / b;
                }
            }
            let dw = g.t().dot(&xb);
            let db = g.sum_axis(Axis(0));
            let mut params: Vec<f64> = head
                .weights
                .iter()
                .chain(head.bias.iter())
                .copied()
                .collect();
            let grads: Vec<f64> = dw.iter().chain(db.iter()).copied().collect();
            adam.step(&mut params, &grads)?;
            let (w, bias) = params.split_at(k * d);
            head.weights
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(w);
            head.bias
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(bias);
        }
    }
    Ok(head)
}

/// The map `h` plus a linear log-variance head on `h`'s output.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignNet {
    pub backbone: DenseNet,
    /// One identity layer `d → 1`.
    pub sigma_head: DenseNet,
}

impl AlignNet {
    pub fn new(backbone: DenseNet, sigma_head: DenseNet) -> Result<Self> {
        if sigma_head.input_dim() != backbone.output_dim() || sigma_head.output_dim() != 1 {
            return Err(Error::Dimension {
                expected: backbone.output_dim(),
                got: sigma_head.input_dim(),
            });
        }
        Ok(Self {
            backbone,
            sigma_head,
        })
    }

    /// Glorot-initialised network with the configured hidden widths.
    pub fn init(in_dim: usize, out_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let backbone = DenseNet::mlp(in_dim, hidden, out_dim, rng);
        let sigma_head = DenseNet::mlp(out_dim, &[], 1, rng);
        Self {
            backbone,
            sigma_head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.sigma_head.param_count()
    }

    /// Backbone parameters followed by sigma-head parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.backbone.params();
        p.extend(self.sigma_head.params());
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let nb = self.backbone.param_count();
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        self.backbone.set_params(&flat[..nb])?;
        self.sigma_head.set_params(&flat[nb..])
    }

    /// Two concatenated `FFN1` networks: backbone, then sigma head.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = encode_net(&self.backbone);
        out.extend(encode_net(&self.sigma_head));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let backbone = decode_net_from(&mut cur)?;
        let at = cur.offset();
        let sigma_head = decode_net_from(&mut cur)?;
        if cur.remaining() != 0 {
            return Err(Error::format(
                cur.offset(),
                "trailing bytes after sigma head",
            ));
        }
        Self::new(backbone, sigma_head).map_err(|e| Error::format(at, e.to_string()))
    }

    /// `h(old)` and `s = log σ²` for every row.
    pub fn forward_rows(&self, old: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let h = self.backbone.predict(old)?;
        let s = self.sigma_head.predict(h.view())?;
        Ok((h, s.column(0).to_owned()))
    }
}

/// Mean objective over one batch and its gradient with respect to
/// [`AlignNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub loss: f64,
    pub mean_l2: f64,
    pub mean_disc: f64,
    pub grads: Vec<f64>,
}

pub fn alignment_objective(
    net: &AlignNet,
    head: &ClassifierHead,
    old: ArrayView2<f64>,
    new: ArrayView2<f64>,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<BatchObjective> {
    let b = old.nrows();
    if new.nrows() != b || labels.len() != b {
        return Err(Error::Dimension {
            expected: b,
            got: new.nrows().min(labels.len()),
        });
    }
    if head.dim() != net.backbone.output_dim() {
        return Err(Error::Dimension {
            expected: net.backbone.output_dim(),
            got: head.dim(),
        });
    }
    let lambda = cfg.lambda_for_dim(new.ncols());
    let (h, tape_b) = net.backbone.forward(old)?;
    if h.ncols() != new.ncols() {
        return Err(Error::Dimension {
            expected: new.ncols(),
            got: h.ncols(),
        });
    }
    let (s, tape_s) = net.sigma_head.forward(h.view())?;
    let logits = head.logits(h.view())?;

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut sum_l2 = 0.0;
    let mut sum_disc = 0.0;
    let mut d_logits = Array2::<f64>::zeros(logits.dim());
    let mut d_h = Array2::<f64>::zeros(h.dim());
    let mut d_s = Array2::<f64>::zeros((b, 1));
    for i in 0..b {
        let h_row = h.row(i).to_vec();
        let new_row = new.row(i).to_vec();
        let logit_row = logits.row(i).to_vec();
        let c = loss_combined(&h_row, &new_row, &logit_row, labels[i] as usize, cfg)?;
        sum_l2 += c.l2;
        sum_disc += c.disc;
        let (value, weight) = if cfg.uncertainty {
            let u = loss_uncertain(c.value, s[[i, 0]], lambda)?;
            d_s[[i, 0]] = u.d_log_var * inv_b;
            (u.value, u.d_base)
        } else {
            (c.value, 1.0)
        };
        loss += value;
        let scale = weight * inv_b;
        for j in 0..h_row.len() {
            d_h[[i, j]] = scale * c.grad_h[j];
        }
        for j in 0..logit_row.len() {
            d_logits[[i, j]] = scale * c.grad_logits[j];
        }
    }
    d_h += &d_logits.dot(&head.weights);

    let (g_sigma, d_h_sigma) = net.sigma_head.backward(tape_s, d_s.view())?;
    d_h += &d_h_sigma;
    let (g_backbone, _) = net.backbone.backward(tape_b, d_h.view())?;
    let mut grads = g_backbone.to_flat();
    grads.extend(g_sigma.to_flat());
    Ok(BatchObjective {
        loss: loss * inv_b,
        mean_l2: sum_l2 * inv_b,
        mean_disc: sum_disc * inv_b,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_l2: f64,
    pub mean_disc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Full-data objective before the first step.
    pub initial: EpochStats,
    /// Running means of the batch objectives, one entry per epoch.
    pub epochs: Vec<EpochStats>,
    /// Full-data objective after the last step.
    pub final_eval: EpochStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAlignment {
    pub net: AlignNet,
    pub log: TrainingLog,
}

fn full_eval(
    net: &AlignNet,
    head: &ClassifierHead,
    old: &Array2<f64>,
    new: &Array2<f64>,
    labels: &[u32],
    cfg: &LossConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let o = alignment_objective(net, head, old.view(), new.view(), labels, cfg)?;
    Ok(EpochStats {
        epoch,
        mean_loss: o.loss,
        mean_l2: o.mean_l2,
        mean_disc: o.mean_disc,
        lr: 0.0,
    })
}

/// Jointly trains the alignment map and its log-variance head. The
/// classifier head is read-only.
pub fn train_alignment(
    pairs: &PairedFeatureSet,
    head: &ClassifierHead,
    cfg: &TrainConfig,
) -> Result<TrainedAlignment> {
    pairs.validate()?;
    cfg.validate(pairs.len())?;
    let d_new = pairs.new.dim();
    if head.dim() != d_new {
        return Err(Error::Dimension {
            expected: d_new,
            got: head.dim(),
        });
    }
    if pairs.new.num_classes() > head.num_classes() {
        return Err(Error::invalid(format!(
            "head covers {} classes but training labels reach {}",
            head.num_classes(),
            pairs.new.num_classes()
        )));
    }
    let hidden = cfg
        .hidden_layers
        .clone()
        .unwrap_or_else(|| vec![4 * d_new, 4 * d_new]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = AlignNet::init(pairs.old.dim(), d_new, &hidden, &mut rng);

    let old = pairs.old.to_matrix();
    let new = pairs.new.to_matrix();
    let labels = pairs.new.labels();
    let n = old.nrows();
    let steps_per_epoch = batches(n, cfg.batch_size);
    let mut adam = Adam::new(net.param_count(), cfg.schedule(steps_per_epoch));

    let initial = full_eval(&net, head, &old, &new, labels, &cfg.loss, 0)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut params = net.params();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = adam.current_lr();
        let (mut sum, mut sum_l2, mut sum_disc) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let step = adam.steps_taken();
            let ob = gather_rows(&old, chunk);
            let nb = gather_rows(&new, chunk);
            let lb: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let obj = alignment_objective(&net, head, ob.view(), nb.view(), &lb, &cfg.loss)
                .map_err(|e| match e {
                    Error::InvalidArgument(detail) => Error::Divergence { step, detail },
                    other => other,
                })?;
            if !obj.loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("batch loss is {}", obj.loss),
                });
            }
            let w = chunk.len() as f64;
            sum += obj.loss * w;
            sum_l2 += obj.mean_l2 * w;
            sum_disc += obj.mean_disc * w;
            adam.step(&mut params, &obj.grads)?;
            net.set_params(&params)?;
        }
        epochs.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: sum / n as f64,
            mean_l2: sum_l2 / n as f64,
            mean_disc: sum_disc / n as f64,
            lr,
        });
    }
    let final_eval = full_eval(&net, head, &old, &new, labels, &cfg.loss, cfg.epochs)?;
    Ok(TrainedAlignment {
        net,
        log: TrainingLog {
            initial,
            epochs,
            final_eval,
        },
    })
}

/// The pairwise-only baseline: the same trainer with the `l2` objective
/// and no uncertainty term.
pub fn train_l2_baseline(
    pairs: &PairedFeatureSet,
    head: &ClassifierHead,
    cfg: &TrainConfig,
) -> Result<TrainedAlignment> {
    train_alignment(pairs, head, &cfg.l2_baseline())
}

fn check_input(net: &AlignNet, feats: &FeatureSet) -> Result<()> {
    if feats.dim() != net.backbone.input_dim() {
        return Err(Error::Dimension {
            expected: net.backbone.input_dim(),
            got: feats.dim(),
        });
    }
    Ok(())
}

/// Maps old features into new feature space, keeping ids, labels and subgroups.
pub fn transform(net: &AlignNet, feats: &FeatureSet) -> Result<FeatureSet> {
    check_input(net, feats)?;
    if feats.is_empty() {
        return FeatureSet::empty(net.backbone.output_dim(), feats.role());
    }
    let h = net.backbone.predict(feats.to_matrix().view())?;
    feats.with_vectors(&h)
}

/// Predicted `log σ²` per record.
pub fn predict_log_var(net: &AlignNet, feats: &FeatureSet) -> Result<Vec<f64>> {
    check_input(net, feats)?;
    if feats.is_empty() {
        return Ok(Vec::new());
    }
    let (_, s) = net.forward_rows(feats.to_matrix().view())?;
    Ok(s.to_vec())
}

/// Predicted `σ²` per record.
pub fn predict_sigma(net: &AlignNet, feats: &FeatureSet) -> Result<Vec<f64>> {
    Ok(predict_log_var(net, feats)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Per-item pairwise, discriminative and combined losses of the trained map
/// on a paired set.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemLosses {
    pub l2: Vec<f64>,
    pub disc: Vec<f64>,
    pub combined: Vec<f64>,
}

pub fn item_losses(
    net: &AlignNet,
    head: &ClassifierHead,
    pairs: &PairedFeatureSet,
    eps: f64,
) -> Result<ItemLosses> {
    pairs.validate()?;
    check_input(net, &pairs.old)?;
    let n = pairs.len();
    let mut out = ItemLosses {
        l2: Vec::with_capacity(n),
        disc: Vec::with_capacity(n),
        combined: Vec::with_capacity(n),
    };
    if n == 0 {
        return Ok(out);
    }
    let h = net.backbone.predict(pairs.old.to_matrix().view())?;
    let logits = head.logits(h.view())?;
    let new = pairs.new.to_matrix();
    for i in 0..n {
        let l2 = loss_l2(&h.row(i).to_vec(), &new.row(i).to_vec())?.value;
        let disc = loss_disc(&logits.row(i).to_vec(), pairs.new.labels()[i] as usize, eps)?.value;
        out.l2.push(l2);
        out.disc.push(disc);
        out.combined.push(l2 + disc);
    }
    Ok(out)
}

//! The conditional VAE: plan and scene encoders, categorical prior and
//! recognition heads, a GRU decoder emitting one bivariate Gaussian per
//! waypoint, the training objective, training loop and argmax inference.

use std::path::Path;

use gridplan_autodiff::checkpoint::{decode_checkpoint, encode_checkpoint, DType};
use gridplan_autodiff::dist::{bvn_nll_rows, categorical_kl_rows, BivariateGaussian, Categorical};
use gridplan_autodiff::layers::{BiLstm, Conv2d, Dense, GruCell, SelfAttention};
use gridplan_autodiff::optim::{Adam, AdamConfig};
use gridplan_autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::geo::{LocalPoint, Trajectory};
use crate::planner::Variant;
use crate::scene::GridSpec;

/// Correlation bound; keeps every covariance positive definite.
pub const RHO_BOUND: f64 = 0.99;

const CHECKPOINT_FORMAT: &str = "gridplan-cvae";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample {index}: {message}")]
    Shape { index: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {index} has no ground truth")]
    MissingGroundTruth { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples {samples:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        samples: Vec<usize>,
    },
    #[error("mode {z} out of range for K = {k}")]
    BadMode { z: usize, k: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and representation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Waypoints per trajectory (H).
    pub horizon: usize,
    /// Arc spacing of the ground-truth waypoints, meters.
    pub spacing: f64,
    /// Past plan rows (P).
    pub past: usize,
    /// Future plan rows (F).
    pub future: usize,
    /// Latent modes (K).
    pub modes: usize,
    pub plan_dim: usize,
    pub scene_dim: usize,
    /// Trajectory embedding width; each LSTM direction gets half.
    pub traj_dim: usize,
    pub plan_hidden: usize,
    pub decoder_hidden: usize,
    pub conv_channels: Vec<usize>,
    pub grid: GridSpec,
    /// Weight of the mean-squared-error term (lambda).
    pub mse_weight: f64,
    /// Multiplier applied to plan coordinates before the encoder.
    pub plan_scale: f64,
    /// Decoder means are emitted in units of this many meters.
    pub output_scale: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            spacing: 3.0,
            past: 20,
            future: 20,
            modes: 12,
            plan_dim: 128,
            scene_dim: 256,
            traj_dim: 64,
            plan_hidden: 256,
            decoder_hidden: 128,
            conv_channels: vec![8, 16, 32, 64, 64],
            grid: GridSpec::default(),
            mse_weight: 1.0,
            plan_scale: 0.1,
            output_scale: 10.0,
            variant: Variant::STPF,
        }
    }
}

impl ModelConfig {
    /// Smaller embeddings and a 32x32 crop at 2 m per pixel.
    pub fn desk() -> Self {
        Self {
            plan_dim: 64,
            scene_dim: 64,
            traj_dim: 32,
            plan_hidden: 128,
            decoder_hidden: 64,
            grid: GridSpec::new(0.5, 32.0).expect("valid desk grid"),
            ..Self::default()
        }
    }

    /// Configuration used by the full-model gradient check.
    pub fn tiny() -> Self {
        Self {
            horizon: 3,
            past: 4,
            future: 4,
            modes: 2,
            plan_dim: 6,
            scene_dim: 5,
            traj_dim: 4,
            plan_hidden: 7,
            decoder_hidden: 5,
            conv_channels: vec![2, 3, 2, 2, 2],
            grid: GridSpec::new(0.5, 16.0).expect("valid tiny grid"),
            ..Self::default()
        }
    }

    pub fn plan_rows(&self) -> usize {
        self.past + self.future
    }

    /// Side length of the last convolution's output.
    pub fn conv_out_side(&self) -> usize {
        self.conv_channels
            .iter()
            .fold(self.grid.side, |s, _| s.div_ceil(2))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("spacing must be positive");
        }
        if self.plan_rows() == 0 {
            return bad("plan needs at least one row");
        }
        if self.modes == 0 {
            return bad("modes must be positive");
        }
        if self.traj_dim < 2 || self.traj_dim % 2 != 0 {
            return bad("traj_dim must be even and at least 2");
        }
        if [self.plan_dim, self.scene_dim, self.plan_hidden, self.decoder_hidden].contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive");
        }
        self.grid
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        if !(self.mse_weight >= 0.0 && self.mse_weight.is_finite()) {
            return bad("mse_weight must be finite and non-negative");
        }
        if !(self.plan_scale > 0.0 && self.plan_scale.is_finite()) {
            return bad("plan_scale must be positive");
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return bad("output_scale must be positive");
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            batch_size: 16,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss components over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub mse: f64,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub mse: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,total,recon,kl,mse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.total, self.recon, self.kl, self.mse
        )
    }
}

/// Input tensors for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[B, P+F, 3]`
    pub plan: Tensor,
    /// `[B, 3, L, L]`
    pub scene: Tensor,
    /// Per-step ground truth, each `[B, 2]`, meters.
    pub gt_steps: Option<Vec<Tensor>>,
}

impl Batch {
    pub fn new(config: &ModelConfig, samples: &[&Sample], with_gt: bool) -> Result<Self, ModelError> {
        let n = config.plan_rows();
        let l = config.grid.side;
        let h = config.horizon;
        let mut plan = Vec::with_capacity(samples.len() * n * 3);
        let mut scene = Vec::with_capacity(samples.len() * 3 * l * l);
        let mut gt = vec![Vec::with_capacity(samples.len() * 2); h];
        for (index, s) in samples.iter().enumerate() {
            let shape_err = |message: String| ModelError::Shape { index, message };
            if s.plan.rows.len() != n {
                return Err(shape_err(format!("plan has {} rows, expected {n}", s.plan.rows.len())));
            }
            if s.scene.spec.side != l || s.scene.data.len() != l * l * 3 {
                return Err(shape_err(format!(
                    "scene is {}x{} with {} values, expected {l}x{l}x3",
                    s.scene.spec.side,
                    s.scene.spec.side,
                    s.scene.data.len()
                )));
            }
            plan.extend(s.plan.flat());
            scene.extend(s.scene.to_chw());
            if with_gt {
                if s.gt.len() != h {
                    return Err(shape_err(format!("gt has {} waypoints, expected {h}", s.gt.len())));
                }
                for (i, w) in s.gt.waypoints.iter().enumerate() {
                    gt[i].extend([w.x, w.y]);
                }
            }
        }
        let b = samples.len();
        Ok(Self {
            size: b,
            plan: Tensor::new(vec![b, n, 3], plan),
            scene: Tensor::new(vec![b, 3, l, l], scene),
            gt_steps: with_gt.then(|| gt.into_iter().map(|d| Tensor::new(vec![b, 2], d)).collect()),
        })
    }
}

/// Graph handles for the decoder's per-step Gaussians; rows follow the inputs.
pub struct DecoderVars {
    /// Means in meters, `[R, 2]` per step.
    pub mean: Vec<Var>,
    pub log_sigma: Vec<Var>,
    /// `[R, 1]` per step.
    pub rho: Vec<Var>,
}

/// Graph handles for the objective; per-sample terms are `[B]`.
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub mse: Var,
    /// `[B, K]` summed over waypoints.
    pub mode_nll: Var,
    pub log_q: Var,
    pub log_p: Var,
}

#[derive(Clone, Debug)]
pub struct CvaeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    plan_attn: SelfAttention,
    plan_fc1: Dense,
    plan_fc2: Dense,
    convs: Vec<Conv2d>,
    scene_fc: Dense,
    prior_head: Dense,
    traj_enc: BiLstm,
    recog_head: Dense,
    dec_init: Dense,
    dec_gru: GruCell,
    dec_head: Dense,
}

impl CvaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let n = c.plan_rows();
        let plan_attn = SelfAttention::new(&mut store, "plan.attn", 3, &mut rng);
        let plan_fc1 = Dense::new_relu(&mut store, "plan.fc1", n * 3, c.plan_hidden, &mut rng);
        let plan_fc2 = Dense::new(&mut store, "plan.fc2", c.plan_hidden, c.plan_dim, &mut rng);
        let mut convs = Vec::with_capacity(c.conv_channels.len());
        let mut in_ch = 3;
        for (i, &out_ch) in c.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("scene.conv{i}"), in_ch, out_ch, 3, 2, 1, &mut rng));
            in_ch = out_ch;
        }
        let side = c.conv_out_side();
        let scene_fc = Dense::new(&mut store, "scene.fc", in_ch * side * side, c.scene_dim, &mut rng);
        let joint = c.plan_dim + c.scene_dim;
        let prior_head = Dense::new(&mut store, "prior.head", joint, c.modes, &mut rng);
        let traj_enc = BiLstm::new(&mut store, "recog.traj", 2, c.traj_dim / 2, &mut rng);
        let recog_head = Dense::new(&mut store, "recog.head", joint + c.traj_dim, c.modes, &mut rng);
        let dec_init = Dense::new(&mut store, "dec.init", joint + c.modes, c.decoder_hidden, &mut rng);
        let dec_gru = GruCell::new(&mut store, "dec.gru", 2, c.decoder_hidden, &mut rng);
        let dec_head = Dense::new(&mut store, "dec.head", c.decoder_hidden, 5, &mut rng);
        Ok(Self {
            config,
            store,
            plan_attn,
            plan_fc1,
            plan_fc2,
            convs,
            scene_fc,
            prior_head,
            traj_enc,
            recog_head,
            dec_init,
            dec_gru,
            dec_head,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        let mut m = Self::new(config, 0)?;
        m.store.zero_all();
        Ok(m)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    // -- graph building blocks ------------------------------------------

    /// `plan: [B, P+F, 3]` raw rows -> `h_g: [B, plan_dim]`.
    pub fn encode_plan(&self, g: &mut Graph<'_>, plan: Var) -> Var {
        let s = g.shape(plan).to_vec();
        let (b, n) = (s[0], s[1]);
        let mut scale = Vec::with_capacity(b * n * 3);
        for _ in 0..b * n {
            scale.extend([self.config.plan_scale, self.config.plan_scale, 1.0]);
        }
        let scale = g.input(Tensor::new(vec![b, n, 3], scale));
        let m = g.mul(plan, scale);
        let a = self.plan_attn.forward(g, m);
        let flat = g.reshape(a, &[b, n * 3]);
        let h = self.plan_fc1.forward(g, flat);
        let h = g.relu(h);
        self.plan_fc2.forward(g, h)
    }

    /// Output of the convolution stack, `[B, C, s, s]`.
    pub fn scene_features(&self, g: &mut Graph<'_>, scene: Var) -> Var {
        let mut x = scene;
        for conv in &self.convs {
            x = conv.forward(g, x);
            x = g.relu(x);
        }
        x
    }

    /// `scene: [B, 3, L, L]` -> `h_s: [B, scene_dim]`.
    pub fn encode_scene(&self, g: &mut Graph<'_>, scene: Var) -> Var {
        let f = self.scene_features(g, scene);
        let s = g.shape(f).to_vec();
        let flat = g.reshape(f, &[s[0], s[1] * s[2] * s[3]]);
        self.scene_fc.forward(g, flat)
    }

    /// `y: [B, H, 2]` meters -> `h_y: [B, traj_dim]`.
    pub fn encode_trajectory(&self, g: &mut Graph<'_>, y: Var) -> Var {
        let scaled = g.scale(y, 1.0 / self.config.output_scale);
        self.traj_enc.encode(g, scaled)
    }

    /// Log-probabilities of the prior, `[B, K]`.
    pub fn prior_log_probs(&self, g: &mut Graph<'_>, hg: Var, hs: Var) -> Var {
        let joint = g.concat(&[hg, hs]);
        let logits = self.prior_head.forward(g, joint);
        g.log_softmax(logits)
    }

    /// Log-probabilities of the recognition posterior, `[B, K]`.
    pub fn recognition_log_probs(&self, g: &mut Graph<'_>, hg: Var, hs: Var, y: Var) -> Var {
        let hy = self.encode_trajectory(g, y);
        let joint = g.concat(&[hg, hs, hy]);
        let logits = self.recog_head.forward(g, joint);
        g.log_softmax(logits)
    }

    /// Run the decoder for rows of `[h_g; h_s; onehot(z)]`.
    pub fn decode_vars(&self, g: &mut Graph<'_>, hg: Var, hs: Var, onehot: Var) -> DecoderVars {
        let c = &self.config;
        let rows = g.shape(hg)[0];
        let joint = g.concat(&[hg, hs, onehot]);
        let h0 = self.dec_init.forward(g, joint);
        let mut h = g.tanh(h0);
        let mut x = g.input(Tensor::zeros(&[rows, 2]));
        let mut out = DecoderVars {
            mean: Vec::with_capacity(c.horizon),
            log_sigma: Vec::with_capacity(c.horizon),
            rho: Vec::with_capacity(c.horizon),
        };
        for _ in 0..c.horizon {
            h = self.dec_gru.step(g, h, x);
            let o = self.dec_head.forward(g, h);
            let raw_mean = g.slice_last(o, 0, 2);
            let log_sigma = g.slice_last(o, 2, 2);
            let rho_raw = g.slice_last(o, 4, 1);
            let rho = g.tanh(rho_raw);
            let rho = g.scale(rho, RHO_BOUND);
            out.mean.push(g.scale(raw_mean, c.output_scale));
            out.log_sigma.push(log_sigma);
            out.rho.push(rho);
            x = raw_mean;
        }
        out
    }

    fn onehot(&self, modes: &[usize]) -> Tensor {
        let k = self.config.modes;
        let mut d = vec![0.0; modes.len() * k];
        for (r, &z) in modes.iter().enumerate() {
            d[r * k + z] = 1.0;
        }
        Tensor::new(vec![modes.len(), k], d)
    }

    /// Build the objective. `total` is the batch mean; the rest are per sample.
    pub fn build_loss(&self, g: &mut Graph<'_>, batch: &Batch) -> LossVars {
        let c = &self.config;
        let (b, k, h) = (batch.size, c.modes, c.horizon);
        let steps = batch
            .gt_steps
            .as_ref()
            .expect("loss needs ground truth");
        let plan = g.input(batch.plan.clone());
        let scene = g.input(batch.scene.clone());
        let hg = self.encode_plan(g, plan);
        let hs = self.encode_scene(g, scene);

        let mut y_seq = vec![0.0; b * h * 2];
        for (i, t) in steps.iter().enumerate() {
            for r in 0..b {
                y_seq[(r * h + i) * 2] = t.data()[r * 2];
                y_seq[(r * h + i) * 2 + 1] = t.data()[r * 2 + 1];
            }
        }
        let y = g.input(Tensor::new(vec![b, h, 2], y_seq));
        let log_p = self.prior_log_probs(g, hg, hs);
        let log_q = self.recognition_log_probs(g, hg, hs, y);

        let hg_rep = g.repeat_rows(hg, k);
        let hs_rep = g.repeat_rows(hs, k);
        let modes: Vec<usize> = (0..b).flat_map(|_| 0..k).collect();
        let onehot = g.input(self.onehot(&modes));
        let dec = self.decode_vars(g, hg_rep, hs_rep, onehot);

        let q = g.exp(log_q);
        let q3 = g.reshape(q, &[b, 1, k]);
        let mut nll_acc: Option<Var> = None;
        let mut sq_acc: Option<Var> = None;
        for i in 0..h {
            let yi = g.input(steps[i].clone());
            let yi_rep = g.repeat_rows(yi, k);
            let nll = bvn_nll_rows(g, yi_rep, dec.mean[i], dec.log_sigma[i], dec.rho[i]);
            nll_acc = Some(match nll_acc {
                Some(a) => g.add(a, nll),
                None => nll,
            });
            let mu = g.reshape(dec.mean[i], &[b, k, 2]);
            let yhat = g.batch_matmul(q3, mu);
            let yhat = g.reshape(yhat, &[b, 2]);
            let diff = g.sub(yi, yhat);
            let sq = g.square(diff);
            let sq = g.sum_last(sq);
            sq_acc = Some(match sq_acc {
                Some(a) => g.add(a, sq),
                None => sq,
            });
        }
        let mode_nll = g.reshape(nll_acc.expect("horizon > 0"), &[b, k]);
        let weighted = g.mul(q, mode_nll);
        let recon = g.sum_last(weighted);
        let kl = categorical_kl_rows(g, log_q, log_p);
        let mse = g.scale(sq_acc.expect("horizon > 0"), 1.0 / h as f64);
        let cvae = g.add(recon, kl);
        let weighted_mse = g.scale(mse, c.mse_weight);
        let per_sample = g.add(cvae, weighted_mse);
        let total = g.mean(per_sample);
        LossVars {
            total,
            recon,
            kl,
            mse,
            mode_nll,
            log_q,
            log_p,
        }
    }

    // -- value-level API -------------------------------------------------

    /// Mean objective over `samples`.
    pub fn loss(&self, samples: &[&Sample]) -> Result<LossBreakdown, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let batch = Batch::new(&self.config, samples, true)?;
        let mut g = Graph::with_params(&self.store);
        let lv = self.build_loss(&mut g, &batch);
        let mean = |v: Var| g.value(v).data().iter().sum::<f64>() / batch.size as f64;
        Ok(LossBreakdown {
            total: g.value(lv.total).item(),
            recon: mean(lv.recon),
            kl: mean(lv.kl),
            mse: mean(lv.mse),
        })
    }

    fn embed(&self, g: &mut Graph<'_>, batch: &Batch) -> (Var, Var) {
        let plan = g.input(batch.plan.clone());
        let scene = g.input(batch.scene.clone());
        let hg = self.encode_plan(g, plan);
        let hs = self.encode_scene(g, scene);
        (hg, hs)
    }

    /// Prior over modes for one sample.
    pub fn prior(&self, sample: &Sample) -> Result<Categorical, ModelError> {
        let batch = Batch::new(&self.config, &[sample], false)?;
        let mut g = Graph::with_params(&self.store);
        let (hg, hs) = self.embed(&mut g, &batch);
        let lp = self.prior_log_probs(&mut g, hg, hs);
        Ok(probs_of(g.value(lp).data()))
    }

    /// Recognition posterior over modes for one sample with ground truth.
    pub fn recognition(&self, sample: &Sample) -> Result<Categorical, ModelError> {
        let batch = Batch::new(&self.config, &[sample], true)?;
        let mut g = Graph::with_params(&self.store);
        let (hg, hs) = self.embed(&mut g, &batch);
        let y: Vec<f64> = sample.gt.waypoints.iter().flat_map(|w| [w.x, w.y]).collect();
        let y = g.input(Tensor::new(vec![1, self.config.horizon, 2], y));
        let lq = self.recognition_log_probs(&mut g, hg, hs, y);
        Ok(probs_of(g.value(lq).data()))
    }

    /// The H per-waypoint Gaussians of mode `z`.
    pub fn decode(&self, sample: &Sample, z: usize) -> Result<Vec<BivariateGaussian>, ModelError> {
        let k = self.config.modes;
        if z >= k {
            return Err(ModelError::BadMode { z, k });
        }
        let batch = Batch::new(&self.config, &[sample], false)?;
        let mut g = Graph::with_params(&self.store);
        let (hg, hs) = self.embed(&mut g, &batch);
        let onehot = g.input(self.onehot(&[z]));
        let dec = self.decode_vars(&mut g, hg, hs, onehot);
        (0..self.config.horizon)
            .map(|i| {
                let m = g.value(dec.mean[i]).data();
                let ls = g.value(dec.log_sigma[i]).data();
                let rho = g.value(dec.rho[i]).data()[0];
                BivariateGaussian::from_params([m[0], m[1]], [ls[0].exp(), ls[1].exp()], rho)
                    .map_err(ModelError::from)
            })
            .collect()
    }

    /// Mean trajectories of every mode, with the prior probabilities.
    pub fn mode_trajectories(&self, sample: &Sample) -> Result<(Categorical, Vec<Trajectory>), ModelError> {
        let k = self.config.modes;
        let batch = Batch::new(&self.config, &[sample], false)?;
        let mut g = Graph::with_params(&self.store);
        let (hg, hs) = self.embed(&mut g, &batch);
        let lp = self.prior_log_probs(&mut g, hg, hs);
        let prior = probs_of(g.value(lp).data());
        let hg_rep = g.repeat_rows(hg, k);
        let hs_rep = g.repeat_rows(hs, k);
        let modes: Vec<usize> = (0..k).collect();
        let onehot = g.input(self.onehot(&modes));
        let dec = self.decode_vars(&mut g, hg_rep, hs_rep, onehot);
        let trajs = (0..k)
            .map(|z| {
                Trajectory::new(
                    dec.mean
                        .iter()
                        .map(|&m| {
                            let d = g.value(m).data();
                            LocalPoint::new(d[z * 2], d[z * 2 + 1])
                        })
                        .collect(),
                )
            })
            .collect();
        Ok((prior, trajs))
    }

    /// Argmax mode of the prior and its decoded means, per sample.
    pub fn infer_modes(&self, samples: &[&Sample]) -> Result<Vec<(usize, Trajectory)>, ModelError> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::new(&self.config, samples, false)?;
        let mut g = Graph::with_params(&self.store);
        let (hg, hs) = self.embed(&mut g, &batch);
        let lp = self.prior_log_probs(&mut g, hg, hs);
        let k = self.config.modes;
        let modes: Vec<usize> = g
            .value(lp)
            .data()
            .chunks(k)
            .map(|row| probs_of(row).argmax())
            .collect();
        let onehot = g.input(self.onehot(&modes));
        let dec = self.decode_vars(&mut g, hg, hs, onehot);
        Ok(modes
            .iter()
            .enumerate()
            .map(|(r, &z)| {
                let pts = dec
                    .mean
                    .iter()
                    .map(|&m| {
                        let d = g.value(m).data();
                        LocalPoint::new(d[r * 2], d[r * 2 + 1])
                    })
                    .collect();
                (z, Trajectory::new(pts))
            })
            .collect())
    }

    pub fn infer(&self, sample: &Sample) -> Result<Trajectory, ModelError> {
        Ok(self.infer_modes(&[sample])?.remove(0).1)
    }

    /// Inference over many samples, split across `threads` workers.
    /// Results keep input order and do not depend on `threads`.
    pub fn infer_many(&self, samples: &[&Sample], threads: usize) -> Result<Vec<Trajectory>, ModelError> {
        let threads = threads.max(1);
        if threads == 1 || samples.len() < 2 {
            return samples.iter().map(|s| self.infer(s)).collect();
        }
        let chunk = samples.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Trajectory>, ModelError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.infer(s)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inference worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    // -- checkpoints -----------------------------------------------------

    pub fn to_checkpoint(&self, epochs_trained: usize) -> Vec<u8> {
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
            "epochs_trained": epochs_trained,
        });
        encode_checkpoint(&self.store, &meta.to_string(), DType::F64)
    }

    /// Rebuild a model from checkpoint bytes; returns it with the epoch count.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, usize), ModelError> {
        let (store, meta) = decode_checkpoint(bytes)?;
        let meta: serde_json::Value =
            serde_json::from_str(&meta).map_err(|e| ModelError::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(ModelError::Checkpoint("not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad config: {e}")))?;
        let epochs = meta.get("epochs_trained").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let mut model = Self::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, architecture has {}",
                store.len(),
                model.store.len()
            )));
        }
        for (_, name, t) in store.iter() {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
            let dst = model.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok((model, epochs))
    }

    pub fn save(&self, path: &Path, epochs_trained: usize) -> Result<(), ModelError> {
        std::fs::write(path, self.to_checkpoint(epochs_trained))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, usize), ModelError> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

fn probs_of(log_probs: &[f64]) -> Categorical {
    Categorical::from_logits(log_probs)
}

/// Minibatch Adam over the objective. `on_epoch` runs after every epoch and
/// may return `false` to stop early.
pub fn train(
    model: &mut CvaeModel,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &CvaeModel) -> Result<bool, ModelError>,
) -> Result<Vec<EpochLog>, ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for (index, s) in samples.iter().enumerate() {
        Batch::new(&model.config, &[s], true).map_err(|e| match e {
            ModelError::Shape { message, .. } => ModelError::Shape { index, message },
            other => other,
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::new(&model.config, &refs, true)?;
            let grads = {
                let mut g = Graph::with_params(&model.store);
                let lv = model.build_loss(&mut g, &batch);
                let total = g.value(lv.total).item();
                if !total.is_finite() {
                    return Err(ModelError::NonFinite {
                        epoch,
                        batch: bi,
                        samples: idx.to_vec(),
                    });
                }
                let sum = |v: Var| g.value(v).data().iter().sum::<f64>();
                sums[0] += total * batch.size as f64;
                sums[1] += sum(lv.recon);
                sums[2] += sum(lv.kl);
                sums[3] += sum(lv.mse);
                g.backward(lv.total)?.into_param_grads()
            };
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(ModelError::NonFinite {
                    epoch,
                    batch: bi,
                    samples: idx.to_vec(),
                });
            }
            adam.step(&mut model.store, &grads);
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            total: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            mse: sums[3] / n,
        };
        log::debug!(
            "epoch {epoch}: total {:.4} recon {:.4} kl {:.4} mse {:.4}",
            entry.total,
            entry.recon,
            entry.kl,
            entry.mse
        );
        log.push(entry);
        if !on_epoch(&entry, model)? {
            break;
        }
    }
    Ok(log)
}

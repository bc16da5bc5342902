//! The alternating optimize/re-cluster training loop.
//!
//! One epoch is one full-batch Adam step on the joint objective, with the
//! diagonal masks re-applied as a projection after every update. Every `T`
//! epochs the affinity is rebuilt and spectral clustering refreshes the
//! pseudo-label matrix `Q`, which starts out all-zero (so the membership
//! regularizer contributes nothing until the first clustering). Training
//! stops after `max_iter` epochs, optionally extended in `T`-epoch rounds
//! until two consecutive clusterings agree exactly (hard-capped at
//! `3 * max_iter`). The final clustering always comes from the terminal
//! affinity, whether or not `max_iter` is a multiple of `T`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::datasets::SampleSet;
use crate::error::{Error, Result};
use crate::network::{
    backward_full_regularized, backward_pretrain, forward_full_regularized,
    forward_pretrain_cached, init_params, read_model, write_model, ArchitectureSpec, ModelParams,
};
use crate::selfexpress::{CRegularizer, LossBreakdown, LossWeights, MembershipMatrix};
use crate::spectral::{build_affinity, clustering_error, spectral_cluster, ClusteringResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub c_regularizer: CRegularizer,
    /// Epochs between membership refreshes (`T`).
    pub t_update: usize,
    /// Total training epochs.
    pub max_iter: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    /// Pretraining stops early once the relative loss decrease over
    /// `pretrain_plateau_window` epochs falls below this.
    pub pretrain_plateau_tol: f64,
    pub pretrain_plateau_window: usize,
    /// Keep running `T`-epoch rounds past `max_iter` until two consecutive
    /// clusterings agree (capped at `3 * max_iter`).
    pub stabilize: bool,
    /// Hold every `D^l` at zero (single-connection ablations).
    pub freeze_d: bool,
}

impl TrainConfig {
    pub fn new(weights: LossWeights, t_update: usize, max_iter: usize, seed: u64) -> Self {
        Self {
            weights,
            c_regularizer: CRegularizer::MembershipL1,
            t_update,
            max_iter,
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            pretrain_epochs: 2000,
            pretrain_plateau_tol: 1e-5,
            pretrain_plateau_window: 100,
            stabilize: false,
            freeze_d: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_update == 0 {
            return Err(Error::InvalidArgument("T must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates for every tensor in
/// [`ModelParams::flat_tensors_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &mut ModelParams) -> Self {
        let sizes: Vec<usize> = params.flat_tensors_mut().iter().map(|t| t.len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &[&[f64]], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        let slots = params.flat_tensors_mut();
        debug_assert_eq!(slots.len(), grads.len());
        for ((slot, grad), (m, v)) in slots
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..slot.len() {
                let g = grad[i];
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                slot[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Mutable snapshot of a training run; checkpointable and resumable.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub params: ModelParams,
    pub q: MembershipMatrix,
    pub loss_history: Vec<LossBreakdown>,
    /// `(epoch, labels)` for every membership refresh.
    pub q_update_history: Vec<(usize, Vec<usize>)>,
    pub opt: AdamState,
    pub finished: bool,
}

impl TrainState {
    pub fn fresh(mut params: ModelParams, k: usize) -> Self {
        let n = params.n();
        let opt = AdamState::new(&mut params);
        Self {
            epoch: 0,
            params,
            q: MembershipMatrix::zeros(n, k),
            loss_history: Vec::new(),
            q_update_history: Vec::new(),
            opt,
            finished: false,
        }
    }
}

/// Per-epoch observer hooks; all optional.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one CSV row per epoch:
    /// `epoch,recon,exp,lc,ld,total,q_updated`.
    pub loss_csv: Option<&'a mut dyn Write>,
    /// Write a checkpoint here every `checkpoint_every` epochs.
    pub checkpoint_path: Option<&'a Path>,
    pub checkpoint_every: usize,
    /// Invoked after every epoch with the updated state.
    pub inspect: Option<&'a mut dyn FnMut(&TrainState)>,
}

impl TrainHooks<'_> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Deterministic per-epoch seed for the clustering refresh (splitmix64 over
/// the run seed and the epoch index).
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of the reconstruction-only pretraining stage.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub loss_history: Vec<f64>,
    /// Set when a non-finite loss aborted the stage; `params` then hold the
    /// last finite epoch.
    pub aborted_nonfinite: bool,
}

/// Trains encoder and decoder on the reconstruction loss with every
/// connection shortcut to identity. The connection matrices stay at their
/// initialization.
pub fn pretrain(x: &SampleSet, arch: &ArchitectureSpec, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let params = init_params(arch, x.n(), cfg.seed)?;
    pretrain_params(x, params, cfg)
}

/// [`pretrain`] starting from existing parameters.
pub fn pretrain_params(
    x: &SampleSet,
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let tensor = x.tensor();
    let mut opt = AdamState::new(&mut params);
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    let mut snapshot = (params.encoder.clone(), params.decoder.clone());
    for _ in 0..cfg.pretrain_epochs {
        let fwd = forward_pretrain_cached(&tensor, &params)?;
        if !fwd.recon.is_finite() {
            params.encoder = snapshot.0;
            params.decoder = snapshot.1;
            return Ok(PretrainOutcome {
                params,
                loss_history: history,
                aborted_nonfinite: true,
            });
        }
        snapshot = (params.encoder.clone(), params.decoder.clone());
        let grads = backward_pretrain(&tensor, &params, &fwd)?;
        opt.apply(&mut params, &grads.flat_tensors(), cfg);
        history.push(fwd.recon);

        let w = cfg.pretrain_plateau_window;
        if w > 0 && history.len() > w {
            let then = history[history.len() - 1 - w];
            let now = *history.last().unwrap();
            if (then - now) / then.abs().max(1.0) < cfg.pretrain_plateau_tol {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        params,
        loss_history: history,
        aborted_nonfinite: false,
    })
}

/// Runs the alternating loop from fresh state (`Q` all-zero).
pub fn train(
    x: &SampleSet,
    cfg: &TrainConfig,
    initial_params: ModelParams,
    hooks: &mut TrainHooks,
) -> Result<(ClusteringResult, TrainState)> {
    cfg.validate()?;
    if initial_params.n() != x.n() {
        return Err(Error::Shape(format!(
            "parameters sized for {} samples but the dataset has {}",
            initial_params.n(),
            x.n()
        )));
    }
    if x.k < 2 {
        return Err(Error::InvalidArgument(
            "clustering needs at least 2 classes".into(),
        ));
    }
    let state = TrainState::fresh(initial_params, x.k);
    train_loop(x, cfg, state, hooks)
}

/// Continues a checkpointed run; a finished state is returned unchanged
/// apart from its (re-derived) terminal clustering.
pub fn continue_training(
    x: &SampleSet,
    cfg: &TrainConfig,
    state: TrainState,
    hooks: &mut TrainHooks,
) -> Result<(ClusteringResult, TrainState)> {
    cfg.validate()?;
    train_loop(x, cfg, state, hooks)
}

fn q_is_stable(state: &TrainState) -> bool {
    let len = state.q_update_history.len();
    if len < 2 {
        return false;
    }
    let (_, ref a) = state.q_update_history[len - 2];
    let (_, ref b) = state.q_update_history[len - 1];
    matches!(clustering_error(a, b), Ok(err) if err == 0.0)
}

fn train_loop(
    x: &SampleSet,
    cfg: &TrainConfig,
    mut state: TrainState,
    hooks: &mut TrainHooks,
) -> Result<(ClusteringResult, TrainState)> {
    let tensor = x.tensor();
    let hard_cap = cfg.max_iter.saturating_mul(3);

    if let Some(csv) = hooks.loss_csv.as_deref_mut() {
        if state.epoch == 0 {
            writeln!(csv, "epoch,recon,exp,lc,ld,total,q_updated")
                .map_err(|e| Error::Format(format!("loss stream write failed: {e}")))?;
        }
    }

    while !state.finished {
        if state.epoch >= cfg.max_iter {
            if !cfg.stabilize || q_is_stable(&state) || state.epoch >= hard_cap {
                break;
            }
        }
        state.epoch += 1;
        let epoch = state.epoch;

        let fwd = forward_full_regularized(
            &tensor,
            &state.params,
            &state.q,
            &cfg.weights,
            cfg.c_regularizer,
        )?;
        if !fwd.breakdown.is_finite() {
            let b = fwd.breakdown;
            return Err(Error::Diverged {
                epoch,
                reason: format!(
                    "recon={:.3e} exp={:.3e} lc={:.3e} ld={:.3e}",
                    b.recon, b.exp, b.lc, b.ld
                ),
            });
        }
        let mut grads = backward_full_regularized(
            &tensor,
            &state.params,
            &state.q,
            &cfg.weights,
            cfg.c_regularizer,
            &fwd,
        )?;
        if cfg.freeze_d {
            grads.zero_distinctive();
        }
        state.opt.apply(&mut state.params, &grads.flat_tensors(), cfg);
        state.params.selfexpr.mask_diagonal();
        state.loss_history.push(fwd.breakdown);

        let mut q_updated = false;
        if epoch % cfg.t_update == 0 {
            let affinity = build_affinity(&state.params.selfexpr);
            match spectral_cluster(&affinity, x.k, epoch_seed(cfg.seed, epoch)) {
                Ok(result) => {
                    state.q = result.q.clone();
                    state.q_update_history.push((epoch, result.labels));
                    q_updated = true;
                }
                Err(_) => {
                    // Keep the previous membership; the refresh retries in
                    // T epochs.
                }
            }
        }

        if let Some(csv) = hooks.loss_csv.as_deref_mut() {
            let b = fwd.breakdown;
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                epoch, b.recon, b.exp, b.lc, b.ld, b.total, q_updated as u8
            )
            .map_err(|e| Error::Format(format!("loss stream write failed: {e}")))?;
        }
        if let Some(path) = hooks.checkpoint_path {
            if hooks.checkpoint_every > 0 && epoch % hooks.checkpoint_every == 0 {
                save_checkpoint(&state, cfg, path)?;
            }
        }
        if let Some(inspect) = hooks.inspect.as_deref_mut() {
            inspect(&state);
        }
    }

    let affinity = build_affinity(&state.params.selfexpr);
    let result = spectral_cluster(&affinity, x.k, epoch_seed(cfg.seed, state.epoch))?;
    state.q = result.q.clone();
    state.finished = true;
    if let Some(path) = hooks.checkpoint_path {
        save_checkpoint(&state, cfg, path)?;
    }
    Ok((result, state))
}

const CKPT_MAGIC: &[u8; 8] = b"MLRDSCK1";
const CKPT_VERSION: u8 = 1;

fn reg_tag(reg: CRegularizer) -> u8 {
    match reg {
        CRegularizer::MembershipL1 => 0,
        CRegularizer::PlainL1 => 1,
        CRegularizer::SquaredFrobenius => 2,
        CRegularizer::GroupedL2 => 3,
    }
}

fn reg_from_tag(tag: u8) -> Result<CRegularizer> {
    Ok(match tag {
        0 => CRegularizer::MembershipL1,
        1 => CRegularizer::PlainL1,
        2 => CRegularizer::SquaredFrobenius,
        3 => CRegularizer::GroupedL2,
        other => return Err(Error::Format(format!("unknown regularizer tag {other}"))),
    })
}

/// Serializes the entire run: configuration, epoch, model, membership,
/// optimizer moments, and histories. Resuming from this is bit-compatible
/// with an uninterrupted run.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    binio::write_magic(&mut w, CKPT_MAGIC, CKPT_VERSION)?;

    binio::write_f64(&mut w, cfg.weights.lambda1)?;
    binio::write_f64(&mut w, cfg.weights.lambda2)?;
    binio::write_f64(&mut w, cfg.weights.lambda3)?;
    binio::write_u8(&mut w, reg_tag(cfg.c_regularizer))?;
    binio::write_usize(&mut w, cfg.t_update)?;
    binio::write_usize(&mut w, cfg.max_iter)?;
    binio::write_f64(&mut w, cfg.lr)?;
    binio::write_f64(&mut w, cfg.adam_beta1)?;
    binio::write_f64(&mut w, cfg.adam_beta2)?;
    binio::write_f64(&mut w, cfg.adam_eps)?;
    binio::write_u64(&mut w, cfg.seed)?;
    binio::write_usize(&mut w, cfg.pretrain_epochs)?;
    binio::write_f64(&mut w, cfg.pretrain_plateau_tol)?;
    binio::write_usize(&mut w, cfg.pretrain_plateau_window)?;
    binio::write_u8(&mut w, cfg.stabilize as u8)?;
    binio::write_u8(&mut w, cfg.freeze_d as u8)?;

    binio::write_usize(&mut w, state.epoch)?;
    binio::write_u8(&mut w, state.finished as u8)?;
    write_model(&mut w, &state.params, cfg.seed)?;

    binio::write_usize(&mut w, state.q.k())?;
    if state.q.is_zero() {
        binio::write_u8(&mut w, 0)?;
    } else {
        binio::write_u8(&mut w, 1)?;
        let labels: Vec<i32> = state.q.labels().iter().map(|&l| l as i32).collect();
        binio::write_i32_slice(&mut w, &labels)?;
    }

    binio::write_u64(&mut w, state.opt.step)?;
    binio::write_usize(&mut w, state.opt.m.len())?;
    for (m, v) in state.opt.m.iter().zip(state.opt.v.iter()) {
        binio::write_f64_slice(&mut w, m)?;
        binio::write_f64_slice(&mut w, v)?;
    }

    binio::write_usize(&mut w, state.loss_history.len())?;
    for b in &state.loss_history {
        binio::write_f64(&mut w, b.recon)?;
        binio::write_f64(&mut w, b.exp)?;
        binio::write_f64(&mut w, b.lc)?;
        binio::write_f64(&mut w, b.ld)?;
        binio::write_f64(&mut w, b.total)?;
    }
    binio::write_usize(&mut w, state.q_update_history.len())?;
    for (epoch, labels) in &state.q_update_history {
        binio::write_usize(&mut w, *epoch)?;
        let labels: Vec<i32> = labels.iter().map(|&l| l as i32).collect();
        binio::write_i32_slice(&mut w, &labels)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint; returns the state and the configuration it was
/// written under.
pub fn resume(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let version = binio::read_magic(&mut r, CKPT_MAGIC)?;
    binio::expect_version(version, CKPT_VERSION)?;

    let lambda1 = binio::read_f64(&mut r)?;
    let lambda2 = binio::read_f64(&mut r)?;
    let lambda3 = binio::read_f64(&mut r)?;
    let weights = LossWeights::new(lambda1, lambda2, lambda3)
        .map_err(|_| Error::Format("checkpoint carries non-positive loss weights".into()))?;
    let c_regularizer = reg_from_tag(binio::read_u8(&mut r)?)?;
    let t_update = binio::read_usize(&mut r)?;
    let max_iter = binio::read_usize(&mut r)?;
    let lr = binio::read_f64(&mut r)?;
    let adam_beta1 = binio::read_f64(&mut r)?;
    let adam_beta2 = binio::read_f64(&mut r)?;
    let adam_eps = binio::read_f64(&mut r)?;
    let seed = binio::read_u64(&mut r)?;
    let pretrain_epochs = binio::read_usize(&mut r)?;
    let pretrain_plateau_tol = binio::read_f64(&mut r)?;
    let pretrain_plateau_window = binio::read_usize(&mut r)?;
    let stabilize = binio::read_u8(&mut r)? != 0;
    let freeze_d = binio::read_u8(&mut r)? != 0;
    let cfg = TrainConfig {
        weights,
        c_regularizer,
        t_update,
        max_iter,
        lr,
        adam_beta1,
        adam_beta2,
        adam_eps,
        seed,
        pretrain_epochs,
        pretrain_plateau_tol,
        pretrain_plateau_window,
        stabilize,
        freeze_d,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("checkpoint configuration invalid: {e}")))?;

    let epoch = binio::read_usize(&mut r)?;
    let finished = binio::read_u8(&mut r)? != 0;
    let (params, _) = read_model(&mut r)?;
    let n = params.n();

    let k = binio::read_usize(&mut r)?;
    let q = match binio::read_u8(&mut r)? {
        0 => MembershipMatrix::zeros(n, k),
        1 => {
            let labels = binio::read_i32_vec(&mut r)?;
            if labels.len() != n {
                return Err(Error::Format(format!(
                    "checkpoint holds {} membership labels for {n} samples",
                    labels.len()
                )));
            }
            let labels: Vec<usize> = labels
                .into_iter()
                .map(|l| {
                    usize::try_from(l)
                        .map_err(|_| Error::Format(format!("negative label {l}")))
                })
                .collect::<Result<_>>()?;
            MembershipMatrix::from_labels(&labels, k)?
        }
        other => return Err(Error::Format(format!("unknown membership tag {other}"))),
    };

    let step = binio::read_u64(&mut r)?;
    let slots = binio::read_usize(&mut r)?;
    let mut m = Vec::with_capacity(slots);
    let mut v = Vec::with_capacity(slots);
    for _ in 0..slots {
        m.push(binio::read_f64_vec(&mut r)?);
        v.push(binio::read_f64_vec(&mut r)?);
    }
    let opt = AdamState { step, m, v };
    {
        let mut probe = params.clone();
        let expected: Vec<usize> = probe.flat_tensors_mut().iter().map(|t| t.len()).collect();
        if expected.len() != opt.m.len()
            || expected
                .iter()
                .zip(opt.m.iter())
                .any(|(&len, m)| m.len() != len)
        {
            return Err(Error::Format(
                "optimizer state does not match model tensors".into(),
            ));
        }
    }

    let losses = binio::read_usize(&mut r)?;
    let mut loss_history = Vec::with_capacity(losses.min(1 << 20));
    for _ in 0..losses {
        let recon = binio::read_f64(&mut r)?;
        let exp = binio::read_f64(&mut r)?;
        let lc = binio::read_f64(&mut r)?;
        let ld = binio::read_f64(&mut r)?;
        let total = binio::read_f64(&mut r)?;
        loss_history.push(LossBreakdown {
            recon,
            exp,
            lc,
            ld,
            total,
        });
    }
    let updates = binio::read_usize(&mut r)?;
    let mut q_update_history = Vec::with_capacity(updates.min(1 << 20));
    for _ in 0..updates {
        let epoch = binio::read_usize(&mut r)?;
        let labels = binio::read_i32_vec(&mut r)?;
        let labels: Vec<usize> = labels
            .into_iter()
            .map(|l| usize::try_from(l).map_err(|_| Error::Format(format!("negative label {l}"))))
            .collect::<Result<_>>()?;
        q_update_history.push((epoch, labels));
    }

    Ok((
        TrainState {
            epoch,
            params,
            q,
            loss_history,
            q_update_history,
            opt,
            finished,
        },
        cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_union_of_subspaces, SyntheticSpec};
    use crate::network::{ArchitectureSpec, ConnectionScheme, ConvLayerSpec};

    fn tiny_set(n_per: usize) -> SampleSet {
        synth_union_of_subspaces(&SyntheticSpec {
            k: 3,
            ambient_dim: 30,
            subspace_dim: 2,
            points_per_subspace: n_per,
            noise_sigma: 0.01,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_arch() -> ArchitectureSpec {
        ArchitectureSpec::new(
            vec![ConvLayerSpec::new(3, 3), ConvLayerSpec::new(4, 3)],
            (6, 5, 1),
            ConnectionScheme::MultiLevel,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(
            LossWeights::new(1.0, 1.0, 1.0).unwrap(),
            20,
            60,
            5,
        );
        cfg.pretrain_epochs = 50;
        cfg
    }

    #[test]
    fn zero_pretrain_epochs_leave_params_at_init() {
        let set = tiny_set(12);
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 0;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let outcome = pretrain(&set, &tiny_arch(), &cfg).unwrap();
        assert_eq!(outcome.params, init);
        assert!(outcome.loss_history.is_empty());
    }

    #[test]
    fn pretraining_reduces_reconstruction_loss() {
        let set = tiny_set(12);
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 300;
        let outcome = pretrain(&set, &tiny_arch(), &cfg).unwrap();
        assert!(!outcome.aborted_nonfinite);
        let first = outcome.loss_history[0];
        let last = *outcome.loss_history.last().unwrap();
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 40;
        let a = pretrain(&set, &tiny_arch(), &cfg).unwrap();
        let b = pretrain(&set, &tiny_arch(), &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn q_updates_land_exactly_on_multiples_of_t() {
        let set = tiny_set(12);
        let cfg = tiny_cfg();
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let (_, state) = train(&set, &cfg, init, &mut TrainHooks::none()).unwrap();
        let epochs: Vec<usize> = state.q_update_history.iter().map(|(e, _)| *e).collect();
        assert_eq!(epochs, vec![20, 40, 60]);
        assert_eq!(state.epoch, 60);
        assert!(state.finished);
    }

    #[test]
    fn t_larger_than_max_iter_defers_clustering_to_termination() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.t_update = 1000;
        cfg.max_iter = 15;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let (result, state) = train(&set, &cfg, init, &mut TrainHooks::none()).unwrap();
        assert!(state.q_update_history.is_empty());
        assert_eq!(result.labels.len(), set.n());
        // lc stays zero the whole run because Q never leaves its zero state.
        assert!(state.loss_history.iter().all(|b| b.lc == 0.0));
    }

    #[test]
    fn masks_hold_after_every_epoch() {
        let set = tiny_set(12);
        let mut cfg = tiny_cfg();
        cfg.max_iter = 25;
        cfg.t_update = 10;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let mut violations = 0usize;
        let mut inspect = |state: &TrainState| {
            let p = &state.params.selfexpr;
            for i in 0..p.n() {
                if p.c[[i, i]] != 0.0 || p.d.iter().any(|d| d[[i, i]] != 0.0) {
                    violations += 1;
                }
            }
        };
        let mut hooks = TrainHooks {
            inspect: Some(&mut inspect),
            ..TrainHooks::none()
        };
        train(&set, &cfg, init, &mut hooks).unwrap();
        assert_eq!(violations, 0);
    }

    #[test]
    fn lc_is_zero_until_first_q_update() {
        let set = tiny_set(12);
        let cfg = tiny_cfg();
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let (_, state) = train(&set, &cfg, init, &mut TrainHooks::none()).unwrap();
        for b in &state.loss_history[..cfg.t_update] {
            assert_eq!(b.lc, 0.0);
        }
        // After the first refresh the membership is one-hot, so the
        // regularizer sees the full l1 mass of C (generically nonzero).
        assert!(state.loss_history[cfg.t_update..].iter().any(|b| b.lc > 0.0));
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.max_iter = 30;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let (_, s1) = train(&set, &cfg, init.clone(), &mut TrainHooks::none()).unwrap();
        let (_, s2) = train(&set, &cfg, init, &mut TrainHooks::none()).unwrap();
        assert_eq!(s1.loss_history.len(), s2.loss_history.len());
        for (a, b) in s1.loss_history.iter().zip(s2.loss_history.iter()) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn resume_continues_bit_compatibly() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.max_iter = 20;
        cfg.t_update = 7;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();

        // Uninterrupted reference run.
        let (_, full) = train(&set, &cfg, init.clone(), &mut TrainHooks::none()).unwrap();

        // Interrupted run: checkpoint at epoch 10, resume, finish.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        let mut cfg_half = cfg;
        cfg_half.max_iter = 10;
        let (_, half) = train(&set, &cfg_half, init, &mut TrainHooks::none()).unwrap();
        let mut half_state = half;
        half_state.finished = false;
        save_checkpoint(&half_state, &cfg, &ckpt).unwrap();

        let (loaded, loaded_cfg) = resume(&ckpt).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let (_, resumed) = continue_training(&set, &cfg, loaded, &mut TrainHooks::none()).unwrap();

        assert_eq!(resumed.loss_history.len(), full.loss_history.len());
        for (a, b) in resumed.loss_history.iter().zip(full.loss_history.iter()) {
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "loss history diverged");
        }
        for (a, b) in resumed
            .params
            .selfexpr
            .c
            .iter()
            .zip(full.params.selfexpr.c.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits(), "parameters diverged");
        }
    }

    #[test]
    fn resume_of_finished_run_is_a_no_op() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.max_iter = 12;
        cfg.t_update = 6;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("done.ckpt");
        let mut hooks = TrainHooks {
            checkpoint_path: Some(&ckpt),
            ..TrainHooks::none()
        };
        let (result, state) = train(&set, &cfg, init, &mut hooks).unwrap();
        let (loaded, loaded_cfg) = resume(&ckpt).unwrap();
        assert!(loaded.finished);
        let (result2, state2) =
            continue_training(&set, &loaded_cfg, loaded, &mut TrainHooks::none()).unwrap();
        assert_eq!(state2.epoch, state.epoch);
        assert_eq!(result2.labels, result.labels);
        assert_eq!(state2.loss_history.len(), state.loss_history.len());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"garbage header").unwrap();
        assert!(matches!(resume(&path), Err(Error::Format(_))));
    }

    #[test]
    fn divergence_reports_epoch_and_magnitudes() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.max_iter = 50;
        // Overflowing weights drive the squared reconstruction error to
        // infinity on the first forward pass.
        let mut init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        init.encoder[0].weight.fill(1e200);
        match train(&set, &cfg, init, &mut TrainHooks::none()) {
            Err(Error::Diverged { epoch, reason }) => {
                assert_eq!(epoch, 1);
                assert!(reason.contains("recon="), "{reason}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn loss_csv_stream_has_header_and_rows() {
        let set = tiny_set(10);
        let mut cfg = tiny_cfg();
        cfg.max_iter = 8;
        cfg.t_update = 4;
        let init = init_params(&tiny_arch(), set.n(), cfg.seed).unwrap();
        let mut buf: Vec<u8> = Vec::new();
        let mut hooks = TrainHooks {
            loss_csv: Some(&mut buf),
            ..TrainHooks::none()
        };
        train(&set, &cfg, init, &mut hooks).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,recon,exp,lc,ld,total,q_updated");
        assert_eq!(lines.len(), 9);
        assert!(lines[4].ends_with(",1"), "epoch 4 should flag a Q update");
        assert!(lines[1].ends_with(",0"));
    }
}

//! SGD training loop for the sibling, TSD and TSD+PC objectives.
//!
//! One optimizer step per batch of scenes: every scene contributes a fresh
//! jittered proposal set (the stand-in for a proposal network), per-scene
//! head outputs are concatenated into one batch-level proposal set, and the
//! mode's loss terms are averaged over that set. Training is deterministic
//! in the seed: graph execution is single-threaded and all randomness
//! (shuffling, jitter, flips) derives from per-(seed, epoch, scene) streams.
//!
//! The update rule is `v ← momentum·v + g + weight_decay·p; p ← p − lr·v`
//! with a linear warmup over the first epoch and step decays (×0.1) at the
//! configured epochs.

use crate::checkpoint::Snapshot;
use crate::heads::{pool_feature_rows, sibling_forward_rows, tsd_forward_rows};
use crate::losses::{
    assign_labels, cls_loss, loc_loss, total_loss, BatchOutputs, LabeledProposal, LossBreakdown,
    PcConfig,
};
use crate::model::{Detector, ModelConfig, TrainMode};
use crate::synth::{jitter_proposals, scene_seed, JitterConfig, Scene};
use crate::tensor::{ParamSet, Tape, Var};
use crate::{Error, Real, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: Real,
    pub warmup_start_lr: Real,
    /// Epochs of linear warmup from `warmup_start_lr` to `base_lr`.
    pub warmup_epochs: usize,
    /// Zero-based epochs at which the rate drops by 10.
    pub decay_epochs: Vec<usize>,
    pub momentum: Real,
    pub weight_decay: Real,
    pub pc: PcConfig,
    pub mode: TrainMode,
    pub seed: u64,
    /// Jittered proposals per ground truth (an equal count of background
    /// boxes is added).
    pub n_per_gt: usize,
    pub max_proposals_per_image: usize,
    /// Cap on the positive share of the sampled set.
    pub positive_fraction: Real,
    pub hflip: bool,
    pub assign_iou: Real,
    pub jitter: JitterConfig,
}

impl TrainConfig {
    /// Desk-scale defaults preserving the reference schedule shape: warmup
    /// for one epoch, decays at 60% and 85% of the run.
    pub fn desk_default(mode: TrainMode, seed: u64) -> Self {
        let epochs = 20;
        TrainConfig {
            epochs,
            batch_size: 8,
            base_lr: 0.01,
            warmup_start_lr: 0.01 / 32.0,
            warmup_epochs: 1,
            decay_epochs: vec![epochs * 60 / 100, epochs * 85 / 100],
            momentum: 0.9,
            weight_decay: 1e-4,
            pc: PcConfig::default(),
            mode,
            seed,
            n_per_gt: 8,
            max_proposals_per_image: 128,
            positive_fraction: 0.25,
            hflip: true,
            assign_iou: 0.5,
            jitter: JitterConfig::default(),
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        let mut decays = vec![epochs * 60 / 100, epochs * 85 / 100];
        decays.retain(|&d| d > 0 && d < epochs);
        decays.dedup();
        self.decay_epochs = decays;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_start_lr >= self.base_lr {
            return Err(Error::Config(format!(
                "warmup_start_lr {} must be below base_lr {}",
                self.warmup_start_lr, self.base_lr
            )));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".to_string()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_per_gt == 0 {
            return Err(Error::Config("epochs, batch_size, n_per_gt must be positive".to_string()));
        }
        Ok(())
    }
}

/// Momentum buffers aligned with a parameter set.
pub struct SgdState {
    velocity: Vec<Vec<Real>>,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        SgdState { velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect() }
    }
}

/// `v ← momentum·v + g + weight_decay·p; p ← p − lr·v`. A non-finite
/// gradient aborts with the parameter name and step index.
pub fn sgd_step(
    params: &mut ParamSet,
    state: &mut SgdState,
    lr: Real,
    momentum: Real,
    weight_decay: Real,
    step: usize,
) -> Result<()> {
    for (param, vel) in params.iter_mut().zip(&mut state.velocity) {
        for ((p, g), v) in param.data.iter_mut().zip(&param.grad).zip(vel.iter_mut()) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { param: param.name.clone(), step });
            }
            *v = momentum * *v + *g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Learning rate at a global step: linear warmup from `warmup_start_lr` to
/// `base_lr` across the warmup epochs, then `base_lr · 0.1^(decays passed)`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> Real {
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    if warmup_steps > 0 && step < warmup_steps {
        let t = step as Real / warmup_steps as Real;
        return cfg.warmup_start_lr + t * (cfg.base_lr - cfg.warmup_start_lr);
    }
    let epoch = step / steps_per_epoch.max(1);
    let drops = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr * (0.1 as Real).powi(drops as i32)
}

/// One epoch's averaged loss components. Serialized as JSON lines in field
/// order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lcls: Real,
    pub lloc: Real,
    pub ldcls: Real,
    pub ldloc: Real,
    pub mcls: Real,
    pub mloc: Real,
    pub lr: Real,
}

pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub struct TrainResult {
    pub snapshot: Snapshot,
    pub metrics: Vec<EpochMetrics>,
    pub mode: TrainMode,
    pub model: ModelConfig,
    /// Set when a non-finite loss aborted the run; the snapshot is then the
    /// last good epoch-end state.
    pub aborted_at: Option<(usize, usize)>,
}

struct SampledScene {
    labeled: Vec<LabeledProposal>,
}

/// Jitter, assign and sample proposals for one scene. Regenerates on batches
/// violating the "at least one positive and one negative" invariant.
fn sample_proposals(
    scene: &Scene,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<LabeledProposal>>> {
    let gts: Vec<_> = scene.instances.iter().map(|(b, _)| *b).collect();
    let (w, h) = (scene.width as Real, scene.height as Real);
    for _attempt in 0..20 {
        let proposals =
            jitter_proposals(&gts, cfg.n_per_gt, &cfg.jitter, w, h, rng);
        let labeled = assign_labels(&proposals, &scene.instances, cfg.assign_iou)?;
        let mut pos: Vec<LabeledProposal> =
            labeled.iter().copied().filter(|l| l.is_positive()).collect();
        let mut neg: Vec<LabeledProposal> =
            labeled.iter().copied().filter(|l| !l.is_positive()).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        pos.shuffle(rng);
        neg.shuffle(rng);
        let pos_cap =
            ((cfg.max_proposals_per_image as Real * cfg.positive_fraction) as usize).max(1);
        let mut pos_take = pos.len().min(pos_cap);
        let neg_take = neg.len().min(cfg.max_proposals_per_image - pos_take);
        // keep positives at no more than a quarter of the sampled set
        pos_take = pos_take.min((neg_take / 3).max(1));
        let mut selected = pos[..pos_take].to_vec();
        selected.extend_from_slice(&neg[..neg_take]);
        return Ok(Some(selected));
    }
    Ok(None)
}

/// Train a detector on the given scenes.
pub fn train(scenes: &[Scene], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("empty training corpus".to_string()));
    }
    let mut detector = Detector::new(model_cfg, cfg.mode, cfg.seed);
    let mut state = SgdState::new(&detector.params);
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let stride_inv = 1.0 / detector.stride();
    let head_cfg = model_cfg.head_config();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut last_good = detector.snapshot();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, 0x5u64 << 32 | epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let mut sums = LossBreakdown::default();
        let mut steps_in_epoch = 0usize;
        let mut last_lr = lr_at(step, steps_per_epoch, cfg);

        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = tape.bind(&detector.params);

            let mut labeled_all: Vec<LabeledProposal> = Vec::new();
            let mut sib_logits_parts: Vec<Var> = Vec::new();
            let mut sib_deltas_parts: Vec<Var> = Vec::new();
            let mut tsd_logits_parts: Vec<Var> = Vec::new();
            let mut tsd_deltas_parts: Vec<Var> = Vec::new();

            for &scene_idx in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(
                    cfg.seed,
                    0x7u64 << 32 | epoch as u64,
                    scene_idx as u64,
                ));
                let flipped;
                let scene: &Scene = if cfg.hflip && rng.gen_bool(0.5) {
                    flipped = scenes[scene_idx].hflip();
                    &flipped
                } else {
                    &scenes[scene_idx]
                };
                let Some(labeled) = sample_proposals(scene, cfg, &mut rng)? else {
                    continue;
                };

                let image = tape.constant(
                    scene.image.clone(),
                    vec![scene.height, scene.width, 3],
                );
                let map = detector.backbone.forward(&mut tape, &bound, image)?;
                let feat_props: Vec<_> =
                    labeled.iter().map(|l| l.bbox.scaled(stride_inv)).collect();
                let feat_rows = pool_feature_rows(&mut tape, map, &feat_props, &head_cfg)?;

                if cfg.mode.uses_sibling_branch() {
                    let (logits, deltas) =
                        sibling_forward_rows(&mut tape, &bound, &detector.head, feat_rows)?;
                    sib_logits_parts.push(logits);
                    sib_deltas_parts.push(deltas);
                }
                if cfg.mode.uses_tsd_branch() {
                    let tsd = tsd_forward_rows(
                        &mut tape,
                        &bound,
                        &detector.head,
                        map,
                        &feat_props,
                        feat_rows,
                    )?;
                    tsd_logits_parts.push(tsd.logits);
                    tsd_deltas_parts.push(tsd.deltas);
                }
                labeled_all.extend(labeled);
            }

            if labeled_all.is_empty() {
                continue;
            }

            let (loss, breakdown) = match cfg.mode {
                TrainMode::Sibling => {
                    let logits = tape.concat_rows(&sib_logits_parts)?;
                    let deltas = tape.concat_rows(&sib_deltas_parts)?;
                    let lcls = cls_loss(&mut tape, logits, &labeled_all, model_cfg.num_classes)?;
                    let lloc = loc_loss(&mut tape, deltas, &labeled_all)?;
                    let loss = tape.add(lcls, lloc)?;
                    let breakdown = LossBreakdown {
                        lcls: tape.scalar_value(lcls),
                        lloc: tape.scalar_value(lloc),
                        ..Default::default()
                    };
                    (loss, breakdown)
                }
                TrainMode::Tsd => {
                    let logits = tape.concat_rows(&tsd_logits_parts)?;
                    let deltas = tape.concat_rows(&tsd_deltas_parts)?;
                    let ldcls = cls_loss(&mut tape, logits, &labeled_all, model_cfg.num_classes)?;
                    let ldloc = loc_loss(&mut tape, deltas, &labeled_all)?;
                    let loss = tape.add(ldcls, ldloc)?;
                    let breakdown = LossBreakdown {
                        ldcls: tape.scalar_value(ldcls),
                        ldloc: tape.scalar_value(ldloc),
                        ..Default::default()
                    };
                    (loss, breakdown)
                }
                TrainMode::TsdPc => {
                    let outs = BatchOutputs {
                        sibling_logits: tape.concat_rows(&sib_logits_parts)?,
                        sibling_deltas: tape.concat_rows(&sib_deltas_parts)?,
                        tsd_logits: tape.concat_rows(&tsd_logits_parts)?,
                        tsd_deltas: tape.concat_rows(&tsd_deltas_parts)?,
                    };
                    let terms =
                        total_loss(&mut tape, &outs, &labeled_all, &cfg.pc, model_cfg.num_classes)?;
                    (terms.total, terms.breakdown)
                }
            };

            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Ok(TrainResult {
                    snapshot: last_good,
                    metrics,
                    mode: cfg.mode,
                    model: model_cfg.clone(),
                    aborted_at: Some((epoch, step)),
                });
            }

            tape.backward(loss)?;
            tape.export_grads(&bound, &mut detector.params);
            let lr = lr_at(step, steps_per_epoch, cfg);
            sgd_step(&mut detector.params, &mut state, lr, cfg.momentum, cfg.weight_decay, step)?;
            detector.params.zero_grads();

            sums.lcls += breakdown.lcls;
            sums.lloc += breakdown.lloc;
            sums.ldcls += breakdown.ldcls;
            sums.ldloc += breakdown.ldloc;
            sums.mcls += breakdown.mcls;
            sums.mloc += breakdown.mloc;
            steps_in_epoch += 1;
            last_lr = lr;
            step += 1;
        }

        let n = steps_in_epoch.max(1) as Real;
        metrics.push(EpochMetrics {
            epoch,
            lcls: sums.lcls / n,
            lloc: sums.lloc / n,
            ldcls: sums.ldcls / n,
            ldloc: sums.ldloc / n,
            mcls: sums.mcls / n,
            mloc: sums.mloc / n,
            lr: last_lr,
        });
        last_good = detector.snapshot();
    }

    Ok(TrainResult {
        snapshot: last_good,
        metrics,
        mode: cfg.mode,
        model: model_cfg.clone(),
        aborted_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    #[test]
    fn sgd_plain_gradient_descent_degeneracy() {
        let mut params = ParamSet::new();
        let id = params.add("x", vec![1], vec![2.0]);
        params.get_mut(id).grad[0] = 0.5;
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &mut state, 0.1, 0.0, 0.0, 0).unwrap();
        assert!((params.get(id).data[0] - 1.95).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_hand_recursion_on_square() {
        // f(x) = x², lr 0.1, momentum 0.9, from x = 1:
        //   g=2   → v=2,   x = 1 − 0.2  = 0.8
        //   g=1.6 → v=3.4, x = 0.8 − 0.34 = 0.46
        let mut params = ParamSet::new();
        let id = params.add("x", vec![1], vec![1.0]);
        let mut state = SgdState::new(&params);
        for expect in [0.8, 0.46] {
            let x = params.get(id).data[0];
            params.get_mut(id).grad[0] = 2.0 * x;
            sgd_step(&mut params, &mut state, 0.1, 0.9, 0.0, 0).unwrap();
            params.get_mut(id).grad[0] = 0.0;
            let got = params.get(id).data[0];
            assert!((got - expect).abs() < 1e-6, "got {got}, expected {expect}");
        }
    }

    #[test]
    fn sgd_non_finite_gradient_diagnoses_param_and_step() {
        let mut params = ParamSet::new();
        let id = params.add("layer.weight", vec![1], vec![1.0]);
        params.get_mut(id).grad[0] = Real::NAN;
        let mut state = SgdState::new(&params);
        let err = sgd_step(&mut params, &mut state, 0.1, 0.9, 0.0, 17).unwrap_err();
        match err {
            Error::NonFiniteGradient { param, step } => {
                assert_eq!(param, "layer.weight");
                assert_eq!(step, 17);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lr_schedule_boundaries() {
        let cfg = TrainConfig::desk_default(TrainMode::Sibling, 0);
        let spe = 10;
        assert_eq!(lr_at(0, spe, &cfg), cfg.warmup_start_lr);
        // end of warmup → base exactly
        assert!((lr_at(cfg.warmup_epochs * spe, spe, &cfg) - cfg.base_lr).abs() < 1e-9);
        // after first decay epoch (epoch 12 of 20) → base/10
        let step_in_decay = cfg.decay_epochs[0] * spe;
        assert!((lr_at(step_in_decay, spe, &cfg) - cfg.base_lr * 0.1).abs() < 1e-9);
        // after second decay → base/100
        let step2 = cfg.decay_epochs[1] * spe;
        assert!((lr_at(step2, spe, &cfg) - cfg.base_lr * 0.01).abs() < 1e-9);
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig::desk_default(TrainMode::Sibling, 0);
        let spe = 8;
        let mid = lr_at(4, spe, &cfg);
        let expect = cfg.warmup_start_lr + 0.5 * (cfg.base_lr - cfg.warmup_start_lr);
        assert!((mid - expect).abs() < 1e-9);
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            image_size: 128,
            feat_channels: 8,
            head_hidden: 32,
            pool_size: 3,
            samples_per_bin: 2,
            gamma: 0.1,
        }
    }

    fn tiny_train_cfg(mode: TrainMode, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk_default(mode, seed).with_epochs(2);
        cfg.batch_size = 4;
        cfg.n_per_gt = 3;
        cfg
    }

    #[test]
    fn training_smoke_all_modes_loss_components_logged() {
        let scenes: Vec<_> =
            (0..8u64).map(|i| generate_scene(1000 + i, 3).unwrap()).collect();
        for mode in [TrainMode::Sibling, TrainMode::Tsd, TrainMode::TsdPc] {
            let result = train(&scenes, &tiny_model(), &tiny_train_cfg(mode, 3)).unwrap();
            assert!(result.aborted_at.is_none());
            assert_eq!(result.metrics.len(), 2);
            for m in &result.metrics {
                for v in [m.lcls, m.lloc, m.ldcls, m.ldloc, m.mcls, m.mloc] {
                    assert!(v >= 0.0 && v.is_finite());
                }
                assert!(m.lr > 0.0);
            }
            // branch-appropriate terms are the active ones
            match mode {
                TrainMode::Sibling => assert!(result.metrics[0].lcls > 0.0),
                TrainMode::Tsd => {
                    assert!(result.metrics[0].ldcls > 0.0);
                    assert_eq!(result.metrics[0].lcls, 0.0);
                }
                TrainMode::TsdPc => {
                    assert!(result.metrics[0].lcls > 0.0);
                    assert!(result.metrics[0].ldcls > 0.0);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let scenes: Vec<_> =
            (0..6u64).map(|i| generate_scene(2000 + i, 3).unwrap()).collect();
        let cfg = tiny_train_cfg(TrainMode::TsdPc, 11);
        let a = train(&scenes, &tiny_model(), &cfg).unwrap();
        let b = train(&scenes, &tiny_model(), &cfg).unwrap();
        assert_eq!(metrics_to_jsonl(&a.metrics), metrics_to_jsonl(&b.metrics));
        assert_eq!(a.snapshot, b.snapshot);

        let c = train(&scenes, &tiny_model(), &tiny_train_cfg(TrainMode::TsdPc, 12)).unwrap();
        assert_ne!(metrics_to_jsonl(&a.metrics), metrics_to_jsonl(&c.metrics));
    }
}

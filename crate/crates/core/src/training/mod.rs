//! Optimization of the planner: loss, learning-rate schedule, gradient
//! clipping, Adam and the training loop with its run artifacts.

mod trainer;

pub use trainer::{
    displacements_from_waypoints, git_describe, train, train_records, EpochSummary, RunManifest, StepLog,
    TrainSummary, BEST_CHECKPOINT, FINAL_CHECKPOINT, RUN_MANIFEST, STEPS_CSV,
};

use ndarray::{ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingError;
use crate::model::{AblationFlags, ModelError, Params, Scalar};
use crate::scenario::ScenarioError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing embeddings for {id} in {dir} (run embed first or set no_instruction)")]
    MissingEmbeddings { id: String, dir: String },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero by default.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Seeds parameter initialization and the per-epoch shuffle.
    pub seed: u64,
    pub ablation: AblationFlags,
    /// Evaluate on the validation split after every epoch.
    pub validate_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 3,
            base_lr: 1e-4,
            warmup_start_lr: 1e-5,
            warmup_epochs: 1,
            min_lr: 5e-6,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            seed: 0,
            ablation: AblationFlags::default(),
            validate_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be positive".into());
        }
        if !(self.warmup_start_lr > 0.0 && self.warmup_start_lr <= self.base_lr) {
            return err(format!(
                "need 0 < warmup_start_lr ({}) <= base_lr ({})",
                self.warmup_start_lr, self.base_lr
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return err(format!("need 0 <= min_lr ({}) <= base_lr ({})", self.min_lr, self.base_lr));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return err(format!("invalid Adam settings {a:?}"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }
}

/// Mean of squared differences over all `B * T * 2` elements.
pub fn mse_loss(pred: &ArrayView3<f64>, gt: &ArrayView3<f64>) -> Result<f64, TrainError> {
    if pred.dim() != gt.dim() {
        return Err(TrainError::Shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    if pred.is_empty() {
        return Err(TrainError::Shape("empty batch".into()));
    }
    let mut sum = 0.0;
    Zip::from(pred).and(gt).for_each(|&p, &g| sum += (p - g) * (p - g));
    Ok(sum / pred.len() as f64)
}

/// Learning rate for optimizer step `step` (0-based).
///
/// Linear from `warmup_start_lr` at step 0 to `base_lr` at step
/// `warmup_epochs * steps_per_epoch`, then cosine from `base_lr` down to
/// `min_lr` at the final step `epochs * steps_per_epoch - 1`. Steps past the
/// end stay at `min_lr`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let last = (cfg.epochs * steps_per_epoch).saturating_sub(1);
    if step <= warm && warm > 0 {
        let t = step as f64 / warm as f64;
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t;
    }
    if last <= warm {
        return cfg.base_lr;
    }
    let t = ((step - warm) as f64 / (last - warm) as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global-norm clipping statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient (1 when not clipped).
    pub scale: f64,
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Fails, naming the parameter, if any gradient is not finite.
pub fn clip_gradients<F: Scalar, P: Params<F>>(grads: &mut P, clip_norm: f64) -> Result<ClipReport, TrainError> {
    let mut sq = 0.0f64;
    for (name, g) in grads.named() {
        for &v in g.iter() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: name });
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        let s = F::from_f64(scale).expect("finite scale");
        for (_, g) in grads.named_mut() {
            g.mapv_inplace(|v| v * s);
        }
        Ok(ClipReport { norm, scale })
    } else {
        Ok(ClipReport { norm, scale: 1.0 })
    }
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<P> {
    pub config: AdamConfig,
    m: P,
    v: P,
    t: u32,
}

impl<P> Adam<P> {
    pub fn steps_taken(&self) -> u32 {
        self.t
    }
}

impl<P: Clone> Adam<P> {
    pub fn new<F: Scalar>(params: &P, config: AdamConfig) -> Self
    where
        P: Params<F>,
    {
        Adam {
            config,
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }

    pub fn step<F: Scalar>(&mut self, params: &mut P, grads: &P, lr: f64)
    where
        P: Params<F>,
    {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let f = |x: f64| F::from_f64(x).expect("finite");
        let (b1, b2, eps, lr_f, wd) = (f(c.beta1), f(c.beta2), f(c.eps), f(lr), f(lr * c.weight_decay));
        let (inv_bc1, inv_bc2) = (f(1.0 / bc1), f(1.0 / bc2));
        let one = F::one();
        let mut ms = self.m.named_mut();
        let mut vs = self.v.named_mut();
        let gs = grads.named();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let m = &mut ms[i].1;
            let v = &mut vs[i].1;
            let g = gs[i].1;
            Zip::from(&mut **p).and(&mut **m).and(&mut **v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                *p -= lr_f * mhat / (vhat.sqrt() + eps) + wd * *p;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = Array3::<f64>::from_elem((2, 20, 2), 0.5);
        assert_eq!(mse_loss(&a.view(), &a.view()).unwrap(), 0.0);
        let b = &a + 1.0;
        assert_eq!(mse_loss(&a.view(), &b.view()).unwrap(), 1.0);
        let p = array![[[1.0, 0.0], [2.0, 0.0]]];
        let g = Array3::zeros((1, 2, 2));
        assert_eq!(mse_loss(&p.view(), &g.view()).unwrap(), 1.25);
        assert!(mse_loss(&p.view(), &a.view()).is_err());
    }

    #[test]
    fn schedule_anchor_points() {
        let cfg = TrainConfig::default();
        let spe = 128;
        let last = 3 * spe - 1;
        assert!((lr_at(0, spe, &cfg) - 1e-5).abs() <= 1e-12);
        assert!((lr_at(spe, spe, &cfg) - 1e-4).abs() <= 1e-12);
        assert!((lr_at(last, spe, &cfg) - 5e-6).abs() <= 1e-12);
        assert!((lr_at(last + 10, spe, &cfg) - 5e-6).abs() <= 1e-12);
    }

    #[test]
    fn schedule_single_epoch_run_stays_in_warmup() {
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!((lr_at(0, 4, &cfg) - 1e-5).abs() < 1e-15);
        assert!((lr_at(4, 4, &cfg) - 1e-4).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn schedule_is_continuous_and_non_increasing_after_warmup(spe in 1usize..200, epochs in 2usize..6) {
            let cfg = TrainConfig { epochs, ..Default::default() };
            let warm = spe;
            let before = lr_at(warm - 1, spe, &cfg);
            let at = lr_at(warm, spe, &cfg);
            let after = lr_at(warm + 1, spe, &cfg);
            let step = (cfg.base_lr - cfg.warmup_start_lr) / spe as f64;
            prop_assert!((at - before - step).abs() < 1e-15);
            prop_assert!(after <= at);
            let mut prev = at;
            for s in warm..epochs * spe + 3 {
                let lr = lr_at(s, spe, &cfg);
                prop_assert!(lr <= prev + 1e-18);
                prop_assert!(lr >= cfg.min_lr - 1e-18);
                prev = lr;
            }
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![array![[3.0f64, 0.0]]];
        let r = clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!((r.norm, r.scale), (3.0, 1.0));
        assert_eq!(g[0], array![[3.0, 0.0]]);

        let mut g = vec![array![[6.0f64]], array![[8.0f64]]];
        let r = clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(r.norm, 10.0);
        assert_eq!(g[0], array![[3.0]]);
        assert_eq!(g[1], array![[4.0]]);
        let n: f64 = g.iter().map(|a| a.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
        assert_eq!(n, 5.0);

        let mut z = vec![Array2::<f64>::zeros((2, 2))];
        clip_gradients(&mut z, 5.0).unwrap();
        assert_eq!(z[0], Array2::<f64>::zeros((2, 2)));

        let mut bad = vec![array![[1.0f64]], array![[f64::NAN]]];
        match clip_gradients(&mut bad, 5.0) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "1"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn clip_preserves_direction(vals in proptest::collection::vec(-50.0f64..50.0, 1..20), clip in 0.1f64..20.0) {
            let orig = Array2::from_shape_vec((1, vals.len()), vals).unwrap();
            let mut g = vec![orig.clone()];
            let r = clip_gradients(&mut g, clip).unwrap();
            prop_assert!(r.scale > 0.0 && r.scale <= 1.0);
            for (a, b) in g[0].iter().zip(orig.iter()) {
                prop_assert!(a.abs() <= b.abs());
                prop_assert!((a - b * r.scale).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![array![[1.0f64, -2.0]]];
        let g = vec![array![[0.5f64, -3.0]]];
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g, 0.1);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[0][[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { warmup_start_lr: 1e-3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { min_lr: 1e-3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: 0.0, ..Default::default() }.validate().is_err());
    }
}

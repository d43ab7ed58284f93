//! Fine-tuning procedures for fixed-point networks.
//!
//! All of them keep full-precision master weights, build a quantized view of
//! the weights for every forward pass and apply presumed gradients to the
//! master copy. They differ in which activations are fixed point while
//! training and which layers are allowed to move:
//!
//! * vanilla: target precision everywhere, every layer trains;
//! * [`finetune_p1`]: quantized weights, float activations, every layer
//!   trains; the result is afterwards evaluated at lower activation precision;
//! * [`finetune_p2`]: target precision everywhere, only the top layer(s) train;
//! * [`finetune_p3`]: one layer per phase, bottom to top, with fixed-point
//!   activations switched on only below the layer being trained.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{choose_format, Precision, QTensor};
use crate::harness::Dataset;
use crate::qforward::{forward_quantized, quantize_weights, PrecisionAssignment};
use crate::tensornet::{backward_presumed, sgd_step, NetworkSpec, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Quantize the float checkpoint and evaluate, no training.
    None,
    Vanilla,
    P1,
    P2,
    P3,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Vanilla => "vanilla",
            Strategy::P1 => "p1",
            Strategy::P2 => "p2",
            Strategy::P3 => "p3",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Strategy::None),
            "vanilla" => Ok(Strategy::Vanilla),
            "p1" => Ok(Strategy::P1),
            "p2" => Ok(Strategy::P2),
            "p3" => Ok(Strategy::P3),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

/// How master weights are stored between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStorage {
    #[default]
    FloatMaster,
    /// Snap trained fixed-precision layers back onto their grid after every
    /// step (ablation).
    FixedPoint,
}

/// A run is declared diverged when the loss is non-finite, or when the
/// running mean of the loss stays above `factor` times its starting value
/// for `patience` consecutive steps.
///
/// The starting value is the mean of the first `warmup` losses, floored at
/// `min_reference` so that a nearly converged start does not turn ordinary
/// batch noise into divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceCriterion {
    pub factor: f64,
    pub patience: usize,
    /// Weight of the newest loss in the exponential running mean.
    pub smoothing: f64,
    pub warmup: usize,
    pub min_reference: f64,
}

impl Default for DivergenceCriterion {
    fn default() -> Self {
        Self {
            factor: 3.0,
            patience: 200,
            smoothing: 0.05,
            warmup: 20,
            min_reference: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct DivergenceMonitor {
    criterion: DivergenceCriterion,
    seen: usize,
    warmup_sum: f64,
    reference: Option<f64>,
    running: f64,
    streak: usize,
}

impl DivergenceMonitor {
    fn new(criterion: DivergenceCriterion) -> Self {
        Self {
            criterion,
            seen: 0,
            warmup_sum: 0.0,
            reference: None,
            running: 0.0,
            streak: 0,
        }
    }

    /// Feeds one step's loss; returns true once the run counts as diverged.
    fn observe(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        if self.seen == 0 {
            self.running = loss;
        } else {
            self.running += self.criterion.smoothing * (loss - self.running);
        }
        self.seen += 1;
        let reference = match self.reference {
            Some(r) => r,
            None => {
                self.warmup_sum += loss;
                if self.seen < self.criterion.warmup.max(1) {
                    return false;
                }
                let r = (self.warmup_sum / self.seen as f64).max(self.criterion.min_reference);
                self.reference = Some(r);
                r
            }
        };
        if self.running > self.criterion.factor * reference {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= self.criterion.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs for vanilla, Proposal 1 and Proposal 2.
    pub epochs: usize,
    /// Epochs in each Proposal 3 phase.
    pub epochs_per_phase: usize,
    /// Layers fine-tuned by Proposal 2, counted from the top.
    pub top_k_layers: usize,
    pub divergence: DivergenceCriterion,
    pub weight_storage: WeightStorage,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            lr: 0.02,
            batch_size: 32,
            epochs: 2,
            epochs_per_phase: 2,
            top_k_layers: 1,
            divergence: DivergenceCriterion::default(),
            weight_storage: WeightStorage::FloatMaster,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.epochs_per_phase == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.divergence.factor > 0.0 && self.divergence.smoothing > 0.0) {
            return Err(Error::Config("invalid divergence criterion".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub phase: usize,
    pub loss: f64,
    pub lr: f64,
    /// Trained layers, `;`-separated.
    pub trainable_layer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: Parameters,
    pub log: TrainLog,
    pub diverged: bool,
}

/// One phase of the bottom-to-top schedule. Layer indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub trainable_layer: usize,
    pub fixed_point_activation_layers: Vec<usize>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    /// Checks the schedule against an `num_layers`-layer network: phase `p`
    /// (0-based) trains layer `p + 1` with fixed-point activations on layers
    /// `0..=p`; layer 0 never trains.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if num_layers < 2 {
            return Err(Error::Config(format!(
                "bottom-to-top fine-tuning needs at least 2 layers, got {num_layers}"
            )));
        }
        if self.phases.len() != num_layers - 1 {
            return Err(Error::Config(format!(
                "{num_layers} layers need {} phases, plan has {}",
                num_layers - 1,
                self.phases.len()
            )));
        }
        for (p, phase) in self.phases.iter().enumerate() {
            let want: Vec<usize> = (0..=p).collect();
            if phase.trainable_layer != p + 1 || phase.fixed_point_activation_layers != want {
                return Err(Error::Config(format!(
                    "phase {p} must train layer {} with fixed-point activations on {want:?}",
                    p + 1
                )));
            }
            if phase.epochs == 0 {
                return Err(Error::Config(format!("phase {p} has zero epochs")));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

pub fn build_phase_plan(num_layers: usize, epochs_per_phase: usize) -> Result<PhasePlan> {
    let plan = PhasePlan {
        phases: (1..num_layers)
            .map(|layer| Phase {
                trainable_layer: layer,
                fixed_point_activation_layers: (0..layer).collect(),
                epochs: epochs_per_phase,
            })
            .collect(),
    };
    plan.validate(num_layers)?;
    Ok(plan)
}

/// Assignment used while training `phase`: fixed-point activations only on
/// the phase's layers, weights and input at target precision.
pub fn phase_assignment(target: &PrecisionAssignment, phase: &Phase) -> PrecisionAssignment {
    target.with_fixed_activations_only(&phase.fixed_point_activation_layers)
}

fn mask_label(mask: &[usize]) -> String {
    mask.iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Shared SGD loop. Numeric blow-ups inside a step are divergence, not
/// errors.
struct Trainer<'a> {
    net: &'a NetworkSpec,
    data: &'a Dataset,
    cfg: &'a StrategyConfig,
    rng: ChaCha8Rng,
    monitor: DivergenceMonitor,
    log: TrainLog,
    step: usize,
    diverged: bool,
}

impl<'a> Trainer<'a> {
    fn new(net: &'a NetworkSpec, data: &'a Dataset, cfg: &'a StrategyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        if data.shape != net.input || data.num_classes > net.num_classes() {
            return Err(Error::Shape(format!(
                "dataset {:?} with {} classes does not fit the network input {:?} / {} outputs",
                data.shape,
                data.num_classes,
                net.input,
                net.num_classes()
            )));
        }
        Ok(Self {
            net,
            data,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            monitor: DivergenceMonitor::new(cfg.divergence),
            log: TrainLog::default(),
            step: 0,
            diverged: false,
        })
    }

    fn run(
        &mut self,
        params: &mut Parameters,
        assign: &PrecisionAssignment,
        mask: &[usize],
        epochs: usize,
        phase: usize,
    ) -> Result<()> {
        let label = mask_label(mask);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                if self.diverged {
                    return Ok(());
                }
                let batch = self.data.batch(chunk);
                let loss = match self.step_once(params, assign, mask, &batch) {
                    Ok(loss) => loss,
                    Err(Error::NonFinite(_)) | Err(Error::AccumulatorOverflow(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
                self.log.rows.push(LogRow {
                    step: self.step,
                    phase,
                    loss,
                    lr: self.cfg.lr,
                    trainable_layer: label.clone(),
                });
                self.step += 1;
                if self.monitor.observe(loss) {
                    self.diverged = true;
                }
            }
        }
        Ok(())
    }

    fn step_once(
        &self,
        params: &mut Parameters,
        assign: &PrecisionAssignment,
        mask: &[usize],
        batch: &crate::tensornet::Batch,
    ) -> Result<f64> {
        let grads = {
            let view = quantize_weights(params, assign)?;
            let pass = forward_quantized(self.net, &view, assign, batch)?;
            if !pass.loss.is_finite() {
                return Err(Error::NonFinite(pass.loss));
            }
            let grads = backward_presumed(self.net, &view, &pass)?;
            (grads, pass.loss)
        };
        sgd_step(params, &grads.0, self.cfg.lr, mask)?;
        if self.cfg.weight_storage == WeightStorage::FixedPoint {
            for &l in mask {
                if let Precision::Fixed(bits) = assign.layers[l].weight_bits {
                    let w = &mut params.layers[l].weights;
                    let fmt = choose_format(w, bits, true)?;
                    *w = QTensor::quantize(w, fmt)?.dequantize();
                }
            }
        }
        Ok(grads.1)
    }

    fn finish(self, params: Parameters) -> FinetuneOutcome {
        FinetuneOutcome {
            params,
            log: self.log,
            diverged: self.diverged,
        }
    }
}

/// Float training of every layer; used to produce the pre-trained
/// checkpoint the fine-tuning strategies start from.
pub fn train_float(
    net: &NetworkSpec,
    params: &Parameters,
    data: &Dataset,
    cfg: &StrategyConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let assign = PrecisionAssignment::float(net.num_layers());
    let all: Vec<usize> = (0..net.num_layers()).collect();
    let mut trainer = Trainer::new(net, data, cfg, seed)?;
    let mut p = params.clone();
    trainer.run(&mut p, &assign, &all, cfg.epochs, 0)?;
    Ok(trainer.finish(p))
}

/// Every step runs the full target assignment and updates every layer.
pub fn finetune_vanilla(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    data: &Dataset,
    cfg: &StrategyConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let all: Vec<usize> = (0..net.num_layers()).collect();
    let mut trainer = Trainer::new(net, data, cfg, seed)?;
    let mut p = params.clone();
    trainer.run(&mut p, assign, &all, cfg.epochs, 0)?;
    Ok(trainer.finish(p))
}

/// Trains with weights at `weight_bits` and every activation in full
/// precision.
pub fn finetune_p1(
    net: &NetworkSpec,
    params: &Parameters,
    weight_bits: Precision,
    data: &Dataset,
    cfg: &StrategyConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let mut assign = PrecisionAssignment::float(net.num_layers());
    for layer in &mut assign.layers {
        layer.weight_bits = weight_bits;
    }
    let all: Vec<usize> = (0..net.num_layers()).collect();
    let mut trainer = Trainer::new(net, data, cfg, seed)?;
    let mut p = params.clone();
    trainer.run(&mut p, &assign, &all, cfg.epochs, 0)?;
    Ok(trainer.finish(p))
}

/// Target precision everywhere; only the top `cfg.top_k_layers` layers train.
pub fn finetune_p2(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    data: &Dataset,
    cfg: &StrategyConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let l = net.num_layers();
    if cfg.top_k_layers == 0 || cfg.top_k_layers >= l {
        return Err(Error::Config(format!(
            "top_k_layers must be in 1..{l}, got {}",
            cfg.top_k_layers
        )));
    }
    let mask: Vec<usize> = (l - cfg.top_k_layers..l).collect();
    let mut trainer = Trainer::new(net, data, cfg, seed)?;
    let mut p = params.clone();
    trainer.run(&mut p, assign, &mask, cfg.epochs, 0)?;
    Ok(trainer.finish(p))
}

/// Bottom-to-top iterative fine-tuning. Within phase `p` only layer `p + 1`
/// moves, and every activation above it is float, so its presumed gradient
/// is the true gradient of the phase loss. The divergence monitor restarts
/// with each phase.
pub fn finetune_p3(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    data: &Dataset,
    plan: &PhasePlan,
    cfg: &StrategyConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    finetune_p3_observed(net, params, assign, data, plan, cfg, seed, |_| Ok(()))
}

/// Parameters at a phase boundary, as seen by [`finetune_p3_observed`].
pub struct PhaseSnapshot<'a> {
    pub index: usize,
    pub phase: &'a Phase,
    /// Assignment the phase trains under.
    pub assignment: &'a PrecisionAssignment,
    pub params: &'a Parameters,
    /// False before the phase trains, true after.
    pub finished: bool,
}

/// [`finetune_p3`] with a callback before and after every phase.
#[allow(clippy::too_many_arguments)]
pub fn finetune_p3_observed(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    data: &Dataset,
    plan: &PhasePlan,
    cfg: &StrategyConfig,
    seed: u64,
    mut observe: impl FnMut(PhaseSnapshot<'_>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    plan.validate(net.num_layers())?;
    let mut trainer = Trainer::new(net, data, cfg, seed)?;
    let mut p = params.clone();
    for (idx, phase) in plan.phases.iter().enumerate() {
        let phase_assign = phase_assignment(assign, phase);
        observe(PhaseSnapshot {
            index: idx,
            phase,
            assignment: &phase_assign,
            params: &p,
            finished: false,
        })?;
        trainer.monitor = DivergenceMonitor::new(cfg.divergence);
        trainer.run(&mut p, &phase_assign, &[phase.trainable_layer], phase.epochs, idx + 1)?;
        if trainer.diverged {
            break;
        }
        observe(PhaseSnapshot {
            index: idx,
            phase,
            assignment: &phase_assign,
            params: &p,
            finished: true,
        })?;
    }
    Ok(trainer.finish(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::QFormat;
    use crate::harness::synthetic;
    use crate::qforward::{calibrate, LayerPrecision};
    use crate::tensornet::{LayerSpec, Shape};

    fn small() -> (NetworkSpec, Dataset) {
        let data = synthetic::generate(&synthetic::SyntheticSpec {
            seed: 3,
            classes: 4,
            samples: 96,
            size: 8,
            ..Default::default()
        });
        let net = NetworkSpec::new(
            Shape::new(1, 8, 8),
            vec![
                LayerSpec::conv("c1", 1, 4, 3).with_pool(),
                LayerSpec::conv("c2", 4, 4, 3).with_pool(),
                LayerSpec::fc("f1", 16, 8),
                LayerSpec::fc("f2", 8, 4).with_relu(false),
            ],
        )
        .unwrap();
        (net, data)
    }

    #[test]
    fn phase_plan_for_four_layers() {
        let plan = build_phase_plan(4, 2).unwrap();
        let rows: Vec<(usize, Vec<usize>)> = plan
            .phases
            .iter()
            .map(|p| (p.trainable_layer, p.fixed_point_activation_layers.clone()))
            .collect();
        assert_eq!(rows, vec![(1, vec![0]), (2, vec![0, 1]), (3, vec![0, 1, 2])]);
        assert_eq!(plan.total_epochs(), 6);
    }

    #[test]
    fn phase_plan_small_and_large() {
        let two = build_phase_plan(2, 1).unwrap();
        assert_eq!(two.phases.len(), 1);
        assert_eq!(two.phases[0].trainable_layer, 1);
        assert_eq!(two.phases[0].fixed_point_activation_layers, vec![0]);

        let plan = build_phase_plan(17, 1).unwrap();
        assert_eq!(plan.phases.len(), 16);
        for w in plan.phases.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            assert_eq!(b.fixed_point_activation_layers.len(), a.fixed_point_activation_layers.len() + 1);
            assert!(a.fixed_point_activation_layers.iter().all(|l| b.fixed_point_activation_layers.contains(l)));
            assert!(b.trainable_layer > a.trainable_layer);
        }
        assert!(plan.phases.iter().all(|p| p.trainable_layer != 0));
        assert!(build_phase_plan(1, 1).is_err());
        assert!(build_phase_plan(0, 1).is_err());
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut plan = build_phase_plan(4, 1).unwrap();
        plan.phases[1].trainable_layer = 0;
        assert!(plan.validate(4).is_err());
        let plan = build_phase_plan(4, 1).unwrap();
        assert!(plan.validate(5).is_err());
        let mut plan = build_phase_plan(3, 1).unwrap();
        plan.phases[0].fixed_point_activation_layers = vec![0, 1];
        assert!(plan.validate(3).is_err());
    }

    #[test]
    fn phase_assignment_keeps_upper_layers_float() {
        let f = QFormat::signed(4, 2).unwrap();
        let target = PrecisionAssignment {
            input: Some(f),
            layers: vec![
                LayerPrecision {
                    weight_bits: Precision::Fixed(4),
                    act: Some(f)
                };
                4
            ],
        };
        let plan = build_phase_plan(4, 1).unwrap();
        for phase in &plan.phases {
            let a = phase_assignment(&target, phase);
            for (l, layer) in a.layers.iter().enumerate() {
                assert_eq!(layer.act.is_some(), l < phase.trainable_layer);
                assert_eq!(layer.weight_bits, Precision::Fixed(4));
            }
            assert_eq!(a.input, Some(f));
        }
    }

    #[test]
    fn divergence_monitor() {
        let crit = DivergenceCriterion {
            factor: 3.0,
            patience: 5,
            smoothing: 1.0,
            warmup: 1,
            min_reference: 0.0,
        };
        let mut m = DivergenceMonitor::new(crit);
        assert!(!m.observe(1.0));
        for _ in 0..4 {
            assert!(!m.observe(10.0));
        }
        assert!(m.observe(10.0));

        let mut m = DivergenceMonitor::new(crit);
        m.observe(1.0);
        for _ in 0..4 {
            m.observe(10.0);
        }
        assert!(!m.observe(1.0), "streak resets");
        assert!(DivergenceMonitor::new(crit).observe(f64::NAN));

        // warm-up mean and floor set the reference
        let crit = DivergenceCriterion {
            warmup: 2,
            min_reference: 0.5,
            ..crit
        };
        let mut m = DivergenceMonitor::new(crit);
        m.observe(0.01);
        m.observe(0.03);
        assert_eq!(m.reference, Some(0.5));
        for _ in 0..10 {
            assert!(!m.observe(1.4));
        }
        let mut m = DivergenceMonitor::new(crit);
        m.observe(2.0);
        m.observe(4.0);
        assert_eq!(m.reference, Some(3.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = StrategyConfig::default();
        cfg.validate().unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = StrategyConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("P3".parse::<Strategy>().unwrap(), Strategy::P3);
        assert!("p4".parse::<Strategy>().is_err());
    }

    #[test]
    fn p2_freezes_lower_layers() {
        let (net, data) = small();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let qnet = net.with_precision(Precision::Fixed(8), Precision::Fixed(8));
        let assign = calibrate(&qnet, &params, &data.batch(&(0..32).collect::<Vec<_>>())).unwrap();
        let cfg = StrategyConfig {
            epochs: 1,
            top_k_layers: 2,
            ..Default::default()
        };
        let out = finetune_p2(&net, &params, &assign, &data, &cfg, 9).unwrap();
        assert_eq!(out.params.layers[0], params.layers[0]);
        assert_eq!(out.params.layers[1], params.layers[1]);
        assert_ne!(out.params.layers[3], params.layers[3]);
        assert_eq!(out.log.rows.len(), 3);
        assert!(out.log.rows.iter().all(|r| r.trainable_layer == "2;3"));

        let bad = StrategyConfig {
            top_k_layers: 4,
            ..cfg
        };
        assert!(finetune_p2(&net, &params, &assign, &data, &bad, 9).is_err());
    }

    #[test]
    fn p3_moves_one_layer_per_phase_and_never_layer_0() {
        let (net, data) = small();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let qnet = net.with_precision(Precision::Fixed(4), Precision::Fixed(4));
        let assign = calibrate(&qnet, &params, &data.batch(&(0..32).collect::<Vec<_>>())).unwrap();
        let plan = build_phase_plan(4, 1).unwrap();
        let out = finetune_p3(&net, &params, &assign, &data, &plan, &StrategyConfig::default(), 2).unwrap();
        assert_eq!(out.params.layers[0], params.layers[0]);
        for l in 1..4 {
            assert_ne!(out.params.layers[l], params.layers[l]);
        }
        let phases: Vec<(usize, String)> = out
            .log
            .rows
            .iter()
            .map(|r| (r.phase, r.trainable_layer.clone()))
            .collect();
        assert_eq!(phases.first().unwrap(), &(1, "1".to_string()));
        assert_eq!(phases.last().unwrap(), &(3, "3".to_string()));
    }

    #[test]
    fn float_vanilla_equals_float_training() {
        let (net, data) = small();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = StrategyConfig::default();
        let a = finetune_vanilla(&net, &params, &PrecisionAssignment::float(4), &data, &cfg, 5).unwrap();
        let b = train_float(&net, &params, &data, &cfg, 5).unwrap();
        let c = finetune_p1(&net, &params, Precision::Float, &data, &cfg, 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params, c.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn training_is_deterministic() {
        let (net, data) = small();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = StrategyConfig::default();
        let a = train_float(&net, &params, &data, &cfg, 77).unwrap();
        let b = train_float(&net, &params, &data, &cfg, 77).unwrap();
        assert_eq!(a.params, b.params);
        let c = train_float(&net, &params, &data, &cfg, 78).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn huge_learning_rate_is_recorded_as_divergence() {
        let (net, data) = small();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = StrategyConfig {
            lr: 1e12,
            epochs: 3,
            divergence: DivergenceCriterion {
                patience: 3,
                warmup: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train_float(&net, &params, &data, &cfg, 1).unwrap();
        assert!(out.diverged);
    }

    #[test]
    fn fixed_point_storage_keeps_weights_on_grid() {
        let (net, data) = small();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = StrategyConfig {
            weight_storage: WeightStorage::FixedPoint,
            ..Default::default()
        };
        let out = finetune_p1(&net, &params, Precision::Fixed(8), &data, &cfg, 1).unwrap();
        for layer in &out.params.layers {
            let fmt = choose_format(&layer.weights, 8, true).unwrap();
            let q = QTensor::quantize(&layer.weights, fmt).unwrap().dequantize();
            assert_eq!(q, layer.weights);
        }
    }

    #[test]
    fn log_csv_has_expected_columns() {
        let log = TrainLog {
            rows: vec![LogRow {
                step: 0,
                phase: 1,
                loss: 0.5,
                lr: 0.01,
                trainable_layer: "1".into(),
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,phase,loss,lr,trainable_layer\n0,1,0.5,0.01,1\n");
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{evaluate_topk, load_dataset, preset_network, DataSplit, DatasetSpec};
use crate::error::{Error, Result};
use crate::fixedpoint::Precision;
use crate::harness::synthetic::SyntheticSpec;
use crate::qforward::{calibrate, PrecisionAssignment};
use crate::strategies::{
    build_phase_plan, finetune_p1, finetune_p2, finetune_p3, finetune_vanilla, train_float,
    FinetuneOutcome, Strategy, StrategyConfig,
};
use crate::tensornet::{Batch, Checkpoint, NetworkSpec, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    Preset(String),
    Explicit(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub weights: Vec<Precision>,
    pub activations: Vec<Precision>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let all = vec![
            Precision::Fixed(4),
            Precision::Fixed(8),
            Precision::Fixed(16),
            Precision::Float,
        ];
        Self {
            weights: all.clone(),
            activations: all,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkRef,
    pub dataset: DatasetSpec,
    /// Optimizer settings for producing the float checkpoint.
    pub float_training: StrategyConfig,
    pub strategy: StrategyConfig,
    pub grid: GridSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Pre-trained float checkpoint; trained from scratch when absent.
    pub checkpoint: Option<PathBuf>,
    pub top_k: usize,
    /// Training samples used to choose activation formats.
    pub calibration_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkRef::Preset("desk8".into()),
            dataset: DatasetSpec::Synthetic {
                spec: SyntheticSpec::default(),
                train: 4000,
                validation: 1000,
            },
            float_training: StrategyConfig {
                lr: 0.05,
                epochs: 12,
                ..Default::default()
            },
            strategy: StrategyConfig::default(),
            grid: GridSpec::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            top_k: 1,
            calibration_samples: 256,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.float_training.validate()?;
        self.strategy.validate()?;
        if self.grid.weights.is_empty() || self.grid.activations.is_empty() {
            return Err(Error::Config("grid axes must not be empty".into()));
        }
        if self.calibration_samples == 0 {
            return Err(Error::Config("calibration_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stable seed for a named sub-stream of a run.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the run seed
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A grid cell: a top-k error rate in percent, or a run that failed to
/// converge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Error(f64),
    Diverged,
}

impl Cell {
    pub fn error(&self) -> Option<f64> {
        match self {
            Cell::Error(e) => Some(*e),
            Cell::Diverged => None,
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Error(e) => write!(f, "{e:.2}"),
            Cell::Diverged => f.write_str("n/a"),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cell::Error(e) => s.serialize_f64(*e),
            Cell::Diverged => s.serialize_str("n/a"),
        }
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(e) => Ok(Cell::Error(e)),
            Repr::Text(t) if t == "n/a" => Ok(Cell::Diverged),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad cell {t:?}"))),
        }
    }
}

/// Top-k error rates indexed by (activation bits, weight bits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub dataset: String,
    pub top_k: usize,
    pub epochs: usize,
    pub epochs_per_phase: usize,
    pub float_baseline: f64,
    pub weight_bits: Vec<Precision>,
    pub activation_bits: Vec<Precision>,
    /// `cells[a][w]` for `activation_bits[a]`, `weight_bits[w]`.
    pub cells: Vec<Vec<Cell>>,
}

impl GridReport {
    pub fn cell(&self, act: Precision, weight: Precision) -> Option<Cell> {
        let a = self.activation_bits.iter().position(|&x| x == act)?;
        let w = self.weight_bits.iter().position(|&x| x == weight)?;
        Some(self.cells[a][w])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("activation_bits");
        for w in &self.weight_bits {
            write!(out, ",w{w}").expect("string write");
        }
        out.push('\n');
        for (a, row) in self.activation_bits.iter().zip(&self.cells) {
            write!(out, "{a}").expect("string write");
            for c in row {
                write!(out, ",{c}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `grid_<strategy>.csv` and `.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("grid_{}.csv", self.strategy));
        let json = dir.join(format!("grid_{}.json", self.strategy));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}

/// Loaded data and resolved network for one run configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub net: NetworkSpec,
    pub data: DataSplit,
}

impl Experiment {
    pub fn prepare(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_dataset(&cfg.dataset)?;
        let net = match &cfg.network {
            NetworkRef::Preset(name) => {
                preset_network(name, data.train.shape, data.train.num_classes)?
            }
            NetworkRef::Explicit(net) => {
                net.geometry()?;
                net.clone()
            }
        };
        if net.input != data.train.shape {
            return Err(Error::Shape(format!(
                "network input {:?} does not match data {:?}",
                net.input, data.train.shape
            )));
        }
        Ok(Self { cfg, net, data })
    }

    pub fn calibration_batch(&self) -> Batch {
        let n = self.cfg.calibration_samples.min(self.data.train.len());
        self.data.train.batch(&(0..n).collect::<Vec<_>>())
    }

    /// Loads the configured float checkpoint or trains one.
    pub fn pretrained(&self) -> Result<Parameters> {
        if let Some(path) = &self.cfg.checkpoint {
            let (net, params) = Checkpoint::load(path)?.to_params()?;
            if net.geometry()? != self.net.geometry()? {
                return Err(Error::Shape(format!(
                    "checkpoint {} was saved for a different network",
                    path.display()
                )));
            }
            return Ok(params);
        }
        Ok(self.train_float()?.params)
    }

    pub fn train_float(&self) -> Result<FinetuneOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "init"));
        let init = Parameters::init_he(&self.net, &mut rng)?;
        train_float(
            &self.net,
            &init,
            &self.data.train,
            &self.cfg.float_training,
            derive_seed(self.cfg.seed, "float-train"),
        )
    }

    /// Grid-protocol assignment calibrated on `params`.
    pub fn assignment(
        &self,
        params: &Parameters,
        weights: Precision,
        acts: Precision,
    ) -> Result<PrecisionAssignment> {
        calibrate(
            &self.net.with_precision(weights, acts),
            params,
            &self.calibration_batch(),
        )
    }

    pub fn evaluate(&self, params: &Parameters, assign: &PrecisionAssignment) -> Result<f64> {
        evaluate_topk(&self.net, params, assign, &self.data.validation, self.cfg.top_k)
    }

    fn cell_seed(&self, strategy: Strategy, w: Precision, a: Precision) -> u64 {
        derive_seed(self.cfg.seed, &format!("{strategy}/w{w}/a{a}"))
    }

    /// Proposal 1 training at weight precision `w`.
    pub fn p1(&self, base: &Parameters, w: Precision) -> Result<FinetuneOutcome> {
        finetune_p1(
            &self.net,
            base,
            w,
            &self.data.train,
            &self.cfg.strategy,
            self.cell_seed(Strategy::P1, w, Precision::Float),
        )
    }

    /// Fine-tunes one (weights, activations) cell. Proposals 2 and 3 start
    /// from `p1_base`, the Proposal 1 network at the same weight precision.
    /// Returns the trained parameters, the frozen target assignment they are
    /// evaluated under and whether training diverged.
    pub fn finetune_cell(
        &self,
        strategy: Strategy,
        float_base: &Parameters,
        p1_base: Option<&Parameters>,
        w: Precision,
        a: Precision,
    ) -> Result<(FinetuneOutcome, PrecisionAssignment)> {
        let cfg = &self.cfg.strategy;
        let seed = self.cell_seed(strategy, w, a);
        let start = match strategy {
            Strategy::P2 | Strategy::P3 => p1_base.ok_or_else(|| {
                Error::Config(format!("{strategy} starts from a Proposal 1 network"))
            })?,
            _ => float_base,
        };
        let assign = self.assignment(start, w, a)?;
        let outcome = match strategy {
            Strategy::None => FinetuneOutcome {
                params: start.clone(),
                log: Default::default(),
                diverged: false,
            },
            Strategy::Vanilla => {
                finetune_vanilla(&self.net, start, &assign, &self.data.train, cfg, seed)?
            }
            Strategy::P1 => self.p1(start, w)?,
            Strategy::P2 => finetune_p2(&self.net, start, &assign, &self.data.train, cfg, seed)?,
            Strategy::P3 => {
                let plan = build_phase_plan(self.net.num_layers(), cfg.epochs_per_phase)?;
                finetune_p3(&self.net, start, &assign, &self.data.train, &plan, cfg, seed)?
            }
        };
        Ok((outcome, assign))
    }

    pub fn run_grid(&self) -> Result<GridReport> {
        let float_base = self.pretrained()?;
        self.run_grid_from(&float_base)
    }

    /// Runs every grid cell starting from a given float checkpoint.
    pub fn run_grid_from(&self, float_base: &Parameters) -> Result<GridReport> {
        let strategy = self.cfg.strategy.strategy;
        let float_assign = PrecisionAssignment::float(self.net.num_layers());
        let float_baseline = self.evaluate(float_base, &float_assign)?;
        let needs_p1 = matches!(strategy, Strategy::P1 | Strategy::P2 | Strategy::P3);

        let mut p1_nets: BTreeMap<Precision, Parameters> = BTreeMap::new();
        if needs_p1 {
            for &w in &self.cfg.grid.weights {
                let trained = if w.is_float() {
                    float_base.clone()
                } else {
                    self.p1(float_base, w)?.params
                };
                p1_nets.insert(w, trained);
            }
        }

        let mut cells = Vec::with_capacity(self.cfg.grid.activations.len());
        for &a in &self.cfg.grid.activations {
            let mut row = Vec::with_capacity(self.cfg.grid.weights.len());
            for &w in &self.cfg.grid.weights {
                let cell = if w.is_float() && a.is_float() {
                    Cell::Error(float_baseline)
                } else {
                    match strategy {
                        Strategy::None => {
                            let assign = self.assignment(float_base, w, a)?;
                            Cell::Error(self.evaluate(float_base, &assign)?)
                        }
                        Strategy::P1 => {
                            let params = &p1_nets[&w];
                            let assign = self.assignment(params, w, a)?;
                            Cell::Error(self.evaluate(params, &assign)?)
                        }
                        Strategy::P2 | Strategy::P3 if a.is_float() => {
                            let params = &p1_nets[&w];
                            let assign = self.assignment(params, w, a)?;
                            Cell::Error(self.evaluate(params, &assign)?)
                        }
                        _ => {
                            let (out, assign) =
                                self.finetune_cell(strategy, float_base, p1_nets.get(&w), w, a)?;
                            if out.diverged {
                                Cell::Diverged
                            } else {
                                Cell::Error(self.evaluate(&out.params, &assign)?)
                            }
                        }
                    }
                };
                row.push(cell);
            }
            cells.push(row);
        }

        Ok(GridReport {
            strategy,
            seed: self.cfg.seed,
            dataset: self.cfg.dataset.name(),
            top_k: self.cfg.top_k,
            epochs: self.cfg.strategy.epochs,
            epochs_per_phase: self.cfg.strategy.epochs_per_phase,
            float_baseline,
            weight_bits: self.cfg.grid.weights.clone(),
            activation_bits: self.cfg.grid.activations.clone(),
            cells,
        })
    }
}

pub fn run_grid(cfg: &RunConfig) -> Result<GridReport> {
    Experiment::prepare(cfg.clone())?.run_grid()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(strategy: Strategy) -> RunConfig {
        RunConfig {
            network: NetworkRef::Preset("desk6".into()),
            dataset: DatasetSpec::Synthetic {
                spec: SyntheticSpec {
                    seed: 5,
                    classes: 4,
                    size: 8,
                    ..Default::default()
                },
                train: 64,
                validation: 32,
            },
            float_training: StrategyConfig {
                epochs: 2,
                lr: 0.05,
                ..Default::default()
            },
            strategy: StrategyConfig {
                strategy,
                epochs: 1,
                ..Default::default()
            },
            grid: GridSpec {
                weights: vec![Precision::Fixed(8), Precision::Float],
                activations: vec![Precision::Fixed(8), Precision::Float],
            },
            seed: 3,
            calibration_samples: 32,
            ..Default::default()
        }
    }

    #[test]
    fn float_cell_equals_baseline() {
        for s in [Strategy::None, Strategy::Vanilla, Strategy::P3] {
            let report = run_grid(&tiny_cfg(s)).unwrap();
            assert_eq!(
                report.cell(Precision::Float, Precision::Float),
                Some(Cell::Error(report.float_baseline))
            );
            assert!(report
                .cells
                .iter()
                .flatten()
                .all(|c| c.error().map_or(true, |e| (0.0..=100.0).contains(&e))));
        }
    }

    #[test]
    fn float_only_grid_is_a_single_baseline_cell() {
        let mut cfg = tiny_cfg(Strategy::None);
        cfg.grid = GridSpec {
            weights: vec![Precision::Float],
            activations: vec![Precision::Float],
        };
        let exp = Experiment::prepare(cfg).unwrap();
        let params = exp.pretrained().unwrap();
        let report = exp.run_grid_from(&params).unwrap();
        let want = exp
            .evaluate(&params, &PrecisionAssignment::float(exp.net.num_layers()))
            .unwrap();
        assert_eq!(report.cells, vec![vec![Cell::Error(want)]]);
    }

    #[test]
    fn report_formats() {
        let report = GridReport {
            strategy: Strategy::Vanilla,
            seed: 1,
            dataset: "d".into(),
            top_k: 1,
            epochs: 1,
            epochs_per_phase: 1,
            float_baseline: 2.0,
            weight_bits: vec![Precision::Fixed(4), Precision::Float],
            activation_bits: vec![Precision::Fixed(4)],
            cells: vec![vec![Cell::Diverged, Cell::Error(12.5)]],
        };
        assert_eq!(report.to_csv(), "activation_bits,w4,wfloat\n4,n/a,12.50\n");
        let json = report.to_json().unwrap();
        assert!(json.contains("\"n/a\""));
        let back: GridReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 9, "strategy": {"strategy": "p3", "epochs_per_phase": 2},
                "grid": {"weights": [4, "float"], "activations": [4]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.strategy.strategy, Strategy::P3);
        assert_eq!(cfg.strategy.top_k_layers, 1);
        assert_eq!(cfg.grid.weights, vec![Precision::Fixed(4), Precision::Float]);
        assert_eq!(cfg.network, NetworkRef::Preset("desk8".into()));
        assert!(serde_json::from_str::<RunConfig>(r#"{"grid": {"weights": [5], "activations": [4]}}"#).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}

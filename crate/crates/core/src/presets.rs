//! Named experiment presets expanding into run manifests.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{locale_partition, ViewMode};
use crate::citygraph::CityGenConfig;
use crate::env::{CurriculumSchedule, EnvConfig};
use crate::eval::EvalConfig;
use crate::losses::LossWeights;
use crate::trainer::pipeline::NetConfig;
use crate::trainer::{RunManifest, StageConfig, StageName, TrainableSet};

pub const HELDOUT: &str = "heldout";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    CrossviewFull,
    Singleview,
    NoKl,
    Distill,
    NoAdapt,
    WithHeading,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::CrossviewFull,
        Preset::Singleview,
        Preset::NoKl,
        Preset::Distill,
        Preset::NoAdapt,
        Preset::WithHeading,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CrossviewFull => "crossview_full",
            Preset::Singleview => "singleview",
            Preset::NoKl => "no_kl",
            Preset::Distill => "distill",
            Preset::NoAdapt => "no_adapt",
            Preset::WithHeading => "with_heading",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

/// Step budgets and harness sizes shared by every preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub train_steps: u64,
    pub adapt_steps: u64,
    pub transfer_steps: u64,
    pub actors: usize,
    pub unroll: usize,
    pub batch: usize,
    pub deterministic: bool,
    pub lr: f64,
    pub curriculum_start: f64,
    pub curriculum_end: f64,
    /// Fraction of each stage's updates spent ramping the goal distance.
    pub curriculum_ramp: f64,
    pub net: NetConfig,
    pub city: CityGenConfig,
    pub env: EnvConfig,
    pub eval: EvalConfig,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            train_steps: 2_000_000,
            adapt_steps: 500_000,
            transfer_steps: 500_000,
            actors: 8,
            unroll: 50,
            batch: 16,
            deterministic: false,
            lr: 0.001,
            curriculum_start: 150.0,
            curriculum_end: 400.0,
            curriculum_ramp: 0.5,
            net: NetConfig::default(),
            city: CityGenConfig::default(),
            env: EnvConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Budget {
    /// Same protocol with every step budget multiplied by `f`.
    pub fn scaled(mut self, f: f64) -> Self {
        let s = |v: u64| ((v as f64 * f).round() as u64).max(1);
        self.train_steps = s(self.train_steps);
        self.adapt_steps = s(self.adapt_steps);
        self.transfer_steps = s(self.transfer_steps);
        self
    }

    fn stage(&self, name: StageName, regions: Vec<String>, steps: u64, seed: u64) -> StageConfig {
        let mut s = StageConfig {
            name,
            regions,
            steps,
            actors: self.actors,
            unroll: self.unroll,
            batch: self.batch,
            seed,
            lr: self.lr,
            deterministic: self.deterministic,
            ..Default::default()
        };
        let updates = s.total_updates();
        s.curriculum = CurriculumSchedule {
            d_start: self.curriculum_start,
            d_end: self.curriculum_end,
            ramp_steps: ((updates as f64) * self.curriculum_ramp).round() as u64,
            enabled: true,
        };
        s
    }
}

fn train_regions(city: &CityGenConfig) -> Vec<String> {
    (0..city.train_regions).map(|i| format!("train{i}")).collect()
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stage)
}

/// Expands a preset into a manifest writing under `out_dir`.
///
/// Presets differ from `crossview_full` only in the knobs listed below:
/// - `singleview`: no embedding or KL term, ground-only training, no adaptation.
/// - `no_kl`: no KL term.
/// - `distill`: ground logits always act, ground logits are a fixed KL teacher.
/// - `no_adapt`: adaptation skipped.
/// - `with_heading`: heading regression on.
pub fn manifest(preset: Preset, seed: u64, budget: &Budget, out_dir: PathBuf) -> RunManifest {
    let target = vec![HELDOUT.to_string()];
    let only_target = TrainableSet::Only(vec![locale_partition(HELDOUT)]);

    let mut training = budget.stage(StageName::Training, train_regions(&budget.city), budget.train_steps, stage_seed(seed, 0));
    training.view_mode = ViewMode::Both;
    training.trainable = TrainableSet::All;

    let mut adaptation = budget.stage(StageName::Adaptation, target.clone(), budget.adapt_steps, stage_seed(seed, 1));
    adaptation.view_mode = ViewMode::AerialOnly;
    adaptation.trainable = only_target.clone();

    let mut transfer = budget.stage(StageName::Transfer, target, budget.transfer_steps, stage_seed(seed, 2));
    transfer.view_mode = ViewMode::GroundOnly;
    transfer.trainable = only_target;

    let mut with_adaptation = true;
    match preset {
        Preset::CrossviewFull => {}
        Preset::Singleview => {
            training.view_mode = ViewMode::GroundOnly;
            training.weights = LossWeights {
                lambda_embed: 0.0,
                gamma_distill: 0.0,
                ..training.weights
            };
            with_adaptation = false;
        }
        Preset::NoKl => {
            training.weights.gamma_distill = 0.0;
        }
        Preset::Distill => {
            training.p_ground = 1.0;
            training.weights.stop_ground_grad = true;
        }
        Preset::NoAdapt => with_adaptation = false,
        Preset::WithHeading => {
            training.weights.heading_coef = 1.0;
        }
    }
    for s in [&mut adaptation, &mut transfer] {
        s.weights = training.weights;
    }

    let mut stages = vec![training];
    if with_adaptation {
        stages.push(adaptation);
    }
    stages.push(transfer);
    RunManifest {
        name: preset.name().to_string(),
        tags: Vec::new(),
        seed,
        city_seed: seed,
        city: budget.city.clone(),
        env: budget.env.clone(),
        net: budget.net.clone(),
        stages,
        eval: Some(budget.eval.clone()),
        eval_region: HELDOUT.to_string(),
        eval_view: ViewMode::GroundOnly,
        initial_checkpoint: None,
        out_dir,
        config_hash: String::new(),
        records: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(p: Preset) -> RunManifest {
        manifest(p, 3, &Budget::default(), PathBuf::from("x"))
    }

    #[test]
    fn names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("bogus".parse::<Preset>().is_err());
    }

    #[test]
    fn every_preset_is_valid() {
        for p in Preset::ALL {
            m(p).validate().unwrap();
        }
    }

    #[test]
    fn singleview_drops_cross_view_terms() {
        let s = &m(Preset::Singleview).stages[0];
        assert_eq!(s.view_mode, ViewMode::GroundOnly);
        assert_eq!(s.weights.lambda_embed, 0.0);
        assert_eq!(s.weights.gamma_distill, 0.0);
    }

    #[test]
    fn distill_differs_only_in_gate_and_teacher() {
        let full = m(Preset::CrossviewFull);
        let mut d = m(Preset::Distill);
        assert_eq!(d.stages[0].p_ground, 1.0);
        assert!(d.stages[0].weights.stop_ground_grad);
        d.name = full.name.clone();
        for s in &mut d.stages {
            s.p_ground = full.stages[0].p_ground;
            s.weights.stop_ground_grad = false;
        }
        assert_eq!(d, full);
    }

    #[test]
    fn no_adapt_skips_adaptation() {
        let names: Vec<StageName> = m(Preset::NoAdapt).stages.iter().map(|s| s.name).collect();
        assert_eq!(names, vec![StageName::Training, StageName::Transfer]);
    }
}

//! Run configuration: every tunable under flat, namespaced JSON keys
//! (`fleet.count`, `train.kl_delta`, ...). Unknown keys are rejected and
//! omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::QpOptions;
use crate::battery::{CellPack, OcvCurve, SohParams, SohState, SopWindow};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::fleet::{load_fleet, FleetDistribution};
use crate::macpo::TrainConfig;
use crate::microgrid::{load_profile, DegradationPrice, GridDay, SyntheticProfile};
use crate::pos::PosConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSection {
    /// EVs written by `gen-fleet`.
    pub count: usize,
    #[serde(flatten)]
    pub distribution: FleetDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    #[serde(flatten)]
    pub profile: SyntheticProfile,
    /// Hourly profile CSV replacing the synthetic day.
    pub profile_csv: Option<PathBuf>,
    pub transformer_kva: f64,
    pub power_factor: f64,
    pub tie_line_min_kw: f64,
    pub fluctuation_coeff: f64,
    pub mean_net_load_coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySection {
    #[serde(flatten)]
    pub soh: SohParams<f64>,
    pub initial_equivalent_cycles: f64,
    pub initial_aging_factor: f64,
    pub initial_soc_avg: f64,
    pub initial_delta_soc: f64,
    pub c_bat: f64,
    pub c_labor: f64,
    pub soh_eol: f64,
    pub cell_u_min: f64,
    pub cell_u_max: f64,
    pub pack: CellPack<f64>,
    pub ocv: OcvCurve<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSection {
    pub n_agents: usize,
    /// EVs per training/evaluation day when the fleet is sampled.
    pub fleet_size: usize,
    pub horizon: usize,
    pub window_start: u32,
    pub dt_hours: f64,
    pub reward_offset: f64,
    pub reward_reference_fleet: f64,
    pub charging_weight: f64,
    pub degradation_weight: f64,
    pub resample_fleet: bool,
    /// Fixed fleet CSV; implies no resampling.
    pub fleet_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Seed of the evaluated day.
    pub seed: u64,
    pub year_days: usize,
    #[serde(flatten)]
    pub qp: QpOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub fleet: FleetSection,
    pub grid: GridSection,
    pub env: EnvSection,
    /// `train.master_seed` is not a key; training uses `master_seed`.
    pub train: TrainConfig,
    pub battery: BatterySection,
    pub pos: PosConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let soh0 = SohState::<f64>::default();
        let sop = SopWindow::<f64>::default();
        let price = DegradationPrice::<f64>::default();
        Self {
            master_seed: 7,
            output_dir: PathBuf::from("out"),
            fleet: FleetSection { count: 509, distribution: FleetDistribution::default() },
            grid: GridSection {
                profile: SyntheticProfile { households: 20.0, ..SyntheticProfile::default() },
                profile_csv: None,
                transformer_kva: env.grid.transformer_kva,
                power_factor: env.grid.power_factor,
                tie_line_min_kw: env.grid.tie_line_min_kw,
                fluctuation_coeff: env.grid.fluctuation_coeff,
                mean_net_load_coeff: env.grid.mean_net_load_coeff,
            },
            env: EnvSection {
                n_agents: env.n_agents,
                fleet_size: env.fleet_size,
                horizon: env.horizon,
                window_start: env.window_start,
                dt_hours: env.dt_hours,
                reward_offset: env.reward_offset,
                reward_reference_fleet: env.reward_reference_fleet,
                charging_weight: env.charging_weight,
                degradation_weight: env.degradation_weight,
                resample_fleet: env.resample_fleet,
                fleet_csv: None,
            },
            train: TrainConfig::default(),
            battery: BatterySection {
                soh: SohParams::default(),
                initial_equivalent_cycles: soh0.equivalent_full_cycles,
                initial_aging_factor: soh0.aging_factor,
                initial_soc_avg: 0.5,
                initial_delta_soc: 0.6,
                c_bat: price.c_bat,
                c_labor: price.c_labor,
                soh_eol: price.soh_eol,
                cell_u_min: sop.u_min,
                cell_u_max: sop.u_max,
                pack: CellPack::default_vehicle(),
                ocv: OcvCurve::lfp_default(),
            },
            pos: PosConfig::default(),
            eval: EvalSection { seed: 1, year_days: 365, qp: QpOptions::default() },
        }
    }
}

/// Keys owned elsewhere and therefore not part of the flat document.
const DERIVED: &[&str] = &["train.master_seed"];

fn flatten(v: Value) -> Result<Map<String, Value>> {
    let Value::Object(top) = v else {
        return Err(Error::Config("configuration must be a JSON object".into()));
    };
    let mut flat = Map::new();
    for (k, v) in top {
        match v {
            Value::Object(section) => {
                for (f, fv) in section {
                    let key = format!("{k}.{f}");
                    if !DERIVED.contains(&key.as_str()) {
                        flat.insert(key, fv);
                    }
                }
            }
            other => {
                flat.insert(k, other);
            }
        }
    }
    Ok(flat)
}

fn unflatten(flat: Map<String, Value>) -> Value {
    let mut top = Map::new();
    for (k, v) in flat {
        match k.split_once('.') {
            Some((section, field)) => {
                let entry = top.entry(section.to_string()).or_insert_with(|| Value::Object(Map::new()));
                if let Value::Object(m) = entry {
                    m.insert(field.to_string(), v);
                }
            }
            None => {
                top.insert(k, v);
            }
        }
    }
    Value::Object(top)
}

impl RunConfig {
    /// Flat key/value document with sorted keys.
    pub fn to_flat(&self) -> Result<Map<String, Value>> {
        flatten(serde_json::to_value(self)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Value::Object(self.to_flat()?))?)
    }

    /// Parse a flat document; missing keys keep their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let Value::Object(given) = given else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let mut flat = Self::default().to_flat()?;
        let mut unknown: Vec<&str> = given.keys().filter(|k| !flat.contains_key(*k)).map(String::as_str).collect();
        if !unknown.is_empty() {
            unknown.sort_unstable();
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        for (k, v) in given {
            flat.insert(k, v);
        }
        let seed = flat.get("master_seed").cloned().unwrap_or(Value::Null);
        let mut nested = unflatten(flat);
        nested["train"]["master_seed"] = seed;
        let cfg: Self = serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Replace the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.train.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.fleet.distribution.validate()?;
        if self.eval.year_days == 0 {
            return Err(Error::Config("eval.year_days must be ≥ 1".into()));
        }
        // the env carries the remaining checks; profile files are read later
        if self.grid.profile_csv.is_none() && self.env.fleet_csv.is_none() {
            self.env_config()?.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { master_seed: self.master_seed, ..self.train.clone() }
    }

    pub fn grid_day(&self) -> Result<GridDay> {
        let g = &self.grid;
        let mut day = GridDay::synthetic(&g.profile)?;
        if let Some(path) = &g.profile_csv {
            day = load_profile(path, &day)?;
        }
        day.transformer_kva = g.transformer_kva;
        day.power_factor = g.power_factor;
        day.tie_line_min_kw = g.tie_line_min_kw;
        day.fluctuation_coeff = g.fluctuation_coeff;
        day.mean_net_load_coeff = g.mean_net_load_coeff;
        day.validate()?;
        Ok(day)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let e = &self.env;
        let b = &self.battery;
        let fleet = e.fleet_csv.as_deref().map(load_fleet).transpose()?;
        let fixed = fleet.is_some();
        let cfg = EnvConfig {
            n_agents: e.n_agents,
            fleet_size: fleet.as_ref().map_or(e.fleet_size, Vec::len),
            horizon: e.horizon,
            window_start: e.window_start,
            dt_hours: e.dt_hours,
            cost_limit: self.train.cost_limit,
            reward_offset: e.reward_offset,
            reward_reference_fleet: e.reward_reference_fleet,
            charging_weight: e.charging_weight,
            degradation_weight: e.degradation_weight,
            resample_fleet: e.resample_fleet && !fixed,
            record_audit: false,
            grid: self.grid_day()?,
            fleet_dist: self.fleet.distribution.clone(),
            fleet,
            partition_seed: fixed.then_some(self.master_seed),
            initial_soh: SohState::new(
                b.initial_equivalent_cycles,
                b.initial_aging_factor,
                b.initial_soc_avg,
                b.initial_delta_soc,
            ),
            soh_params: b.soh,
            price: DegradationPrice { c_bat: b.c_bat, c_labor: b.c_labor, soh_eol: b.soh_eol },
            pack: b.pack.clone(),
            ocv: b.ocv.clone(),
            cell_u_min: b.cell_u_min,
            cell_u_max: b.cell_u_max,
            pos: self.pos.clone(),
        };
        Ok(cfg)
    }
}

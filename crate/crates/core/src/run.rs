//! Orchestration behind the command-line tools: fleet generation,
//! training, one-day evaluation with its report files, the one-year
//! aging run and baseline runs.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{replay, BaselineKind};
use crate::battery::{sop_power_limits, SopWindow};
use crate::config::RunConfig;
use crate::env::{hour_of_day, write_trajectory_csv, Transition, V2gEnv};
use crate::error::{Error, Result};
use crate::fleet::{sample_fleet, save_fleet};
use crate::macpo::{train_from, TrainState, TrainedModel, TrainingLog};
use crate::microgrid::{cost_f2, dso_decomposition, load_variance, CostBreakdown, SLOTS_PER_DAY};
use crate::year::{day_cycles_from_env, simulate_year};

pub const FLEET_FILE: &str = "fleet.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const REPORT_FILE: &str = "report.json";

/// What dispatches the evaluated day.
#[derive(Debug, Clone)]
pub enum DispatchSource {
    /// Every aggregator asks for zero power in every slot.
    Idle,
    Policy(TrainedModel),
    Baseline(BaselineKind),
}

impl DispatchSource {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Idle => "idle",
            Self::Policy(_) => "macpo",
            Self::Baseline(k) => k.label(),
        }
    }
}

/// One hour of the day's load profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub hour: usize,
    pub base_kw: f64,
    pub pv_kw: f64,
    pub wind_kw: f64,
    pub eva_kw: f64,
    pub total_kw: f64,
}

/// SOC spread of the plugged-in EVs at one instant of the window; empty
/// when none is plugged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocRow {
    pub instant: usize,
    pub hour: usize,
    pub plugged: usize,
    pub min: Option<f64>,
    pub q25: Option<f64>,
    pub median: Option<f64>,
    pub q75: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

/// One EV's power against its state-of-power limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvPowerRow {
    pub slot: usize,
    pub hour: usize,
    pub soc: f64,
    pub power_kw: f64,
    pub sop_charge_kw: f64,
    pub sop_discharge_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub source: String,
    pub seed: u64,
    pub fleet_size: usize,
    pub n_agents: usize,
    /// Mean fleet SOH after the day is repeated for a year, percent.
    pub one_year_soh: f64,
    pub one_day_load_variance: f64,
    pub one_day_ev_cost: f64,
    pub dso_breakdown: CostBreakdown,
    pub discharges: bool,
    pub cost_signals: f64,
    pub departure_soc_min: f64,
    pub departure_soc_max: f64,
    pub load_profile: Vec<LoadRow>,
    /// `[slot][agent]` realized aggregator power, kW.
    pub dispatch_kw: Vec<Vec<f64>>,
    pub soc_distribution: Vec<SocRow>,
}

impl EvaluationReport {
    /// Check that the stored series reproduce the headline numbers.
    pub fn verify(&self) -> Result<()> {
        let totals: Vec<f64> = self.load_profile.iter().map(|r| r.total_kw).collect();
        let var = load_variance(&totals);
        if (var - self.one_day_load_variance).abs() > 1e-9 * var.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "variance {var} recomputed from the load profile differs from reported {}",
                self.one_day_load_variance
            )));
        }
        let b = &self.dso_breakdown;
        if b.f2_charging + b.f3_degradation + b.fluctuation != b.dso_total {
            return Err(Error::Numeric("cost breakdown does not add up".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Outcome of one evaluated day.
pub struct DayRun {
    pub report: EvaluationReport,
    pub transitions: Vec<Transition>,
    pub year_soh: Vec<f64>,
    pub ev_power: Vec<EvPowerRow>,
    /// `[ev][slot]` realized power, kW.
    pub ev_power_kw: Vec<Vec<f64>>,
}

/// Run one scheduling day of `cfg` with `source` and summarize it.
pub fn evaluate_day(cfg: &RunConfig, source: &DispatchSource) -> Result<DayRun> {
    let env_cfg = cfg.env_config()?;
    let mut env = V2gEnv::new(env_cfg.clone())?;
    let seed = cfg.eval.seed;
    let mut obs = env.reset(seed)?;
    let transitions = match source {
        DispatchSource::Policy(model) => {
            if model.n_agents() != env.n_agents() {
                return Err(Error::Checkpoint(format!(
                    "model has {} agents, configuration has {}",
                    model.n_agents(),
                    env.n_agents()
                )));
            }
            let mut out = Vec::with_capacity(env_cfg.horizon);
            while !env.is_terminal() {
                let t = env.step(&model.act_deterministic(&obs)?)?;
                obs = t.next_states.clone();
                out.push(t);
            }
            out
        }
        DispatchSource::Idle => {
            let mut out = Vec::with_capacity(env_cfg.horizon);
            while !env.is_terminal() {
                let raw = env.raw_action_for(&vec![0.0; env.n_agents()]);
                out.push(env.step(&raw)?);
            }
            out
        }
        DispatchSource::Baseline(kind) => replay(&mut env, *kind, &cfg.eval.qp)?.1,
    };

    let grid = &env_cfg.grid;
    let dt = env_cfg.dt_hours;
    let eva_day = env.eva_power_day().to_vec();
    let base = grid.uncontrolled_load();
    let load_profile: Vec<LoadRow> = (0..SLOTS_PER_DAY)
        .map(|h| LoadRow {
            hour: h,
            base_kw: grid.base_load_kw[h],
            pv_kw: grid.pv_kw[h],
            wind_kw: grid.wind_kw[h],
            eva_kw: eva_day[h],
            total_kw: base[h] + eva_day[h],
        })
        .collect();

    let cycles = day_cycles_from_env(&env)?;
    let start = env.day_start_soh().to_vec();
    let after: Vec<_> = start.iter().zip(&cycles).map(|(s, c)| c.advance(s, &env_cfg.soh_params)).collect();
    let caps: Vec<f64> = env.fleet().iter().map(|e| e.capacity_kwh).collect();
    let before_pairs: Vec<_> = start.iter().zip(&caps).map(|(s, &q)| (s, q)).collect();
    let after_pairs: Vec<_> = after.iter().zip(&caps).map(|(s, &q)| (s, q)).collect();
    let breakdown = dso_decomposition(grid, &eva_day, &before_pairs, &after_pairs, &env_cfg.price, dt);
    let year_soh = simulate_year(&start, &cycles, &env_cfg.soh_params, cfg.eval.year_days)?;

    let h = env_cfg.horizon;
    let w0 = env_cfg.window_start;
    let soc = env.soc_traces();
    let soc_distribution = (0..=h)
        .map(|k| {
            let slot = w0 + k as u32;
            let mut v: Vec<f64> = env
                .fleet()
                .iter()
                .zip(soc)
                .filter(|(ev, _)| ev.is_plugged(slot) || (k > 0 && ev.is_plugged(slot - 1)))
                .map(|(_, s)| s[k])
                .collect();
            v.sort_by(f64::total_cmp);
            let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            SocRow {
                instant: k,
                hour: hour_of_day(slot as i64),
                plugged: v.len(),
                min: quantile(&v, 0.0),
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
                max: quantile(&v, 1.0),
                mean,
            }
        })
        .collect();

    let departure: Vec<f64> =
        env.fleet().iter().zip(soc).map(|(ev, s)| s[(ev.departure_slot.saturating_sub(w0) as usize).min(h)]).collect();
    let ev_power_kw: Vec<Vec<f64>> =
        (0..env.fleet().len()).map(|n| env.ev_power().iter().map(|slot| slot[n]).collect()).collect();

    let ev_power = match env.fleet().first() {
        Some(ev) => {
            let mut pack = env_cfg.pack.clone();
            pack.capacity_scale = ev.capacity_kwh * 1000.0 / pack.nominal_energy_wh();
            let window = SopWindow {
                soc_min: ev.soc_min,
                soc_max: ev.soc_max,
                horizon_slots: 1,
                slot_hours: dt,
                u_min: env_cfg.cell_u_min,
                u_max: env_cfg.cell_u_max,
            };
            (0..h)
                .map(|k| {
                    let (ch, dis) = if ev.is_plugged(w0 + k as u32) {
                        sop_power_limits(&pack, &env_cfg.ocv, soc[0][k], &window)
                    } else {
                        (0.0, 0.0)
                    };
                    EvPowerRow {
                        slot: k,
                        hour: hour_of_day(w0 as i64 + k as i64),
                        soc: soc[0][k],
                        power_kw: ev_power_kw[0][k],
                        sop_charge_kw: ch,
                        sop_discharge_kw: dis,
                    }
                })
                .collect()
        }
        None => Vec::new(),
    };

    let report = EvaluationReport {
        source: source.label().to_string(),
        seed,
        fleet_size: env.fleet().len(),
        n_agents: env.n_agents(),
        one_year_soh: *year_soh.last().unwrap_or(&f64::NAN),
        one_day_load_variance: breakdown.load_variance,
        one_day_ev_cost: cost_f2(&grid.tariff, &eva_day, dt),
        dso_breakdown: breakdown,
        discharges: ev_power_kw.iter().flatten().any(|&p| p < -1e-9),
        cost_signals: transitions.iter().map(|t| t.costs.iter().sum::<f64>()).sum(),
        departure_soc_min: departure.iter().cloned().fold(f64::INFINITY, f64::min),
        departure_soc_max: departure.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        load_profile,
        dispatch_kw: transitions.iter().map(|t| t.realized_kw.clone()).collect(),
        soc_distribution,
    };
    report.verify()?;
    Ok(DayRun { report, transitions, year_soh, ev_power, ev_power_kw })
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_rows<T: Serialize>(out: &Path, name: &str, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(out, name)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample `fleet.count` EVs and write them as CSV.
pub fn gen_fleet(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let fleet = sample_fleet(cfg.fleet.count, cfg.master_seed, &cfg.fleet.distribution)?;
    let path = out.join(FLEET_FILE);
    save_fleet(&fleet, &path)?;
    Ok(path)
}

/// Train, resuming from `out/checkpoint.json` when `resume` is set and
/// the file exists. Writes the checkpoint, the final model and the log.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainingLog> {
    std::fs::create_dir_all(out)?;
    let tcfg = cfg.train_config();
    let env_cfg = cfg.env_config()?;
    let mut envs = (0..tcfg.parallel_envs).map(|_| V2gEnv::new(env_cfg.clone())).collect::<Result<Vec<_>>>()?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let state = if resume && ckpt.exists() {
        let state = TrainState::load(&ckpt).map_err(|e| as_checkpoint_error(&ckpt, e))?;
        if state.model.n_agents() != env_cfg.n_agents {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} agents, configuration has {}",
                state.model.n_agents(),
                env_cfg.n_agents
            )));
        }
        state
    } else {
        TrainState::new(&tcfg, env_cfg.n_agents)?
    };
    let state = train_from(&tcfg, &mut envs, state, |st| st.save(&ckpt))?;
    state.model.save(&out.join(MODEL_FILE))?;
    state.log.write_csv(create(out, TRAINING_LOG_FILE)?)?;
    Ok(state.log)
}

fn as_checkpoint_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Json(e) => Error::Checkpoint(format!("{}: {e}", path.display())),
        e => e,
    }
}

/// Load a policy from either a final model file or a training checkpoint.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| as_checkpoint_error(path, e.into()))?;
    let model = if value.get("episode").is_some() {
        TrainState::from_json(&text).map(|s| s.model)
    } else {
        TrainedModel::from_json(&text)
    };
    model.map_err(|e| as_checkpoint_error(path, e))
}

/// Evaluate one day and write the report plus its CSV series.
pub fn evaluate(cfg: &RunConfig, source: &DispatchSource, out: &Path) -> Result<EvaluationReport> {
    let run = evaluate_day(cfg, source)?;
    write_day(cfg, &run, out)?;
    Ok(run.report)
}

fn write_day(cfg: &RunConfig, run: &DayRun, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(REPORT_FILE), run.report.to_json()?)?;
    write_rows(
        out,
        "load_profile.csv",
        &["hour", "base_kw", "pv_kw", "wind_kw", "eva_kw", "total_kw"],
        &run.report.load_profile,
    )?;
    write_rows(
        out,
        "soc_distribution.csv",
        &["instant", "hour", "plugged", "min", "q25", "median", "q75", "max", "mean"],
        &run.report.soc_distribution,
    )?;
    write_rows(
        out,
        "ev_power.csv",
        &["slot", "hour", "soc", "power_kw", "sop_charge_kw", "sop_discharge_kw"],
        &run.ev_power,
    )?;
    let mut header = vec!["slot".to_string(), "hour".to_string()];
    header.extend((0..run.report.n_agents).map(|i| format!("eva_{i}_kw")));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(out, "dispatch.csv")?);
    w.write_record(&header)?;
    for (k, p) in run.report.dispatch_kw.iter().enumerate() {
        let mut row = vec![k.to_string(), hour_of_day(cfg.env.window_start as i64 + k as i64).to_string()];
        row.extend(p.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    write_trajectory_csv(&run.transitions, create(out, "trajectory.csv")?)?;
    Ok(())
}

/// Repeat the evaluated day for `eval.year_days` days and write the mean
/// SOH series.
pub fn simulate_year_cmd(cfg: &RunConfig, source: &DispatchSource, out: &Path) -> Result<Vec<f64>> {
    std::fs::create_dir_all(out)?;
    let run = evaluate_day(cfg, source)?;
    #[derive(Serialize)]
    struct Row {
        day: usize,
        mean_soh: f64,
    }
    let rows: Vec<Row> = run.year_soh.iter().enumerate().map(|(day, &mean_soh)| Row { day, mean_soh }).collect();
    write_rows(out, "soh_year.csv", &["day", "mean_soh"], &rows)?;
    Ok(run.year_soh)
}

/// Evaluate a baseline and also write the per-EV power it realized.
pub fn baseline(cfg: &RunConfig, kind: BaselineKind, out: &Path) -> Result<EvaluationReport> {
    let run = evaluate_day(cfg, &DispatchSource::Baseline(kind))?;
    write_day(cfg, &run, out)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(out, "ev_dispatch.csv")?);
    let slots = run.ev_power_kw.first().map_or(0, Vec::len);
    let mut header = vec!["ev".to_string()];
    header.extend((0..slots).map(|k| format!("slot_{k}")));
    w.write_record(&header)?;
    for (n, p) in run.ev_power_kw.iter().enumerate() {
        let mut row = vec![n.to_string()];
        row.extend(p.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(run.report)
}

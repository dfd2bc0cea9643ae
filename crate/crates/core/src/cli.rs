//! Command-line front end. Every subcommand reads an optional JSON config,
//! runs one experiment and writes its results into `--out`; nothing is
//! written unless the whole run succeeds.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::calib::{
    compute_sfdr, fit_image, fit_lo_leakage, linspace, ramsey_infidelity, simulate_temperature_step,
    spur_power_scaling, step_profile, sweep_image, sweep_lo_leakage, CalSurface, DriftModel, PhaseNoiseProfile,
};
use crate::chains::{plan_frequencies, run_iq_chain, Chain, DoubleChainConfig, IqChainConfig, IQ_DEFAULT_IF_AMPLITUDE};
use crate::error::{Error, Result};
use crate::qutrit::{fit_leakage, fit_rb_decay, means, run_rb, RbSample, RbSpec, TransmonParams};
use crate::readout::{
    assignment_matrix, fit_gmm, label_centroids, preselect, read_shots_csv, simulate_shots, write_shots_csv,
    GmmModel, QutritLabel, ReadoutModel,
};
use crate::signal::{amplitude_to_dbm, Spectrum};
use crate::stand_in;

#[derive(Debug, Parser)]
#[command(name = "upconv", version, about = "Up-conversion chain simulator and qubit-control analysis")]
pub struct Cli {
    /// JSON document configuring the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Topology {
    Iq,
    Double,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a chain and report its spectrum.
    Chain {
        #[command(subcommand)]
        cmd: ChainCmd,
    },
    /// Sweep and fit IQ-mixer compensation.
    Calibrate {
        #[command(subcommand)]
        cmd: CalibrateCmd,
    },
    /// SFDR of a spectrum CSV.
    Sfdr {
        #[arg(long)]
        spectrum: PathBuf,
        /// Defaults to the strongest bin.
        #[arg(long)]
        fundamental_hz: Option<f64>,
        #[arg(long, default_value_t = -100.0, allow_hyphen_values = true)]
        floor_dbc: f64,
    },
    /// Spur power against drive power.
    SpurScaling {
        #[arg(long, value_enum)]
        topology: Option<Topology>,
    },
    /// Replay an ambient temperature step.
    Drift {
        #[arg(long, value_enum)]
        topology: Option<Topology>,
    },
    /// Ramsey infidelity from a phase-noise profile.
    Phasenoise,
    /// Frequency plan of the double conversion chain.
    Plan {
        #[arg(long)]
        target_ghz: f64,
    },
    /// Randomized benchmarking.
    Rb {
        #[command(subcommand)]
        cmd: RbCmd,
    },
    /// Three-state readout discrimination.
    Readout {
        #[command(subcommand)]
        cmd: ReadoutCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum ChainCmd {
    Run {
        /// Stand-in chain used when no config is given.
        #[arg(long, value_enum)]
        topology: Option<Topology>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CalibrateCmd {
    Lo,
    Image,
}

#[derive(Debug, Subcommand)]
pub enum RbCmd {
    Run,
    Fit {
        /// Samples CSV written by `rb run`.
        #[arg(long)]
        samples: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReadoutCmd {
    /// Fit the mixture to labelled calibration shots, simulated from the
    /// readout model when `--shots` is absent.
    Fit {
        #[arg(long)]
        shots: Option<PathBuf>,
        #[arg(long, default_value_t = 3000)]
        shots_per_state: usize,
    },
    Assign {
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        shots: PathBuf,
        /// Pre-measurement shots aligned with `--shots`; main shots whose
        /// pre-shot is not assigned to g are dropped.
        #[arg(long)]
        pre: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoCalSpec {
    #[serde(default = "stand_in::iq_chain_config_uncalibrated")]
    pub chain: IqChainConfig,
    /// Grid centre; the chain's current DC offsets by default.
    #[serde(default)]
    pub center_v: Option<[f64; 2]>,
    #[serde(default = "default_lo_span")]
    pub half_span_v: [f64; 2],
    #[serde(default = "default_points")]
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageCalSpec {
    #[serde(default = "stand_in::iq_chain_config_uncalibrated")]
    pub chain: IqChainConfig,
    #[serde(default = "default_f_if")]
    pub f_if_hz: f64,
    #[serde(default = "default_iq_amplitude")]
    pub drive_amplitude: f64,
    /// `(alpha, phi)` grid centre; the chain's current compensation by default.
    #[serde(default)]
    pub center: Option<[f64; 2]>,
    #[serde(default = "default_image_span")]
    pub half_span: [f64; 2],
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_lo_span() -> [f64; 2] {
    [0.01, 0.01]
}
fn default_image_span() -> [f64; 2] {
    [0.06, 0.08]
}
fn default_points() -> usize {
    11
}
fn default_f_if() -> f64 {
    100e6
}
fn default_iq_amplitude() -> f64 {
    IQ_DEFAULT_IF_AMPLITUDE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpurScalingSpec {
    pub chain: Chain,
    pub spurs_hz: Vec<f64>,
    pub drive_dbm: Vec<f64>,
}

impl SpurScalingSpec {
    /// The IQ sweep runs on the uncalibrated chain.
    fn stand_in(topology: Topology) -> Self {
        let chain = match topology {
            Topology::Iq => stand_in::iq_chain(stand_in::iq_chain_config_uncalibrated()),
            Topology::Double => stand_in::double_chain(),
        };
        let p0 = amplitude_to_dbm(chain.drive_amplitude());
        let drive_dbm = (0..5).map(|k| p0 - 10.0 + 5.0 * k as f64).collect();
        let spurs_hz = match &chain {
            Chain::Iq { config, f_if_hz, .. } => {
                let (lo, f) = (config.lo.frequency, *f_if_hz);
                vec![lo - f, lo + 2.0 * f, lo - 3.0 * f]
            }
            Chain::Double { target_hz, config, .. } => {
                let dx = config.ref_crosstalk.map_or(100e6, |x| x.offset_hz);
                vec![target_hz + dx]
            }
        };
        Self { chain, spurs_hz, drive_dbm }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepProfile {
    pub t_step_s: f64,
    pub t_end_s: f64,
    pub dt_s: f64,
    pub before_c: f64,
    pub after_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub chain: Chain,
    pub drift: DriftModel,
    pub profile: StepProfile,
}

impl DriftSpec {
    fn stand_in(topology: Topology) -> Self {
        let drift = match topology {
            Topology::Iq => stand_in::iq_drift(),
            Topology::Double => stand_in::double_drift(),
        };
        Self {
            chain: stand_in_chain(topology),
            drift,
            profile: StepProfile { t_step_s: 600.0, t_end_s: 3600.0, dt_s: 300.0, before_c: 20.0, after_c: 30.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseNoiseSpec {
    pub profile: PhaseNoiseProfile,
    pub tau_s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbRunSpec {
    pub rb: RbSpec,
    #[serde(default)]
    pub transmon: TransmonParams,
    /// Readout confusion matrix, rows `P(assigned j | state i)`.
    #[serde(default)]
    pub assignment: Option<[[f64; 3]; 3]>,
}

impl Default for RbRunSpec {
    fn default() -> Self {
        Self { rb: RbSpec::new(vec![1, 10, 25, 50, 100, 150, 200], 10), transmon: TransmonParams::default(), assignment: None }
    }
}

fn stand_in_chain(t: Topology) -> Chain {
    match t {
        Topology::Iq => stand_in::iq_chain(stand_in::iq_chain_config_calibrated()),
        Topology::Double => stand_in::double_chain(),
    }
}

#[derive(Debug, Serialize)]
struct Metadata {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: Option<u64>,
    config_sha256: String,
}

/// Row-oriented table rendered as CSV or as a JSON array of objects.
struct Table {
    columns: Vec<&'static str>,
    rows: Vec<Vec<Value>>,
}

impl Table {
    fn render(&self, format: Format) -> Result<Vec<u8>> {
        match format {
            Format::Csv => {
                let mut out = Vec::new();
                writeln!(out, "{}", self.columns.join(","))?;
                for row in &self.rows {
                    let cells: Vec<String> = row
                        .iter()
                        .map(|v| match v {
                            Value::String(s) => s.clone(),
                            Value::Null => String::new(),
                            other => other.to_string(),
                        })
                        .collect();
                    writeln!(out, "{}", cells.join(","))?;
                }
                Ok(out)
            }
            Format::Json => {
                let objs: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|r| Value::Object(self.columns.iter().map(|c| c.to_string()).zip(r.iter().cloned()).collect()))
                    .collect();
                Ok(serde_json::to_vec_pretty(&objs)?)
            }
        }
    }
}

/// Files produced by one run plus the JSON echoed on stdout.
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    summary: Value,
}

struct Ctx<'a> {
    cli: &'a Cli,
    command: String,
    hasher: Sha256,
    files: Vec<(String, Vec<u8>)>,
}

impl Ctx<'_> {
    fn config<T: DeserializeOwned + Serialize>(&mut self, default: impl FnOnce() -> T) -> Result<T> {
        let value = match &self.cli.config {
            Some(p) => {
                let bytes = fs::read(p)?;
                serde_json::from_slice(&bytes)?
            }
            None => default(),
        };
        self.hasher.update(serde_json::to_vec(&value)?);
        Ok(value)
    }

    fn required_config<T: DeserializeOwned + Serialize>(&mut self) -> Result<T> {
        if self.cli.config.is_none() {
            return Err(Error::Configuration(format!("`{}` needs --config", self.command)));
        }
        self.config(|| unreachable!())
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path)?;
        self.hasher.update(&bytes);
        Ok(bytes)
    }

    fn table(&mut self, stem: &str, table: Table) -> Result<()> {
        let ext = match self.cli.format {
            Format::Csv => "csv",
            Format::Json => "json",
        };
        let bytes = table.render(self.cli.format)?;
        self.files.push((format!("{stem}.{ext}"), bytes));
        Ok(())
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn finish(mut self, name: &str, seed: Option<u64>, result: impl Serialize) -> Result<Outputs> {
        let metadata = Metadata {
            tool: "upconv",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            seed,
            config_sha256: hex::encode(self.hasher.finalize_reset()),
        };
        let summary = json!({ "metadata": metadata, "result": result });
        let mut bytes = serde_json::to_vec_pretty(&summary)?;
        bytes.push(b'\n');
        self.files.push((format!("{name}.json"), bytes));
        Ok(Outputs { files: self.files, summary })
    }
}

fn num(x: f64) -> Value {
    json!(x)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Chain { .. } => "chain run",
        Command::Calibrate { cmd: CalibrateCmd::Lo } => "calibrate lo",
        Command::Calibrate { cmd: CalibrateCmd::Image } => "calibrate image",
        Command::Sfdr { .. } => "sfdr",
        Command::SpurScaling { .. } => "spur-scaling",
        Command::Drift { .. } => "drift",
        Command::Phasenoise => "phasenoise",
        Command::Plan { .. } => "plan",
        Command::Rb { cmd: RbCmd::Run } => "rb run",
        Command::Rb { cmd: RbCmd::Fit { .. } } => "rb fit",
        Command::Readout { cmd: ReadoutCmd::Fit { .. } } => "readout fit",
        Command::Readout { cmd: ReadoutCmd::Assign { .. } } => "readout assign",
    }
}

fn pick_topology(ctx: &Ctx, t: Option<Topology>) -> Result<Topology> {
    if ctx.cli.config.is_some() && t.is_some() {
        return Err(Error::Configuration("--topology selects a stand-in chain and conflicts with --config".into()));
    }
    Ok(t.unwrap_or(Topology::Iq))
}

fn peaks_table(peaks: &[crate::signal::Peak]) -> Table {
    Table {
        columns: vec!["freq_hz", "power_dbm", "label"],
        rows: peaks.iter().map(|p| vec![num(p.freq_hz), num(p.power_dbm), json!(p.label)]).collect(),
    }
}

fn surface_table(s: &CalSurface) -> Table {
    Table { columns: vec!["axis1", "axis2", "value"], rows: s.points().map(|(a, b, v)| vec![num(a), num(b), num(v)]).collect() }
}

fn iq_residuals_dbc(cfg: &IqChainConfig, f_if: f64, amplitude: f64) -> Result<(f64, f64)> {
    let run = run_iq_chain(cfg, &cfg.cw_envelope(amplitude)?, f_if)?;
    let fund = run.spectrum.power_at(cfg.lo.frequency + f_if);
    Ok((run.spectrum.power_at(cfg.lo.frequency) - fund, run.spectrum.power_at(cfg.lo.frequency - f_if) - fund))
}

fn execute(cli: &Cli) -> Result<Outputs> {
    let mut ctx = Ctx { cli, command: command_name(&cli.command).to_string(), hasher: Sha256::new(), files: Vec::new() };
    let seed = cli.seed;
    match &cli.command {
        Command::Chain { cmd: ChainCmd::Run { topology } } => {
            let t = pick_topology(&ctx, *topology)?;
            let chain: Chain = ctx.config(|| stand_in_chain(t))?;
            let run = chain.run()?;
            let sfdr = compute_sfdr(&run.spectrum, run.fundamental_hz, chain.peak_floor_dbc())?;
            let mut buf = Vec::new();
            run.spectrum.write_csv(&mut buf)?;
            ctx.raw("spectrum.csv", buf);
            ctx.table("peaks", peaks_table(&run.peaks))?;
            ctx.finish("chain_run", None, json!({ "fundamental_hz": run.fundamental_hz, "sfdr": sfdr, "peaks": run.peaks }))
        }
        Command::Calibrate { cmd: CalibrateCmd::Lo } => {
            let spec: LoCalSpec = ctx.config(|| LoCalSpec {
                chain: stand_in::iq_chain_config_uncalibrated(),
                center_v: None,
                half_span_v: default_lo_span(),
                points: default_points(),
            })?;
            let [ci, cq] = spec.center_v.unwrap_or([spec.chain.comp.v_i_dc, spec.chain.comp.v_q_dc]);
            let surface = sweep_lo_leakage(
                &spec.chain,
                &linspace(ci, spec.half_span_v[0], spec.points),
                &linspace(cq, spec.half_span_v[1], spec.points),
            )?;
            let fit = fit_lo_leakage(&surface)?;
            let comp = fit.apply(&spec.chain.comp);
            let cfg = IqChainConfig { comp, ..spec.chain.clone() };
            let (lo_dbc, image_dbc) = iq_residuals_dbc(&cfg, default_f_if(), IQ_DEFAULT_IF_AMPLITUDE)?;
            ctx.table("lo_surface", surface_table(&surface))?;
            ctx.finish(
                "lo_calibration",
                None,
                json!({ "fit": fit, "compensation": comp, "carrier_dbc": lo_dbc, "image_dbc": image_dbc }),
            )
        }
        Command::Calibrate { cmd: CalibrateCmd::Image } => {
            let spec: ImageCalSpec = ctx.config(|| ImageCalSpec {
                chain: stand_in::iq_chain_config_uncalibrated(),
                f_if_hz: default_f_if(),
                drive_amplitude: default_iq_amplitude(),
                center: None,
                half_span: default_image_span(),
                points: default_points(),
            })?;
            let [ca, cp] = spec.center.unwrap_or([spec.chain.comp.alpha, spec.chain.comp.phi]);
            let surface = sweep_image(
                &spec.chain,
                spec.f_if_hz,
                spec.drive_amplitude,
                &linspace(ca, spec.half_span[0], spec.points),
                &linspace(cp, spec.half_span[1], spec.points),
            )?;
            let fit = fit_image(&surface)?;
            let comp = fit.apply(&spec.chain.comp);
            let cfg = IqChainConfig { comp, ..spec.chain.clone() };
            let (lo_dbc, image_dbc) = iq_residuals_dbc(&cfg, spec.f_if_hz, spec.drive_amplitude)?;
            ctx.table("image_surface", surface_table(&surface))?;
            ctx.finish(
                "image_calibration",
                None,
                json!({ "fit": fit, "compensation": comp, "carrier_dbc": lo_dbc, "image_dbc": image_dbc }),
            )
        }
        Command::Sfdr { spectrum, fundamental_hz, floor_dbc } => {
            let bytes = ctx.read_input(spectrum)?;
            let spec = Spectrum::read_csv(&bytes[..])?;
            let f0 = match fundamental_hz {
                Some(f) => *f,
                None => {
                    let k = spec
                        .power_dbm
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(k, _)| k)
                        .ok_or_else(|| Error::Parameter("empty spectrum".into()))?;
                    spec.freq_hz[k]
                }
            };
            ctx.hasher.update(format!("{f0:e},{floor_dbc:e}"));
            let r = compute_sfdr(&spec, f0, *floor_dbc)?;
            ctx.finish("sfdr", None, r)
        }
        Command::SpurScaling { topology } => {
            let t = pick_topology(&ctx, *topology)?;
            let spec: SpurScalingSpec = ctx.config(|| SpurScalingSpec::stand_in(t))?;
            let fits = spec
                .spurs_hz
                .iter()
                .map(|&f| spur_power_scaling(&spec.chain, f, &spec.drive_dbm))
                .collect::<Result<Vec<_>>>()?;
            let rows = fits
                .iter()
                .flat_map(|s| s.points.iter().map(move |&(p, q)| vec![num(s.spur_hz), num(p), num(q)]))
                .collect();
            ctx.table("spur_points", Table { columns: vec!["spur_hz", "drive_dbm", "spur_dbm"], rows })?;
            ctx.finish("spur_scaling", None, fits)
        }
        Command::Drift { topology } => {
            let t = pick_topology(&ctx, *topology)?;
            let spec: DriftSpec = ctx.config(|| DriftSpec::stand_in(t))?;
            let p = &spec.profile;
            if !(p.dt_s > 0.0 && p.t_end_s >= 0.0) {
                return Err(Error::Parameter("profile dt must be positive and t_end non-negative".into()));
            }
            let profile = step_profile(p.t_step_s, p.t_end_s, p.dt_s, p.before_c, p.after_c);
            let pts = simulate_temperature_step(&spec.chain, &spec.drift, &profile)?;
            let rows = pts
                .iter()
                .map(|d| {
                    vec![
                        num(d.time_s),
                        num(d.ambient_c),
                        num(d.hardware_c),
                        num(d.sfdr_db),
                        num(d.lo_suppression_db),
                        num(d.image_suppression_db),
                    ]
                })
                .collect();
            ctx.table(
                "drift",
                Table {
                    columns: vec!["time_s", "ambient_c", "hardware_c", "sfdr_db", "lo_suppression_db", "image_suppression_db"],
                    rows,
                },
            )?;
            let first = pts.first().expect("profile is non-empty");
            let last = pts.last().expect("profile is non-empty");
            ctx.finish(
                "drift_summary",
                None,
                json!({
                    "points": pts.len(),
                    "sfdr_change_db": last.sfdr_db - first.sfdr_db,
                    "lo_suppression_change_db": last.lo_suppression_db - first.lo_suppression_db,
                    "image_suppression_change_db": last.image_suppression_db - first.image_suppression_db,
                }),
            )
        }
        Command::Phasenoise => {
            let spec: PhaseNoiseSpec = ctx.required_config()?;
            spec.profile.validate()?;
            let est = spec.tau_s.iter().map(|&t| ramsey_infidelity(&spec.profile, t)).collect::<Result<Vec<_>>>()?;
            ctx.finish("ramsey", None, est)
        }
        Command::Plan { target_ghz } => {
            let cfg: DoubleChainConfig = ctx.config(DoubleChainConfig::default)?;
            cfg.validate()?;
            ctx.hasher.update(format!("{target_ghz:e}"));
            let plan = plan_frequencies(target_ghz * 1e9, &cfg)?;
            ctx.finish(
                "plan",
                None,
                json!({
                    "f_if1_ghz": plan.f_if1_hz / 1e9,
                    "f_lo2_ghz": plan.f_lo2_hz / 1e9,
                    "image_ghz": plan.image_hz / 1e9,
                    "if_sign_inverted": plan.if_sign_inverted,
                }),
            )
        }
        Command::Rb { cmd: RbCmd::Run } => {
            let mut spec: RbRunSpec = ctx.config(RbRunSpec::default)?;
            if let Some(s) = seed {
                spec.rb.seed = s;
                ctx.hasher.update(s.to_le_bytes());
            }
            spec.transmon.validate()?;
            let res = run_rb(&spec.rb, &spec.transmon, spec.assignment.as_ref())?;
            ctx.table("rb_samples", samples_table(&res.samples))?;
            let rows = (0..res.lengths.len())
                .map(|k| vec![json!(res.lengths[k]), num(res.p_g[k]), num(res.p_f[k])])
                .collect();
            ctx.table("rb_means", Table { columns: vec!["length", "p_g", "p_f"], rows })?;
            let mut summary = serde_json::to_value(&res)?;
            if let Value::Object(m) = &mut summary {
                m.remove("samples");
            }
            ctx.finish("rb_result", Some(spec.rb.seed), summary)
        }
        Command::Rb { cmd: RbCmd::Fit { samples } } => {
            let bytes = ctx.read_input(samples)?;
            let samples = read_samples_csv(&bytes)?;
            let s = seed.unwrap_or(0);
            let fit = fit_rb_decay(&samples, 200, s)?;
            let (lengths, _, p_f) = means(&samples);
            let xs: Vec<f64> = lengths.iter().map(|&n| n as f64).collect();
            let leakage = if lengths.len() >= 3 && p_f.iter().any(|&x| x > 0.0) { fit_leakage(&xs, &p_f).ok() } else { None };
            ctx.finish("rb_fit", Some(s), json!({ "fit": fit, "leakage": leakage }))
        }
        Command::Readout { cmd: ReadoutCmd::Fit { shots, shots_per_state } } => {
            let s = seed.unwrap_or(0);
            let shots = match shots {
                Some(p) => {
                    if cli.config.is_some() {
                        return Err(Error::Configuration("--config (readout model) conflicts with --shots".into()));
                    }
                    let bytes = ctx.read_input(p)?;
                    read_shots_csv(&bytes[..])?
                }
                None => {
                    let model: ReadoutModel = ctx.config(ReadoutModel::stand_in)?;
                    model.validate()?;
                    ctx.hasher.update(shots_per_state.to_le_bytes());
                    let mut all = Vec::with_capacity(3 * shots_per_state);
                    for l in QutritLabel::ALL {
                        all.extend(simulate_shots(l, &model, *shots_per_state, s.wrapping_add(l.index() as u64))?);
                    }
                    let mut buf = Vec::new();
                    write_shots_csv(&mut buf, &all)?;
                    ctx.raw("shots.csv", buf);
                    all
                }
            };
            let centroids = label_centroids(&shots)?;
            let gmm = fit_gmm(&shots, &centroids, s)?;
            let a = assignment_matrix(&gmm, &shots)?;
            let mut gbytes = serde_json::to_vec_pretty(&gmm)?;
            gbytes.push(b'\n');
            ctx.raw("gmm.json", gbytes);
            ctx.finish("readout_fit", Some(s), json!({ "gmm": gmm, "assignment": a }))
        }
        Command::Readout { cmd: ReadoutCmd::Assign { gmm, shots, pre } } => {
            let gmm: GmmModel = serde_json::from_slice(&ctx.read_input(gmm)?)?;
            gmm.validate()?;
            let main = read_shots_csv(&ctx.read_input(shots)?[..])?;
            let (kept, discard) = match pre {
                Some(p) => {
                    let pre = read_shots_csv(&ctx.read_input(p)?[..])?;
                    let sel = preselect(&pre, &main, &gmm)?;
                    (sel.kept, Some(sel.discard_fraction))
                }
                None => (main, None),
            };
            let a = assignment_matrix(&gmm, &kept)?;
            ctx.finish("assignment", None, json!({ "assignment": a, "discard_fraction": discard }))
        }
    }
}

fn samples_table(s: &[RbSample]) -> Table {
    Table {
        columns: vec!["length", "seed_index", "p_g", "p_e", "p_f"],
        rows: s.iter().map(|x| vec![json!(x.length), json!(x.seed_index), num(x.p_g), num(x.p_e), num(x.p_f)]).collect(),
    }
}

fn read_samples_csv(bytes: &[u8]) -> Result<Vec<RbSample>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Configuration("samples file is not UTF-8".into()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("length,seed_index,p_g,p_e,p_f") {
        return Err(Error::Configuration("expected header length,seed_index,p_g,p_e,p_f".into()));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::Configuration(format!("bad samples row {}", k + 2));
            let c: Vec<&str> = line.split(',').map(str::trim).collect();
            if c.len() != 5 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
            Ok(RbSample {
                length: c[0].parse().map_err(|_| bad())?,
                seed_index: c[1].parse().map_err(|_| bad())?,
                p_g: f(c[2])?,
                p_e: f(c[3])?,
                p_f: f(c[4])?,
            })
        })
        .collect()
}

fn exit_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Parameter(_) | Error::Configuration(_) | Error::Json(_) => (2, "schema"),
        Error::Planning(_) | Error::Fit(_) | Error::Analysis(_) | Error::Contract(_) => (3, "numerical"),
        Error::Io(_) => (4, "io"),
    }
}

fn report(stderr: &mut dyn Write, code: i32, kind: &str, message: &str) -> i32 {
    let v = json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    let _ = writeln!(stderr, "{v}");
    code
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("UPCONV_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Configuration(format!("UPCONV_THREADS must be a positive integer, got {v:?}")))?;
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            return report(stderr, 2, "usage", e.to_string().trim());
        }
    };
    let result = configure_threads().and_then(|_| execute(&cli)).and_then(|out| {
        write_outputs(&cli.out, &out.files)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            0
        }
        Err(e) => {
            let (code, kind) = exit_code(&e);
            report(stderr, code, kind, &e.to_string())
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let mut full = vec!["upconv"];
        full.extend_from_slice(args);
        let code = run_with(full, &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn plan_prints_frequencies() {
        let dir = tempfile::tempdir().unwrap();
        let (code, out, _) = call(&["plan", "--target-ghz", "6", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["result"]["f_if1_ghz"], 2.0);
        assert_eq!(v["result"]["f_lo2_ghz"], 18.0);
        assert_eq!(v["result"]["image_ghz"], 30.0);
        assert!(dir.path().join("plan.json").exists());
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let (code, _, err) = call(&["plan", "--target-ghz", "6", "--bogus", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 2);
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["error"]["exit_code"], 2);
        assert!(!out.exists());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(call(&["plan", "--target-ghz", "40", "--out", d]).0, 3);
        assert_eq!(call(&["sfdr", "--spectrum", "/nonexistent/spec.csv", "--out", d]).0, 4);
        let bad = dir.path().join("bad.json");
        fs::write(&bad, r#"{"nonsense": 1}"#).unwrap();
        assert_eq!(call(&["plan", "--target-ghz", "6", "--config", bad.to_str().unwrap(), "--out", d]).0, 2);
        assert_eq!(call(&["phasenoise", "--out", d]).0, 2);
    }

    #[test]
    fn table_formats() {
        let t = Table { columns: vec!["a", "b"], rows: vec![vec![num(1.5), json!("x")]] };
        assert_eq!(String::from_utf8(t.render(Format::Csv).unwrap()).unwrap(), "a,b\n1.5,x\n");
        let v: Value = serde_json::from_slice(&t.render(Format::Json).unwrap()).unwrap();
        assert_eq!(v[0]["b"], "x");
    }

    #[test]
    fn samples_csv_round_trip() {
        let s = vec![RbSample { length: 3, seed_index: 1, p_g: 0.9, p_e: 0.08, p_f: 0.02 }];
        let bytes = samples_table(&s).render(Format::Csv).unwrap();
        assert_eq!(read_samples_csv(&bytes).unwrap(), s);
        let bytes = samples_table(&s).render(Format::Json).unwrap();
        assert_eq!(read_samples_csv(&bytes).unwrap(), s);
    }
}

//! Command-line front end: layered configuration and the five commands.
//!
//! Configuration resolves as defaults, then the `--config` TOML file, then
//! flags. Every output file starts with `# `-prefixed lines carrying the
//! version and the fully resolved configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptsync::{run_unmodulated, settling_time, write_error_csv, SyncError};
use crate::berlab::{
    compute_ber, random_message, recover_message, run_waveform, sweep, write_report_to, write_svg, BerError, BerReport, Link,
    LinkConfig, SweepConfig, WaveformConfig, VERSION,
};
use crate::channel::{ChannelConfig, ChannelMode};
use crate::fxp::FxpSample;
use crate::modem::{write_bits, write_waveform_csv, ModemError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl From<BerError> for CliError {
    fn from(e: BerError) -> Self {
        match e {
            BerError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ModemError> for CliError {
    fn from(e: ModemError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    Y,
    Z,
}

impl Component {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRunConfig {
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitsConfig {
    pub component: Component,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxBitsConfig {
    /// Explicit message as a string of '0'/'1'; otherwise `n_bits` seeded random bits.
    pub message: Option<String>,
    pub n_bits: usize,
    pub seed: u64,
    /// `awgn` adds noise at `ebn0_db` / `noise_dbm`; `ideal` is noise-free.
    pub mode: ChannelMode,
    pub ebn0_db: f64,
    pub noise_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerSweepConfig {
    pub ebn0_grid: Vec<f64>,
    pub noise_powers_dbm: Vec<f64>,
    pub bits_per_trial: usize,
    pub trials_per_point: usize,
    pub master_seed: u64,
    pub plot: bool,
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub link: LinkConfig,
    pub sync: SyncRunConfig,
    pub bits: BitsConfig,
    pub txbits: TxBitsConfig,
    pub txwave: WaveformConfig,
    pub bersweep: BerSweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            link: LinkConfig::default(),
            sync: SyncRunConfig { steps: 400_000 },
            bits: BitsConfig { component: Component::X, steps: 1000 },
            txbits: TxBitsConfig {
                message: None,
                n_bits: 2000,
                seed: 1,
                mode: ChannelMode::Ideal,
                ebn0_db: 20.0,
                noise_dbm: 30.0,
            },
            txwave: WaveformConfig::default(),
            bersweep: BerSweepConfig {
                ebn0_grid: sweep.ebn0_grid,
                noise_powers_dbm: sweep.noise_powers_dbm,
                bits_per_trial: sweep.bits_per_trial,
                trials_per_point: sweep.trials_per_point,
                master_seed: sweep.master_seed,
                plot: true,
            },
        }
    }
}

impl RunConfig {
    pub fn sweep_config(&self) -> SweepConfig {
        let b = &self.bersweep;
        SweepConfig {
            ebn0_grid: b.ebn0_grid.clone(),
            noise_powers_dbm: b.noise_powers_dbm.clone(),
            bits_per_trial: b.bits_per_trial,
            trials_per_point: b.trials_per_point,
            master_seed: b.master_seed,
            link: self.link.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }
}

/// Recursively overlay `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with a TOML document; unknown keys are rejected.
pub fn config_from_toml(text: &str) -> Result<RunConfig, CliError> {
    let over: toml::Value = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    let mut base = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    check_keys(&base, &over, "")?;
    merge(&mut base, over);
    base.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
}

fn check_keys(base: &toml::Value, over: &toml::Value, prefix: &str) -> Result<(), CliError> {
    if let (toml::Value::Table(b), toml::Value::Table(o)) = (base, over) {
        for (k, v) in o {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                Some(bv) => check_keys(bv, v, &path)?,
                // Optional fields are absent from the serialized defaults.
                None if is_optional_key(&path) => {}
                None => return Err(CliError::Usage(format!("config: unknown key `{path}`"))),
            }
        }
    }
    Ok(())
}

fn is_optional_key(path: &str) -> bool {
    matches!(path, "txbits.message" | "link.detector.equalizer" | "link.detector.edge_polarity")
}

#[derive(Debug, Parser)]
#[command(name = "chaoslink", version, about = "Chaos-masked adaptive-synchronization link simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; keys mirror the resolved config echoed in outputs.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for messages and noise (txbits) or the sweep master seed (bersweep).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Step / sample count (sync, bits, txwave) or message length (txbits).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unmodulated closed loop: error trace and settling time.
    Sync {
        #[command(flatten)]
        common: Common,
    },
    /// Bit words of a free-running transmitter component.
    Bits {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        component: Option<Component>,
    },
    /// One message through the link; recovered bits and BER.
    Txbits {
        #[command(flatten)]
        common: Common,
        /// Message as a string of 0/1 characters.
        #[arg(long)]
        message: Option<String>,
        /// Add AWGN at this Eb/N0 (dB).
        #[arg(long)]
        ebn0: Option<f64>,
        /// Noise power level (dBm) used with --ebn0.
        #[arg(long)]
        noise_dbm: Option<f64>,
    },
    /// A sine through the link; recovered vs original waveform.
    Txwave {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        freq: Option<f64>,
        #[arg(long)]
        resolution: Option<u32>,
        /// Source sampling rate (Hz).
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        amplitude: Option<f64>,
    },
    /// BER sweep over Eb/N0 and noise power.
    Bersweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        bits_per_trial: Option<usize>,
        /// Worker threads (default: all cores). Results do not depend on it,
        /// so it is not part of the echoed config.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        no_plot: bool,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Sync { common }
            | Command::Bits { common, .. }
            | Command::Txbits { common, .. }
            | Command::Txwave { common, .. }
            | Command::Bersweep { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Sync { .. } => "sync",
            Command::Bits { .. } => "bits",
            Command::Txbits { .. } => "txbits",
            Command::Txwave { .. } => "txwave",
            Command::Bersweep { .. } => "bersweep",
        }
    }

    fn default_out(&self) -> &'static str {
        match self {
            Command::Sync { .. } => "sync.csv",
            Command::Bits { .. } => "bits.txt",
            Command::Txbits { .. } => "txbits.txt",
            Command::Txwave { .. } => "txwave.csv",
            Command::Bersweep { .. } => "ber.csv",
        }
    }

    pub fn out_path(&self) -> PathBuf {
        self.common().out.clone().unwrap_or_else(|| PathBuf::from(self.default_out()))
    }
}

/// Apply command-line overrides on top of a file-or-default config.
pub fn apply_flags(cfg: &mut RunConfig, cmd: &Command) {
    let c = cmd.common();
    match cmd {
        Command::Sync { .. } => {
            if let Some(n) = c.steps {
                cfg.sync.steps = n;
            }
        }
        Command::Bits { component, .. } => {
            if let Some(n) = c.steps {
                cfg.bits.steps = n;
            }
            if let Some(comp) = component {
                cfg.bits.component = *comp;
            }
        }
        Command::Txbits { message, ebn0, noise_dbm, .. } => {
            if let Some(n) = c.steps {
                cfg.txbits.n_bits = n;
            }
            if let Some(s) = c.seed {
                cfg.txbits.seed = s;
            }
            if let Some(m) = message {
                cfg.txbits.message = Some(m.clone());
            }
            if let Some(e) = ebn0 {
                cfg.txbits.ebn0_db = *e;
                cfg.txbits.mode = ChannelMode::Awgn;
            }
            if let Some(p) = noise_dbm {
                cfg.txbits.noise_dbm = *p;
            }
        }
        Command::Txwave { freq, resolution, rate, amplitude, .. } => {
            if let Some(n) = c.steps {
                cfg.txwave.samples = n;
            }
            if let Some(f) = freq {
                cfg.txwave.freq_hz = *f;
            }
            if let Some(r) = resolution {
                cfg.txwave.resolution_bits = *r;
            }
            if let Some(r) = rate {
                cfg.txwave.rate_hz = *r;
            }
            if let Some(a) = amplitude {
                cfg.txwave.amplitude = *a;
            }
        }
        Command::Bersweep { trials, bits_per_trial, no_plot, .. } => {
            if let Some(s) = c.seed {
                cfg.bersweep.master_seed = s;
            }
            if let Some(t) = trials {
                cfg.bersweep.trials_per_point = *t;
            }
            if let Some(b) = bits_per_trial {
                cfg.bersweep.bits_per_trial = *b;
            }
            if *no_plot {
                cfg.bersweep.plot = false;
            }
        }
    }
}

/// Defaults, then the config file (if any), then flags.
pub fn resolve(cmd: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = match &cmd.common().config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            config_from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, cmd);
    Ok(cfg)
}

/// What a command reports on stdout besides its output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: Vec<String>,
    /// Set when the loop never settled; the output is still written.
    pub unsettled: bool,
}

fn echo_header(cmd: &str, cfg: &RunConfig, extra: &[String]) -> Vec<String> {
    let mut lines = vec![format!("chaoslink {VERSION} {cmd}")];
    lines.extend(extra.iter().cloned());
    lines.extend(cfg.to_toml().lines().map(str::to_owned));
    lines
}

fn write_echo<W: Write>(w: &mut W, lines: &[String]) -> std::io::Result<()> {
    for l in lines {
        writeln!(w, "# {l}")?;
    }
    Ok(())
}

/// Write `echo` then whatever `body` produces, to `path`.
fn write_file(
    path: &Path,
    echo: &[String],
    body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_echo(&mut w, echo).map_err(io_err(path))?;
    body(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn parse_message(s: &str) -> Result<Vec<u8>, CliError> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(CliError::Invalid(format!("message contains {other:?}; expected 0/1"))),
        })
        .collect()
}

pub fn cmd_sync(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let link = &cfg.link;
    let sync = Link::new(link.clone())?.sync;
    let run = run_unmodulated(&sync, link.tx0.map(FxpSample), link.rx0.map(FxpSample), cfg.sync.steps);
    let settled = settling_time(&run.errors, link.settle_tol);
    let settle_line = match settled {
        Ok(s) => format!("settling_steps = {s}"),
        Err(_) => "settling_steps = none".to_owned(),
    };
    let theta: Vec<String> = run.state.theta_hat().iter().map(|t| format!("{t:.6}")).collect();
    let extra = vec![
        settle_line.clone(),
        format!("theta_hat = [{}]", theta.join(", ")),
        format!("saturations = {}", run.saturations),
    ];
    write_file(out, &echo_header("sync", cfg, &extra), |w| {
        write_error_csv(w, &run.errors).map_err(|e| match e {
            SyncError::Csv(c) => CliError::Io { path: out.to_path_buf(), source: std::io::Error::other(c) },
            other => other.into(),
        })
    })?;
    Ok(Outcome { summary: extra, unsettled: settled.is_err() && cfg.sync.steps > 0 })
}

pub fn cmd_bits(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let link = Link::new(cfg.link.clone())?;
    let fmt = link.fmt();
    let n = cfg.bits.steps;
    let states = if n == 0 {
        vec![]
    } else {
        link.sync.field.simulate(cfg.link.tx0.map(FxpSample), &cfg.link.dynamics.theta, n - 1).states
    };
    let i = cfg.bits.component.index();
    let extra = vec![format!("words = {}", states.len())];
    write_file(out, &echo_header("bits", cfg, &extra), |w| {
        for s in &states {
            writeln!(w, "{}", fmt.to_bitword(s[i])).map_err(io_err(out))?;
        }
        Ok(())
    })?;
    Ok(Outcome { summary: extra, unsettled: false })
}

pub fn cmd_txbits(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let tb = &cfg.txbits;
    let message = match &tb.message {
        Some(m) => parse_message(m)?,
        None => random_message(tb.seed, tb.n_bits),
    };
    if message.is_empty() {
        return Err(CliError::Invalid("message is empty".into()));
    }
    let link = Link::new(cfg.link.clone())?;
    let channel = match tb.mode {
        ChannelMode::Ideal => ChannelConfig { seed: tb.seed, ..ChannelConfig::ideal() },
        ChannelMode::Awgn => link.channel(tb.ebn0_db, tb.noise_dbm, tb.seed),
    };
    let settling = link.settling.map_err(|_| CliError::Invalid("receiver never settles".into()))?;
    let bits = recover_message(&link, &channel, &message, settling)?;
    let errors = bits.iter().zip(&message).filter(|(a, b)| a != b).count() as u64;
    let ber = compute_ber(errors, message.len() as u64)?;
    let summary = vec![format!("errors = {errors}"), format!("bits = {}", message.len()), format!("ber = {ber}")];
    write_file(out, &echo_header("txbits", cfg, &summary), |w| write_bits(&mut *w, &bits).map_err(io_err(out)))?;
    Ok(Outcome { summary, unsettled: false })
}

pub fn cmd_txwave(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let link = Link::new(cfg.link.clone())?;
    let r = run_waveform(&link, &cfg.txwave)?;
    let summary = vec![
        format!("rms_error = {}", r.rms_error),
        format!("correlation = {}", r.correlation),
        format!("amplitude_ratio = {}", r.amplitude_ratio),
        format!("gain = {}", r.gain),
    ];
    write_file(out, &echo_header("txwave", cfg, &summary), |w| {
        write_waveform_csv(&mut *w, &r.recovered, &r.original).map_err(|e| match e {
            ModemError::Io(source) => CliError::Io { path: out.to_path_buf(), source },
            other => other.into(),
        })
    })?;
    Ok(Outcome { summary, unsettled: false })
}

/// `threads = 0` uses the default pool.
pub fn cmd_bersweep(cfg: &RunConfig, out: &Path, threads: usize) -> Result<Outcome, CliError> {
    let mut report = sweep_with_threads(&cfg.sweep_config(), threads)?;
    let settling = report.settling.map_or("none".to_owned(), |s| s.to_string());
    let extra = vec![format!("settling_steps = {settling}"), format!("delay_d = {}", report.delay_d)];
    report.echo = echo_header("bersweep", cfg, &extra);
    let f = File::create(out).map_err(io_err(out))?;
    write_report_to(&report, BufWriter::new(f)).map_err(io_err(out))?;
    let mut summary = vec![format!("points = {}", report.points.len())];
    if cfg.bersweep.plot {
        let svg = out.with_extension("svg");
        // Plotting is best-effort.
        match write_svg(&report, &svg) {
            Ok(()) => summary.push(format!("plot = {}", svg.display())),
            Err(e) => summary.push(format!("plot skipped: {e}")),
        }
    }
    Ok(Outcome { summary, unsettled: false })
}

/// [`sweep`] on a dedicated pool of `threads` workers (0: the global pool).
pub fn sweep_with_threads(sc: &SweepConfig, threads: usize) -> Result<BerReport, CliError> {
    if threads == 0 {
        return Ok(sweep(sc)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| sweep(sc))?)
}

pub fn run(cmd: &Command) -> Result<Outcome, CliError> {
    let cfg = resolve(cmd)?;
    let out = cmd.out_path();
    match cmd {
        Command::Sync { .. } => cmd_sync(&cfg, &out),
        Command::Bits { .. } => cmd_bits(&cfg, &out),
        Command::Txbits { .. } => cmd_txbits(&cfg, &out),
        Command::Txwave { .. } => cmd_txwave(&cfg, &out),
        Command::Bersweep { threads, .. } => cmd_bersweep(&cfg, &out, threads.unwrap_or(0)),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(o) => {
            for l in &o.summary {
                println!("{l}");
            }
            if o.unsettled {
                eprintln!("error: synchronization error never settled within tolerance");
                2
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(config_from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(config_from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_nested_table_keeps_siblings() {
        let cfg = config_from_toml("[link.detector]\na_threshold = 0.7\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.link.detector.a_threshold, 0.7);
        assert_eq!(cfg.link.detector.equalizer, d.link.detector.equalizer);
        assert_eq!(cfg.link.detector.window, d.link.detector.window);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let e = config_from_toml("[sync]\nstepz = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(config_from_toml("txbits = 3").is_err());
    }

    #[test]
    fn message_parsing() {
        assert_eq!(parse_message("0110").unwrap(), vec![0, 1, 1, 0]);
        assert!(parse_message("01a").is_err());
    }
}

//! Command implementations behind the `hpim` binary: config resolution, single
//! runs, parameter sweeps and hardware validation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use hpim_core::arch::{derive_metrics, HardwareDocument};
use hpim_core::baseline::BaselineDevice;
use hpim_core::engine::{simulate, LatencyReport, SimOptions};
use hpim_core::timing::CostModelParams;
use hpim_core::workload::{load_model_config, InferenceRequest, ModelConfig};
use hpim_core::{Error, HardwareConfig};
use rayon::prelude::*;
use serde::Serialize;

pub const PRESET_DIR_ENV: &str = "HPIM_PRESET_DIR";

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Capacity(String),
    Io(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Capacity(m) => write!(f, "capacity error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Parse(_)
            | Error::InvalidModel(_)
            | Error::InvalidHardware(_)
            | Error::InvalidRequest(_)
            | Error::UnknownPreset(_)
            | Error::ChannelDivisibility { .. } => CliError::Parse(msg),
            Error::Capacity { .. } | Error::PimCapacity { .. } => CliError::Capacity(msg),
            Error::Io(_) => CliError::Io(msg),
            _ => CliError::Other(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn with_source(what: &str, source: &str, e: Error) -> CliError {
    match CliError::from(e) {
        CliError::Parse(m) => CliError::Parse(format!("{what} `{source}`: {m}")),
        other => other,
    }
}

/// Text of a config named by path, by `$HPIM_PRESET_DIR/<name>.json`, or by
/// bundled preset name, in that order. `None` means "use the bundled preset".
fn locate(name: &str) -> CliResult<Option<String>> {
    let direct = Path::new(name);
    if direct.is_file() {
        return read_file(direct).map(Some);
    }
    if let Ok(dir) = std::env::var(PRESET_DIR_ENV) {
        let candidate = Path::new(&dir).join(format!("{name}.json"));
        if candidate.is_file() {
            return read_file(&candidate).map(Some);
        }
    }
    Ok(None)
}

pub fn resolve_model(name: &str) -> CliResult<ModelConfig> {
    let parsed = match locate(name)? {
        Some(text) => load_model_config(&text),
        None => ModelConfig::preset(name),
    };
    parsed.map_err(|e| with_source("model", name, e))
}

pub fn resolve_hardware(name: &str) -> CliResult<HardwareDocument> {
    let parsed = match locate(name)? {
        Some(text) => HardwareDocument::parse(&text),
        None => HardwareDocument::preset(name),
    };
    parsed.map_err(|e| with_source("hardware", name, e))
}

/// Inline JSON object or path to one.
pub fn resolve_params(base: &CostModelParams, overrides: Option<&str>) -> CliResult<CostModelParams> {
    let Some(src) = overrides else {
        return Ok(base.clone());
    };
    let text = if src.trim_start().starts_with('{') {
        src.to_string()
    } else {
        read_file(Path::new(src))?
    };
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("params `{src}`: {e}")))?;
    let params = base.with_overrides(&value).map_err(|e| with_source("params", src, e))?;
    params.validate().map_err(|e| with_source("params", src, e))?;
    Ok(params)
}

/// Device by name from the hardware document, the built-in `a100`, or a
/// JSON file.
pub fn resolve_baseline(name: &str, doc: &HardwareDocument) -> CliResult<BaselineDevice> {
    if let Some(dev) = doc.baselines.iter().find(|b| b.name == name) {
        return Ok(dev.clone());
    }
    if name == "a100" {
        return Ok(BaselineDevice::a100());
    }
    match locate(name)? {
        Some(text) => {
            let dev: BaselineDevice =
                serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("baseline `{name}`: {e}")))?;
            dev.validate().map_err(|e| with_source("baseline", name, e))?;
            Ok(dev)
        }
        None => Err(CliError::Parse(format!("unknown baseline device `{name}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: String,
    pub hw: String,
    pub len_in: u64,
    pub len_out: u64,
    pub baseline: Option<String>,
    pub params: Option<String>,
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Decode tokens written to the trace after the prefill.
    pub trace_tokens: u64,
}

impl RunSpec {
    pub fn new(model: &str, hw: &str, len_in: u64, len_out: u64) -> Self {
        Self {
            model: model.into(),
            hw: hw.into(),
            len_in,
            len_out,
            baseline: None,
            params: None,
            report: None,
            trace: None,
            csv: None,
            trace_tokens: 2,
        }
    }
}

/// Inputs of one simulation after resolving every name.
struct Resolved {
    model: ModelConfig,
    hw: HardwareConfig,
    params: CostModelParams,
    baseline: Option<BaselineDevice>,
}

fn resolve(model: &str, hw: &str, baseline: Option<&str>, params: Option<&str>) -> CliResult<Resolved> {
    let doc = resolve_hardware(hw)?;
    Ok(Resolved {
        model: resolve_model(model)?,
        params: resolve_params(&doc.cost_model, params)?,
        baseline: baseline.map(|b| resolve_baseline(b, &doc)).transpose()?,
        hw: doc.hardware,
    })
}

pub struct RunOutput {
    pub report: LatencyReport,
    pub report_json: String,
    pub trace_json: Option<String>,
    pub breakdown_csv: String,
}

/// Simulates one request and writes the requested files. Without a report
/// path the caller prints `report_json`.
pub fn cmd_run(spec: &RunSpec) -> CliResult<RunOutput> {
    let r = resolve(&spec.model, &spec.hw, spec.baseline.as_deref(), spec.params.as_deref())?;
    let req = InferenceRequest::new(spec.len_in, spec.len_out)?;
    let opts = SimOptions {
        baseline: r.baseline,
        trace_decode_tokens: spec.trace.as_ref().map(|_| spec.trace_tokens),
    };
    let sim = simulate(&r.model, &r.hw, &req, &r.params, &opts)?;
    let report_json = sim.report.to_json()?;
    let trace_json = sim.trace.as_ref().map(|t| t.to_json()).transpose()?;
    let breakdown_csv = breakdown_csv(&sim.report)?;
    if let Some(p) = &spec.report {
        write_file(p, &report_json)?;
    }
    if let (Some(p), Some(t)) = (&spec.trace, &trace_json) {
        write_file(p, t)?;
    }
    if let Some(p) = &spec.csv {
        write_file(p, &breakdown_csv)?;
    }
    Ok(RunOutput {
        report: sim.report,
        report_json,
        trace_json,
        breakdown_csv,
    })
}

#[derive(Serialize)]
struct BreakdownCsvRow<'a> {
    phase: &'a str,
    op_class: &'a str,
    critical_us: f64,
    busy_sram_cycles: u64,
    busy_hbm_cycles: u64,
    busy_interconnect_cycles: u64,
    baseline_us: Option<f64>,
}

pub fn breakdown_csv(r: &LatencyReport) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &r.breakdown {
        let baseline_us = r.baseline.as_ref().map(|b| {
            b.breakdown
                .iter()
                .filter(|x| x.phase == row.phase && x.op_class == row.op_class)
                .map(|x| x.us)
                .sum()
        });
        w.serialize(BreakdownCsvRow {
            phase: match row.phase {
                hpim_core::Phase::Prefill => "prefill",
                hpim_core::Phase::Decode => "decode",
            },
            op_class: row.op_class.name(),
            critical_us: row.critical_us,
            busy_sram_cycles: row.busy_sram_cycles,
            busy_hbm_cycles: row.busy_hbm_cycles,
            busy_interconnect_cycles: row.busy_interconnect_cycles,
            baseline_us,
        })
        .map_err(|e| CliError::Other(e.to_string()))?;
    }
    csv_string(w)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> CliResult<String> {
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub models: Vec<String>,
    pub hw: String,
    /// `(len_in, len_out)` pairs, run for every model.
    pub lengths: Vec<(u64, u64)>,
    pub baseline: Option<String>,
    pub params: Option<String>,
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "model",
    "d_emb",
    "layers",
    "heads",
    "len_in",
    "len_out",
    "prefill_us",
    "decode_us",
    "total_us",
    "baseline_total_us",
    "speedup",
];

/// Marker written into the latency cells of a grid point that does not fit.
pub const CAPACITY_ERROR: &str = "capacity-error";

#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutcome {
    Done {
        prefill_us: f64,
        decode_us: f64,
        total_us: f64,
        baseline_total_us: Option<f64>,
        speedup: Option<f64>,
    },
    CapacityError(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: ModelConfig,
    pub len_in: u64,
    pub len_out: u64,
    pub outcome: SweepOutcome,
}

impl SweepRow {
    fn cells(&self) -> Vec<String> {
        let m = &self.model;
        let mut out = vec![
            m.name.clone(),
            m.d_emb.to_string(),
            m.n_layers.to_string(),
            m.n_heads.to_string(),
            self.len_in.to_string(),
            self.len_out.to_string(),
        ];
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_default();
        match &self.outcome {
            SweepOutcome::Done {
                prefill_us,
                decode_us,
                total_us,
                baseline_total_us,
                speedup,
            } => {
                out.push(format!("{prefill_us:.3}"));
                out.push(format!("{decode_us:.3}"));
                out.push(format!("{total_us:.3}"));
                out.push(opt(*baseline_total_us));
                out.push(speedup.map(|v| format!("{v:.4}")).unwrap_or_default());
            }
            SweepOutcome::CapacityError(_) => out.extend(std::iter::repeat_n(CAPACITY_ERROR.to_string(), 5)),
        }
        out
    }
}

/// Runs every `(model, lengths)` point, `jobs` at a time. Rows come back in
/// grid order whatever order the runs finish in.
pub fn cmd_sweep(grid: &SweepGrid, jobs: Option<usize>) -> CliResult<Vec<SweepRow>> {
    if grid.models.is_empty() || grid.lengths.is_empty() {
        return Err(CliError::Parse("sweep grid is empty".into()));
    }
    let doc = resolve_hardware(&grid.hw)?;
    let params = resolve_params(&doc.cost_model, grid.params.as_deref())?;
    let baseline = grid.baseline.as_deref().map(|b| resolve_baseline(b, &doc)).transpose()?;
    let models = grid.models.iter().map(|m| resolve_model(m)).collect::<CliResult<Vec<_>>>()?;
    let points: Vec<(&ModelConfig, u64, u64)> = models
        .iter()
        .flat_map(|m| grid.lengths.iter().map(move |&(i, o)| (m, i, o)))
        .collect();

    let run_point = |&(m, len_in, len_out): &(&ModelConfig, u64, u64)| -> CliResult<SweepRow> {
        let req = InferenceRequest::new(len_in, len_out)?;
        let opts = SimOptions {
            baseline: baseline.clone(),
            trace_decode_tokens: None,
        };
        let outcome = match simulate(m, &doc.hardware, &req, &params, &opts) {
            Ok(sim) => {
                let r = sim.report;
                SweepOutcome::Done {
                    prefill_us: r.phase_latencies_us.prefill,
                    decode_us: r.phase_latencies_us.decode,
                    total_us: r.phase_latencies_us.total,
                    baseline_total_us: r.baseline.as_ref().map(|b| b.total_us),
                    speedup: r.speedup,
                }
            }
            Err(e @ Error::Capacity { .. }) => SweepOutcome::CapacityError(e.to_string()),
            Err(e) => return Err(e.into()),
        };
        Ok(SweepRow {
            model: m.clone(),
            len_in,
            len_out,
            outcome,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    pool.install(|| points.par_iter().map(run_point).collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS).map_err(|e| CliError::Other(e.to_string()))?;
    for row in rows {
        w.write_record(row.cells()).map_err(|e| CliError::Other(e.to_string()))?;
    }
    csv_string(w)
}

/// One derived-metric line with its published reference, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidateLine {
    pub metric: &'static str,
    pub unit: &'static str,
    pub derived: f64,
    /// Published value and allowed relative error.
    pub expected: Option<(f64, f64)>,
    pub note: Option<&'static str>,
}

impl ValidateLine {
    pub fn pass(&self) -> Option<bool> {
        self.expected.map(|(want, tol)| {
            if tol == 0.0 {
                self.derived == want
            } else {
                ((self.derived - want) / want).abs() <= tol
            }
        })
    }
}

const GIB: f64 = (1u64 << 30) as f64;
const MIB: f64 = (1u64 << 20) as f64;

/// Derived metrics of a hardware config. The bundled default carries its
/// published reference values; any other config prints metrics only.
pub fn validate_lines(doc: &HardwareDocument) -> Vec<ValidateLine> {
    let d = derive_metrics(&doc.hardware);
    let reference = HardwareDocument::preset("hpim-default")
        .map(|def| def.hardware == doc.hardware)
        .unwrap_or(false);
    let exp = |want: f64, tol: f64| reference.then_some((want, tol));
    let line = |metric, unit, derived, expected| ValidateLine {
        metric,
        unit,
        derived,
        expected,
        note: None,
    };
    vec![
        line("tcu_peak", "TFLOPS", d.tcu_peak_flops / 1e12, exp(262.0, 0.005)),
        line("pimunit_peak_per_core", "TFLOPS", d.pimunit_peak_flops_per_core / 1e12, exp(4.09, 0.005)),
        line("pimunit_peak_total", "TFLOPS", d.pimunit_peak_flops_total / 1e12, exp(131.0, 0.005)),
        line("hbm_pim_peak", "TFLOPS", d.hbm_pim_peak_flops / 1e12, exp(65.0, 0.01)),
        line("sram_capacity", "MiB", d.sram_capacity_bytes as f64 / MIB, exp(45.0, 0.0)),
        line("dram_capacity", "GiB", d.dram_capacity_bytes as f64 / GIB, exp(96.0, 0.0)),
        line("dram_ext_bw", "GB/s", d.dram_ext_bw / 1e9, exp(3276.0, 0.0)),
        ValidateLine {
            metric: "dram_internal_bw",
            unit: "TB/s",
            derived: d.dram_internal_bw / 1e12,
            expected: None,
            note: reference.then_some("published spec sheet lists 102.4 TB/s; not derivable from the bank datapath"),
        },
        line("channels", "", d.n_channels as f64, None),
        line("pseudo_channels", "", d.n_pch as f64, None),
        line("banks", "", d.n_banks as f64, None),
    ]
}

pub fn format_validate(name: &str, lines: &[ValidateLine]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "hardware: {name}");
    for l in lines {
        let derived = if l.unit.is_empty() {
            format!("{:.0}", l.derived)
        } else {
            format!("{:.3} {}", l.derived, l.unit)
        };
        let _ = match (l.expected, l.pass()) {
            (Some((want, tol)), Some(ok)) => writeln!(
                out,
                "{:<24} {:>18}  expected {} {} (tol {}%)  {}",
                l.metric,
                derived.trim_end(),
                want,
                l.unit,
                tol * 100.0,
                if ok { "PASS" } else { "FAIL" }
            ),
            _ => writeln!(out, "{:<24} {:>18}", l.metric, derived.trim_end()),
        };
        if let Some(n) = l.note {
            let _ = writeln!(out, "{:<24} note: {n}", "");
        }
    }
    out
}

/// Prints derived metrics; errors only on an unreadable or invalid config.
pub fn cmd_validate(hw: &str) -> CliResult<(String, bool)> {
    let doc = resolve_hardware(hw)?;
    let lines = validate_lines(&doc);
    let ok = lines.iter().all(|l| l.pass() != Some(false));
    Ok((format_validate(&doc.hardware.name, &lines), ok))
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| if text.ends_with('\n') { Ok(()) } else { out.write_all(b"\n") })
                .map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        let parse: CliError = serde_json::from_str::<ModelConfig>("{").map_err(Error::from).unwrap_err().into();
        assert_eq!(parse.exit_code(), 2);
        let cap: CliError = Error::Capacity {
            what: "x".into(),
            required: 2,
            available: 1,
        }
        .into();
        assert_eq!(cap.exit_code(), 3);
        let io: CliError = Error::Io(std::io::Error::other("x")).into();
        assert_eq!(io.exit_code(), 4);
    }

    #[test]
    fn capacity_row_cells() {
        let row = SweepRow {
            model: ModelConfig::preset("opt-30b").unwrap(),
            len_in: 1,
            len_out: 2,
            outcome: SweepOutcome::CapacityError("too big".into()),
        };
        let cells = row.cells();
        assert_eq!(cells.len(), SWEEP_COLUMNS.len());
        assert_eq!(&cells[..6], ["opt-30b", "7168", "48", "56", "1", "2"]);
        assert!(cells[6..].iter().all(|c| c == CAPACITY_ERROR));
    }

    #[test]
    fn default_validates() {
        let doc = HardwareDocument::preset("hpim-default").unwrap();
        let lines = validate_lines(&doc);
        assert!(lines.iter().filter(|l| l.expected.is_some()).all(|l| l.pass() == Some(true)));
        assert_eq!(lines.iter().filter(|l| l.expected.is_some()).count(), 7);
    }

    #[test]
    fn other_configs_print_without_expectations() {
        let mut doc = HardwareDocument::preset("hpim-default").unwrap();
        doc.hardware.n_stacks = 2;
        doc.hardware.link_map = None;
        let lines = validate_lines(&doc);
        assert!(lines.iter().all(|l| l.expected.is_none()));
        let dram = lines.iter().find(|l| l.metric == "dram_capacity").unwrap();
        assert_eq!(dram.derived, 48.0);
    }

    #[test]
    fn params_inline_override() {
        let base = CostModelParams::default();
        let p = resolve_params(&base, Some(r#"{"vcu_passes": {"gelu": 3}}"#)).unwrap();
        assert_eq!(p.vcu_passes.gelu, 3);
        assert_eq!(p.vcu_passes.softmax, base.vcu_passes.softmax);
        assert!(matches!(resolve_params(&base, Some("{oops")), Err(CliError::Parse(_))));
    }
}

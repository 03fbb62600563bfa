use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use magfim::dataset::{
    self, BinaryRecordWriter, CsvRecordWriter, DatasetRecord, DatasetSpec, NoiseMode, BINARY_MAGIC,
};
use magfim::geometry::{self, builtin, ColumnAxis, BUILTIN_NAMES};
use magfim::lm::{lm_solve, perturbed_init, LmConfig, DEFAULT_INIT_DN, DEFAULT_INIT_DP};
use magfim::mc::{self, CrlbMedians, ErrorStats, TrialSpec};
use magfim::observability::{lhs_sample, sweep_workspace, Interval};
use magfim::shell::{greedy_place, refine_place, RefineConfig, ShellSpec};
use magfim::{
    dipole::{DEFAULT_B_CLIP, DEFAULT_B_T},
    observability::DEFAULT_SIGMA,
    Error, MagnetModel, NoiseModel, SensorLayout, SweepReport, Vec3, WorkspaceSpec,
};

use crate::manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::InsufficientCandidates { .. } => {
                CliError::Usage(msg)
            }
            Error::Io(_) | Error::Json(_) | Error::Parse { .. } => CliError::Input(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Clip level in µT, or `none`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Clip(Option<f64>);

impl FromStr for Clip {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Clip(None));
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(Clip(Some(v))),
            _ => Err(format!(
                "expected a positive clip level in µT or 'none', got '{s}'"
            )),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LayoutArgs {
    /// Built-in layout (planar, single-split, staggered) or a layout JSON file.
    #[arg(long, default_value = "staggered")]
    layout: String,
    /// Which grid columns are outer in split layouts: x, y or ring.
    #[arg(long, default_value = "x")]
    axis: String,
}

fn parse_axis(s: &str) -> CliResult<ColumnAxis> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

fn resolve_layout(
    spec: &str,
    axis: ColumnAxis,
    manifest: &mut RunManifest,
) -> CliResult<SensorLayout> {
    if let Some(l) = builtin(spec, axis) {
        return Ok(l);
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| {
        let hint = if BUILTIN_NAMES.contains(&spec) {
            String::new()
        } else {
            format!(
                " (not a built-in layout either: {})",
                BUILTIN_NAMES.join(", ")
            )
        };
        input_err(path, format!("{e}{hint}"))
    })?;
    let layout = geometry::layout_from_json(&text).map_err(|e| input_err(path, e))?;
    manifest.input(path).map_err(|e| input_err(path, e))?;
    Ok(layout)
}

impl LayoutArgs {
    fn load(&self, manifest: &mut RunManifest) -> CliResult<SensorLayout> {
        resolve_layout(&self.layout, parse_axis(&self.axis)?, manifest)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WorkspaceArgs {
    /// Half-width of the x and y range (m) [default: 0.05].
    #[arg(long)]
    xy_half: Option<f64>,
    /// Lower height bound (m) [default: 0.05, datasets 0.045].
    #[arg(long)]
    z_min: Option<f64>,
    /// Upper height bound (m) [default: 0.15, datasets 0.155].
    #[arg(long)]
    z_max: Option<f64>,
    /// Pitch values within this many radians of a pole are not sampled [default: 0.05].
    #[arg(long)]
    theta_margin: Option<f64>,
}

impl WorkspaceArgs {
    fn apply(&self, mut ws: WorkspaceSpec) -> WorkspaceSpec {
        if let Some(h) = self.xy_half {
            ws.x_range = Interval::new(-h, h);
            ws.y_range = Interval::new(-h, h);
        }
        if let Some(z) = self.z_min {
            ws.z_range = Interval::new(z, ws.z_range.hi);
        }
        if let Some(z) = self.z_max {
            ws.z_range = Interval::new(ws.z_range.lo, z);
        }
        if let Some(m) = self.theta_margin {
            ws.theta_margin = m;
        }
        ws
    }
}

fn model(bt: f64) -> CliResult<MagnetModel> {
    Ok(MagnetModel::new(bt)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| input_err(path, e))
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> CliResult<()> {
    match out {
        Some(p) => {
            write_json(p, value)?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        None => {
            let text = serde_json::to_string_pretty(value)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

// geometry -------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct GeometryEvalArgs {
    /// Layouts to evaluate: built-in names or layout JSON files. Repeatable.
    #[arg(long = "layout", default_values_t = BUILTIN_NAMES.map(String::from))]
    layouts: Vec<String>,
    /// Which grid columns are outer in split layouts: x, y or ring.
    #[arg(long, default_value = "x")]
    axis: String,
    /// Latin-hypercube samples over the workspace.
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-channel noise standard deviation (µT).
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Magnet constant B_T (µT·m³).
    #[arg(long, default_value_t = DEFAULT_B_T)]
    bt: f64,
    #[command(flatten)]
    workspace: WorkspaceArgs,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_sweep_table(reports: &[SweepReport]) {
    println!(
        "{:<16} {:>8} {:>12} {:>12} {:>12} {:>12}",
        "layout", "valid", "pos med mm", "ori med deg", "lmin med", "kappa med"
    );
    for r in reports {
        println!(
            "{:<16} {:>8} {:>12.4} {:>12.4} {:>12.4e} {:>12.4e}",
            r.layout.name(),
            r.n_valid,
            r.pos_bound_mm.median,
            r.ori_bound_deg.median,
            r.lambda_min.median,
            r.kappa.median
        );
    }
}

pub fn geometry_eval(args: GeometryEvalArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("geometry eval", &args);
    manifest.seed("lhs", args.seed);
    let axis = parse_axis(&args.axis)?;
    let layouts = args
        .layouts
        .iter()
        .map(|s| resolve_layout(s, axis, &mut manifest))
        .collect::<CliResult<Vec<_>>>()?;
    let ws = args
        .workspace
        .apply(WorkspaceSpec::benchmark())
        .with_samples(args.samples, args.seed);
    let model = model(args.bt)?;
    let noise = NoiseModel::new(args.sigma)?;
    let reports = layouts
        .iter()
        .map(|l| sweep_workspace(l, &ws, &model, &noise))
        .collect::<magfim::Result<Vec<_>>>()?;
    print_sweep_table(&reports);
    manifest.finish();
    if let Some(out) = &args.out {
        write_json(out, &json!({ "manifest": manifest, "reports": reports }))?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct GeometryShowArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Write the layout JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn geometry_show(args: GeometryShowArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("geometry show", &args);
    let layout = args.layout.load(&mut manifest)?;
    println!("{} ({} sensors, m)", layout.name(), layout.len());
    for (i, p) in layout.positions().iter().enumerate() {
        println!("{i:>3} {:>9.4} {:>9.4} {:>9.4}", p.x, p.y, p.z);
    }
    if let Some(out) = &args.out {
        geometry::save_layout(&layout, out).map_err(|e| input_err(out, e))?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

// shell ----------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct ShellOptimizeArgs {
    /// Cube side length (m).
    #[arg(long, default_value_t = 0.16)]
    side: f64,
    /// Height of the cube center (m); the center lies on the z axis.
    #[arg(long, default_value_t = 0.10)]
    center_z: f64,
    /// Number of sensors to place (at least 5).
    #[arg(long, default_value_t = 16)]
    sensors: usize,
    /// Candidate grid resolution per face edge (grid x grid sites per face).
    #[arg(long, default_value_t = 15)]
    grid: usize,
    /// Workspace poses in the placement objective.
    #[arg(long, default_value_t = 2000)]
    poses: usize,
    /// Seed of the objective's pose sample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-channel noise standard deviation (µT).
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Magnet constant B_T (µT·m³).
    #[arg(long, default_value_t = DEFAULT_B_T)]
    bt: f64,
    /// Stop after greedy selection.
    #[arg(long)]
    skip_refine: bool,
    /// Maximum refinement cycles over all sensors.
    #[arg(long, default_value_t = 10)]
    max_cycles: usize,
    /// Smallest refinement step (m).
    #[arg(long, default_value_t = 1e-4)]
    min_step: f64,
    /// Samples of the final CRLB sweep for the result and the staggered baseline.
    #[arg(long, default_value_t = 200_000)]
    eval_samples: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[command(flatten)]
    workspace: WorkspaceArgs,
    /// Write the result JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the optimized layout JSON here.
    #[arg(long)]
    layout_out: Option<PathBuf>,
}

pub fn shell_optimize(args: ShellOptimizeArgs) -> CliResult<()> {
    if args.sensors < 5 {
        return Err(CliError::Usage(format!(
            "--sensors {} is below 5, the number of pose parameters",
            args.sensors
        )));
    }
    if args.grid == 0 {
        return Err(CliError::Usage("--grid must be at least 1".into()));
    }
    let mut manifest = RunManifest::start("shell optimize", &args);
    manifest.seed("poses", args.seed);
    manifest.seed("eval", args.eval_seed);
    let shell = ShellSpec::new(Vec3::new(0.0, 0.0, args.center_z), args.side)?;
    let model = model(args.bt)?;
    let noise = NoiseModel::new(args.sigma)?;
    let base = args.workspace.apply(WorkspaceSpec::benchmark());
    let poses = lhs_sample(&base.with_samples(args.poses, args.seed))?;

    eprintln!(
        "greedy: {} sensors from {} sites per face",
        args.sensors,
        args.grid * args.grid
    );
    let greedy = greedy_place(
        &shell,
        args.sensors,
        args.grid * args.grid,
        &poses,
        &model,
        &noise,
    )?;
    let refined = if args.skip_refine {
        None
    } else {
        eprintln!("refining");
        let config = RefineConfig {
            max_cycles: args.max_cycles,
            min_step: args.min_step,
            ..RefineConfig::default()
        };
        Some(refine_place(
            &greedy.layout,
            &shell,
            &poses,
            &model,
            &noise,
            &config,
        )?)
    };

    eprintln!("evaluating on {} samples", args.eval_samples);
    let eval = base.with_samples(args.eval_samples, args.eval_seed);
    let mut final_result = refined.clone().unwrap_or_else(|| greedy.clone());
    let final_report = sweep_workspace(&final_result.layout, &eval, &model, &noise)?;
    let baseline = sweep_workspace(&geometry::build_staggered_split(), &eval, &model, &noise)?;
    final_result.report = Some(final_report.clone());
    let on_shell = final_result
        .layout
        .positions()
        .iter()
        .all(|p| shell.locate(p).is_some());
    let ratios = json!({
        "mean_pos": final_report.pos_bound_mm.mean / baseline.pos_bound_mm.mean,
        "mean_ori": final_report.ori_bound_deg.mean / baseline.ori_bound_deg.mean,
        "median_pos": final_report.pos_bound_mm.median / baseline.pos_bound_mm.median,
        "median_ori": final_report.ori_bound_deg.median / baseline.ori_bound_deg.median,
    });

    print_sweep_table(&[baseline.clone(), final_report.clone()]);
    println!(
        "mean bound ratio vs staggered: pos {:.3}, ori {:.3}",
        ratios["mean_pos"].as_f64().unwrap_or(f64::NAN),
        ratios["mean_ori"].as_f64().unwrap_or(f64::NAN)
    );

    if let Some(p) = &args.layout_out {
        geometry::save_layout(&final_result.layout, p).map_err(|e| input_err(p, e))?;
        eprintln!("wrote {}", p.display());
    }
    manifest.finish();
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({
                "manifest": manifest,
                "shell": shell,
                "greedy": greedy,
                "refined": refined,
                "final": final_result,
                "baseline": baseline,
                "ratios_vs_staggered": ratios,
                "all_on_shell": on_shell,
            }),
        )?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

// dataset --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Bin,
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetGenArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Number of records.
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// none, abs:<sigma µT> or relative:<fraction of |B|>.
    #[arg(long, default_value = "relative:0.02")]
    noise: NoiseMode,
    /// Saturation level (µT) or none.
    #[arg(long, default_value_t = Clip(Some(DEFAULT_B_CLIP)), value_parser = clap::value_parser!(Clip))]
    clip: Clip,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Magnet constant B_T (µT·m³).
    #[arg(long, default_value_t = DEFAULT_B_T)]
    bt: f64,
    #[command(flatten)]
    workspace: WorkspaceArgs,
    /// Output data file.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the run manifest [default: <out>.manifest.json].
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl fmt::Display for Clip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("none"),
        }
    }
}

pub fn dataset_gen(args: DatasetGenArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("dataset gen", &args);
    manifest.seed("dataset", args.seed);
    let layout = args.layout.load(&mut manifest)?;
    let spec = DatasetSpec {
        workspace: args.workspace.apply(WorkspaceSpec::dataset()),
        layout: layout.clone(),
        model: model(args.bt)?,
        b_clip: args.clip.0,
        noise: args.noise,
        count: args.count,
        seed: args.seed,
    };
    let mut stream = dataset::generate(&spec)?;
    let file = File::create(&args.out).map_err(|e| input_err(&args.out, e))?;
    let sink = BufWriter::new(file);
    let n = layout.len();
    let mut clipped_records = 0usize;
    let mut count_clipped = |r: &DatasetRecord| {
        if r.field.n_saturated() > 0 {
            clipped_records += 1;
        }
    };
    match args.format {
        Format::Csv => {
            let mut w = CsvRecordWriter::new(sink, n)?;
            for rec in stream.by_ref() {
                let rec = rec?;
                count_clipped(&rec);
                w.write(&rec)?;
            }
            w.finish()?.flush()?;
        }
        Format::Bin => {
            let mut w = BinaryRecordWriter::new(sink, n, args.count as u64)?;
            for rec in stream.by_ref() {
                let rec = rec?;
                count_clipped(&rec);
                w.write(&rec)?;
            }
            w.finish()?.flush()?;
        }
    }
    manifest.finish();
    let manifest_path = args.manifest.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    });
    write_json(
        &manifest_path,
        &json!({
            "manifest": manifest,
            "layout": layout,
            "spec": spec,
            "records": args.count,
            "records_with_clipping": clipped_records,
            "resampled_poses": stream.resampled(),
        }),
    )?;
    eprintln!(
        "wrote {} records ({} with clipped channels) to {}",
        args.count,
        clipped_records,
        args.out.display()
    );
    Ok(())
}

// solve ----------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct SolveArgs {
    /// Dataset file (CSV or binary, detected from its first bytes).
    #[arg(long)]
    input: PathBuf,
    /// Zero-based record index.
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[command(flatten)]
    layout: LayoutArgs,
    /// Magnet constant B_T (µT·m³).
    #[arg(long, default_value_t = DEFAULT_B_T)]
    bt: f64,
    /// Initial guess offset on every position component (m).
    #[arg(long, default_value_t = DEFAULT_INIT_DP, allow_negative_numbers = true)]
    dp: f64,
    /// Initial guess offset on every orientation-vector component.
    #[arg(long, default_value_t = DEFAULT_INIT_DN, allow_negative_numbers = true)]
    dn: f64,
    /// Leave clipped channels out of the fit.
    #[arg(long)]
    use_sat_mask: bool,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_records(path: &Path) -> CliResult<Vec<DatasetRecord>> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).map_err(|e| input_err(path, e))?;
    let n = f.read(&mut head).map_err(|e| input_err(path, e))?;
    let records = if n == 4 && &head == BINARY_MAGIC {
        dataset::read_binary(path)
    } else {
        dataset::read_csv(path)
    };
    records.map_err(|e| input_err(path, e))
}

pub fn solve(args: SolveArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("solve", &args);
    let layout = args.layout.load(&mut manifest)?;
    let records = read_records(&args.input)?;
    manifest
        .input(&args.input)
        .map_err(|e| input_err(&args.input, e))?;
    let rec = records.get(args.row).ok_or_else(|| {
        CliError::Usage(format!(
            "--row {} but the file holds {} records",
            args.row,
            records.len()
        ))
    })?;
    if rec.field.n_sensors() != layout.len() {
        return Err(CliError::Usage(format!(
            "record has {} sensors, layout '{}' has {}",
            rec.field.n_sensors(),
            layout.name(),
            layout.len()
        )));
    }
    let config = LmConfig {
        max_iters: args.max_iters,
        use_sat_mask: args.use_sat_mask,
        ..LmConfig::default()
    };
    let init = perturbed_init(&rec.pose, args.dp, args.dn);
    let est = lm_solve(&rec.field, &layout, &model(args.bt)?, &init, &config)?;
    let e_pos = mc::e_pos(&est.p_hat, &rec.pose.p);
    let e_ori = mc::e_ori(&est.n_hat, rec.n.as_vec());
    eprintln!(
        "converged {} after {} iterations: E_pos {:.4} mm, E_ori {:.4} deg",
        est.converged, est.iters, e_pos, e_ori
    );
    manifest.finish();
    emit_json(
        args.out.as_deref(),
        &json!({
            "manifest": manifest,
            "layout": layout,
            "truth": rec.pose,
            "init": init,
            "estimate": est,
            "e_pos_mm": e_pos,
            "e_ori_deg": e_ori,
        }),
    )
}

// mc -------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct McEvalArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Absolute noise standard deviation (µT); 0 means noiseless.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Noise mode overriding --sigma: none, abs:<sigma µT> or relative:<fraction>.
    #[arg(long)]
    noise: Option<NoiseMode>,
    /// Trials in total, or per level with --profile-z.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Saturation level (µT) or none.
    #[arg(long, default_value_t = Clip(Some(DEFAULT_B_CLIP)), value_parser = clap::value_parser!(Clip))]
    clip: Clip,
    /// Initial guess offset on every position component (m).
    #[arg(long, default_value_t = DEFAULT_INIT_DP, allow_negative_numbers = true)]
    dp: f64,
    /// Initial guess offset on every orientation-vector component.
    #[arg(long, default_value_t = DEFAULT_INIT_DN, allow_negative_numbers = true)]
    dn: f64,
    /// Leave non-converged solves out of the statistics.
    #[arg(long)]
    converged_only: bool,
    /// Leave clipped channels out of the fit.
    #[arg(long)]
    use_sat_mask: bool,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Height profile as start:stop:step (m), e.g. 0.050:0.150:0.010.
    #[arg(long)]
    profile_z: Option<String>,
    /// Magnet constant B_T (µT·m³).
    #[arg(long, default_value_t = DEFAULT_B_T)]
    bt: f64,
    #[command(flatten)]
    workspace: WorkspaceArgs,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a CSV table (one row per level) here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
pub fn parse_levels(s: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Usage(format!("--profile-z expects start:stop:step, got '{s}'"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    let [a, b, step] = parts[..] else {
        return Err(bad());
    };
    if !(a.is_finite() && b.is_finite() && step > 0.0 && b >= a) {
        return Err(bad());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|k| ((a + k as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

#[derive(Debug, Serialize)]
struct Dominance {
    pos: bool,
    ori: bool,
    status: &'static str,
}

fn dominance(stats: &ErrorStats, crlb: &CrlbMedians) -> Dominance {
    let pos = stats.pos_mm.rmse >= crlb.pos_mm;
    let ori = stats.ori_deg.rmse >= crlb.angle_deg;
    Dominance {
        pos,
        ori,
        status: if pos && ori { "PASS" } else { "FAIL" },
    }
}

fn print_stats_row(label: &str, s: &ErrorStats, crlb: Option<&CrlbMedians>) {
    let c = |f: fn(&CrlbMedians) -> f64| {
        crlb.map(f)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into())
    };
    println!(
        "{:<8} {:>6}/{:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10} {:>10}",
        label,
        s.n_converged,
        s.n_trials,
        s.pos_mm.mean,
        s.pos_mm.rmse,
        s.pos_mm.max,
        s.ori_deg.mean,
        s.ori_deg.rmse,
        s.ori_deg.max,
        c(|m| m.pos_mm),
        c(|m| m.angle_deg),
    );
}

pub fn mc_eval(args: McEvalArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("mc eval", &args);
    manifest.seed("trials", args.seed);
    let layout = args.layout.load(&mut manifest)?;
    let model = model(args.bt)?;
    let noise = match args.noise {
        Some(n) => n,
        None if args.sigma == 0.0 => NoiseMode::None,
        None => NoiseMode::Absolute { sigma: args.sigma },
    };
    noise.validate()?;
    let solver = LmConfig {
        max_iters: args.max_iters,
        use_sat_mask: args.use_sat_mask,
        ..LmConfig::default()
    };
    let spec = TrialSpec {
        workspace: args
            .workspace
            .apply(WorkspaceSpec::benchmark())
            .with_samples(args.trials, args.seed),
        b_clip: args.clip.0,
        init_dp: args.dp,
        init_dn: args.dn,
        include_nonconverged: !args.converged_only,
    };
    let crlb_noise = match noise {
        NoiseMode::Absolute { sigma } if sigma > 0.0 => Some(NoiseModel::new(sigma)?),
        _ => None,
    };

    println!(
        "{:<8} {:>13} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "group",
        "conv/trials",
        "pos mean",
        "pos rmse",
        "pos max",
        "ori mean",
        "ori rmse",
        "ori max",
        "crlb pos",
        "crlb ang"
    );
    let body = match &args.profile_z {
        Some(levels) => {
            let zs = parse_levels(levels)?;
            let profile = mc::layer_profile(&layout, &model, &noise, &solver, &zs, &spec)?;
            let checks: Vec<_> = profile
                .levels
                .iter()
                .map(|l| {
                    print_stats_row(&format!("{:.3}", l.z), &l.stats, l.crlb.as_ref());
                    l.crlb
                        .as_ref()
                        .map(|c| json!({ "z": l.z, "check": dominance(&l.stats, c) }))
                })
                .collect();
            if let Some(p) = &args.csv {
                let f = BufWriter::new(File::create(p).map_err(|e| input_err(p, e))?);
                mc::write_profile_csv(f, &profile)?;
                eprintln!("wrote {}", p.display());
            }
            let all_pass = checks
                .iter()
                .flatten()
                .all(|c| c["check"]["status"] == "PASS");
            json!({
                "profile": profile,
                "crlb_dominance": crlb_noise.map(|_| json!({
                    "levels": checks,
                    "status": if all_pass { "PASS" } else { "FAIL" },
                })),
            })
        }
        None => {
            let poses = lhs_sample(&spec.workspace)?;
            let outcomes = mc::run_trials(&layout, &model, &noise, &solver, &spec, &poses, 0)?;
            let stats = ErrorStats::from_outcomes(&outcomes, spec.include_nonconverged)?;
            let crlb = match &crlb_noise {
                Some(nm) => CrlbMedians::over(&layout, &model, nm, &poses)?,
                None => None,
            };
            print_stats_row("all", &stats, crlb.as_ref());
            if let Some(p) = &args.csv {
                let f = BufWriter::new(File::create(p).map_err(|e| input_err(p, e))?);
                mc::write_stats_csv(f, &stats, crlb.as_ref())?;
                eprintln!("wrote {}", p.display());
            }
            let check = crlb.as_ref().map(|c| dominance(&stats, c));
            if let Some(c) = &check {
                println!("CRLB dominance: {}", c.status);
            }
            json!({ "stats": stats, "crlb_median": crlb, "crlb_dominance": check })
        }
    };
    manifest.finish();
    let mut out = json!({
        "manifest": manifest,
        "layout": layout,
        "noise": noise,
        "trial_spec": spec,
        "solver": solver,
    });
    if let (Some(o), Some(b)) = (out.as_object_mut(), body.as_object()) {
        o.extend(b.clone());
    }
    emit_json(args.out.as_deref(), &out)
}

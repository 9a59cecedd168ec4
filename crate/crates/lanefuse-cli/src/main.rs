//! Pipeline driver: simulate → estimate → optimize → fuse → evaluate → export.
//!
//! Every stage reads and writes versioned JSON map exchange files, so the
//! stages can be rerun, inspected, or replaced individually. Exit codes:
//! 0 success, 1 usage error, 2 data or processing error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use lanefuse::io::{
    load_map_file, parse_scenario_toml, save_map_file, to_geojson, MapExchangeFile, MapFileKind,
    MapFileMetadata,
};
use lanefuse::map_fusion::MapFusionParams;
use lanefuse::metrics::{evaluate, ErrorStats};
use lanefuse::pipeline::align_drives;
use lanefuse::pose_graph::OptimizeConfig;
use lanefuse::sim::{
    build_scenario, estimate_lanes, simulate_drive, DriveMap, ScenarioSpec, ScenarioTemplate,
};

#[derive(Parser)]
#[command(
    name = "lanefuse",
    version,
    about = "Crowd-sourced lane-level map fusion pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: ground truth plus per-drive raw data.
    Simulate(SimulateArgs),
    /// Estimate lane-line splines from each drive's raw detections.
    Estimate(EstimateArgs),
    /// Align drives with pose-graph optimization and lane registration.
    Optimize(OptimizeArgs),
    /// Fuse the aligned drives' lane lines into one map.
    Fuse(FuseArgs),
    /// Compare a fused map against ground truth.
    Evaluate(EvaluateArgs),
    /// Export any map file as GeoJSON for plotting.
    ExportGeojson(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario template: straight, curve, split_merge, traffic_island, composite.
    #[arg(long, conflicts_with = "scenario")]
    template: Option<String>,
    /// TOML scenario spec file; command-line flags override its values.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Number of drives through the scenario.
    #[arg(long)]
    drives: Option<u32>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Road length in meters.
    #[arg(long)]
    length: Option<f64>,
    /// Per-axis GNSS standard deviation in meters.
    #[arg(long)]
    gnss_sigma: Option<f64>,
    /// Output directory for ground_truth.json and drive_NN.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Drive file or directory of drive files.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file for the drive set with estimated lane lines.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Drive file or directory of drive files (with estimated lane lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file for the aligned drive set.
    #[arg(long)]
    out: PathBuf,
    /// Maximum optimizer iterations.
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
}

#[derive(Args)]
struct FuseArgs {
    /// Aligned drive file or directory of drive files.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file for the fused map.
    #[arg(long)]
    out: PathBuf,
    /// Association gate: target grid points within this distance of the
    /// source curve count as overlapping (meters).
    #[arg(long)]
    gamma: Option<f64>,
    /// Minimum overlap run length in grid points.
    #[arg(long)]
    min_overlap: Option<usize>,
    /// Lane lines whose curves come within this distance are considered for
    /// fusion (meters).
    #[arg(long)]
    cluster_radius: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fused map file.
    #[arg(long)]
    fused: PathBuf,
    /// Ground-truth map file.
    #[arg(long)]
    gt: PathBuf,
    /// Evaluate in the horizontal plane only (ignore z).
    #[arg(long)]
    planar: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Map file of any kind.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output GeoJSON path.
    #[arg(long)]
    out: PathBuf,
    /// Polyline samples per spline segment.
    #[arg(long, default_value_t = 10)]
    samples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; everything else
            // is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> lanefuse::Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Estimate(args) => estimate(args),
        Command::Optimize(args) => optimize_cmd(args),
        Command::Fuse(args) => fuse(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::ExportGeojson(args) => export_geojson(args),
    }
}

fn simulate(args: SimulateArgs) -> lanefuse::Result<()> {
    let mut spec = match &args.scenario {
        Some(path) => parse_scenario_toml(&fs::read_to_string(path)?)?,
        None => ScenarioSpec::default(),
    };
    if let Some(template) = &args.template {
        spec.template = ScenarioTemplate::from_str(template)?;
    }
    if let Some(drives) = args.drives {
        spec.drives = drives;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(length) = args.length {
        spec.length = length;
    }
    if let Some(sigma) = args.gnss_sigma {
        spec.gnss_sigma = sigma;
    }

    let metadata = MapFileMetadata {
        seed: Some(spec.seed),
        scenario: Some(spec.template.as_str().into()),
        comment: None,
    };
    let gt = build_scenario(&spec)?;
    fs::create_dir_all(&args.out)?;
    save_map_file(
        &args.out.join("ground_truth.json"),
        &MapExchangeFile::ground_truth(gt.clone(), metadata.clone()),
    )?;
    for drive_id in 0..spec.drives {
        let drive = simulate_drive(&gt, &spec, drive_id)?;
        save_map_file(
            &args.out.join(format!("drive_{drive_id:02}.json")),
            &MapExchangeFile::drive_set(std::slice::from_ref(&drive), metadata.clone()),
        )?;
    }
    println!(
        "wrote ground truth ({} lane lines, {} signs) and {} drives to {}",
        gt.lane_lines.len(),
        gt.signs.len(),
        spec.drives,
        args.out.display()
    );
    Ok(())
}

/// Loads every drive from `path`, which may be a single drive file or a
/// directory scanned for `*.json` drive files (sorted by name).
fn load_drives(path: &Path) -> lanefuse::Result<(Vec<DriveMap>, MapFileMetadata)> {
    let mut files = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        entries.sort();
        for entry in entries {
            let file = load_map_file(&entry)?;
            if file.kind == MapFileKind::DriveSet {
                files.push(file);
            }
        }
    } else {
        files.push(load_map_file(path)?);
    }
    let metadata = files
        .first()
        .map(|f| f.metadata.clone())
        .unwrap_or_default();
    let mut drives = Vec::new();
    for file in &files {
        if file.kind != MapFileKind::DriveSet {
            return Err(lanefuse::Error::MapFile(format!(
                "expected a drive-set file, found {:?}",
                file.kind
            )));
        }
        for record in &file.drives {
            drives.push(lanefuse::io::drive_from_record(record)?);
        }
    }
    if drives.is_empty() {
        return Err(lanefuse::Error::MapFile(format!(
            "no drives found in {}",
            path.display()
        )));
    }
    drives.sort_by_key(|d| d.drive_id);
    Ok((drives, metadata))
}

fn estimate(args: EstimateArgs) -> lanefuse::Result<()> {
    let (mut drives, metadata) = load_drives(&args.input)?;
    for drive in &mut drives {
        drive.lane_lines = estimate_lanes(drive);
        println!(
            "drive {}: estimated {} lane lines from {} scans",
            drive.drive_id,
            drive.lane_lines.len(),
            drive.scans.len()
        );
    }
    save_map_file(&args.out, &MapExchangeFile::drive_set(&drives, metadata))
}

fn optimize_cmd(args: OptimizeArgs) -> lanefuse::Result<()> {
    let (drives, metadata) = load_drives(&args.input)?;
    let config = OptimizeConfig {
        max_iterations: args.max_iterations,
        ..OptimizeConfig::default()
    };
    let aligned = align_drives(&drives, &config)?;
    println!("aligned {} drives", aligned.len());
    save_map_file(&args.out, &MapExchangeFile::drive_set(&aligned, metadata))
}

fn fuse(args: FuseArgs) -> lanefuse::Result<()> {
    let (drives, metadata) = load_drives(&args.input)?;
    let mut params = MapFusionParams::default();
    if let Some(gamma) = args.gamma {
        params.fusion.gamma = gamma;
    }
    if let Some(min_overlap) = args.min_overlap {
        params.fusion.tau_min = min_overlap;
    }
    if let Some(radius) = args.cluster_radius {
        params.cluster_radius = radius;
    }
    let input_count: usize = drives.iter().map(|d| d.lane_lines.len()).sum();
    let fused = lanefuse::pipeline::fuse_drives(&drives, &params);
    println!(
        "fused {} lane lines from {} drives into {}",
        input_count,
        drives.len(),
        fused.len()
    );
    let lanes: Vec<_> = fused
        .trajectories
        .iter()
        .cloned()
        .zip(fused.drive_ids.iter().copied())
        .collect();
    save_map_file(&args.out, &MapExchangeFile::fused_map(&lanes, metadata))
}

struct Row<'a>(&'a str, &'a ErrorStats);

impl fmt::Display for Row<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8}",
            self.0, self.1.mean, self.1.std_dev, self.1.max, self.1.count
        )
    }
}

fn evaluate_cmd(args: EvaluateArgs) -> lanefuse::Result<()> {
    let fused_file = load_map_file(&args.fused)?;
    let gt_file = load_map_file(&args.gt)?;
    let gt = gt_file.ground_truth.ok_or_else(|| {
        lanefuse::Error::MapFile("ground-truth file has no ground_truth section".into())
    })?;
    let mut map = Vec::new();
    for record in fused_file
        .lane_lines
        .iter()
        .chain(fused_file.drives.iter().flat_map(|d| d.lane_lines.iter()))
    {
        map.push(lanefuse::io::lane_line_from_record(record)?);
    }
    let report = evaluate(&map, &gt, args.planar)?;
    print!(
        "{:<10} {:>8} {:>8} {:>8} {:>8}\n{}{}",
        "error [m]",
        "mean",
        "stddev",
        "max",
        "samples",
        Row("absolute", &report.absolute),
        Row("relative", &report.relative),
    );
    println!(
        "lane lines: {} fused / {} ground truth, {} matched within 1 m",
        report.fused_lane_count, report.ground_truth_lane_count, report.matched_lane_count
    );
    Ok(())
}

fn export_geojson(args: ExportArgs) -> lanefuse::Result<()> {
    let file = load_map_file(&args.input)?;
    let text = to_geojson(&file, args.samples)?;
    fs::write(&args.out, text)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

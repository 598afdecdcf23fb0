//! Subcommand implementations.
//!
//! Each command first resolves its configuration (defaults, then the config
//! file, then flags) — failures there are usage errors — and then runs;
//! failures while running are runtime errors.

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sonotrack::baseline::{
    calibrate, estimate_sequence, simulate_calibration_pairs, BaselineParams, CalibrationSim, DecorrModel,
    PatchGrid,
};
use sonotrack::compound::{
    compound, fill_holes, save_volume, TrajectorySource, VolumeData, VolumeProvenance,
};
use sonotrack::config::{join, render, KeyValues};
use sonotrack::io::{create_write, open_read};
use sonotrack::metrics::evaluate;
use sonotrack::network::{write_attention_pgm, Model, ModelConfig};
use sonotrack::pose::{
    accumulate_poses, read_poses_csv, write_poses_csv, ImageGeometry, PoseVector, Trajectory,
};
use sonotrack::sim::{
    read_dataset, read_scan, scan_dir_name, simulate_dataset, simulate_scan, write_dataset, write_scan,
    DatasetSpec, SimConfig, TrajectoryShape, FRAMES_FILE, META_FILE, POSES_FILE,
};
use sonotrack::tensor::checkpoint::Checkpoint;
use sonotrack::train::{
    predict_scan, split_by_subject, subject_of, train_to_dir, TrainConfig, Trainer, BEST_CHECKPOINT,
    LAST_CHECKPOINT, TRAIN_LOG_FILE, VALIDATION_LOG_FILE,
};

use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::{CalibrateArgs, Cli, Command, CompoundArgs, EvaluateArgs, InferArgs, SimulateArgs, TrainArgs};

pub const RELATIVE_POSES_FILE: &str = "relative_poses.csv";
pub const ABSOLUTE_POSES_FILE: &str = "poses.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const VOLUME_STEM: &str = "volume";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const ATTENTION_DIR: &str = "attention";

/// Default voxel edge for compounding (mm).
pub const DEFAULT_VOXEL_MM: f64 = 0.2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or refused overwrite (exit 2).
    Usage(String),
    /// Failure while running (exit 1).
    Runtime(sonotrack::error::Error),
}

impl From<sonotrack::error::Error> for CliError {
    fn from(e: sonotrack::error::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut kv = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            KeyValues::parse(&text).map_err(usage)?
        }
        None => KeyValues::default(),
    };
    let seed = match cli.seed {
        Some(s) => {
            kv.take::<u64>("seed").map_err(usage)?;
            s
        }
        None => kv.take_or("seed", 0u64).map_err(usage)?,
    };
    let out = cli.out.clone().ok_or_else(|| usage("--out <dir> is required"))?;
    let ctx = Ctx {
        seed,
        out,
        force: cli.force,
    };
    match &cli.command {
        Command::Simulate(a) => simulate(&ctx, kv, a),
        Command::Train(a) => train(&ctx, kv, a),
        Command::Infer(a) => infer(&ctx, kv, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, kv, a),
        Command::Compound(a) => compound_cmd(&ctx, kv, a),
        Command::CalibrateBaseline(a) => calibrate_cmd(&ctx, kv, a),
    }
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    /// Refuses to overwrite existing outputs unless `--force`.
    fn guard(&self, names: &[&str]) -> CliResult<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.out.join(n);
            if p.exists() {
                return Err(usage(format!(
                    "{} already exists (pass --force to overwrite)",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn prepare(&self, names: &[&str]) -> CliResult<()> {
        self.guard(names)?;
        fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn manifest(&self, command: &'static str) -> Manifest {
        Manifest::new(command, self.seed)
    }

    fn finish(&self, mut m: Manifest, outputs: &[&str]) -> CliResult<()> {
        m.outputs = outputs.iter().map(|s| s.to_string()).collect();
        m.write(&self.out)?;
        Ok(())
    }
}

fn pair<T: Copy>(v: [T; 2]) -> (T, T) {
    (v[0], v[1])
}

fn baseline_params(kv: &mut KeyValues) -> CliResult<BaselineParams> {
    let d = BaselineParams::default();
    Ok(BaselineParams {
        patches: PatchGrid {
            grid: kv.take_or("patch_grid", d.patches.grid).map_err(usage)?,
            size: kv.take_or("patch_size", d.patches.size).map_err(usage)?,
        },
        max_shift: kv.take_or("max_shift", d.max_shift).map_err(usage)?,
    })
}

fn baseline_params_text(p: &BaselineParams) -> String {
    render(&[
        ("patch_grid", p.patches.grid.to_string()),
        ("patch_size", p.patches.size.to_string()),
        ("max_shift", p.max_shift.to_string()),
    ])
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(open_read(path)?)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(create_write(path)?)
}

fn write_csv_file(path: &Path, poses: &[PoseVector]) -> CliResult<()> {
    let mut w = create(path)?;
    write_poses_csv(&mut w, poses)?;
    w.flush()?;
    Ok(())
}

fn read_csv_file(path: &Path) -> CliResult<Vec<PoseVector>> {
    Ok(read_poses_csv(open(path)?)?)
}

// ---------------------------------------------------------------- simulate

fn simulate(ctx: &Ctx, mut kv: KeyValues, a: &SimulateArgs) -> CliResult<()> {
    let d = SimConfig::default();
    let shape_given = a.shape.is_some() || kv.contains("shape");
    let shape: TrajectoryShape = match &a.shape {
        Some(s) => s.parse().map_err(usage)?,
        None => kv.take_or("shape", d.shape).map_err(usage)?,
    };
    kv.take::<String>("shape").map_err(usage)?;
    let mut cfg = SimConfig {
        image_extent: kv.take_or("image_extent", d.image_extent).map_err(usage)?,
        pitch_mm: kv.take_or("pitch_mm", d.pitch_mm).map_err(usage)?,
        frame_rate_hz: kv.take_or("frame_rate_hz", d.frame_rate_hz).map_err(usage)?,
        shape,
        n_frames: kv.take_or("n_frames", d.n_frames).map_err(usage)?,
        step_mm: kv.take_or("step_mm", d.step_mm).map_err(usage)?,
        lateral_amplitude_mm: kv
            .take_or("lateral_amplitude_mm", d.lateral_amplitude_mm)
            .map_err(usage)?,
        speed_variation: kv.take_or("speed_variation", d.speed_variation).map_err(usage)?,
        tilt_deg: kv.take_or("tilt_deg", d.tilt_deg).map_err(usage)?,
        jitter_sigma: kv
            .take_array("jitter_sigma")
            .map_err(usage)?
            .unwrap_or(d.jitter_sigma),
        psf_sigma_mm: kv
            .take_array("psf_sigma_mm")
            .map_err(usage)?
            .unwrap_or(d.psf_sigma_mm),
        density_per_mm3: kv.take_or("density_per_mm3", d.density_per_mm3).map_err(usage)?,
    };
    cfg.n_frames = a.frames.unwrap_or(cfg.n_frames);
    cfg.step_mm = a.step.unwrap_or(cfg.step_mm);
    cfg.image_extent = a.extent.unwrap_or(cfg.image_extent);
    let scans = a.scans.unwrap_or(kv.take_or("scans", 1usize).map_err(usage)?);
    kv.take::<usize>("scans").map_err(usage)?;
    let toy = DatasetSpec::toy(scans.max(1));
    let spec = DatasetSpec {
        base: cfg.clone(),
        n_scans: scans,
        step_range_mm: kv
            .take_array("step_range_mm")
            .map_err(usage)?
            .map_or(toy.step_range_mm, pair),
        lateral_amplitude_range_mm: kv
            .take_array("lateral_amplitude_range_mm")
            .map_err(usage)?
            .map_or(toy.lateral_amplitude_range_mm, pair),
        tilt_range_deg: kv
            .take_array("tilt_range_deg")
            .map_err(usage)?
            .map_or(toy.tilt_range_deg, pair),
        shapes: if shape_given { vec![shape] } else { toy.shapes },
    };
    let subject = a.subject.clone().unwrap_or_else(|| "subject_000".into());
    kv.finish().map_err(usage)?;
    cfg.trajectory_spec(ctx.seed).validate().map_err(usage)?;
    cfg.geometry().map_err(usage)?;
    if scans == 0 {
        return Err(usage("--scans must be at least 1"));
    }
    spec.validate().map_err(usage)?;

    let mut m = ctx.manifest("simulate");
    m.config_text(&render(&[
        ("image_extent", cfg.image_extent.to_string()),
        ("pitch_mm", cfg.pitch_mm.to_string()),
        ("frame_rate_hz", cfg.frame_rate_hz.to_string()),
        ("shape", cfg.shape.to_string()),
        ("n_frames", cfg.n_frames.to_string()),
        ("step_mm", cfg.step_mm.to_string()),
        ("lateral_amplitude_mm", cfg.lateral_amplitude_mm.to_string()),
        ("speed_variation", cfg.speed_variation.to_string()),
        ("tilt_deg", cfg.tilt_deg.to_string()),
        ("jitter_sigma", join(&cfg.jitter_sigma)),
        ("psf_sigma_mm", join(&cfg.psf_sigma_mm)),
        ("density_per_mm3", cfg.density_per_mm3.to_string()),
        ("scans", scans.to_string()),
    ]));
    if scans == 1 {
        let outputs = [FRAMES_FILE, POSES_FILE, META_FILE];
        ctx.prepare(&outputs)?;
        let scan = simulate_scan(&cfg, ctx.seed, &subject)?;
        write_scan(&ctx.out, &scan)?;
        m.summary("frames", scan.len());
        m.summary("subject", subject);
        ctx.finish(m, &outputs)
    } else {
        m.config_text(&render(&[
            (
                "step_range_mm",
                join(&[spec.step_range_mm.0, spec.step_range_mm.1]),
            ),
            (
                "lateral_amplitude_range_mm",
                join(&[
                    spec.lateral_amplitude_range_mm.0,
                    spec.lateral_amplitude_range_mm.1,
                ]),
            ),
            (
                "tilt_range_deg",
                join(&[spec.tilt_range_deg.0, spec.tilt_range_deg.1]),
            ),
            (
                "shapes",
                join(&spec.shapes.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            ),
        ]));
        let names: Vec<String> = (0..scans).map(scan_dir_name).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        ctx.prepare(&refs)?;
        let all = simulate_dataset(&spec, ctx.seed)?;
        write_dataset(&ctx.out, &all)?;
        m.summary("scans", all.len());
        ctx.finish(m, &refs)
    }
}

// ------------------------------------------------------------------- train

fn train(ctx: &Ctx, mut kv: KeyValues, a: &TrainArgs) -> CliResult<()> {
    if let Some(s) = &a.scale {
        kv.set("scale", s);
    }
    if let Some(s) = a.seq_len {
        kv.set("seq_len", s);
    }
    if a.no_attention {
        kv.set("use_gla", false);
    }
    if let Some(s) = a.steps {
        kv.set("steps", s);
    }
    if let Some(b) = a.batch {
        kv.set("batch_size", b);
    }
    kv.set("seed", ctx.seed);
    let model_cfg = ModelConfig::from_kv(&mut kv).map_err(usage)?;
    let train_cfg = TrainConfig::from_kv(&mut kv, "").map_err(usage)?;
    kv.finish().map_err(usage)?;
    let outputs = [
        TRAIN_LOG_FILE,
        VALIDATION_LOG_FILE,
        BEST_CHECKPOINT,
        LAST_CHECKPOINT,
    ];
    let last = ctx.out.join(LAST_CHECKPOINT);
    if a.resume {
        if !last.is_file() {
            return Err(usage(format!("--resume: {} not found", last.display())));
        }
    } else {
        ctx.prepare(&outputs)?;
    }

    let data = read_dataset(&a.data)?;
    let subjects: Vec<String> = data.iter().map(|(n, s)| subject_of(s, n)).collect();
    let resume_ckpt = if a.resume {
        Some(Checkpoint::load(&last)?)
    } else {
        None
    };
    let val_fraction = match &resume_ckpt {
        Some(c) => {
            let mut kv = KeyValues::parse(&c.config)?;
            TrainConfig::from_kv(&mut kv, "train.")?.val_fraction
        }
        None => train_cfg.val_fraction,
    };
    let split = split_by_subject(&subjects, val_fraction)?;
    let train_scans: Vec<_> = split.train.iter().map(|&i| &data[i].1).collect();
    let val_scans: Vec<_> = split.val.iter().map(|&i| &data[i].1).collect();
    let mut trainer = match &resume_ckpt {
        Some(c) => {
            let mut t = Trainer::resume(c, &train_scans, &val_scans)?;
            if let Some(s) = a.steps {
                t.cfg.steps = s;
            }
            t
        }
        None => Trainer::new(
            Model::new(model_cfg, ctx.seed)?,
            train_cfg,
            &train_scans,
            &val_scans,
        )?,
    };
    let mut m = ctx.manifest("train");
    m.input(&a.data);
    m.config_text(&trainer.model.cfg.to_kv());
    m.config_text(&trainer.cfg.to_kv(""));
    if a.resume {
        m.summary("resumed_from_step", trainer.step);
    }
    train_to_dir(&mut trainer, &ctx.out)?;
    let names = |idx: &[usize]| {
        idx.iter()
            .map(|&i| data[i].0.clone())
            .collect::<Vec<_>>()
            .join(",")
    };
    m.summary("train_scans", names(&split.train));
    m.summary("val_scans", names(&split.val));
    m.summary("steps", trainer.step);
    if let Some((step, v)) = trainer.best {
        m.summary("best_step", step);
        m.summary("best_val_mmae", v);
        println!("best validation MMAE {v} at step {step}");
    }
    ctx.finish(m, &outputs)
}

// ------------------------------------------------------------------- infer

fn infer(ctx: &Ctx, mut kv: KeyValues, a: &InferArgs) -> CliResult<()> {
    let params = baseline_params(&mut kv)?;
    kv.finish().map_err(usage)?;
    if a.checkpoint.is_none() && a.baseline.is_none() && !a.truth {
        return Err(usage("infer needs one of --checkpoint, --baseline or --truth"));
    }
    if a.attention && a.checkpoint.is_none() {
        return Err(usage("--attention needs --checkpoint"));
    }
    let mut outputs = vec![RELATIVE_POSES_FILE, ABSOLUTE_POSES_FILE];
    if a.attention {
        outputs.push(ATTENTION_DIR);
    }
    ctx.prepare(&outputs)?;
    let scan = read_scan(&a.scan)?;
    let mut m = ctx.manifest("infer");
    m.input(&a.scan);
    let relative = if let Some(path) = &a.checkpoint {
        m.input(path);
        m.summary("predictor", "model");
        let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
        m.config_text(&model.cfg.to_kv());
        let g = scan.geometry;
        let e = model.cfg.image_extent;
        if g.rows != e || g.cols != e {
            return Err(CliError::Runtime(sonotrack::error::Error::Precondition(format!(
                "scan frames are {}x{} but the model expects {e}x{e}",
                g.rows, g.cols
            ))));
        }
        let pred = predict_scan(&model, &scan.frames)?;
        if a.attention {
            let grids = pred.scores.as_ref().ok_or_else(|| {
                sonotrack::error::Error::Precondition(
                    "the checkpoint has no attention module (ablation model)".into(),
                )
            })?;
            let dir = ctx.out.join(ATTENTION_DIR);
            fs::create_dir_all(&dir)?;
            for (i, g) in grids.iter().enumerate() {
                let mut w = create(&dir.join(format!("step_{i:04}.pgm")))?;
                write_attention_pgm(&mut w, g)?;
                w.flush()?;
            }
        }
        pred.fused()
    } else if let Some(path) = &a.baseline {
        m.input(path);
        m.summary("predictor", "baseline");
        m.config_text(&baseline_params_text(&params));
        let model = DecorrModel::read_csv(open(path)?, params)?;
        let steps = estimate_sequence(&scan.frames, &scan.geometry, &model)?;
        m.summary("flagged_steps", steps.iter().filter(|s| s.flagged).count());
        steps.iter().map(|s| s.pose).collect()
    } else {
        m.summary("predictor", "truth");
        scan.relative_poses()?
    };
    let absolute = accumulate_poses(&relative)?.poses();
    write_csv_file(&ctx.out.join(RELATIVE_POSES_FILE), &relative)?;
    write_csv_file(&ctx.out.join(ABSOLUTE_POSES_FILE), &absolute)?;
    m.summary("relative_rows", relative.len());
    m.summary("absolute_rows", absolute.len());
    ctx.finish(m, &outputs)
}

// ---------------------------------------------------------------- evaluate

fn evaluate_cmd(ctx: &Ctx, kv: KeyValues, a: &EvaluateArgs) -> CliResult<()> {
    kv.finish().map_err(usage)?;
    let outputs = [METRICS_JSON, METRICS_CSV];
    ctx.prepare(&outputs)?;
    let scan = read_scan(&a.scan)?;
    let mut m = ctx.manifest("evaluate");
    m.input(&a.scan);
    m.input(&a.pred);
    let truth = match &a.truth {
        Some(p) => {
            m.input(p);
            read_csv_file(p)?
        }
        None => scan.poses.clone(),
    };
    let pred = read_csv_file(&a.pred)?;
    let report = evaluate(
        &Trajectory::from_poses(&truth)?,
        &Trajectory::from_poses(&pred)?,
        &scan.geometry,
    )?;
    let mut w = create(&ctx.out.join(METRICS_JSON))?;
    report.write_json(&mut w)?;
    w.flush()?;
    let mut w = create(&ctx.out.join(METRICS_CSV))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    report.write_json(std::io::stdout().lock())?;
    ctx.finish(m, &outputs)
}

// ---------------------------------------------------------------- compound

fn compound_cmd(ctx: &Ctx, mut kv: KeyValues, a: &CompoundArgs) -> CliResult<()> {
    let voxel = match a.voxel {
        Some(v) => {
            kv.take::<f64>("voxel_mm").map_err(usage)?;
            v
        }
        None => kv.take_or("voxel_mm", DEFAULT_VOXEL_MM).map_err(usage)?,
    };
    let fill = match a.fill_radius {
        Some(r) => {
            kv.take::<usize>("fill_radius").map_err(usage)?;
            Some(r)
        }
        None => kv.take::<usize>("fill_radius").map_err(usage)?,
    };
    kv.finish().map_err(usage)?;
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(usage("voxel size must be positive"));
    }
    if fill == Some(0) {
        return Err(usage("fill radius must be at least 1"));
    }
    let source: TrajectorySource = match &a.source {
        Some(s) => s.parse().map_err(usage)?,
        None if a.poses.is_some() => TrajectorySource::Predicted,
        None => TrajectorySource::Truth,
    };
    let outputs = ["volume.fvl", "volume.json"];
    ctx.prepare(&outputs)?;
    let scan = read_scan(&a.scan)?;
    let mut m = ctx.manifest("compound");
    m.input(&a.scan);
    let (poses, poses_name) = match &a.poses {
        Some(p) => {
            m.input(p);
            (read_csv_file(p)?, p.display().to_string())
        }
        None => (scan.poses.clone(), a.scan.join(POSES_FILE).display().to_string()),
    };
    let traj = Trajectory::from_poses(&poses)?;
    let mut grid = compound(&scan.frames, &scan.geometry, &traj, voxel)?;
    if let Some(r) = fill {
        grid = fill_holes(&grid, r)?;
    }
    let data = VolumeData::from_grid(&grid);
    let prov = VolumeProvenance {
        scan: a.scan.display().to_string(),
        trajectory_source: source,
        poses: poses_name,
        frames: scan.len(),
        dims: grid.dims,
        voxel_mm: voxel,
        origin_mm: grid.origin,
        occupancy: grid.occupancy(),
        hole_fill_radius: fill,
    };
    save_volume(&ctx.out, VOLUME_STEM, &data, &prov)?;
    m.config_text(&render(&[
        ("voxel_mm", voxel.to_string()),
        ("fill_radius", fill.map_or("none".into(), |r| r.to_string())),
    ]));
    m.summary("dims", join(&grid.dims));
    m.summary("occupancy", grid.occupancy());
    ctx.finish(m, &outputs)
}

// --------------------------------------------------------------- calibrate

fn calibrate_cmd(ctx: &Ctx, mut kv: KeyValues, a: &CalibrateArgs) -> CliResult<()> {
    let params = baseline_params(&mut kv)?;
    let extent = match a.extent {
        Some(e) => {
            kv.take::<usize>("image_extent").map_err(usage)?;
            e
        }
        None => kv
            .take_or("image_extent", SimConfig::default().image_extent)
            .map_err(usage)?,
    };
    let pitch = kv
        .take_or("pitch_mm", ImageGeometry::DEFAULT_PITCH_MM)
        .map_err(usage)?;
    let max_gap: f64 = kv.take_or("max_gap_mm", 0.5).map_err(usage)?;
    let gap_step: f64 = kv.take_or("gap_step_mm", 0.05).map_err(usage)?;
    let ppg = match a.pairs_per_gap {
        Some(p) => {
            kv.take::<usize>("pairs_per_gap").map_err(usage)?;
            p
        }
        None => kv.take_or("pairs_per_gap", 8usize).map_err(usage)?,
    };
    let jitter: f64 = kv.take_or("in_plane_jitter_mm", 0.01).map_err(usage)?;
    kv.finish().map_err(usage)?;
    if !(gap_step > 0.0 && max_gap >= gap_step) {
        return Err(usage("need 0 < gap_step_mm <= max_gap_mm"));
    }
    let outputs = [CALIBRATION_FILE];
    ctx.prepare(&outputs)?;
    let mut m = ctx.manifest("calibrate-baseline");
    let geom = match &a.scan {
        Some(p) => {
            m.input(p);
            read_scan(p)?.geometry
        }
        None => ImageGeometry::square(extent, pitch).map_err(usage)?,
    };
    let n_gaps = (max_gap / gap_step + 1e-9).floor() as usize;
    let mut sim = CalibrationSim::new(geom);
    sim.gaps_mm = (0..=n_gaps)
        .map(|k| (k as f64 * gap_step * 1e9).round() / 1e9)
        .collect();
    sim.pairs_per_gap = ppg;
    sim.in_plane_jitter_mm = jitter;
    let pairs = simulate_calibration_pairs(&sim, ctx.seed)?;
    let model = calibrate(&pairs, &geom, params)?;
    let mut w = create(&ctx.out.join(CALIBRATION_FILE))?;
    model.write_csv(&mut w)?;
    w.flush()?;
    m.config_text(&baseline_params_text(&params));
    m.config_text(&render(&[
        ("rows", geom.rows.to_string()),
        ("cols", geom.cols.to_string()),
        ("pitch_axial_mm", geom.pitch_axial.to_string()),
        ("pitch_lateral_mm", geom.pitch_lateral.to_string()),
        ("gaps_mm", join(&sim.gaps_mm)),
        ("pairs_per_gap", ppg.to_string()),
        ("in_plane_jitter_mm", jitter.to_string()),
    ]));
    m.summary("table_points", model.table().len());
    ctx.finish(m, &outputs)
}

/// Names of files a command may write, for documentation and tests.
#[allow(dead_code)]
pub const ALL_OUTPUTS: &[&str] = &[MANIFEST_FILE];

//! Stage execution: dependency check, cache lookup, artifact writing and the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vesselforge_core::lddmm::{
    default_sigma, farthest_point_sample, optimize_momenta, write_loss_csv, DeformProblem, ScalingGate, StateDump,
};
use vesselforge_core::logbseg::{
    checkpoint_bytes, checkpoint_from_bytes, ensemble_from_samples, stitch_tiles, train, write_seg_loss_csv,
    SegNetwork, TrainSample,
};
use vesselforge_core::mesh::{
    marching_cubes, quality_report, read_obj, remesh_uniform, smooth_minimize, write_obj, RegularizerWeights,
    TriMesh,
};
use vesselforge_core::metrics::{asd, dice_voxel, hausdorff, write_metrics_csv, MetricRow};
use vesselforge_core::phantom::{analytic_surface, make_phantom, random_vessel_spec, InletOutletSpec};
use vesselforge_core::volume::{
    clip_normalize, gradient_magnitude_field, read_nrrd, write_nrrd, Geometry, VoxelGrid,
};

use crate::config::{PipelineConfig, Stage};
use crate::manifest::{hash_file, outputs_intact, sha256_hex, ArtifactWriter, Manifest, StageRecord};
use crate::PipelineError;

type StageResult = Result<(), Box<dyn Error + Send + Sync>>;

/// Where a stage input comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    /// File in the run directory.
    Run(&'static str),
    External(PathBuf),
}

impl Source {
    fn key(&self) -> String {
        match self {
            Source::Run(n) => (*n).to_string(),
            Source::External(p) => p.display().to_string(),
        }
    }

    fn path(&self, dir: &Path) -> PathBuf {
        match self {
            Source::Run(n) => dir.join(n),
            Source::External(p) => p.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Input {
    role: &'static str,
    source: Source,
    required: bool,
}

pub fn stage_outputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Phantom => &["image.nrrd", "label.nrrd", "caps.json", "phantom_spec.json", "surface_truth.obj"],
        Stage::Train => &["model.logb", "loss_seg.csv"],
        Stage::Segment => &["prob.nrrd", "prob_std.nrrd", "seg.nrrd"],
        Stage::Reconstruct => &["mesh_init.obj"],
        Stage::Deform => &["mesh_deformed.obj", "loss_deform.csv", "momenta.json"],
        Stage::Evaluate => &["metrics.csv", "quality.json"],
    }
}

fn image_source(cfg: &PipelineConfig) -> Source {
    cfg.segment.image.clone().map_or(Source::Run("image.nrrd"), Source::External)
}

fn stage_inputs(stage: Stage, cfg: &PipelineConfig) -> Vec<Input> {
    let req = |role, source| Input { role, source, required: true };
    let opt = |role, name| Input { role, source: Source::Run(name), required: false };
    match stage {
        Stage::Phantom | Stage::Train => Vec::new(),
        Stage::Segment => vec![
            req("image", image_source(cfg)),
            req("model", cfg.segment.checkpoint.clone().map_or(Source::Run("model.logb"), Source::External)),
        ],
        Stage::Reconstruct => vec![req("prob", Source::Run("prob.nrrd"))],
        Stage::Deform => {
            let mut v = vec![req("mesh", Source::Run("mesh_init.obj")), req("image", image_source(cfg))];
            if cfg.deform.use_caps {
                v.push(req("caps", Source::Run("caps.json")));
            }
            v
        }
        Stage::Evaluate => vec![
            req("label", Source::Run("label.nrrd")),
            req("truth", Source::Run("surface_truth.obj")),
            opt("seg", "seg.nrrd"),
            opt("mesh_init", "mesh_init.obj"),
            opt("mesh_deformed", "mesh_deformed.obj"),
        ],
    }
}

/// Resolves every stage's inputs against files already in `dir` plus the
/// outputs of earlier stages in `plan`. Optional inputs are kept only when available.
fn resolve_plan(cfg: &PipelineConfig, plan: &[Stage], dir: &Path) -> Result<Vec<Vec<Input>>, PipelineError> {
    let mut available: BTreeSet<&'static str> = Stage::ALL
        .iter()
        .flat_map(|s| stage_outputs(*s).iter().copied())
        .filter(|n| dir.join(n).is_file())
        .collect();
    let mut resolved = Vec::with_capacity(plan.len());
    for &stage in plan {
        let mut missing = Vec::new();
        let mut inputs = Vec::new();
        for input in stage_inputs(stage, cfg) {
            let ok = match &input.source {
                Source::Run(n) => available.contains(n),
                Source::External(p) => p.is_file(),
            };
            if ok {
                inputs.push(input);
            } else if input.required {
                missing.push(input.source.key());
            }
        }
        if stage == Stage::Evaluate && inputs.iter().all(|i| i.required) && missing.is_empty() {
            missing.push("seg.nrrd | mesh_init.obj | mesh_deformed.obj".into());
        }
        if !missing.is_empty() {
            return Err(PipelineError::Dependency { stage, missing });
        }
        available.extend(stage_outputs(stage));
        resolved.push(inputs);
    }
    Ok(resolved)
}

/// SplitMix64 finalizer over the global seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stage_seed(cfg: &PipelineConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, stage as u64)
}

fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("config serializes").as_bytes())
}

/// Hash of everything in the config that can change the artifacts.
pub fn pipeline_config_hash(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = None;
    c.stages.clear();
    config_hash(&c)
}

fn stage_config_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    let block = match stage {
        Stage::Phantom => serde_json::to_value(&cfg.phantom),
        Stage::Train => serde_json::to_value(&cfg.train),
        Stage::Segment => serde_json::to_value(&cfg.segment),
        Stage::Reconstruct => serde_json::to_value(&cfg.reconstruct),
        Stage::Deform => serde_json::to_value(&cfg.deform),
        Stage::Evaluate => serde_json::to_value(&cfg.evaluate),
    }
    .expect("config serializes");
    config_hash(&(stage, &cfg.preprocess, block))
}

/// Declared inputs of one stage; reading anything else is an error.
struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    seed: u64,
    inputs: BTreeMap<&'static str, PathBuf>,
}

impl Ctx<'_> {
    fn read(&self, role: &str) -> Result<Vec<u8>, Box<dyn Error + Send + Sync>> {
        let p = self.inputs.get(role).ok_or_else(|| format!("undeclared input {role}"))?;
        Ok(std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?)
    }

    fn has(&self, role: &str) -> bool {
        self.inputs.contains_key(role)
    }

    fn volume(&self, role: &str) -> Result<VoxelGrid, Box<dyn Error + Send + Sync>> {
        Ok(read_nrrd(&self.read(role)?)?)
    }

    fn mesh(&self, role: &str) -> Result<TriMesh, Box<dyn Error + Send + Sync>> {
        Ok(read_obj(std::str::from_utf8(&self.read(role)?)?)?)
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn run_phantom(ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    let c = &ctx.cfg.phantom;
    let spec = match &c.spec {
        Some(s) => s.clone(),
        None => {
            let mut s = random_vessel_spec(c.dims, c.max_branches, ctx.seed)?;
            s.noise_sd = c.noise_sd;
            s.blur_sigma = c.blur_sigma;
            s.seed = ctx.seed;
            s
        }
    };
    let ph = make_phantom(&spec)?;
    w.write("image.nrrd", &write_nrrd(&ph.image))?;
    w.write("label.nrrd", &write_nrrd(&ph.label))?;
    w.write("caps.json", &json_bytes(&ph.io))?;
    w.write("phantom_spec.json", &json_bytes(&spec))?;
    w.write("surface_truth.obj", write_obj(&analytic_surface(&spec)?).as_bytes())?;
    Ok(())
}

fn run_train(ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    let t = &ctx.cfg.train;
    let mut data = Vec::with_capacity(t.volumes);
    for i in 0..t.volumes {
        let s = derive_seed(ctx.seed, i as u64);
        let mut spec = random_vessel_spec(t.dims, t.max_branches, s)?;
        spec.noise_sd = t.noise_sd;
        spec.blur_sigma = t.blur_sigma;
        spec.seed = s;
        let ph = make_phantom(&spec)?;
        data.push(TrainSample { image: clip_normalize(&ph.image, &ctx.cfg.preprocess), label: ph.label });
    }
    let mut net = SegNetwork::new(t.net.clone(), derive_seed(ctx.seed, u64::MAX))?;
    let opt = vesselforge_core::logbseg::TrainConfig { seed: ctx.seed, ..t.optimizer.clone() };
    let history = train(&mut net, &data, &opt, &t.gate)?;
    w.write("model.logb", &checkpoint_bytes(&net))?;
    w.write_via("loss_seg.csv", |p| write_seg_loss_csv(&history, p))?;
    Ok(())
}

fn run_segment(ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    let cfg = ctx.cfg;
    let image = ctx.volume("image")?;
    let net = checkpoint_from_bytes(&ctx.read("model")?)?;
    let norm = clip_normalize(&image, &cfg.preprocess);
    let tile = cfg.preprocess.crop_dims[0];
    let mut samples = Vec::with_capacity(cfg.segment.samples);
    for i in 0..cfg.segment.samples {
        samples.push(stitch_tiles(&net, &norm, tile, cfg.segment.overlap, derive_seed(ctx.seed, i as u64))?);
    }
    let e = ensemble_from_samples(samples)?;
    w.write("prob.nrrd", &write_nrrd(&e.mean))?;
    w.write("prob_std.nrrd", &write_nrrd(&e.std))?;
    w.write("seg.nrrd", &write_nrrd(&e.mean.threshold(0.5)))?;
    Ok(())
}

/// One voxel of zeros on every side, so surfaces touching the border close.
fn pad_zero(grid: &VoxelGrid) -> VoxelGrid {
    let g = grid.geometry;
    let dims = g.dims.map(|d| d + 2);
    let origin = std::array::from_fn(|a| g.origin[a] - g.spacing[a]);
    let padded = Geometry { dims, spacing: g.spacing, origin };
    let mut out = VoxelGrid::zeros(padded);
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                out.set(i + 1, j + 1, k + 1, grid.get(i, j, k));
            }
        }
    }
    out
}

fn run_reconstruct(ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    let r = &ctx.cfg.reconstruct;
    let prob = ctx.volume("prob")?;
    let surface = marching_cubes(&pad_zero(&prob), r.iso)?.largest_component();
    let smooth = smooth_minimize(&surface, &RegularizerWeights::default(), r.smooth_steps, r.smooth_lr)?;
    let mesh = remesh_uniform(&smooth, r.target_vertices)?;
    w.write("mesh_init.obj", write_obj(&mesh).as_bytes())?;
    Ok(())
}

fn run_deform(ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    let d = &ctx.cfg.deform;
    let mesh = ctx.mesh("mesh")?;
    let image = clip_normalize(&ctx.volume("image")?, &ctx.cfg.preprocess);
    let (gm, _) = gradient_magnitude_field(&image)?;
    let count = d.control_points.min(mesh.vertices.len());
    let cps: Vec<_> = farthest_point_sample(&mesh.vertices, count, 0)?.iter().map(|&i| mesh.vertices[i]).collect();
    let sigma = d.sigma.unwrap_or_else(|| default_sigma(&mesh.vertices));
    let io: Option<InletOutletSpec> = if ctx.has("caps") { Some(serde_json::from_slice(&ctx.read("caps")?)?) } else { None };
    let gate = match &io {
        Some(io) => ScalingGate::new(io, &cps, &mesh.vertices)?,
        None => ScalingGate::mobile(cps.len(), mesh.vertices.len()),
    };
    let problem = DeformProblem::new(mesh, gm, gate.clone(), cps, sigma, d.flow, d.loss)?;
    let result = optimize_momenta(&problem, &d.optimizer, None)?;
    w.write("mesh_deformed.obj", write_obj(&result.mesh).as_bytes())?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &result.history)?;
    w.write("loss_deform.csv", &csv)?;
    w.write("momenta.json", &json_bytes(&StateDump::new(&result.state, &gate, io.as_ref())))?;
    Ok(())
}

fn run_evaluate(ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    let case = ctx.cfg.evaluate.case.clone().unwrap_or_else(|| "case".into());
    let label = ctx.volume("label")?;
    let truth = ctx.mesh("truth")?;
    let row = |metric: &str, value: f64| MetricRow {
        case: case.clone(),
        metric: metric.into(),
        region: "all".into(),
        value,
    };
    let mut rows = Vec::new();
    if ctx.has("seg") {
        rows.push(row("dice", dice_voxel(&ctx.volume("seg")?, &label)?));
    }
    let mut quality = BTreeMap::new();
    for (role, tag) in [("mesh_init", "init"), ("mesh_deformed", "deformed")] {
        if ctx.has(role) {
            let m = ctx.mesh(role)?;
            rows.push(row(&format!("asd_{tag}"), asd(&m.vertices, &truth.vertices)?));
            rows.push(row(&format!("hausdorff_{tag}"), hausdorff(&m.vertices, &truth.vertices)?));
            quality.insert(role, quality_report(&m));
        }
    }
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &rows)?;
    w.write("metrics.csv", &csv)?;
    w.write("quality.json", &json_bytes(&quality))?;
    Ok(())
}

fn execute(stage: Stage, ctx: &Ctx, w: &mut ArtifactWriter) -> StageResult {
    match stage {
        Stage::Phantom => run_phantom(ctx, w),
        Stage::Train => run_train(ctx, w),
        Stage::Segment => run_segment(ctx, w),
        Stage::Reconstruct => run_reconstruct(ctx, w),
        Stage::Deform => run_deform(ctx, w),
        Stage::Evaluate => run_evaluate(ctx, w),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub stages: Vec<(Stage, StageStatus)>,
    pub manifest: Manifest,
}

/// Runs `plan` (sorted into dependency order) in `dir`. Dependencies are checked
/// for the whole plan before anything executes. A stage whose manifest record
/// matches its seed, config and input hashes, and whose outputs are intact, is skipped.
pub fn run_stages(cfg: &PipelineConfig, plan: &[Stage], dir: &Path) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let mut plan = plan.to_vec();
    plan.sort();
    plan.dedup();
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    let resolved = resolve_plan(cfg, &plan, dir)?;
    let mut manifest = Manifest::load(dir)?.unwrap_or_default();
    manifest.seed = cfg.seed;
    manifest.config_hash = pipeline_config_hash(cfg);
    let mut report = Vec::new();
    for (&stage, inputs) in plan.iter().zip(resolved) {
        let fail = |message: String| PipelineError::Stage { stage, message };
        let mut hashes = BTreeMap::new();
        let mut paths = BTreeMap::new();
        for i in &inputs {
            let p = i.source.path(dir);
            hashes.insert(i.source.key(), hash_file(&p).map_err(|e| fail(e.to_string()))?);
            paths.insert(i.role, p);
        }
        let seed = stage_seed(cfg, stage);
        let config_hash = stage_config_hash(cfg, stage);
        if let Some(rec) = manifest.stages.get(stage.name()) {
            if rec.seed == seed && rec.config_hash == config_hash && rec.inputs == hashes && outputs_intact(dir, rec) {
                report.push((stage, StageStatus::Cached));
                continue;
            }
        }
        let ctx = Ctx { cfg, seed, inputs: paths };
        let mut writer = ArtifactWriter::new(dir);
        execute(stage, &ctx, &mut writer).map_err(|e| fail(e.to_string()))?;
        let outputs = writer.commit().map_err(|e| fail(e.to_string()))?;
        manifest.stages.insert(stage.name().into(), StageRecord { seed, config_hash, inputs: hashes, outputs });
        manifest.save(dir)?;
        report.push((stage, StageStatus::Ran));
    }
    manifest.save(dir)?;
    Ok(RunReport { stages: report, manifest })
}

/// Runs the configured stage list.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path) -> Result<RunReport, PipelineError> {
    run_stages(cfg, &cfg.stages, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(stages: &str) -> PipelineConfig {
        PipelineConfig::from_json(&format!(r#"{{"seed": 1, "stages": {stages}}}"#)).unwrap()
    }

    #[test]
    fn dependencies_follow_the_plan() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"["deform"]"#);
        match resolve_plan(&c, &[Stage::Deform], dir.path()) {
            Err(PipelineError::Dependency { stage, missing }) => {
                assert_eq!(stage, Stage::Deform);
                assert!(missing.contains(&"mesh_init.obj".to_string()));
            }
            other => panic!("{other:?}"),
        }
        let all = Stage::ALL.to_vec();
        let resolved = resolve_plan(&c, &all, dir.path()).unwrap();
        let eval: Vec<_> = resolved[5].iter().map(|i| i.role).collect();
        assert_eq!(eval, vec!["label", "truth", "seg", "mesh_init", "mesh_deformed"]);
        // Evaluate with only the phantom has nothing to score.
        assert!(resolve_plan(&c, &[Stage::Phantom, Stage::Evaluate], dir.path()).is_err());
    }

    #[test]
    fn files_on_disk_satisfy_dependencies() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["mesh_init.obj", "image.nrrd", "caps.json"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        assert!(resolve_plan(&cfg(r#"["deform"]"#), &[Stage::Deform], dir.path()).is_ok());
    }

    #[test]
    fn seeds_differ_per_stage_and_stream() {
        let s: BTreeSet<u64> = (0..6).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 6);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }

    #[test]
    fn padding_shifts_origin() {
        let g = Geometry::isotropic([2, 3, 4], 0.5);
        let grid = VoxelGrid::filled(g, 1.0);
        let p = pad_zero(&grid);
        assert_eq!(p.dims(), [4, 5, 6]);
        assert_eq!(p.geometry.origin, [-0.5; 3]);
        assert_eq!(p.get(1, 1, 1), 1.0);
        assert_eq!(p.get(0, 2, 2), 0.0);
        assert_eq!(p.data.iter().sum::<f64>(), 24.0);
    }
}

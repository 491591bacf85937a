//! Config-driven runs: synthesize data on a refined mesh, add noise, invert,
//! and write a self-contained output directory.
//!
//! Output files of an inversion run:
//! `config.json`, `trace.csv`, `summary.json`, `fields.vtk`, `measurement.csv`
//! and `data.blt` (the noisy dataset).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::fem::{source_cell_values, write_field_vtk, BoundaryFlux, ForwardModel, SolverChoice};
use crate::lm::{relative_error, run, LmConfig, LmTrace, SourceForward, Termination};
use crate::media::{MediaMap, Region, Tissue};
use crate::mesh::{refine_uniform, Mesh, MeshSpec};
use crate::noise::{add_noise, DEFAULT_DELTA};
use crate::sensors::boundary_sensors;
use crate::source::{
    to_nested_sum, ParamLayout, ParamVector, Corona, Domain, Layer, Representation, Shape, SourceField, DIST_MIN,
};
use crate::Point;

/// Names of the built-in examples.
pub const EXAMPLES: [&str; 7] = ["ex6_1", "ex6_2", "ex6_3", "ex6_4", "ex6_5", "ex6_6", "ex6_7"];

/// Default element size for 2D examples.
pub const DEFAULT_H_2D: f64 = 0.1;
/// Default element size for 3D examples.
pub const DEFAULT_H_3D: f64 = 0.35;

trait Staged<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> Staged<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.into().stage(stage))
    }
}

fn default_radius() -> f64 {
    3.0
}
fn default_refinements() -> usize {
    1
}
fn default_sensors() -> usize {
    200
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub dim: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Element size of the inversion mesh.
    pub h: f64,
    /// Uniform refinements of the inversion mesh used to synthesize data.
    #[serde(default = "default_refinements")]
    pub data_refinements: usize,
}

impl DomainConfig {
    pub fn domain(&self) -> Domain {
        Domain { dim: self.dim, radius: self.radius }
    }
}

/// A preset name (`"lung"`, `"muscle"`, `"heart"`) or explicit coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TissueSpec {
    Preset(String),
    Explicit(Tissue),
}

impl TissueSpec {
    pub fn resolve(&self) -> Result<Tissue> {
        Ok(match self {
            TissueSpec::Preset(name) => Tissue::preset(name)?,
            TissueSpec::Explicit(t) => {
                t.validate()?;
                *t
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaRegionConfig {
    pub region: Region,
    pub tissue: TissueSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaConfig {
    pub background: TissueSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<MediaRegionConfig>,
}

impl MediaConfig {
    pub fn uniform(t: TissueSpec) -> MediaConfig {
        MediaConfig { background: t, regions: Vec::new() }
    }

    pub fn resolve(&self) -> Result<MediaMap> {
        let regions = self
            .regions
            .iter()
            .map(|r| Ok((r.region.clone(), r.tissue.resolve()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MediaMap { regions, background: self.background.resolve()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { delta: DEFAULT_DELTA, seed: default_seed() }
    }
}

/// Full description of a reconstruction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub domain: DomainConfig,
    pub media: MediaConfig,
    /// Exact source, used to synthesize data and to report `e_r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SourceField>,
    /// Dataset file to invert instead of synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<String>,
    pub initial: SourceField,
    #[serde(default)]
    pub g_minus: BoundaryFlux,
    #[serde(default = "default_sensors")]
    pub sensors: usize,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub lm: LmConfig,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// Description of a single forward solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub name: String,
    pub domain: DomainConfig,
    pub media: MediaConfig,
    pub source: SourceField,
    #[serde(default)]
    pub g_minus: BoundaryFlux,
    #[serde(default = "default_sensors")]
    pub sensors: usize,
    /// Noise added to the written dataset; absent means clean data only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// Reads a JSON config, rejecting unknown keys.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshInfo {
    pub dim: usize,
    pub nodes: usize,
    pub elements: usize,
    pub boundary_facets: usize,
    pub h_max: f64,
    pub volume: f64,
    pub exact_volume: f64,
    /// Minimum angle in degrees (2D) or minimum radius ratio (3D).
    pub quality: f64,
}

impl MeshInfo {
    pub fn of(mesh: &Mesh) -> MeshInfo {
        let r = mesh.radius();
        let (exact_volume, quality) = if mesh.dim() == 2 {
            (std::f64::consts::PI * r * r, mesh.min_angle_deg())
        } else {
            (4.0 / 3.0 * std::f64::consts::PI * r.powi(3), mesh.min_radius_ratio())
        };
        MeshInfo {
            dim: mesh.dim(),
            nodes: mesh.num_nodes(),
            elements: mesh.num_elements(),
            boundary_facets: mesh.num_facets(),
            h_max: mesh.h_max(),
            volume: mesh.total_volume(),
            exact_volume,
            quality,
        }
    }
}

/// Inversion mesh for a domain, conforming to spherical media interfaces in 2D.
pub fn build_mesh(domain: &DomainConfig, media: &MediaMap) -> Result<Mesh> {
    if domain.dim != 2 && domain.dim != 3 {
        return Err(Error::Config(format!("dimension {} (expected 2 or 3)", domain.dim)));
    }
    let interfaces = if domain.dim == 2 { media.interface_radii() } else { Vec::new() };
    let spec = MeshSpec { dim: domain.dim, radius: domain.radius, h: domain.h, interfaces };
    let mut mesh = spec.build()?;
    tag_media(&mut mesh, media);
    Ok(mesh)
}

fn tag_media(mesh: &mut Mesh, media: &MediaMap) {
    // Region tags record which media region each element centroid falls in;
    // coefficients are still looked up by position.
    let regions = media.regions.clone();
    mesh.tag_regions(|p| {
        regions
            .iter()
            .position(|(r, _)| match r {
                Region::Ball { center, radius } => {
                    let c = crate::point_from_slice(center).unwrap_or_else(Point::zeros);
                    (p - c).norm() <= *radius
                }
                Region::Tag { .. } => false,
            })
            .map(|k| k as i32 + 1)
            .unwrap_or(0)
    });
}

fn data_mesh(mesh: &Mesh, refinements: usize) -> Result<Mesh> {
    let mut fine = mesh.clone();
    for _ in 0..refinements {
        fine = refine_uniform(&fine)?;
    }
    Ok(fine)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_s: f64,
    pub inversion_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseInfo {
    pub delta: f64,
    pub seed: u64,
    pub noise_l2: f64,
    pub noise_relative_l2: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub trace: LmTrace,
    pub final_source: SourceField,
    pub final_rel_error: Option<f64>,
    pub mesh: MeshInfo,
    pub data_mesh: Option<MeshInfo>,
    pub noise: NoiseInfo,
    pub timings: Timings,
    pub files: Vec<String>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config: ExperimentConfig,
    pub param_names: Vec<String>,
    pub final_theta: Vec<f64>,
    pub final_source: SourceField,
    pub final_rel_error: Option<f64>,
    pub initial_residual_norm: f64,
    pub final_residual_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub mesh: MeshInfo,
    pub data_mesh: Option<MeshInfo>,
    pub noise: NoiseInfo,
    pub timings: Timings,
    pub files: Vec<String>,
}

impl RunRecord {
    pub fn summary(&self) -> Summary {
        Summary {
            name: self.config.name.clone(),
            config: self.config.clone(),
            param_names: self.trace.param_names.clone(),
            final_theta: self.trace.final_theta().to_vec(),
            final_source: self.final_source.clone(),
            final_rel_error: self.final_rel_error,
            initial_residual_norm: self.trace.records[0].residual_norm,
            final_residual_norm: self.trace.final_record().residual_norm,
            iterations: self.trace.iterations(),
            termination: self.trace.termination.clone(),
            mesh: self.mesh.clone(),
            data_mesh: self.data_mesh.clone(),
            noise: self.noise.clone(),
            timings: self.timings.clone(),
            files: self.files.clone(),
        }
    }
}

fn check_source(q: &SourceField, domain: &DomainConfig, what: &'static str) -> Result<()> {
    if q.dim != domain.dim {
        return Err(Error::Config(format!("{what} source is {}D in a {}D domain", q.dim, domain.dim)));
    }
    q.ensure_valid(&domain.domain(), DIST_MIN).stage(what)
}

impl ExperimentConfig {
    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.domain.dim != 2 && self.domain.dim != 3 {
            return Err(Error::Config(format!("dimension {} (expected 2 or 3)", self.domain.dim)));
        }
        if !(self.domain.h > 0.0 && self.domain.h < self.domain.radius) {
            return Err(Error::Config(format!("mesh size h = {} outside (0, R)", self.domain.h)));
        }
        self.media.resolve()?;
        match (&self.truth, &self.data_file) {
            (None, None) => return Err(Error::Config("one of truth or data_file is required".into())),
            (Some(_), Some(_)) => return Err(Error::Config("truth and data_file are mutually exclusive".into())),
            _ => {}
        }
        if let Some(t) = &self.truth {
            check_source(t, &self.domain, "truth")?;
        }
        check_source(&self.initial, &self.domain, "initial guess")?;
        if self.sensors == 0 {
            return Err(Error::Config("sensor count must be positive".into()));
        }
        if !(self.noise.delta >= 0.0) {
            return Err(Error::Config(format!("noise level {} must be nonnegative", self.noise.delta)));
        }
        if let BoundaryFlux::Coordinate { axis } = self.g_minus {
            if axis >= self.domain.dim {
                return Err(Error::Config(format!("g_minus axis {axis} in {}D", self.domain.dim)));
            }
        }
        self.lm.validate()?;
        Ok(())
    }

    /// Starting parameters. The geometry is always parametrized in nested-sum
    /// form; the intensity unknowns follow the representation of the initial
    /// guess (increments for nested sums, layer values for disjoint layers).
    pub fn initial_params(&self) -> Result<ParamVector> {
        let (template, layout) = match self.initial.representation {
            Representation::NestedSum => (self.initial.clone(), ParamLayout::of(&self.initial)),
            Representation::DisjointLayers => {
                let nested = to_nested_sum(&self.initial)?;
                let layout = ParamLayout::with_layer_values(&nested)?;
                (nested, layout)
            }
        };
        Ok(ParamVector { theta: layout.pack(&template)?, layout })
    }
}

/// Synthesizes the noisy dataset of a config on the refined data mesh.
pub fn synthesize(cfg: &ExperimentConfig, mesh: &Mesh, media: &MediaMap) -> Result<(Dataset, MeshInfo)> {
    let truth = cfg.truth.as_ref().ok_or_else(|| Error::Config("no exact source to synthesize data from".into()))?;
    let fine = data_mesh(mesh, cfg.domain.data_refinements)?;
    let sensors = boundary_sensors(cfg.domain.radius, cfg.sensors, &fine)?;
    let points = sensors.points.clone();
    let model = ForwardModel::new(fine, media, sensors, cfg.g_minus, cfg.solver)?;
    let clean = model.measure(truth)?.values;
    let data = add_noise(&clean, cfg.noise.delta, cfg.noise.seed);
    let ds = Dataset::new(cfg.domain.domain(), points, data)?;
    Ok((ds, MeshInfo::of(model.mesh())))
}

/// Runs the full pipeline. Files are written when `out` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.validate().stage("config")?;
    let media = cfg.media.resolve().stage("media")?;
    let mesh = build_mesh(&cfg.domain, &media).stage("mesh")?;

    let (dataset, fine) = match &cfg.data_file {
        Some(path) => {
            let ds = load_dataset(path).stage("data")?;
            if ds.domain != cfg.domain.domain() {
                return Err(Error::Config(format!("dataset domain {:?} does not match the config", ds.domain)));
            }
            (ds, None)
        }
        None => {
            let (ds, fine) = synthesize(cfg, &mesh, &media).stage("data")?;
            (ds, Some(fine))
        }
    };
    let data_s = start.elapsed().as_secs_f64();

    let sensors = dataset.sensor_set(&mesh).stage("inversion")?;
    let model = ForwardModel::new(mesh, &media, sensors, cfg.g_minus, cfg.solver).stage("inversion")?;
    let pv = cfg.initial_params().stage("inversion")?;
    let layout = pv.layout.clone();
    let map = SourceForward::new(&model, layout.clone());
    let domain = cfg.domain.domain();
    let spacing = cfg.domain.h / 4.0;
    let truth = cfg.truth.clone();
    let err_fn = {
        let layout = layout.clone();
        move |th: &[f64]| -> Option<f64> {
            let t = truth.as_ref()?;
            let q = layout.unpack_unchecked(th).ok()?;
            relative_error(&q, t, &domain, spacing).ok()
        }
    };
    let inv_start = Instant::now();
    let trace = run(&map, &pv.theta, &dataset.data.noisy, &cfg.lm, Some(&err_fn)).stage("inversion")?;
    let inversion_s = inv_start.elapsed().as_secs_f64();
    let final_source = layout.unpack_unchecked(trace.final_theta()).stage("inversion")?;
    let final_rel_error = trace.final_record().rel_error;

    let mut record = RunRecord {
        config: cfg.clone(),
        final_source,
        final_rel_error,
        mesh: MeshInfo::of(model.mesh()),
        data_mesh: fine,
        noise: NoiseInfo {
            delta: dataset.data.delta,
            seed: dataset.data.seed,
            noise_l2: dataset.data.noise_l2(),
            noise_relative_l2: dataset.data.noise_relative_l2(),
        },
        timings: Timings { data_s, inversion_s, total_s: 0.0 },
        files: Vec::new(),
        trace,
    };

    if let Some(dir) = out {
        record.files = write_run(dir, &record, &model, &dataset).stage("output")?;
    }
    record.timings.total_s = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_json(&dir.join("summary.json"), &record.summary()).stage("output")?;
    }
    Ok(record)
}

fn write_run(dir: &Path, record: &RunRecord, model: &ForwardModel, dataset: &Dataset) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ["config.json", "trace.csv", "summary.json", "fields.vtk", "measurement.csv", "data.blt"];
    write_json(&dir.join(files[0]), &record.config)?;
    write_text(&dir.join(files[1]), &record.trace.to_csv())?;
    let u = model.solve(&record.final_source)?;
    let cells = source_cell_values(model.mesh(), &record.final_source);
    write_field_vtk(model.mesh(), &u, Some(&cells), dir.join(files[3]))?;
    dataset.noisy_measurement().write_csv(dir.join(files[4]))?;
    save_dataset(dataset, dir.join(files[5]))?;
    Ok(files.iter().map(|f| f.to_string()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub name: String,
    pub mesh: MeshInfo,
    pub relative_residual: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub files: Vec<String>,
}

/// Solves one forward problem on the configured mesh and writes
/// `config.json`, `fields.vtk`, `measurement.csv`, `data.blt`, `summary.json`.
pub fn run_forward(cfg: &ForwardConfig, out: Option<&Path>) -> Result<ForwardRecord> {
    if cfg.domain.dim != 2 && cfg.domain.dim != 3 {
        return Err(Error::Config(format!("dimension {} (expected 2 or 3)", cfg.domain.dim)));
    }
    check_source(&cfg.source, &cfg.domain, "source")?;
    if cfg.sensors == 0 {
        return Err(Error::Config("sensor count must be positive".into()));
    }
    let media = cfg.media.resolve().stage("media")?;
    let mesh = build_mesh(&cfg.domain, &media).stage("mesh")?;
    let sensors = boundary_sensors(cfg.domain.radius, cfg.sensors, &mesh).stage("mesh")?;
    let points = sensors.points.clone();
    let model = ForwardModel::new(mesh, &media, sensors, cfg.g_minus, cfg.solver).stage("forward")?;
    let u = model.solve(&cfg.source).stage("forward")?;
    let g = crate::fem::measure(&u, model.sensors(), &cfg.g_minus).stage("forward")?;
    let record = ForwardRecord {
        name: cfg.name.clone(),
        mesh: MeshInfo::of(model.mesh()),
        relative_residual: u.relative_residual,
        min_value: g.values.iter().copied().fold(f64::INFINITY, f64::min),
        max_value: g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        files: ["config.json", "fields.vtk", "measurement.csv", "data.blt", "summary.json"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    if let Some(dir) = out {
        let write = || -> Result<()> {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(&dir.join("config.json"), cfg)?;
            let cells = source_cell_values(model.mesh(), &cfg.source);
            write_field_vtk(model.mesh(), &u, Some(&cells), dir.join("fields.vtk"))?;
            g.write_csv(dir.join("measurement.csv"))?;
            let noise = cfg.noise.unwrap_or(NoiseConfig { delta: 0.0, seed: 0 });
            let data = add_noise(&g.values, noise.delta, noise.seed);
            save_dataset(&Dataset::new(cfg.domain.domain(), points, data)?, dir.join("data.blt"))?;
            write_json(&dir.join("summary.json"), &record)
        };
        write().stage("output")?;
    }
    Ok(record)
}

/// Relative separation of the boundary data of two sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub norm_a: f64,
    pub norm_b: f64,
    pub difference: f64,
    /// `|F(a) - F(b)| / max(|F(a)|, |F(b)|)`.
    pub separation: f64,
    /// `separation > noise_floor`.
    pub distinguishable: bool,
    pub noise_floor: f64,
}

pub const NOISE_FLOOR: f64 = 1e-6;

pub fn distinguishability_test(qa: &SourceField, qb: &SourceField, model: &ForwardModel) -> Result<Separation> {
    let fa = model.measure(qa)?.values;
    let fb = model.measure(qb)?.values;
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
    let (norm_a, norm_b, difference) = (n(&fa), n(&fb), n(&diff));
    let scale = norm_a.max(norm_b);
    let separation = if scale == 0.0 { 0.0 } else { difference / scale };
    Ok(Separation {
        norm_a,
        norm_b,
        difference,
        separation,
        distinguishable: separation > NOISE_FLOOR,
        noise_floor: NOISE_FLOOR,
    })
}

fn p2(x: f64, y: f64) -> Point {
    Point::new(x, y, 0.0)
}

fn p3(x: f64, y: f64, z: f64) -> Point {
    Point::new(x, y, z)
}

fn disk(c: Point, r: f64) -> Shape {
    Shape::Disk { center: c, radius: r }
}

fn base(name: &str, dim: usize, media: MediaConfig, truth: SourceField, initial: SourceField, beta: f64, i0: i64) -> ExperimentConfig {
    let h = if dim == 2 { DEFAULT_H_2D } else { DEFAULT_H_3D };
    ExperimentConfig {
        name: name.into(),
        domain: DomainConfig { dim, radius: 3.0, h, data_refinements: 1 },
        media,
        truth: Some(truth),
        data_file: None,
        initial,
        g_minus: BoundaryFlux::Zero,
        sensors: 200,
        noise: NoiseConfig::default(),
        lm: LmConfig::new(beta, i0),
        solver: SolverChoice::Auto,
        output: None,
    }
}

fn heart_low_absorption() -> TissueSpec {
    TissueSpec::Explicit(Tissue { mu_a: 0.01, mu_s_prime: 1.096 })
}

/// Rectangle with corner `a`, first side `a -> b` and the second side of
/// length `width` turning counterclockwise. Vertices in counterclockwise order.
fn rectangle(a: Point, b: Point, width: f64) -> Shape {
    let e = b - a;
    let n = p2(-e.y, e.x).normalize() * width;
    Shape::ConvexPolygon { vertices: vec![a, b, b + n, a + n] }
}

/// Built-in configuration of one of the seven examples.
pub fn builtin(name: &str) -> Option<ExperimentConfig> {
    let s3 = 3f64.sqrt();
    let cfg = match name {
        "ex6_1" => base(
            name,
            2,
            MediaConfig {
                background: TissueSpec::Preset("muscle".into()),
                regions: vec![MediaRegionConfig {
                    region: Region::Ball { center: vec![0.0, 0.0], radius: 2.0 },
                    tissue: TissueSpec::Preset("lung".into()),
                }],
            },
            SourceField::single(2, disk(p2(0.0, 0.0), 1.0), 1.0),
            SourceField::single(2, disk(p2(0.3, 0.5), 0.5), 0.8),
            0.7,
            0,
        ),
        "ex6_2" => base(
            name,
            2,
            MediaConfig::uniform(TissueSpec::Preset("heart".into())),
            SourceField {
                dim: 2,
                representation: Representation::DisjointLayers,
                layers: vec![
                    Layer { shape: Shape::Annulus { center: p2(0.0, 0.0), inner: 0.5, outer: 1.5 }, intensity: 1.0 },
                    Layer { shape: disk(p2(0.0, 0.0), 0.5), intensity: 2.0 },
                ],
            },
            SourceField {
                dim: 2,
                representation: Representation::DisjointLayers,
                layers: vec![
                    Layer {
                        shape: Shape::Shell {
                            outer: Box::new(disk(p2(0.5, 0.5), 2.1)),
                            inner: Box::new(disk(p2(0.1, 0.1), 0.4)),
                        },
                        intensity: 1.8,
                    },
                    Layer { shape: disk(p2(0.1, 0.1), 0.4), intensity: 1.8 },
                ],
            },
            0.5,
            0,
        ),
        "ex6_3" => {
            let mut c = base(
                name,
                3,
                MediaConfig::uniform(TissueSpec::Preset("heart".into())),
                SourceField::single(3, Shape::Ball { center: p3(0.0, 0.0, 0.0), radius: 1.0 }, 1.0),
                SourceField::single(3, Shape::Ball { center: p3(0.5, 0.5, 0.5), radius: 0.5 }, 0.1),
                0.8,
                8,
            );
            c.g_minus = BoundaryFlux::Coordinate { axis: 0 };
            c
        }
        "ex6_4" => {
            let mut c = base(
                name,
                3,
                MediaConfig::uniform(TissueSpec::Preset("heart".into())),
                SourceField::single(
                    3,
                    Shape::Ellipsoid { center: p3(0.0, 0.0, 0.0), semiaxes: vec![1.0, 2.0, 1.0] },
                    1.0,
                ),
                SourceField::single(
                    3,
                    Shape::Ellipsoid { center: p3(0.5, 0.5, 0.5), semiaxes: vec![0.3, 1.5, 0.3] },
                    0.5,
                ),
                0.6,
                1,
            );
            c.g_minus = BoundaryFlux::Coordinate { axis: 0 };
            c
        }
        "ex6_5" => base(
            name,
            2,
            MediaConfig::uniform(TissueSpec::Preset("lung".into())),
            SourceField::single(2, rectangle(p2(0.0, 0.0), p2(s3 / 4.0, 0.25), 1.0), 3.0),
            SourceField::single(2, rectangle(p2(0.5, 0.5), p2(1.0, 1.0), 0.5f64.sqrt() / 2.0), 2.7),
            0.6,
            4,
        ),
        "ex6_6" => {
            let corona = |apex: Point| {
                Shape::Corona(Corona {
                    center: p2(0.0, 0.0),
                    radius: 1.0,
                    carve: Some((-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4)),
                    apexes: vec![apex],
                })
            };
            base(
                name,
                2,
                MediaConfig::uniform(heart_low_absorption()),
                SourceField::single(2, corona(p2(-2.0, 0.0)), 3.0),
                SourceField::single(2, corona(p2(-1.0, 1.0)), 10.0),
                0.7,
                8,
            )
        }
        "ex6_7" => base(
            name,
            3,
            MediaConfig::uniform(heart_low_absorption()),
            SourceField::single(3, Shape::AxisAlignedBox { min: p3(-1.0, -1.0, -1.0), sides: vec![2.0; 3] }, 3.0),
            SourceField::single(3, Shape::AxisAlignedBox { min: p3(-0.3, -0.3, -0.3), sides: vec![1.0; 3] }, 2.5),
            0.68,
            3,
        ),
        _ => return None,
    };
    Some(cfg)
}

/// Built-in example by name, or a config error listing the known names.
pub fn example(name: &str) -> Result<ExperimentConfig> {
    builtin(name).ok_or_else(|| Error::Config(format!("unknown example {name:?}; known: {}", EXAMPLES.join(", "))))
}

/// Default output directory: `$BLT_OUTPUT_ROOT/<name>` or `runs/<name>`.
pub fn default_output_dir(name: &str) -> PathBuf {
    let root = std::env::var_os("BLT_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_mesh;
    use crate::sensors::boundary_sensors;

    #[test]
    fn seven_examples_validate_and_round_trip() {
        assert_eq!(EXAMPLES.len(), 7);
        for name in EXAMPLES {
            let cfg = builtin(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(builtin("ex6_8").is_none());
        assert!(example("nope").unwrap_err().is_validation());
    }

    #[test]
    fn example_transcriptions() {
        let c = builtin("ex6_1").unwrap();
        assert_eq!(c.initial_params().unwrap().theta, vec![0.3, 0.5, 0.5, 0.8]);
        assert_eq!((c.lm.beta, c.lm.i0, c.sensors, c.noise.delta), (0.7, 0, 200, 0.01));
        let c = builtin("ex6_2").unwrap();
        // nested geometry B_2.1(0.5, 0.5) and B_0.4(0.1, 0.1), layer values 1.8 and 1.8
        assert_eq!(c.initial_params().unwrap().theta, vec![0.5, 0.5, 2.1, 0.1, 0.1, 0.4, 1.8, 1.8]);
        let c = builtin("ex6_5").unwrap();
        let truth = c.truth.unwrap();
        assert_eq!(truth.eval(&p2(0.0, 0.5)), 3.0);
        assert_eq!(truth.eval(&p2(0.5, 0.0)), 0.0);
        assert!((truth.eval(&p2(-0.03, 1.0))) == 3.0);
        let c = builtin("ex6_6").unwrap();
        let truth = c.truth.unwrap();
        assert_eq!(truth.eval(&p2(-1.5, 0.0)), 3.0);
        assert_eq!(truth.eval(&p2(0.5, 0.0)), 0.0);
        assert_eq!(truth.eval(&p2(0.0, 0.5)), 3.0);
    }

    #[test]
    fn strict_config_parsing() {
        let mut v = serde_json::to_value(builtin("ex6_1").unwrap()).unwrap();
        v["domain"]["hh"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut v = serde_json::to_value(builtin("ex6_1").unwrap()).unwrap();
        v["lm"]["betta"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut c = builtin("ex6_1").unwrap();
        c.media.background = TissueSpec::Preset("bone".into());
        assert!(c.validate().is_err());
        let mut c = builtin("ex6_1").unwrap();
        c.truth = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_config_names_path() {
        let err = load_config::<ExperimentConfig>("/nonexistent/missing.json").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("missing.json"));
    }

    #[test]
    fn separation_probe() {
        let mesh = build_disk_mesh(3.0, 0.2).unwrap();
        let s = boundary_sensors(3.0, 200, &mesh).unwrap();
        let media = MediaMap::uniform(Tissue::preset("heart").unwrap());
        let model = ForwardModel::new(mesh, &media, s, BoundaryFlux::Zero, SolverChoice::Auto).unwrap();
        let a = SourceField::single(2, disk(p2(0.0, 0.0), 1.0), 1.0);
        let b = SourceField::single(2, disk(p2(0.0, 0.0), 1.0), 1.1);
        let r = distinguishability_test(&a, &b, &model).unwrap();
        assert!((r.separation - 0.1 / 1.1).abs() < 1e-9);
        let same = distinguishability_test(&a, &a, &model).unwrap();
        assert!(same.separation <= 1e-12 && !same.distinguishable);
    }

    #[test]
    fn small_run_writes_bundle() {
        let mut cfg = builtin("ex6_1").unwrap();
        cfg.domain.h = 0.3;
        cfg.lm.max_iter = 3;
        let dir = tempfile::tempdir().unwrap();
        let rec = run_experiment(&cfg, Some(dir.path())).unwrap();
        for f in &rec.files {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let summary: Summary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.iterations, rec.trace.iterations());
        let again = run_experiment(&cfg, None).unwrap();
        assert_eq!(again.trace.to_csv(), rec.trace.to_csv());
        // the dataset in the bundle can be inverted directly
        let mut from_file = cfg.clone();
        from_file.truth = None;
        from_file.data_file = Some(dir.path().join("data.blt").display().to_string());
        let rec2 = run_experiment(&from_file, None).unwrap();
        assert_eq!(rec2.final_rel_error, None);
        assert_eq!(rec2.trace.final_theta(), rec.trace.final_theta());
    }
}

//! Dataset generation, bit-exact binary persistence, and wavelength splits.
//!
//! # WFD1 file layout (little-endian)
//!
//! ```text
//! header:  magic "WFD1" | version u32 = 1 | nx u32 | nz u32
//!          | dl_x f64 | dl_z f64 | scene_kind u8 | 7 pad bytes
//!          | record_count u64                            (48 bytes)
//! record:  lambda f64 | scene_seed u64
//!          | design_box x0,x1,z0,z1 as 4 x u32
//!          | eps f32[nx*nz] row-major
//!          | field_real f32[nx*nz] | field_imag f32[nx*nz]
//! ```
//!
//! Records have a fixed stride, so readers can seek. Fields are solved in
//! double precision and stored in single; the file is the precision of
//! record, and `write(read(write(x)))` is byte-identical to `write(x)`.
//!
//! A plain-text `<name>.manifest` sidecar records the generation settings
//! and the per-wavelength sample histogram.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::fdfd::{assemble_helmholtz, helmholtz_residual_with, solve_field, PmlSpec, SourceSpec};
use crate::scenes::{self, SceneKind, SceneParams};
use crate::{ComplexField, CoreError, DesignBox, Grid2D, PermittivityMap, Result};

pub const MAGIC: [u8; 4] = *b"WFD1";
pub const VERSION: u32 = 1;

/// Parallel chunk size for sample generation; fixed so reductions do not
/// depend on the worker count.
const GEN_CHUNK: usize = 4;

/// Residual ceiling for read-time verification of stored fields. Fields are
/// solved to 1e-8 in f64 but stored as f32; the rounding alone puts the
/// residual floor near 1e-6 on desk grids, so verification allows an order
/// of magnitude above that floor.
pub const VERIFY_RESIDUAL_TOL: f64 = 2e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    TrainedGrid,
    DenseGrid,
}

impl ScheduleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleMode::TrainedGrid => "trained_grid",
            ScheduleMode::DenseGrid => "dense_grid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trained_grid" => Ok(ScheduleMode::TrainedGrid),
            "dense_grid" => Ok(ScheduleMode::DenseGrid),
            other => Err(CoreError::InvalidArg(format!(
                "unknown schedule mode '{other}'"
            ))),
        }
    }
}

/// Evenly spaced wavelength grid `[start, end]` with the given step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavelengthSchedule {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    pub mode: ScheduleMode,
}

impl WavelengthSchedule {
    pub fn new(start: f64, end: f64, step: f64, mode: ScheduleMode) -> Result<Self> {
        if !(start > 0.0 && start < end && step > 0.0) {
            return Err(CoreError::InvalidArg(format!(
                "bad schedule: start {start}, end {end}, step {step}"
            )));
        }
        Ok(Self {
            start,
            end,
            step,
            mode,
        })
    }

    /// 400-700 nm at 20 nm: the 16 training wavelengths.
    pub fn trained_default() -> Self {
        Self {
            start: 400e-9,
            end: 700e-9,
            step: 20e-9,
            mode: ScheduleMode::TrainedGrid,
        }
    }

    /// 400-700 nm at 1 nm: the 301 evaluation wavelengths.
    pub fn dense_default() -> Self {
        Self {
            start: 400e-9,
            end: 700e-9,
            step: 1e-9,
            mode: ScheduleMode::DenseGrid,
        }
    }

    /// Grid points, inclusive of the end when it is commensurate.
    pub fn points(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u64;
        loop {
            let w = self.start + (i as f64) * self.step;
            if w > self.end * (1.0 + 1e-12) {
                break;
            }
            out.push(w);
            i += 1;
        }
        out
    }
}

/// Whether each sample draws a fresh structure or structures are held fixed
/// across the whole wavelength grid (used by spectrum sweeps).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureMode {
    PerSample,
    FixedAcrossGrid,
}

impl StructureMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StructureMode::PerSample => "per_sample",
            StructureMode::FixedAcrossGrid => "fixed_across_grid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(StructureMode::PerSample),
            "fixed_across_grid" => Ok(StructureMode::FixedAcrossGrid),
            other => Err(CoreError::InvalidArg(format!(
                "unknown structure mode '{other}'"
            ))),
        }
    }
}

/// One Maxwell input-output pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub lambda: f64,
    pub scene_seed: u64,
    pub eps: PermittivityMap,
    pub field: ComplexField,
}

/// Generation settings and bookkeeping, persisted as the manifest sidecar.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub scene_kind: SceneKind,
    pub grid: Grid2D,
    pub eps_material: f64,
    pub eps_max: f64,
    pub feature_cells: usize,
    pub fill_density: f64,
    pub layer_count: usize,
    pub schedule: WavelengthSchedule,
    pub structure_mode: StructureMode,
    pub n_requested: usize,
    pub n_written: usize,
    pub n_skipped: usize,
    pub seed: u64,
    pub pml: PmlSpec,
    pub source_row: usize,
    pub created_unix: u64,
    /// Per-wavelength sample counts, keyed by [`lambda_key`].
    pub counts: BTreeMap<u64, usize>,
}

/// Wavelengths are keyed by their picometer rounding; exact for any schedule
/// with a step of at least a femtometer.
pub fn lambda_key(lambda: f64) -> u64 {
    (lambda * 1e12).round() as u64
}

impl Manifest {
    pub fn counts_by_lambda(&self) -> Vec<(f64, usize)> {
        self.counts
            .iter()
            .map(|(&pm, &c)| (pm as f64 * 1e-12, c))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        push("format", String::from_utf8_lossy(&MAGIC).to_string());
        push("version", VERSION.to_string());
        push("scene_kind", self.scene_kind.as_str().to_string());
        push("nx", self.grid.nx.to_string());
        push("nz", self.grid.nz.to_string());
        push("dl_x", self.grid.dl_x.to_string());
        push("dl_z", self.grid.dl_z.to_string());
        push("eps_air", "1".to_string());
        push("eps_material", self.eps_material.to_string());
        push("eps_max", self.eps_max.to_string());
        push("feature_cells", self.feature_cells.to_string());
        push("fill_density", self.fill_density.to_string());
        push("layer_count", self.layer_count.to_string());
        push("schedule_start", self.schedule.start.to_string());
        push("schedule_end", self.schedule.end.to_string());
        push("schedule_step", self.schedule.step.to_string());
        push("schedule_mode", self.schedule.mode.as_str().to_string());
        push("structure_mode", self.structure_mode.as_str().to_string());
        push("n_requested", self.n_requested.to_string());
        push("n_written", self.n_written.to_string());
        push("n_skipped", self.n_skipped.to_string());
        push("seed", self.seed.to_string());
        push("solver", "direct_band_lu".to_string());
        push("pml_thickness", self.pml.thickness.to_string());
        push("pml_sigma_max", self.pml.sigma_max.to_string());
        push("pml_poly_order", self.pml.poly_order.to_string());
        push("source_row", self.source_row.to_string());
        push("created_unix", self.created_unix.to_string());
        for (&pm, &c) in &self.counts {
            push(&format!("count_{:.3}nm", pm as f64 * 1e-3), c.to_string());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::InvalidArg(format!("manifest line {} is not key=value", ln + 1))
            })?;
            if let Some(nm) = k.strip_prefix("count_").and_then(|s| s.strip_suffix("nm")) {
                let nm: f64 = nm
                    .parse()
                    .map_err(|_| CoreError::InvalidArg(format!("bad count key '{k}'")))?;
                let c: usize = v
                    .parse()
                    .map_err(|_| CoreError::InvalidArg(format!("bad count value '{v}'")))?;
                counts.insert(lambda_key(nm * 1e-9), c);
            } else {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| CoreError::InvalidArg(format!("manifest missing key '{k}'")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::InvalidArg(format!("manifest key '{k}' is not a number")))
        };
        let parse_u = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::InvalidArg(format!("manifest key '{k}' is not an integer")))
        };
        let grid = Grid2D::new(
            parse_u("nx")?,
            parse_u("nz")?,
            parse_f("dl_x")?,
            parse_f("dl_z")?,
        )?;
        Ok(Manifest {
            scene_kind: SceneKind::parse(get("scene_kind")?)?,
            grid,
            eps_material: parse_f("eps_material")?,
            eps_max: parse_f("eps_max")?,
            feature_cells: parse_u("feature_cells")?,
            fill_density: parse_f("fill_density")?,
            layer_count: parse_u("layer_count")?,
            schedule: WavelengthSchedule::new(
                parse_f("schedule_start")?,
                parse_f("schedule_end")?,
                parse_f("schedule_step")?,
                ScheduleMode::parse(get("schedule_mode")?)?,
            )?,
            structure_mode: StructureMode::parse(get("structure_mode")?)?,
            n_requested: parse_u("n_requested")?,
            n_written: parse_u("n_written")?,
            n_skipped: parse_u("n_skipped")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| CoreError::InvalidArg("bad seed".into()))?,
            pml: PmlSpec {
                thickness: parse_u("pml_thickness")?,
                sigma_max: parse_f("pml_sigma_max")?,
                poly_order: parse_f("pml_poly_order")?,
            },
            source_row: parse_u("source_row")?,
            created_unix: get("created_unix")?
                .parse()
                .map_err(|_| CoreError::InvalidArg("bad created_unix".into()))?,
            counts,
        })
    }
}

/// In-memory dataset: samples plus the manifest when one is available.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: Grid2D,
    pub scene_kind: SceneKind,
    pub samples: Vec<Sample>,
    pub manifest: Option<Manifest>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest permittivity across all samples.
    pub fn eps_max(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.eps.eps_max())
            .fold(1.0, f64::max)
    }

    /// Sorted distinct wavelengths present in the records.
    pub fn distinct_wavelengths(&self) -> Vec<f64> {
        let mut keys: Vec<u64> = self.samples.iter().map(|s| lambda_key(s.lambda)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter().map(|pm| pm as f64 * 1e-12).collect()
    }

    /// Histogram over wavelengths, keyed like the manifest counts.
    pub fn recount(&self) -> BTreeMap<u64, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(lambda_key(s.lambda)).or_insert(0) += 1;
        }
        counts
    }
}

/// Options for [`generate_dataset`] beyond the scene and schedule.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub structure_mode: StructureMode,
    pub pml: PmlSpec,
    /// Source line z index; defaults to two cells below the PML.
    pub source_row: Option<usize>,
    /// Generation fails when more than this fraction of samples is skipped.
    pub max_skip_fraction: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            structure_mode: StructureMode::PerSample,
            pml: PmlSpec::default(),
            source_row: None,
            max_skip_fraction: 0.1,
        }
    }
}

/// Report of a generation run: the dataset plus any skipped samples.
#[derive(Debug)]
pub struct GenReport {
    pub dataset: Dataset,
    /// (plan index, error description) for every skipped sample.
    pub skipped: Vec<(usize, String)>,
}

/// Generates `n` solved samples (or `n` structures times the whole grid in
/// fixed-structure mode). Scene seeds and wavelength choices derive from
/// `seed` alone; solves run in parallel with a fixed chunking.
pub fn generate_dataset(
    scene: &SceneParams,
    schedule: &WavelengthSchedule,
    n: usize,
    seed: u64,
    opts: &GenOptions,
) -> Result<GenReport> {
    if n == 0 {
        return Err(CoreError::InvalidArg("sample count must be >= 1".into()));
    }
    let points = schedule.points();
    if points.is_empty() {
        return Err(CoreError::InvalidArg(
            "schedule contains no wavelengths".into(),
        ));
    }
    // The resolution constraint must hold at the shortest wavelength.
    scene.grid.check_resolution(points[0], scene.eps_material)?;
    opts.pml.validate(&scene.grid)?;
    let source_row = opts.source_row.unwrap_or(opts.pml.thickness + 2);
    let source = SourceSpec::plane_wave(source_row);
    source.validate(&scene.grid, &opts.pml)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(u64, f64)> = match opts.structure_mode {
        StructureMode::PerSample => (0..n)
            .map(|_| {
                let s = rng.next_u64();
                let w = points[rng.random_range(0..points.len())];
                (s, w)
            })
            .collect(),
        StructureMode::FixedAcrossGrid => {
            let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
            seeds
                .iter()
                .flat_map(|&s| points.iter().map(move |&w| (s, w)))
                .collect()
        }
    };

    let results: Vec<std::result::Result<Sample, String>> = plan
        .par_chunks(GEN_CHUNK)
        .flat_map_iter(|chunk| {
            chunk
                .iter()
                .map(|&(scene_seed, lambda)| {
                    let mut sp = *scene;
                    sp.seed = scene_seed;
                    let eps = scenes::generate(&sp).map_err(|e| e.to_string())?;
                    let sys =
                        assemble_helmholtz(&eps, lambda, &opts.pml).map_err(|e| e.to_string())?;
                    let field = solve_field(&sys, &source).map_err(|e| e.to_string())?;
                    Ok(Sample {
                        lambda,
                        scene_seed,
                        eps,
                        field,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut samples = Vec::with_capacity(plan.len());
    let mut skipped = Vec::new();
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.push(s),
            Err(msg) => skipped.push((idx, msg)),
        }
    }
    if skipped.len() as f64 > opts.max_skip_fraction * plan.len() as f64 {
        return Err(CoreError::InvalidArg(format!(
            "{} of {} solves failed (first: {})",
            skipped.len(),
            plan.len(),
            skipped[0].1
        )));
    }

    let mut counts = BTreeMap::new();
    for s in &samples {
        *counts.entry(lambda_key(s.lambda)).or_insert(0usize) += 1;
    }
    let eps_max = samples.iter().map(|s| s.eps.eps_max()).fold(1.0, f64::max);
    let manifest = Manifest {
        scene_kind: scene.kind,
        grid: scene.grid,
        eps_material: scene.eps_material,
        eps_max,
        feature_cells: scene.feature_cells,
        fill_density: scene.fill_density,
        layer_count: scene.layer_count,
        schedule: *schedule,
        structure_mode: opts.structure_mode,
        n_requested: plan.len(),
        n_written: samples.len(),
        n_skipped: skipped.len(),
        seed,
        pml: opts.pml,
        source_row,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        counts,
    };

    Ok(GenReport {
        dataset: Dataset {
            grid: scene.grid,
            scene_kind: scene.kind,
            samples,
            manifest: Some(manifest),
        },
        skipped,
    })
}

/// Partitions a dataset into (trained, untrained) by wavelength proximity.
/// A sample is trained iff `|lambda - w| <= tol` for some trained `w`.
pub fn split_by_wavelength(ds: &Dataset, trained: &[f64], tol: f64) -> Result<(Dataset, Dataset)> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(CoreError::InvalidArg(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if trained.is_empty() {
        return Err(CoreError::InvalidArg(
            "trained wavelength set is empty".into(),
        ));
    }
    let mut sorted = trained.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in sorted.windows(2) {
        let gap = pair[1] - pair[0];
        if gap > 0.0 && tol >= gap / 2.0 {
            return Err(CoreError::InvalidArg(format!(
                "tolerance {tol:.3e} m is too large for a trained-grid gap of {gap:.3e} m"
            )));
        }
    }
    let is_trained = |lambda: f64| -> bool { sorted.iter().any(|&w| (lambda - w).abs() <= tol) };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for s in &ds.samples {
        if is_trained(s.lambda) {
            a.push(s.clone());
        } else {
            b.push(s.clone());
        }
    }
    let sub = |samples: Vec<Sample>| -> Dataset {
        let mut manifest = ds.manifest.clone();
        if let Some(m) = manifest.as_mut() {
            m.n_written = samples.len();
            m.counts.clear();
            for s in &samples {
                *m.counts.entry(lambda_key(s.lambda)).or_insert(0) += 1;
            }
        }
        Dataset {
            grid: ds.grid,
            scene_kind: ds.scene_kind,
            samples,
            manifest,
        }
    };
    Ok((sub(a), sub(b)))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

/// Writes the dataset and its manifest sidecar.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.grid.nx as u32).to_le_bytes())?;
    w.write_all(&(ds.grid.nz as u32).to_le_bytes())?;
    w.write_all(&ds.grid.dl_x.to_le_bytes())?;
    w.write_all(&ds.grid.dl_z.to_le_bytes())?;
    w.write_all(&[ds.scene_kind.code()])?;
    w.write_all(&[0u8; 7])?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for s in &ds.samples {
        if s.eps.grid != ds.grid || s.field.grid != ds.grid {
            return Err(CoreError::ShapeMismatch(
                "sample grid differs from dataset grid".into(),
            ));
        }
        w.write_all(&s.lambda.to_le_bytes())?;
        w.write_all(&s.scene_seed.to_le_bytes())?;
        let b = s.eps.design_box;
        for v in [b.x0, b.x1, b.z0, b.z1] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in s.eps.eps.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in s.field.values.iter() {
            w.write_all(&(v.re as f32).to_le_bytes())?;
        }
        for v in s.field.values.iter() {
            w.write_all(&(v.im as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    if let Some(m) = &ds.manifest {
        std::fs::write(manifest_path(path), m.to_text())?;
    }
    Ok(())
}

fn read_exact_or_truncated(
    r: &mut impl Read,
    buf: &mut [u8],
    expected_records: u64,
    found_records: u64,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::Truncated {
                expected: expected_records,
                found: found_records,
            }
        } else {
            CoreError::Io(e)
        }
    })
}

/// Reads a WFD1 file; picks up the manifest sidecar when present.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CoreError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(CoreError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    r.read_exact(&mut u32b)?;
    let nx = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b)?;
    let nz = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u64b)?;
    let dl_x = f64::from_le_bytes(u64b);
    r.read_exact(&mut u64b)?;
    let dl_z = f64::from_le_bytes(u64b);
    let mut kind_pad = [0u8; 8];
    r.read_exact(&mut kind_pad)?;
    let scene_kind = SceneKind::from_code(kind_pad[0])?;
    r.read_exact(&mut u64b)?;
    let record_count = u64::from_le_bytes(u64b);
    let grid = Grid2D::new(nx, nz, dl_x, dl_z)?;

    let cells = nx * nz;
    let mut samples = Vec::with_capacity(record_count as usize);
    let mut scalars = vec![0u8; 4 * cells];
    for rec in 0..record_count {
        let mut head = [0u8; 32];
        read_exact_or_truncated(&mut r, &mut head, record_count, rec)?;
        let lambda = f64::from_le_bytes(head[0..8].try_into().unwrap());
        let scene_seed = u64::from_le_bytes(head[8..16].try_into().unwrap());
        let bx: Vec<usize> = (0..4)
            .map(|i| u32::from_le_bytes(head[16 + 4 * i..20 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        let design_box = DesignBox::new(bx[0], bx[1], bx[2], bx[3])?;

        read_exact_or_truncated(&mut r, &mut scalars, record_count, rec)?;
        let mut eps = Array2::from_elem((nx, nz), 0.0f64);
        for (dst, src) in eps.iter_mut().zip(scalars.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap()) as f64;
        }
        read_exact_or_truncated(&mut r, &mut scalars, record_count, rec)?;
        let mut field = Array2::from_elem((nx, nz), Complex64::new(0.0, 0.0));
        for (dst, src) in field.iter_mut().zip(scalars.chunks_exact(4)) {
            dst.re = f32::from_le_bytes(src.try_into().unwrap()) as f64;
        }
        read_exact_or_truncated(&mut r, &mut scalars, record_count, rec)?;
        for (dst, src) in field.iter_mut().zip(scalars.chunks_exact(4)) {
            dst.im = f32::from_le_bytes(src.try_into().unwrap()) as f64;
        }

        let material = eps.iter().copied().fold(1.0f64, f64::max);
        samples.push(Sample {
            lambda,
            scene_seed,
            eps: PermittivityMap::new(grid, eps, design_box, (1.0, material.max(1.0)))?,
            field: ComplexField::new(grid, field)?,
        });
    }
    // Trailing bytes mean the header undercounts.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CoreError::Truncated {
            expected: record_count,
            found: record_count + 1,
        });
    }

    let manifest = match std::fs::read_to_string(manifest_path(path)) {
        Ok(text) => Some(Manifest::parse(&text)?),
        Err(_) => None,
    };
    Ok(Dataset {
        grid,
        scene_kind,
        samples,
        manifest,
    })
}

/// Spot-checks stored fields against the Helmholtz residual on a random
/// fraction of records. Requires the manifest (for solver settings).
pub fn verify_dataset(ds: &Dataset, fraction: f64, seed: u64, tol: f64) -> Result<()> {
    let manifest = ds
        .manifest
        .as_ref()
        .ok_or_else(|| CoreError::InvalidArg("verification requires the manifest sidecar".into()))?;
    if ds.samples.is_empty() {
        return Ok(());
    }
    let n_check = ((ds.samples.len() as f64 * fraction).ceil() as usize).clamp(1, ds.samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..ds.samples.len()).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let source = SourceSpec::plane_wave(manifest.source_row);
    for &idx in indices.iter().take(n_check) {
        let s = &ds.samples[idx];
        let res = helmholtz_residual_with(&s.eps, s.lambda, &manifest.pml, &s.field, &source)?;
        if res > tol {
            return Err(CoreError::NoConvergence {
                achieved: res,
                target: tol,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn desk_schedule() -> WavelengthSchedule {
        WavelengthSchedule::new(400e-9, 700e-9, 60e-9, ScheduleMode::TrainedGrid).unwrap()
    }

    fn small_scene() -> SceneParams {
        // 48 cells keeps solves fast; dl 20 nm satisfies resolution for
        // eps 4 down to 400 nm (limit 20 nm).
        let grid = Grid2D::square(48, 20e-9).unwrap();
        let mut p = SceneParams::new(SceneKind::Metalens, grid, 5);
        p.eps_material = 4.0;
        p
    }

    fn small_opts() -> GenOptions {
        GenOptions {
            pml: PmlSpec {
                thickness: 8,
                sigma_max: 5.0,
                poly_order: 3.0,
            },
            ..GenOptions::default()
        }
    }

    #[test]
    fn schedule_defaults_have_expected_sizes() {
        assert_eq!(WavelengthSchedule::trained_default().points().len(), 16);
        assert_eq!(WavelengthSchedule::dense_default().points().len(), 301);
        assert_eq!(desk_schedule().points().len(), 6);
    }

    #[test]
    fn generate_and_roundtrip_single_record() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 1, 9, &small_opts()).unwrap();
        assert_eq!(report.dataset.len(), 1);
        assert!(report.skipped.is_empty());
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("one.wfd");
        let p2 = dir.path().join("two.wfd");
        write_dataset(&report.dataset, &p1).unwrap();
        let back = read_dataset(&p1).unwrap();
        assert_eq!(back.len(), 1);
        write_dataset(&back, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "write(read(write(x))) must be byte-identical");
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_dataset(&small_scene(), &desk_schedule(), 6, 3, &small_opts()).unwrap();
        let b = generate_dataset(&small_scene(), &desk_schedule(), 6, 3, &small_opts()).unwrap();
        let dir = tempdir().unwrap();
        let pa = dir.path().join("a.wfd");
        let pb = dir.path().join("b.wfd");
        write_dataset(&a.dataset, &pa).unwrap();
        write_dataset(&b.dataset, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn manifest_counts_match_recount() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 12, 4, &small_opts()).unwrap();
        let ds = report.dataset;
        let manifest = ds.manifest.clone().unwrap();
        assert_eq!(manifest.counts, ds.recount());
        assert_eq!(manifest.n_written, ds.len());
        let total: usize = manifest.counts.values().sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn manifest_text_roundtrip() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 3, 8, &small_opts()).unwrap();
        let m = report.dataset.manifest.unwrap();
        let parsed = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(parsed.counts, m.counts);
        assert_eq!(parsed.seed, m.seed);
        assert_eq!(parsed.eps_max, m.eps_max);
        assert_eq!(parsed.schedule, m.schedule);
        assert_eq!(parsed.source_row, m.source_row);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 1, 1, &small_opts()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.wfd");
        write_dataset(&report.dataset, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(CoreError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 1, 1, &small_opts()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.wfd");
        write_dataset(&report.dataset, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_dataset(&p),
            Err(CoreError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_stream_names_counts() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 2, 1, &small_opts()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.wfd");
        write_dataset(&report.dataset, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
        match read_dataset(&p) {
            Err(CoreError::Truncated { expected, found }) => {
                assert_eq!(expected, 2);
                assert_eq!(found, 1);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn split_partitions_exhaustively() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 16, 2, &small_opts()).unwrap();
        let ds = report.dataset;
        let trained = [400e-9, 520e-9, 640e-9];
        let (a, b) = split_by_wavelength(&ds, &trained, 0.25e-9).unwrap();
        assert_eq!(a.len() + b.len(), ds.len());
        for s in &a.samples {
            assert!(trained.iter().any(|&w| (s.lambda - w).abs() <= 0.25e-9));
        }
        for s in &b.samples {
            assert!(trained.iter().all(|&w| (s.lambda - w).abs() > 0.25e-9));
        }
    }

    #[test]
    fn split_all_trained_leaves_untrained_empty() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 8, 2, &small_opts()).unwrap();
        let ds = report.dataset;
        let trained = desk_schedule().points();
        let (a, b) = split_by_wavelength(&ds, &trained, 0.25e-9).unwrap();
        assert_eq!(a.len(), ds.len());
        assert!(b.is_empty());
    }

    #[test]
    fn split_grid_intersection_counts() {
        // 1 nm dense grid against the 20 nm trained grid: 16 of 301
        // wavelengths match within 0.5 nm.
        let dense = WavelengthSchedule::dense_default().points();
        let trained = WavelengthSchedule::trained_default().points();
        let tol = 0.5e-9;
        let hits = dense
            .iter()
            .filter(|&&w| trained.iter().any(|&t| (w - t).abs() <= tol))
            .count();
        assert_eq!(hits, 16);
    }

    #[test]
    fn split_rejects_oversized_tolerance() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 2, 2, &small_opts()).unwrap();
        let trained = [400e-9, 420e-9];
        assert!(split_by_wavelength(&report.dataset, &trained, 11e-9).is_err());
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_dataset(&small_scene(), &desk_schedule(), 0, 1, &small_opts()).is_err());
    }

    #[test]
    fn fixed_structures_cross_grid() {
        let opts = GenOptions {
            structure_mode: StructureMode::FixedAcrossGrid,
            ..small_opts()
        };
        let report = generate_dataset(&small_scene(), &desk_schedule(), 2, 6, &opts).unwrap();
        let ds = report.dataset;
        assert_eq!(ds.len(), 2 * 6);
        // Each structure appears once per wavelength.
        let seeds: std::collections::HashSet<u64> =
            ds.samples.iter().map(|s| s.scene_seed).collect();
        assert_eq!(seeds.len(), 2);
        for s in &seeds {
            let per_seed = ds.samples.iter().filter(|x| x.scene_seed == *s).count();
            assert_eq!(per_seed, 6);
        }
    }

    #[test]
    fn stored_fields_verify_against_residual() {
        let report =
            generate_dataset(&small_scene(), &desk_schedule(), 6, 11, &small_opts()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.wfd");
        write_dataset(&report.dataset, &p).unwrap();
        let ds = read_dataset(&p).unwrap();
        verify_dataset(&ds, 1.0, 0, VERIFY_RESIDUAL_TOL).unwrap();
        // A corrupted field must fail verification.
        let mut bad = ds.clone();
        let v = bad.samples[0].field.values[[24, 24]];
        bad.samples[0].field.values[[24, 24]] =
            v * 2.0 + Complex64::new(bad.samples[0].field.l2_norm() * 0.1, 0.0);
        assert!(verify_dataset(&bad, 1.0, 0, VERIFY_RESIDUAL_TOL).is_err());
    }
}

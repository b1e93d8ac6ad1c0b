//! Evaluation: per-wavelength NMSE reports, continuous-spectrum sweeps,
//! spatial error maps, timing benchmarks, and the dataset-size study.

use ndarray::Array2;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::dataset::{lambda_key, Dataset, Sample, StructureMode};
use crate::fdfd::{assemble_helmholtz, solve_field, PmlSpec, SourceSpec};
use crate::model::{Model, ModelConfig, PriorSet, Real, TrainItem, BATCH_CHUNK};
use crate::training::{self, nmse, TrainConfig};
use crate::{CoreError, DesignBox, PermittivityMap, Result};

/// Per-wavelength NMSE statistics over both evaluation regions.
#[derive(Debug, Clone)]
pub struct WavelengthRow {
    pub lambda: f64,
    pub count: usize,
    pub trained: bool,
    pub mean_all: f64,
    pub std_all: f64,
    pub mean_design: f64,
    pub std_design: f64,
}

/// Pooled statistics over one trained/untrained group, derived exactly from
/// the per-wavelength rows.
#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub count: usize,
    pub mean_all: f64,
    pub std_all: f64,
    pub mean_design: f64,
    pub std_design: f64,
}

impl Aggregate {
    fn from_rows<'a>(rows: impl Iterator<Item = &'a WavelengthRow>) -> Self {
        let mut count = 0usize;
        let mut sum_all = 0.0;
        let mut sumsq_all = 0.0;
        let mut sum_design = 0.0;
        let mut sumsq_design = 0.0;
        for r in rows {
            let n = r.count as f64;
            count += r.count;
            sum_all += r.mean_all * n;
            sumsq_all += (r.std_all * r.std_all + r.mean_all * r.mean_all) * n;
            sum_design += r.mean_design * n;
            sumsq_design += (r.std_design * r.std_design + r.mean_design * r.mean_design) * n;
        }
        if count == 0 {
            return Self {
                count: 0,
                mean_all: f64::NAN,
                std_all: f64::NAN,
                mean_design: f64::NAN,
                std_design: f64::NAN,
            };
        }
        let n = count as f64;
        let mean_all = sum_all / n;
        let mean_design = sum_design / n;
        Self {
            count,
            mean_all,
            std_all: (sumsq_all / n - mean_all * mean_all).max(0.0).sqrt(),
            mean_design,
            std_design: (sumsq_design / n - mean_design * mean_design).max(0.0).sqrt(),
        }
    }
}

/// Full evaluation report.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<WavelengthRow>,
    pub trained: Aggregate,
    pub untrained: Aggregate,
}

impl MetricsReport {
    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "wavelength_nm,count,trained,mean_nmse_all,std_nmse_all,mean_nmse_design,std_nmse_design\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:.3},{},{},{},{},{},{}\n",
                r.lambda * 1e9,
                r.count,
                r.trained as u8,
                r.mean_all,
                r.std_all,
                r.mean_design,
                r.std_design
            ));
        }
        s
    }
}

struct SampleScore {
    key: u64,
    all: f64,
    design: f64,
}

fn score_samples<F: Real>(model: &Model<F>, ds: &Dataset) -> Result<Vec<SampleScore>> {
    if ds.grid != model.grid {
        return Err(CoreError::Incompatible(format!(
            "dataset grid {}x{} does not match model grid {}x{}",
            ds.grid.nx, ds.grid.nz, model.grid.nx, model.grid.nz
        )));
    }
    // One conditioning object per distinct wavelength, shared by workers.
    let mut conds = std::collections::HashMap::new();
    for s in &ds.samples {
        if let std::collections::hash_map::Entry::Vacant(e) = conds.entry(lambda_key(s.lambda)) {
            e.insert(model.conditioning_for(s.lambda)?);
        }
    }
    let scores: Vec<Result<SampleScore>> = ds
        .samples
        .par_chunks(BATCH_CHUNK)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|s| {
                let cond = &conds[&lambda_key(s.lambda)];
                let pred = model.forward_field_with(&s.eps, cond)?;
                Ok(SampleScore {
                    key: lambda_key(s.lambda),
                    all: nmse(&pred, &s.field, None)?,
                    design: nmse(&pred, &s.field, Some(&s.eps.design_box))?,
                })
            })
        })
        .collect();
    scores.into_iter().collect()
}

/// Evaluates the model on a dataset, grouping NMSE per wavelength and
/// splitting aggregates into trained/untrained by proximity to `trained`.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    ds: &Dataset,
    trained: &[f64],
    tol: f64,
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(CoreError::InvalidArg("evaluation dataset is empty".into()));
    }
    let scores = score_samples(model, ds)?;
    let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for s in &scores {
        groups.entry(s.key).or_default().push((s.all, s.design));
    }
    let is_trained =
        |lambda: f64| -> bool { trained.iter().any(|&w| (lambda - w).abs() <= tol) };
    let rows: Vec<WavelengthRow> = groups
        .into_iter()
        .map(|(key, vals)| {
            let lambda = key as f64 * 1e-12;
            let n = vals.len() as f64;
            let mean_all = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let mean_design = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let var_all = vals.iter().map(|v| (v.0 - mean_all).powi(2)).sum::<f64>() / n;
            let var_design = vals
                .iter()
                .map(|v| (v.1 - mean_design).powi(2))
                .sum::<f64>()
                / n;
            WavelengthRow {
                lambda,
                count: vals.len(),
                trained: is_trained(lambda),
                mean_all,
                std_all: var_all.sqrt(),
                mean_design,
                std_design: var_design.sqrt(),
            }
        })
        .collect();
    let trained_agg = Aggregate::from_rows(rows.iter().filter(|r| r.trained));
    let untrained_agg = Aggregate::from_rows(rows.iter().filter(|r| !r.trained));
    Ok(MetricsReport {
        rows,
        trained: trained_agg,
        untrained: untrained_agg,
    })
}

/// One point of the continuous-spectrum sweep curve.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// `mean - 2 std`.
    pub lo: f64,
    /// `mean + 2 std`.
    pub hi: f64,
    pub trained: bool,
}

/// NMSE versus wavelength over a dense dataset whose structures are held
/// fixed across the wavelength grid. Rows come out sorted by wavelength.
pub fn sweep<F: Real>(
    model: &Model<F>,
    ds: &Dataset,
    trained: &[f64],
    tol: f64,
) -> Result<Vec<SweepRow>> {
    if let Some(m) = &ds.manifest {
        if m.structure_mode != StructureMode::FixedAcrossGrid {
            return Err(CoreError::InvalidArg(
                "sweep needs a dataset generated with fixed structures across the grid".into(),
            ));
        }
    }
    let report = evaluate(model, ds, trained, tol)?;
    Ok(report
        .rows
        .iter()
        .map(|r| SweepRow {
            lambda: r.lambda,
            count: r.count,
            mean: r.mean_all,
            std: r.std_all,
            lo: r.mean_all - 2.0 * r.std_all,
            hi: r.mean_all + 2.0 * r.std_all,
            trained: r.trained,
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("wavelength_nm,count,mean_nmse,std_nmse,lo_2std,hi_2std,trained\n");
    for r in rows {
        s.push_str(&format!(
            "{:.3},{},{},{},{},{},{}\n",
            r.lambda * 1e9,
            r.count,
            r.mean,
            r.std,
            r.lo,
            r.hi,
            r.trained as u8
        ));
    }
    s
}

/// Absolute-error map of one sample.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub lambda: f64,
    pub design_box: DesignBox,
    /// `|prediction - target|` per cell.
    pub raw: Array2<f64>,
    pub max_err: f64,
    pub max_pos: (usize, usize),
}

pub fn error_map<F: Real>(model: &Model<F>, sample: &Sample) -> Result<ErrorMap> {
    let pred = model.forward_field(&sample.eps, sample.lambda)?;
    let mut raw = Array2::zeros((model.grid.nx, model.grid.nz));
    let mut max_err = 0.0;
    let mut max_pos = (0, 0);
    for ((i, k), v) in raw.indexed_iter_mut() {
        let e = (pred.values[[i, k]] - sample.field.values[[i, k]]).norm();
        *v = e;
        if e > max_err {
            max_err = e;
            max_pos = (i, k);
        }
    }
    Ok(ErrorMap {
        lambda: sample.lambda,
        design_box: sample.eps.design_box,
        raw,
        max_err,
        max_pos,
    })
}

/// Writes `<stem>.pgm` (graymap scaled from zero so a zero-error map renders
/// black), `<stem>.f32` (raw values) and `<stem>.meta` (key=value metadata
/// including the design-box outline).
pub fn save_error_map(map: &ErrorMap, stem: &Path) -> Result<()> {
    let mut scaled = map.raw.clone();
    let hi = if map.max_err > 0.0 { map.max_err } else { 1.0 };
    scaled.mapv_inplace(|v| v / hi);
    // Anchor black at exactly zero error.
    let with_ext = |ext: &str| {
        let mut os = stem.as_os_str().to_owned();
        os.push(ext);
        std::path::PathBuf::from(os)
    };
    let pgm_path = with_ext(".pgm");
    let (nx, nz) = scaled.dim();
    let mut bytes = Vec::with_capacity(nx * nz + 32);
    bytes.extend_from_slice(format!("P5\n{nz} {nx}\n255\n").as_bytes());
    for i in 0..nx {
        for k in 0..nz {
            bytes.push((scaled[[i, k]] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(pgm_path, bytes)?;
    crate::pgm::write_f32_raw(&with_ext(".f32"), &map.raw)?;
    let meta = format!(
        "lambda={}\nnx={}\nnz={}\ndesign_x0={}\ndesign_x1={}\ndesign_z0={}\ndesign_z1={}\nmax_err={}\nmax_i={}\nmax_k={}\n",
        map.lambda,
        nx,
        nz,
        map.design_box.x0,
        map.design_box.x1,
        map.design_box.z0,
        map.design_box.z1,
        map.max_err,
        map.max_pos.0,
        map.max_pos.1
    );
    std::fs::write(with_ext(".meta"), meta)?;
    Ok(())
}

/// Timing comparison between model inference and the ground-truth solver.
#[derive(Debug, Clone)]
pub struct BenchResult {
    /// (batch size, median seconds per sample).
    pub model_secs: Vec<(usize, f64)>,
    /// Median seconds for one assemble + solve.
    pub solver_secs: f64,
    /// (batch size, solver_secs / model_secs).
    pub speedups: Vec<(usize, f64)>,
    pub hardware: String,
}

impl BenchResult {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("hardware={}\n", self.hardware));
        s.push_str(&format!("solver_seconds_per_sample={}\n", self.solver_secs));
        for (b, t) in &self.model_secs {
            s.push_str(&format!("model_seconds_per_sample_batch{b}={t}\n"));
        }
        for (b, sp) in &self.speedups {
            s.push_str(&format!("speedup_batch{b}={sp}\n"));
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Median wall time per sample for batched model inference and for one FDFD
/// solve on the same grid. Three warm-up rounds precede the measurements.
pub fn bench<F: Real>(
    model: &Model<F>,
    eps: &PermittivityMap,
    lambda: f64,
    pml: &PmlSpec,
    batch_sizes: &[usize],
    trials: usize,
) -> Result<BenchResult> {
    if trials == 0 || batch_sizes.is_empty() {
        return Err(CoreError::InvalidArg(
            "need at least one trial and one batch size".into(),
        ));
    }
    let eps_norm = model.normalize_eps(eps)?;
    let cond = model.conditioning_for(lambda)?;

    let run_batch = |b: usize| -> Result<f64> {
        let refs: Vec<(&ndarray::Array2<F>, &broadwave_core_cond<F>)> = Vec::new();
        drop(refs);
        let batch: Vec<_> = (0..b).map(|_| (&eps_norm, &cond)).collect();
        for _ in 0..3 {
            std::hint::black_box(model.infer_batch(&batch));
        }
        let mut times = Vec::with_capacity(trials);
        let mut n_trials = trials;
        loop {
            times.clear();
            for _ in 0..n_trials {
                let t0 = Instant::now();
                std::hint::black_box(model.infer_batch(&batch));
                times.push(t0.elapsed().as_secs_f64() / b as f64);
            }
            let med = median(times.clone());
            // Guard against timer resolution on absurdly small models.
            if med > 1e-6 || n_trials >= trials * 8 {
                return Ok(med);
            }
            n_trials *= 2;
        }
    };

    let mut model_secs = Vec::new();
    for &b in batch_sizes {
        if b == 0 {
            return Err(CoreError::InvalidArg("batch size 0".into()));
        }
        model_secs.push((b, run_batch(b)?));
    }

    let source = SourceSpec::plane_wave(pml.thickness + 2);
    for _ in 0..3 {
        std::hint::black_box(crate::fdfd::solve_seconds(eps, lambda, pml, &source)?);
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        times.push(crate::fdfd::solve_seconds(eps, lambda, pml, &source)?);
    }
    let solver_secs = median(times);

    let speedups = model_secs
        .iter()
        .map(|&(b, t)| (b, solver_secs / t))
        .collect();
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    Ok(BenchResult {
        model_secs,
        solver_secs,
        speedups,
        hardware: format!(
            "{cores} cores, {} {}",
            std::env::consts::ARCH,
            std::env::consts::OS
        ),
    })
}

/// One row of the dataset-size study.
#[derive(Debug, Clone)]
pub struct SizeStudyRow {
    pub fraction: f64,
    pub n_train: usize,
    pub trained_all: f64,
    pub trained_design: f64,
    pub untrained_all: f64,
    pub untrained_design: f64,
}

pub fn size_study_csv(rows: &[SizeStudyRow]) -> String {
    let mut s = String::from(
        "fraction,n_train,trained_nmse_all,trained_nmse_design,untrained_nmse_all,untrained_nmse_design\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.fraction, r.n_train, r.trained_all, r.trained_design, r.untrained_all, r.untrained_design
        ));
    }
    s
}

/// Trains one model per training-set fraction (identical seeds throughout)
/// and reports best-checkpoint NMSE on the evaluation set. Subsets are
/// nested prefixes of one fixed shuffle.
#[allow(clippy::too_many_arguments)]
pub fn dataset_size_study<F: Real>(
    cfg: &ModelConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    eval_ds: &Dataset,
    tc: &TrainConfig,
    fractions: &[f64],
    study_seed: u64,
) -> Result<Vec<SizeStudyRow>> {
    use rand::{Rng, SeedableRng};
    if fractions.is_empty() {
        return Err(CoreError::InvalidArg("no fractions given".into()));
    }
    let n = train_ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(study_seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let trained_wavelengths = train_ds.distinct_wavelengths();
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CoreError::InvalidArg(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let take = ((fraction * n as f64).ceil() as usize).min(n);
        if take == 0 {
            return Err(CoreError::InvalidArg(format!(
                "fraction {fraction} yields an empty training set"
            )));
        }
        // Nested random subsets that keep the original sample order, so the
        // full fraction reproduces a plain training run exactly.
        let mut selected: Vec<usize> = order[..take].to_vec();
        selected.sort_unstable();
        let samples: Vec<_> = selected
            .iter()
            .map(|&i| train_ds.samples[i].clone())
            .collect();
        let subset = Dataset {
            grid: train_ds.grid,
            scene_kind: train_ds.scene_kind,
            samples,
            manifest: None,
        };
        let mut model: Model<F> = Model::new(*cfg, train_ds.grid, train_ds.eps_max())?;
        let outcome = training::train(&mut model, &subset, val_ds, tc, None)?;
        model.params = outcome.best_params;
        let report = evaluate(&model, eval_ds, &trained_wavelengths, training::SPLIT_TOL)?;
        rows.push(SizeStudyRow {
            fraction,
            n_train: take,
            trained_all: report.trained.mean_all,
            trained_design: report.trained.mean_design,
            untrained_all: report.untrained.mean_all,
            untrained_design: report.untrained.mean_design,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{dataset_from, grid16, teacher_cfg, teacher_datasets, teacher_samples};
    use tempfile::tempdir;

    #[test]
    fn perfect_predictions_score_zero() {
        // Targets generated by the very model under evaluation.
        let cfg = teacher_cfg();
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let samples = teacher_samples(&model, 520e-9, 3, 50);
        let ds = dataset_from(grid16(), samples);
        let report = evaluate(&model, &ds, &[520e-9], 0.25e-9).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].mean_all < 1e-24);
        assert!(report.rows[0].mean_design < 1e-24);
        assert_eq!(report.trained.count, 3);
    }

    #[test]
    fn row_count_matches_distinct_wavelengths() {
        let (train_ds, _, cfg) = teacher_datasets();
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let report = evaluate(&model, &train_ds, &[500e-9], 0.25e-9).unwrap();
        assert_eq!(report.rows.len(), train_ds.distinct_wavelengths().len());
        assert_eq!(report.total_count(), train_ds.len());
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let (train_ds, _, cfg) = teacher_datasets();
        let mut cfg = cfg;
        cfg.seed = 5; // imperfect model so scores are nonzero
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let report = evaluate(&model, &train_ds, &[500e-9], 0.25e-9).unwrap();
        let again_trained = Aggregate::from_rows(report.rows.iter().filter(|r| r.trained));
        let again_untrained = Aggregate::from_rows(report.rows.iter().filter(|r| !r.trained));
        assert_eq!(report.trained.count, again_trained.count);
        assert_eq!(report.trained.mean_all, again_trained.mean_all);
        assert_eq!(report.untrained.std_design, again_untrained.std_design);
        // Counts split the dataset exactly.
        assert_eq!(
            report.trained.count + report.untrained.count,
            train_ds.len()
        );
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (train_ds, _, cfg) = teacher_datasets();
        let mut cfg = cfg;
        cfg.seed = 6;
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let a = evaluate(&model, &train_ds, &[500e-9], 0.25e-9).unwrap();
        let b = evaluate(&model, &train_ds, &[500e-9], 0.25e-9).unwrap();
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(x.mean_all.to_bits(), y.mean_all.to_bits());
            assert_eq!(x.std_design.to_bits(), y.std_design.to_bits());
        }
    }

    #[test]
    fn full_grid_design_box_matches_whole_domain() {
        let cfg = teacher_cfg();
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let mut samples = teacher_samples(&model, 520e-9, 2, 60);
        for s in &mut samples {
            s.eps.design_box = crate::DesignBox::full(&grid16());
            // Perturb the target so scores are nonzero.
            s.field.values[[8, 8]] += num_complex::Complex64::new(0.05, 0.0);
        }
        let ds = dataset_from(grid16(), samples);
        let report = evaluate(&model, &ds, &[520e-9], 0.25e-9).unwrap();
        for r in &report.rows {
            assert!((r.mean_all - r.mean_design).abs() < 1e-18);
            assert!((r.std_all - r.std_design).abs() < 1e-18);
        }
    }

    #[test]
    fn sweep_rows_sorted_with_trained_markers() {
        let cfg = teacher_cfg();
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let mut samples = Vec::new();
        for (i, lambda) in [450e-9, 500e-9, 550e-9, 600e-9].iter().enumerate() {
            samples.extend(teacher_samples(&model, *lambda, 2, 70 + 10 * i as u64));
        }
        let ds = dataset_from(grid16(), samples);
        let trained = [500e-9, 600e-9];
        let rows = sweep(&model, &ds, &trained, 0.25e-9).unwrap();
        assert_eq!(rows.len(), 4);
        for pair in rows.windows(2) {
            assert!(pair[0].lambda < pair[1].lambda);
        }
        assert_eq!(rows.iter().filter(|r| r.trained).count(), trained.len());
        for r in &rows {
            assert!((r.lo - (r.mean - 2.0 * r.std)).abs() < 1e-18);
            assert!((r.hi - (r.mean + 2.0 * r.std)).abs() < 1e-18);
        }
        // Same data through evaluate gives the same aggregate.
        let report = evaluate(&model, &ds, &trained, 0.25e-9).unwrap();
        let sweep_mean: f64 = rows
            .iter()
            .filter(|r| !r.trained)
            .map(|r| r.mean * r.count as f64)
            .sum::<f64>()
            / rows
                .iter()
                .filter(|r| !r.trained)
                .map(|r| r.count as f64)
                .sum::<f64>();
        assert!((sweep_mean - report.untrained.mean_all).abs() < 1e-15);
    }

    #[test]
    fn sweep_rejects_per_sample_structure_mode() {
        // A manifest declaring per-sample structures must be refused.
        let (mut train_ds, _, cfg) = teacher_datasets();
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let report = crate::dataset::generate_dataset(
            &crate::scenes::SceneParams::new(
                crate::scenes::SceneKind::Metalens,
                crate::Grid2D::square(48, 20e-9).unwrap(),
                1,
            ),
            &crate::dataset::WavelengthSchedule::new(
                500e-9,
                600e-9,
                100e-9,
                crate::dataset::ScheduleMode::TrainedGrid,
            )
            .unwrap(),
            1,
            1,
            &crate::dataset::GenOptions {
                pml: PmlSpec {
                    thickness: 8,
                    sigma_max: 5.0,
                    poly_order: 3.0,
                },
                ..Default::default()
            },
        )
        .unwrap();
        train_ds.manifest = report.dataset.manifest;
        assert!(sweep(&model, &train_ds, &[500e-9], 0.25e-9).is_err());
    }

    #[test]
    fn error_map_properties() {
        let cfg = teacher_cfg();
        let model: Model<f64> = Model::new(cfg, grid16(), 4.0).unwrap();
        let mut samples = teacher_samples(&model, 520e-9, 1, 80);
        // Zero-error case first.
        let em = error_map(&model, &samples[0]).unwrap();
        assert!(em.raw.iter().all(|&v| v == 0.0));
        let dir = tempdir().unwrap();
        let stem = dir.path().join("zero");
        save_error_map(&em, &stem).unwrap();
        let pgm = std::fs::read(dir.path().join("zero.pgm")).unwrap();
        let header_len = b"P5\n16 16\n255\n".len();
        assert!(pgm[header_len..].iter().all(|&b| b == 0), "zero error must render black");

        // Perturbed target: raw nonnegative, argmax position agrees.
        samples[0].field.values[[5, 9]] += num_complex::Complex64::new(1.0, 0.0);
        let em = error_map(&model, &samples[0]).unwrap();
        assert!(em.raw.iter().all(|&v| v >= 0.0));
        assert_eq!(em.max_pos, (5, 9));
        let mut best = (0, 0);
        let mut val = -1.0;
        for ((i, k), &v) in em.raw.indexed_iter() {
            if v > val {
                val = v;
                best = (i, k);
            }
        }
        assert_eq!(best, em.max_pos);
        assert_eq!(val, em.max_err);
    }

    #[test]
    fn bench_reports_positive_times_and_amortization() {
        let cfg = teacher_cfg();
        let grid = crate::Grid2D::square(32, 20e-9).unwrap();
        let model: Model<f64> = Model::new(cfg, grid, 4.0).unwrap();
        let eps = crate::PermittivityMap::homogeneous(grid, crate::DesignBox::full(&grid)).unwrap();
        let pml = PmlSpec {
            thickness: 6,
            sigma_max: 5.0,
            poly_order: 3.0,
        };
        let result = bench(&model, &eps, 500e-9, &pml, &[1, 8], 5).unwrap();
        assert!(result.solver_secs > 0.0);
        assert_eq!(result.model_secs.len(), 2);
        for &(_, t) in &result.model_secs {
            assert!(t > 0.0);
        }
        assert_eq!(result.speedups.len(), 2);
        let text = result.to_text();
        assert!(text.contains("solver_seconds_per_sample="));
        assert!(text.contains("model_seconds_per_sample_batch8="));
    }

    #[test]
    fn size_study_rows_and_full_fraction_parity() {
        let (train_ds, val_ds, cfg) = teacher_datasets();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 31,
            ..TrainConfig::default()
        };
        let rows = dataset_size_study::<f64>(
            &cfg,
            &train_ds,
            &val_ds,
            &val_ds,
            &tc,
            &[0.5, 1.0],
            77,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].n_train, train_ds.len());

        // The fraction-1.0 row equals a plain training run with the same seeds.
        let mut model: Model<f64> = Model::new(cfg, grid16(), train_ds.eps_max()).unwrap();
        let out = training::train(&mut model, &train_ds, &val_ds, &tc, None).unwrap();
        model.params = out.best_params;
        let report = evaluate(
            &model,
            &val_ds,
            &train_ds.distinct_wavelengths(),
            training::SPLIT_TOL,
        )
        .unwrap();
        assert_eq!(rows[1].untrained_all.to_bits(), report.untrained.mean_all.to_bits());

        assert!(dataset_size_study::<f64>(
            &cfg, &train_ds, &val_ds, &val_ds, &tc, &[0.0], 77
        )
        .is_err());
    }
}

//! Deterministic randomized generators for the three photonic scene families.
//!
//! All three generators emit two-valued permittivity maps (air = 1.0 plus one
//! material) with a minimum feature size enforced in both axes:
//!
//! * `metalens` — one thin layer of randomly placed rectangular pillars;
//! * `splitter` — five stacked layers, each an independent random pattern,
//!   with a higher-contrast material;
//! * `waveguide` — a square freeform design box (thresholded blurred noise,
//!   cleaned by morphological opening) flanked by straight input/output
//!   strips along the propagation axis.
//!
//! Output depends only on `(kind, grid, seed, params)`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CoreError, DesignBox, Grid2D, PermittivityMap, Result};

/// Margin kept between the design region and the grid edge, in cells; sized
/// so structures stay clear of the default PML.
const EDGE_MARGIN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Metalens,
    Splitter,
    Waveguide,
}

impl SceneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneKind::Metalens => "metalens",
            SceneKind::Splitter => "splitter",
            SceneKind::Waveguide => "waveguide",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "metalens" => Ok(SceneKind::Metalens),
            "splitter" => Ok(SceneKind::Splitter),
            "waveguide" => Ok(SceneKind::Waveguide),
            other => Err(CoreError::InvalidArg(format!(
                "unknown scene kind '{other}'"
            ))),
        }
    }

    /// Default material permittivity for the family. The splitter and
    /// waveguide use a higher contrast than the metalens.
    pub fn default_eps_material(&self) -> f64 {
        match self {
            SceneKind::Metalens => 4.0,
            SceneKind::Splitter => 6.25,
            SceneKind::Waveguide => 6.0,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            SceneKind::Metalens => 0,
            SceneKind::Splitter => 1,
            SceneKind::Waveguide => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SceneKind::Metalens),
            1 => Ok(SceneKind::Splitter),
            2 => Ok(SceneKind::Waveguide),
            other => Err(CoreError::InvalidArg(format!("unknown scene code {other}"))),
        }
    }
}

/// Parameters shared by all generators.
#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    pub kind: SceneKind,
    pub grid: Grid2D,
    pub eps_material: f64,
    /// Minimum feature size in cells, per axis.
    pub feature_cells: usize,
    /// Target material fraction inside the design box. Zero is allowed as an
    /// explicit empty-design guard; otherwise it must lie in [0.1, 0.9].
    pub fill_density: f64,
    /// Number of stacked layers (splitter only).
    pub layer_count: usize,
    pub seed: u64,
}

impl SceneParams {
    pub fn new(kind: SceneKind, grid: Grid2D, seed: u64) -> Self {
        Self {
            kind,
            grid,
            eps_material: kind.default_eps_material(),
            feature_cells: 2,
            fill_density: 0.5,
            layer_count: 5,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feature_cells < 2 {
            return Err(CoreError::InvalidArg(format!(
                "feature_cells must be >= 2, got {}",
                self.feature_cells
            )));
        }
        if self.fill_density != 0.0 && !(0.1..=0.9).contains(&self.fill_density) {
            return Err(CoreError::InvalidArg(format!(
                "fill_density must be 0 or in [0.1, 0.9], got {}",
                self.fill_density
            )));
        }
        if self.eps_material <= 1.0 {
            return Err(CoreError::InvalidArg(format!(
                "eps_material must exceed 1.0, got {}",
                self.eps_material
            )));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Dispatches to the family-specific generator.
pub fn generate(p: &SceneParams) -> Result<PermittivityMap> {
    match p.kind {
        SceneKind::Metalens => gen_metalens(p),
        SceneKind::Splitter => gen_splitter(p),
        SceneKind::Waveguide => gen_waveguide(p),
    }
}

fn finish(p: &SceneParams, mask: Array2<bool>, design_box: DesignBox) -> Result<PermittivityMap> {
    let mut eps = Array2::from_elem((p.grid.nx, p.grid.nz), 1.0);
    for ((i, k), &m) in mask.indexed_iter() {
        if m {
            eps[[i, k]] = p.eps_material;
        }
    }
    PermittivityMap::new(p.grid, eps, design_box, (1.0, p.eps_material))
}

/// Fills `[x0, x1)` of rows `[z0, z1)` with rectangles of width in
/// `[fc, 3 fc]` until the target density is reached.
fn place_pillars(
    rng: &mut ChaCha8Rng,
    mask: &mut Array2<bool>,
    x0: usize,
    x1: usize,
    z0: usize,
    z1: usize,
    fc: usize,
    density: f64,
) {
    if density == 0.0 {
        return;
    }
    let span = x1 - x0;
    let area = span * (z1 - z0);
    let target = (density * area as f64).round() as usize;
    let mut filled = 0usize;
    // Each attempt covers >= fc columns, so the cap is generous.
    let max_attempts = 20 + 10 * span / fc;
    for _ in 0..max_attempts {
        if filled >= target {
            break;
        }
        let w = rng.random_range(fc..=(3 * fc).min(span));
        let xs = x0 + rng.random_range(0..=span - w);
        for i in xs..xs + w {
            for k in z0..z1 {
                if !mask[[i, k]] {
                    mask[[i, k]] = true;
                    filled += 1;
                }
            }
        }
    }
}

/// Single thin horizontal design layer of random pillars.
pub fn gen_metalens(p: &SceneParams) -> Result<PermittivityMap> {
    if p.kind != SceneKind::Metalens {
        return Err(CoreError::InvalidArg("params are not for a metalens".into()));
    }
    p.validate()?;
    let (nx, nz) = (p.grid.nx, p.grid.nz);
    let thickness = p.feature_cells.max(4);
    if thickness + 2 * EDGE_MARGIN > nz || 2 * EDGE_MARGIN + 4 * p.feature_cells > nx {
        return Err(CoreError::InvalidArg(format!(
            "layer of {thickness} cells plus margins does not fit a {nx}x{nz} grid"
        )));
    }
    let z0 = nz / 2 - thickness / 2;
    let design_box = DesignBox::new(EDGE_MARGIN, nx - EDGE_MARGIN, z0, z0 + thickness)?;
    let mut rng = p.rng();
    let mut mask = Array2::from_elem((nx, nz), false);
    place_pillars(
        &mut rng,
        &mut mask,
        design_box.x0,
        design_box.x1,
        design_box.z0,
        design_box.z1,
        p.feature_cells,
        p.fill_density,
    );
    finish(p, mask, design_box)
}

/// Five (by default) stacked layers of independent random patterns.
pub fn gen_splitter(p: &SceneParams) -> Result<PermittivityMap> {
    if p.kind != SceneKind::Splitter {
        return Err(CoreError::InvalidArg("params are not for a splitter".into()));
    }
    p.validate()?;
    if p.layer_count == 0 {
        return Err(CoreError::InvalidArg("layer_count must be >= 1".into()));
    }
    let (nx, nz) = (p.grid.nx, p.grid.nz);
    let layer_t = p.feature_cells.max(3);
    let total = p.layer_count * layer_t;
    if total + 2 * EDGE_MARGIN > nz || 2 * EDGE_MARGIN + 4 * p.feature_cells > nx {
        return Err(CoreError::InvalidArg(format!(
            "{} layers of {layer_t} cells do not fit a {nx}x{nz} grid",
            p.layer_count
        )));
    }
    let z0 = nz / 2 - total / 2;
    let design_box = DesignBox::new(EDGE_MARGIN, nx - EDGE_MARGIN, z0, z0 + total)?;
    let mut rng = p.rng();
    let mut mask = Array2::from_elem((nx, nz), false);
    for layer in 0..p.layer_count {
        let lz0 = z0 + layer * layer_t;
        place_pillars(
            &mut rng,
            &mut mask,
            design_box.x0,
            design_box.x1,
            lz0,
            lz0 + layer_t,
            p.feature_cells,
            p.fill_density,
        );
    }
    finish(p, mask, design_box)
}

/// Square freeform design box with input/output strips along z.
pub fn gen_waveguide(p: &SceneParams) -> Result<PermittivityMap> {
    if p.kind != SceneKind::Waveguide {
        return Err(CoreError::InvalidArg("params are not for a waveguide".into()));
    }
    p.validate()?;
    let (nx, nz) = (p.grid.nx, p.grid.nz);
    let interior = nx.min(nz).saturating_sub(2 * EDGE_MARGIN);
    let side = interior.min(nx.min(nz) / 2 + 8);
    if side < 4 * p.feature_cells {
        return Err(CoreError::InvalidArg(format!(
            "freeform box of {side} cells is too small for feature size {}",
            p.feature_cells
        )));
    }
    let bx0 = nx / 2 - side / 2;
    let bz0 = nz / 2 - side / 2;
    let design_box = DesignBox::new(bx0, bx0 + side, bz0, bz0 + side)?;

    let mut rng = p.rng();
    let mut mask = Array2::from_elem((nx, nz), false);
    if p.fill_density > 0.0 {
        // White noise, box-blurred for smoothness, thresholded at the target
        // quantile, then opened to enforce the feature floor.
        let mut noise = Array2::from_elem((side, side), 0.0f64);
        for v in noise.iter_mut() {
            *v = rng.random::<f64>();
        }
        let blurred = box_blur(&noise, p.feature_cells);
        let mut sorted: Vec<f64> = blurred.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((1.0 - p.fill_density) * (sorted.len() - 1) as f64).round() as usize;
        let threshold = sorted[idx];
        let mut box_mask = blurred.mapv(|v| v >= threshold);
        box_mask = opening_square(&box_mask, p.feature_cells);
        for i in 0..side {
            for k in 0..side {
                if box_mask[[i, k]] {
                    mask[[bx0 + i, bz0 + k]] = true;
                }
            }
        }
    }

    // Straight access strips through the full z extent on both sides.
    let strip_w = (2 * p.feature_cells).max(8).min(side);
    let sx0 = nx / 2 - strip_w / 2;
    for i in sx0..sx0 + strip_w {
        for k in 0..bz0 {
            mask[[i, k]] = true;
        }
        for k in (bz0 + side)..nz {
            mask[[i, k]] = true;
        }
    }

    finish(p, mask, design_box)
}

fn box_blur(src: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (nx, nz) = src.dim();
    let r = radius as isize;
    let mut tmp = Array2::from_elem((nx, nz), 0.0);
    for i in 0..nx as isize {
        for k in 0..nz as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for d in -r..=r {
                let ii = i + d;
                if ii >= 0 && ii < nx as isize {
                    acc += src[[ii as usize, k as usize]];
                    cnt += 1.0;
                }
            }
            tmp[[i as usize, k as usize]] = acc / cnt;
        }
    }
    let mut out = Array2::from_elem((nx, nz), 0.0);
    for i in 0..nx as isize {
        for k in 0..nz as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for d in -r..=r {
                let kk = k + d;
                if kk >= 0 && kk < nz as isize {
                    acc += tmp[[i as usize, kk as usize]];
                    cnt += 1.0;
                }
            }
            out[[i as usize, k as usize]] = acc / cnt;
        }
    }
    out
}

/// Erosion with an `sx x sz` rectangle anchored at the top-left corner.
fn erode(mask: &Array2<bool>, sx: usize, sz: usize) -> Array2<bool> {
    let (nx, nz) = mask.dim();
    let mut out = Array2::from_elem((nx, nz), false);
    if sx > nx || sz > nz {
        return out;
    }
    for i in 0..=nx - sx {
        'cell: for k in 0..=nz - sz {
            for di in 0..sx {
                for dk in 0..sz {
                    if !mask[[i + di, k + dk]] {
                        continue 'cell;
                    }
                }
            }
            out[[i, k]] = true;
        }
    }
    out
}

/// Dilation matching [`erode`]'s anchoring, so `dilate(erode(m))` is the
/// morphological opening.
fn dilate(seed_mask: &Array2<bool>, sx: usize, sz: usize) -> Array2<bool> {
    let (nx, nz) = seed_mask.dim();
    let mut out = Array2::from_elem((nx, nz), false);
    for i in 0..nx {
        for k in 0..nz {
            if seed_mask[[i, k]] {
                for di in 0..sx.min(nx - i) {
                    for dk in 0..sz.min(nz - k) {
                        out[[i + di, k + dk]] = true;
                    }
                }
            }
        }
    }
    out
}

fn opening_square(mask: &Array2<bool>, size: usize) -> Array2<bool> {
    dilate(&erode(mask, size, size), size, size)
}

/// True when no material region is narrower than `feature_cells` along either
/// axis: opening with an axis-aligned line of that length leaves the mask
/// unchanged.
pub fn respects_feature_floor(eps: &PermittivityMap, feature_cells: usize) -> bool {
    let mask = eps.eps.mapv(|v| v > eps.material_pair.0);
    let open_x = dilate(&erode(&mask, feature_cells, 1), feature_cells, 1);
    let open_z = dilate(&erode(&mask, 1, feature_cells), 1, feature_cells);
    mask == open_x && mask == open_z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid64() -> Grid2D {
        Grid2D::square(64, 25e-9).unwrap()
    }

    fn all_kinds(seed: u64) -> Vec<SceneParams> {
        vec![
            SceneParams::new(SceneKind::Metalens, grid64(), seed),
            SceneParams::new(SceneKind::Splitter, grid64(), seed),
            SceneParams::new(SceneKind::Waveguide, grid64(), seed),
        ]
    }

    #[test]
    fn zero_density_gives_all_air_design_box() {
        for mut p in all_kinds(3) {
            p.fill_density = 0.0;
            let map = generate(&p).unwrap();
            let b = map.design_box;
            assert!(b.area() > 0);
            for i in b.x0..b.x1 {
                for k in b.z0..b.z1 {
                    assert_eq!(map.eps[[i, k]], 1.0);
                }
            }
            if p.kind != SceneKind::Waveguide {
                // No strips either: the whole map is air.
                assert!(map.eps.iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        for p in all_kinds(7) {
            let a = generate(&p).unwrap();
            let b = generate(&p).unwrap();
            assert_eq!(a.design_box, b.design_box);
            for (x, y) in a.eps.iter().zip(b.eps.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        for kind in [SceneKind::Metalens, SceneKind::Splitter, SceneKind::Waveguide] {
            let a = generate(&SceneParams::new(kind, grid64(), 1)).unwrap();
            let b = generate(&SceneParams::new(kind, grid64(), 2)).unwrap();
            assert!(a.eps.iter().zip(b.eps.iter()).any(|(x, y)| x != y));
        }
    }

    #[test]
    fn density_lands_in_band() {
        // Target 0.5 must land within [0.35, 0.65] inside the design box.
        for p in all_kinds(7) {
            let map = generate(&p).unwrap();
            let f = map.fill_fraction();
            assert!(
                (0.35..=0.65).contains(&f),
                "{}: fill fraction {f}",
                p.kind.as_str()
            );
        }
    }

    #[test]
    fn two_valued_maps() {
        for p in all_kinds(13) {
            let map = generate(&p).unwrap();
            for &v in map.eps.iter() {
                assert!(v == 1.0 || v == p.eps_material, "value {v}");
            }
        }
    }

    #[test]
    fn feature_floor_holds() {
        for seed in [1, 5, 9] {
            for p in all_kinds(seed) {
                let map = generate(&p).unwrap();
                assert!(
                    respects_feature_floor(&map, p.feature_cells),
                    "{} seed {seed}",
                    p.kind.as_str()
                );
            }
        }
    }

    #[test]
    fn splitter_has_higher_contrast_than_metalens() {
        assert!(
            SceneKind::Splitter.default_eps_material() > SceneKind::Metalens.default_eps_material()
        );
        assert!(
            SceneKind::Waveguide.default_eps_material()
                > SceneKind::Metalens.default_eps_material()
        );
    }

    #[test]
    fn too_small_grids_are_rejected() {
        let tiny = Grid2D::square(16, 25e-9).unwrap();
        for kind in [SceneKind::Metalens, SceneKind::Splitter, SceneKind::Waveguide] {
            let p = SceneParams::new(kind, tiny, 0);
            assert!(generate(&p).is_err(), "{}", kind.as_str());
        }
    }

    #[test]
    fn wrong_kind_dispatch_is_rejected() {
        let p = SceneParams::new(SceneKind::Metalens, grid64(), 0);
        assert!(gen_splitter(&p).is_err());
        assert!(gen_waveguide(&p).is_err());
    }

    #[test]
    fn invalid_density_rejected() {
        let mut p = SceneParams::new(SceneKind::Metalens, grid64(), 0);
        p.fill_density = 0.05;
        assert!(generate(&p).is_err());
        p.fill_density = 0.95;
        assert!(generate(&p).is_err());
    }

    #[test]
    fn opening_is_idempotent_on_generated_masks() {
        let p = SceneParams::new(SceneKind::Waveguide, grid64(), 21);
        let map = generate(&p).unwrap();
        let mask = map.eps.mapv(|v| v > 1.0);
        let opened = opening_square(&mask, p.feature_cells);
        assert_eq!(mask, opened);
    }
}

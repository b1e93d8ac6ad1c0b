//! Plain-text key=value run configuration.
//!
//! Every subcommand resolves its parameters as: command-line flags override
//! file values override built-in defaults, and emits a resolved-config copy
//! next to its outputs so the run can be reproduced from that file alone
//! (`broadwave <cmd> --config <resolved>`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Every key a config file may contain; unknown keys are rejected.
pub const KNOWN_KEYS: &[&str] = &[
    "command",
    // scene
    "scene",
    "eps_material",
    "feature_cells",
    "fill_density",
    "layer_count",
    // grid
    "grid",
    "dl",
    "dl_z",
    // wavelength schedule
    "wl_start",
    "wl_end",
    "wl_step",
    "wl_mode",
    // generation
    "n",
    "seed",
    "fixed_structures",
    "max_skip",
    "pml_thickness",
    "pml_sigma_max",
    "pml_poly_order",
    "source_row",
    // model
    "channels",
    "layers",
    "modes_v",
    "modes_h",
    "groups",
    "conditioning",
    "lift_width",
    "model_seed",
    // training
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps_opt",
    "weight_decay",
    "lr_min",
    "train_seed",
    "val_every",
    "val_untrained_only",
    "precision",
    // paths and evaluation
    "data",
    "val",
    "out",
    "ckpt",
    "region",
    "trained",
    "trained_from",
    "batches",
    "trials",
    "lambda",
    "map_lambda",
    "eps_from",
    "sample",
    "fractions",
    "threads",
];

#[derive(Debug, Default)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config '{}': {e}", path.display()))?;
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {} is not key=value: '{raw}'", ln + 1))?;
            let k = k.trim();
            let v = v.trim();
            if !KNOWN_KEYS.contains(&k) {
                return Err(format!("unknown config key '{k}' (line {})", ln + 1));
            }
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self { map })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("config key '{key}' has invalid value '{v}'")),
        }
    }

    pub fn get_string(&self, key: &str) -> Option<String> {
        self.map.get(key).cloned()
    }
}

/// Collects the effective key=value pairs of one run, in insertion order.
#[derive(Debug)]
pub struct Resolved {
    pairs: Vec<(String, String)>,
}

impl Resolved {
    pub fn new(command: &str) -> Self {
        Self {
            pairs: vec![("command".to_string(), command.to_string())],
        }
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unlisted key {key}");
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

/// Parses `64x64` into (nx, nz).
pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid must look like 64x64, got '{s}'"))?;
    let nx = a
        .trim()
        .parse()
        .map_err(|_| format!("bad grid dimension '{a}'"))?;
    let nz = b
        .trim()
        .parse()
        .map_err(|_| format!("bad grid dimension '{b}'"))?;
    Ok((nx, nz))
}

/// Parses a comma-separated list of numbers.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| format!("bad list entry '{p}'"))
        })
        .collect()
}

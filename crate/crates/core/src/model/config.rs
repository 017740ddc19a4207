//! Model and training configuration in flat `key = value` text.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::zorder::DEFAULT_BITS;

/// Folding seed lattice, written `ROWSxCOLS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldGrid {
    pub rows: usize,
    pub cols: usize,
}

impl FoldGrid {
    pub fn points(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for FoldGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for FoldGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("fold_grid `{s}` is not of the form ROWSxCOLS"));
        let (r, c) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Self { rows, cols })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_points: usize,
    pub g: usize,
    pub k: usize,
    pub d: usize,
    pub n_blocks: usize,
    pub n_state: usize,
    pub s: usize,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub coarse_points: usize,
    pub fold_grid: FoldGrid,
    pub seed: u64,
    /// Passes over the source split.
    pub epochs: usize,
    /// Stop after this many steps when nonzero.
    pub max_steps: usize,
    /// Checkpoint every this many epochs.
    pub checkpoint_every: usize,
    pub bits: u32,
    /// Serialize each source/target pair in one shared grid.
    pub cdps: bool,
    pub cdsa: bool,
    pub cdca: bool,
    /// Feed modulated features to the decoder during paired training.
    pub route_modulated: bool,
    /// Align after every block instead of once after the last.
    pub tap_every_block: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_points: 2048,
            g: 64,
            k: 32,
            d: 128,
            n_blocks: 4,
            n_state: 16,
            s: 4,
            lambda: 0.1,
            beta: 0.1,
            lr: 1e-3,
            weight_decay: 5e-2,
            batch: 8,
            coarse_points: 256,
            fold_grid: FoldGrid { rows: 2, cols: 4 },
            seed: 0,
            epochs: 10,
            max_steps: 0,
            checkpoint_every: 1,
            bits: DEFAULT_BITS,
            cdps: true,
            cdsa: true,
            cdca: true,
            route_modulated: false,
            tap_every_block: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 24] = [
        "n_points",
        "g",
        "k",
        "d",
        "n_blocks",
        "n_state",
        "s",
        "lambda",
        "beta",
        "lr",
        "weight_decay",
        "batch",
        "coarse_points",
        "fold_grid",
        "seed",
        "epochs",
        "max_steps",
        "checkpoint_every",
        "bits",
        "cdps",
        "cdsa",
        "cdca",
        "route_modulated",
        "tap_every_block",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_points" => self.n_points = parse(key, v)?,
            "g" => self.g = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "n_blocks" => self.n_blocks = parse(key, v)?,
            "n_state" => self.n_state = parse(key, v)?,
            "s" => self.s = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "coarse_points" => self.coarse_points = parse(key, v)?,
            "fold_grid" => self.fold_grid = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "bits" => self.bits = parse(key, v)?,
            "cdps" => self.cdps = parse(key, v)?,
            "cdsa" => self.cdsa = parse(key, v)?,
            "cdca" => self.cdca = parse(key, v)?,
            "route_modulated" => self.route_modulated = parse(key, v)?,
            "tap_every_block" => self.tap_every_block = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// The result is validated.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.g == 0
            || self.k == 0
            || self.d == 0
            || self.n_blocks == 0
            || self.n_state == 0
            || self.batch == 0
        {
            return fail("g, k, d, n_blocks, n_state and batch must be positive".into());
        }
        if self.g * self.k != self.n_points {
            return fail(format!(
                "G·K == n_points violated: {}·{} != {}",
                self.g, self.k, self.n_points
            ));
        }
        if self.s == 0 || self.d % self.s != 0 {
            return fail(format!(
                "D % S == 0 violated: D = {}, S = {}",
                self.d, self.s
            ));
        }
        if self.d % 2 != 0 {
            return fail(format!(
                "D must be even for the D/2 embedding layer, got {}",
                self.d
            ));
        }
        if self.coarse_points == 0
            || self.coarse_points * self.fold_grid.points() != self.n_points_out()
        {
            return fail(format!(
                "coarse_points·fold_grid == n_points_out violated: {}·{} != {}",
                self.coarse_points,
                self.fold_grid.points(),
                self.n_points_out()
            ));
        }
        if !(1..=21).contains(&self.bits) {
            return fail(format!("bits must be in 1..=21, got {}", self.bits));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Completed clouds have as many points as the resampled input.
    pub fn n_points_out(&self) -> usize {
        self.n_points
    }

    /// Whether training must read target clouds at all.
    pub fn uses_target(&self) -> bool {
        self.cdps || self.aligns()
    }

    /// Whether the alignment branch is built during training.
    pub fn aligns(&self) -> bool {
        let modulates = self.route_modulated;
        (self.cdsa && (self.lambda > 0.0 || modulates))
            || (self.cdca && (self.beta > 0.0 || modulates))
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values: [String; 24] = [
            self.n_points.to_string(),
            self.g.to_string(),
            self.k.to_string(),
            self.d.to_string(),
            self.n_blocks.to_string(),
            self.n_state.to_string(),
            self.s.to_string(),
            self.lambda.to_string(),
            self.beta.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.batch.to_string(),
            self.coarse_points.to_string(),
            self.fold_grid.to_string(),
            self.seed.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.checkpoint_every.to_string(),
            self.bits.to_string(),
            self.cdps.to_string(),
            self.cdsa.to_string(),
            self.cdca.to_string(),
            self.route_modulated.to_string(),
            self.tap_every_block.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(values) {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

//! `key = value` configuration files for runs and trough geometry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kukan_core::geometry::TroughGeometry;
use kukan_core::loss::LossWeights;
use kukan_core::model::{LiftConfig, RefinerConfig};
use kukan_core::optim::AdamConfig;

use crate::error::{self, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Toy,
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Self::Toy => "toy",
            Self::Paper => "paper",
        }
    }

    pub fn geometry(self) -> TroughGeometry {
        match self {
            Self::Toy => TroughGeometry::toy(),
            Self::Paper => TroughGeometry::paper(),
        }
    }

    /// Network configurations matching `geom`: the image is `H × W` with
    /// `K` depth bins and the refiner works on the geometry's volume.
    pub fn models(self, geom: &TroughGeometry) -> (LiftConfig, RefinerConfig) {
        let (mut lift, mut refiner) = match self {
            Self::Toy => (LiftConfig::toy(), RefinerConfig::toy()),
            Self::Paper => (LiftConfig::paper(), RefinerConfig::paper()),
        };
        lift.height = geom.extents[0];
        lift.width = geom.columns;
        lift.bins = geom.bins;
        refiner.extents = geom.extents;
        (lift, refiner)
    }
}

impl FromStr for Scale {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            _ => Err(HarnessError::Config(format!("unknown scale {s:?} (expected toy or paper)"))),
        }
    }
}

/// Parses `key = value` lines, skipping blanks and `#` comments. Unknown
/// and repeated keys are errors.
pub fn parse_pairs(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !allowed.contains(&key) {
            return Err(HarnessError::Config(format!("line {}: unknown key {key:?}", n + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(HarnessError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

pub const GEOMETRY_KEYS: [&str; 9] = ["h", "k", "a1", "b1", "a2", "b2", "W", "K", "dt"];

/// Reads a geometry file on top of `base`, which supplies the volume
/// extents and any omitted keys.
pub fn parse_geometry(text: &str, base: TroughGeometry) -> Result<TroughGeometry> {
    let pairs = parse_pairs(text, &GEOMETRY_KEYS)?;
    let mut g = base;
    for (key, value) in &pairs {
        match key.as_str() {
            "h" => g.h = parse_value(key, value)?,
            "k" => g.k = parse_value(key, value)?,
            "a1" => g.a1 = parse_value(key, value)?,
            "b1" => g.b1 = parse_value(key, value)?,
            "a2" => g.a2 = parse_value(key, value)?,
            "b2" => g.b2 = parse_value(key, value)?,
            "W" => g.columns = parse_value(key, value)?,
            "K" => g.bins = parse_value(key, value)?,
            "dt" => g.dt = parse_value(key, value)?,
            _ => unreachable!(),
        }
    }
    g.validate()?;
    Ok(g)
}

pub fn format_geometry(g: &TroughGeometry) -> String {
    format!(
        "h = {}\nk = {}\na1 = {}\nb1 = {}\na2 = {}\nb2 = {}\nW = {}\nK = {}\ndt = {}\n",
        g.h, g.k, g.a1, g.b1, g.a2, g.b2, g.columns, g.bins, g.dt
    )
}

/// Everything a `gen-data`/`train` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub phantoms: usize,
    /// Train/validation/test fractions, summing to 1.
    pub split: [f64; 3],
    pub teeth: usize,
    pub geometry_path: Option<PathBuf>,
    pub geometry: TroughGeometry,
    pub lift: LiftConfig,
    pub refiner: RefinerConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Epochs without a validation improvement before training stops.
    pub patience: usize,
    pub out: PathBuf,
}

pub const RUN_KEYS: [&str; 15] = [
    "seed",
    "scale",
    "phantoms",
    "split",
    "teeth",
    "geometry",
    "epochs",
    "patience",
    "lr",
    "beta1",
    "beta2",
    "lambda_proj",
    "lambda_perc",
    "out",
    "eps",
];

impl RunConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let geometry = scale.geometry();
        let (lift, refiner) = scale.models(&geometry);
        Self {
            seed: 0,
            scale,
            phantoms: 10,
            split: [0.8, 0.1, 0.1],
            teeth: 8,
            geometry_path: None,
            geometry,
            lift,
            refiner,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: match scale {
                Scale::Toy => 50,
                Scale::Paper => 300,
            },
            patience: 30,
            out: PathBuf::from("run"),
        }
    }

    /// Parses a run file. Relative geometry paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, scale_override: Option<Scale>) -> Result<Self> {
        let pairs = parse_pairs(text, &RUN_KEYS)?;
        let scale = match (scale_override, pairs.get("scale")) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse()?,
            (None, None) => Scale::Toy,
        };
        let mut cfg = Self::for_scale(scale);
        let mut weights = (cfg.weights.proj, cfg.weights.perc);
        for (key, value) in &pairs {
            match key.as_str() {
                "scale" => {}
                "seed" => cfg.seed = parse_value(key, value)?,
                "phantoms" => cfg.phantoms = parse_value(key, value)?,
                "split" => cfg.split = parse_split(value)?,
                "teeth" => cfg.teeth = parse_value(key, value)?,
                "geometry" => cfg.geometry_path = Some(base_dir.join(value)),
                "epochs" => cfg.epochs = parse_value(key, value)?,
                "patience" => cfg.patience = parse_value(key, value)?,
                "lr" => cfg.adam.lr = parse_value(key, value)?,
                "beta1" => cfg.adam.beta1 = parse_value(key, value)?,
                "beta2" => cfg.adam.beta2 = parse_value(key, value)?,
                "eps" => cfg.adam.eps = parse_value(key, value)?,
                "lambda_proj" => weights.0 = parse_value(key, value)?,
                "lambda_perc" => weights.1 = parse_value(key, value)?,
                "out" => cfg.out = base_dir.join(value),
                _ => unreachable!(),
            }
        }
        cfg.weights = LossWeights::new(weights.0, weights.1)?;
        if let Some(path) = &cfg.geometry_path {
            let g = parse_geometry(&error::read_text(path)?, scale.geometry())?;
            cfg.set_geometry(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale_override: Option<Scale>) -> Result<Self> {
        let text = error::read_text(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), scale_override)
    }

    /// Replaces the geometry and re-derives the network shapes from it.
    pub fn set_geometry(&mut self, g: TroughGeometry) {
        let (lift, refiner) = self.scale.models(&g);
        self.geometry = g;
        self.lift = lift;
        self.refiner = refiner;
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| !(f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(HarnessError::Config(format!("split fractions {:?} must be >= 0 and sum to 1", self.split)));
        }
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be at least 1".into()));
        }
        if self.phantoms == 0 {
            return Err(HarnessError::Config("phantoms must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(HarnessError::Config(format!("invalid optimizer settings {:?}", self.adam)));
        }
        self.geometry.validate()?;
        self.lift.validate()?;
        self.refiner.validate()?;
        Ok(())
    }

    /// Sample counts per split. Validation and test take the rounded share,
    /// training keeps the rest.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.phantoms;
        let val = (n as f64 * self.split[1]).round() as usize;
        let test = ((n as f64 * self.split[2]).round() as usize).min(n - val);
        [n - val - test, val, test]
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scale = {}", self.scale.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "phantoms = {}", self.phantoms);
        let _ = writeln!(s, "split = {}:{}:{}", self.split[0], self.split[1], self.split[2]);
        let _ = writeln!(s, "teeth = {}", self.teeth);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "lr = {}", self.adam.lr);
        let _ = writeln!(s, "beta1 = {}", self.adam.beta1);
        let _ = writeln!(s, "beta2 = {}", self.adam.beta2);
        let _ = writeln!(s, "eps = {}", self.adam.eps);
        let _ = writeln!(s, "lambda_proj = {}", self.weights.proj);
        let _ = writeln!(s, "lambda_perc = {}", self.weights.perc);
        s
    }
}

/// Accepts `8:1:1` style ratios or `0.8,0.1,0.1` fractions.
pub fn parse_split(value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split([':', ',']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(HarnessError::Config(format!("split: expected three parts, got {value:?}")));
    }
    let mut r = [0.0; 3];
    for (slot, p) in r.iter_mut().zip(&parts) {
        *slot = parse_value("split", p)?;
    }
    let total: f64 = r.iter().sum();
    if r.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || !(total > 0.0) {
        return Err(HarnessError::Config(format!("split: invalid ratios {value:?}")));
    }
    Ok(r.map(|x| x / total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_round_trips_through_text() {
        let g = TroughGeometry::toy();
        assert_eq!(parse_geometry(&format_geometry(&g), TroughGeometry::paper()).unwrap().columns, g.columns);
        let back = parse_geometry(&format_geometry(&g), g.clone()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn geometry_rejects_unknown_keys() {
        let err = parse_geometry("h = 32\nradius = 4\n", TroughGeometry::toy()).unwrap_err();
        assert!(err.to_string().contains("radius"));
        assert!(parse_geometry("h = 32\nh = 33\n", TroughGeometry::toy()).is_err());
        assert!(parse_geometry("h 32\n", TroughGeometry::toy()).is_err());
        assert!(parse_geometry("W = many\n", TroughGeometry::toy()).is_err());
    }

    #[test]
    fn geometry_values_are_validated() {
        assert!(parse_geometry("a2 = 30\n", TroughGeometry::toy()).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let g = parse_geometry("# trough\n\nK = 8   # bins\n", TroughGeometry::toy()).unwrap();
        assert_eq!(g.bins, 8);
    }

    #[test]
    fn split_ratios_are_normalized() {
        assert_eq!(parse_split("8:1:1").unwrap(), [0.8, 0.1, 0.1]);
        let f = parse_split("0.5, 0.25, 0.25").unwrap();
        assert_eq!(f, [0.5, 0.25, 0.25]);
        assert!(parse_split("1:1").is_err());
        assert!(parse_split("0:0:0").is_err());
        assert!(parse_split("1:-1:1").is_err());
    }

    #[test]
    fn ten_phantoms_split_eight_one_one() {
        let cfg = RunConfig::for_scale(Scale::Toy);
        assert_eq!(cfg.split_counts(), [8, 1, 1]);
    }

    #[test]
    fn run_file_overrides_defaults() {
        let cfg = RunConfig::parse("seed = 7\nepochs = 3\nsplit = 1:1:1\nphantoms = 3\n", Path::new("/x"), None).unwrap();
        assert_eq!((cfg.seed, cfg.epochs, cfg.phantoms), (7, 3, 3));
        assert_eq!(cfg.split_counts(), [1, 1, 1]);
        assert!(RunConfig::parse("epochs = 0\n", Path::new("."), None).is_err());
        assert!(RunConfig::parse("colour = red\n", Path::new("."), None).is_err());
        assert!(RunConfig::parse("lambda_proj = -1\n", Path::new("."), None).is_err());
    }

    #[test]
    fn geometry_drives_network_shapes() {
        let mut cfg = RunConfig::for_scale(Scale::Toy);
        let mut g = cfg.geometry.clone();
        g.bins = 6;
        cfg.set_geometry(g);
        assert_eq!(cfg.lift.bins, 6);
        cfg.validate().unwrap();
    }
}

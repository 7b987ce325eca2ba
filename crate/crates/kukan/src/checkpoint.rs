//! Checkpoints: a text header followed by one `f64` container per
//! parameter tensor.
//!
//! ```text
//! KUKCKPT1
//! scale = toy
//! epoch = 12
//! geometry.h = 32
//! ...
//! params = 2
//! lift.head.weight 12x8x1x1 0
//! lift.head.bias 12 789
//! end
//! <containers>
//! ```
//!
//! Offsets count bytes from the first container.

use std::collections::BTreeMap;
use std::path::Path;

use kukan_core::geometry::{build_warp_table, TroughGeometry};
use kukan_core::model::{Lift, Pipeline, Refiner};
use kukan_core::nn::Module;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{format_geometry, parse_geometry, parse_value, Scale};
use crate::container::{decode, encode, Dtype};
use crate::error::{self, HarnessError, Result};

pub const MAGIC: &str = "KUKCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scale: Scale,
    pub geometry: TroughGeometry,
    /// Completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub tensors: Vec<Tensor>,
}

/// Fresh pipeline for `scale` on `geom`, initialized from `seed`.
pub fn new_pipeline(scale: Scale, geom: &TroughGeometry, seed: u64) -> Result<Pipeline> {
    let (lift, refiner) = scale.models(geom);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lift = Lift::new(lift, &mut rng)?;
    let refiner = Refiner::new(refiner, &mut rng)?;
    Ok(Pipeline::new(lift, refiner, build_warp_table(geom)?)?)
}

impl Checkpoint {
    pub fn capture(p: &Pipeline, scale: Scale, geometry: &TroughGeometry, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        p.visit_params("", &mut |name, param| {
            tensors.push(Tensor {
                name: name.to_string(),
                shape: param.value.shape().to_vec(),
                values: param.value.data().to_vec(),
            })
        });
        Self { scale, geometry: *geometry, epoch, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nscale = {}\nepoch = {}\n", self.scale.name(), self.epoch);
        for line in format_geometry(&self.geometry).lines() {
            header.push_str("geometry.");
            header.push_str(line);
            header.push('\n');
        }
        header.push_str(&format!("params = {}\n", self.tensors.len()));
        let mut payload = Vec::new();
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{} {} {}\n", t.name, shape.join("x"), payload.len()));
            payload.extend(encode([t.values.len(), 1, 1], &t.values, Dtype::F64));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend(payload);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| HarnessError::format(path, m);
        let end = find_header_end(bytes).ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[end..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint".into()));
        }
        let mut meta = BTreeMap::new();
        let mut geometry = String::new();
        let count: usize = loop {
            let line = lines.next().ok_or_else(|| bad("missing params line".into()))?;
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "params" {
                break parse_value(k, v)?;
            } else if let Some(g) = k.strip_prefix("geometry.") {
                geometry.push_str(&format!("{g} = {v}\n"));
            } else if meta.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        };
        let scale: Scale = meta.get("scale").ok_or_else(|| bad("missing scale".into()))?.parse()?;
        let epoch = parse_value("epoch", meta.get("epoch").ok_or_else(|| bad("missing epoch".into()))?)?;
        let geometry = parse_geometry(&geometry, scale.geometry())?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("too few parameter lines".into()))?;
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(bad(format!("bad parameter line {line:?}")));
            }
            let shape = cols[1]
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {:?}", cols[1]))))
                .collect::<Result<Vec<_>>>()?;
            let offset: usize = cols[2].parse().map_err(|_| bad(format!("bad offset {:?}", cols[2])))?;
            let block = payload.get(offset..).ok_or_else(|| bad(format!("offset {offset} past end")))?;
            let (block, _) = decode(block).map_err(|m| bad(format!("{}: {m}", cols[0])))?;
            if block.values.len() != shape.iter().product::<usize>() {
                return Err(bad(format!("{}: shape {:?} does not match {} values", cols[0], shape, block.values.len())));
            }
            tensors.push(Tensor { name: cols[0].to_string(), shape, values: block.values });
        }
        if lines.next() != Some("end") {
            return Err(bad("expected end after parameter lines".into()));
        }
        Ok(Self { scale, geometry, epoch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &error::read(path)?)
    }

    /// Copies the stored tensors into `p`. Every parameter must be present
    /// with the same shape, and nothing may be left over.
    pub fn apply(&self, p: &mut Pipeline) -> Result<()> {
        let mut by_name: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problem = None;
        p.visit_params_mut("", &mut |name, param| match by_name.remove(name) {
            Some(t) if t.shape == param.value.shape() => param.value.data_mut().copy_from_slice(&t.values),
            Some(t) => {
                problem.get_or_insert(format!("{name}: stored shape {:?}, model {:?}", t.shape, param.value.shape()));
            }
            None => {
                problem.get_or_insert(format!("{name}: missing from checkpoint"));
            }
        });
        if let Some(m) = problem {
            return Err(HarnessError::Config(m));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(HarnessError::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }

    pub fn restore(&self) -> Result<Pipeline> {
        let mut p = new_pipeline(self.scale, &self.geometry, 0)?;
        self.apply(&mut p)?;
        Ok(p)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"\nend\n";
    bytes.windows(marker.len()).position(|w| w == marker).map(|i| i + marker.len())
}

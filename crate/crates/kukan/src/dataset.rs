//! Synthetic phantom datasets on disk.
//!
//! Layout: `dataset.cfg` (scale, seed, counts), `geometry.cfg`,
//! `manifest.csv` and one container per sample under `volumes/` and `px/`.
//! Files hold raw attenuation and raw intensities; normalization happens on
//! load.

use std::path::{Path, PathBuf};

use kukan_core::geometry::TroughGeometry;
use kukan_core::physics::{make_phantom, synthesize_px, DATASET_STEP, I0};
use kukan_core::preprocess::{normalize_image, normalize_volume};
use kukan_core::volume::{Image2D, Volume3D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{format_geometry, parse_geometry, parse_pairs, parse_value, RunConfig, Scale};
use crate::container::{load_image, load_volume, save_image, save_volume, Dtype};
use crate::error::{self, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

/// A loaded sample, normalized to `[0, 255]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub px: Image2D,
    pub volume: Volume3D,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub scale: Scale,
    pub seed: u64,
    pub teeth: usize,
    pub geometry: TroughGeometry,
    pub entries: Vec<Entry>,
}

const MANIFEST_HEADER: &str = "sample_id,split,seed,volume,px";

fn volume_path(id: &str) -> String {
    format!("volumes/{id}.kvol")
}

fn px_path(id: &str) -> String {
    format!("px/{id}.kvol")
}

/// Per-sample seeds and split labels, both drawn from the run seed.
pub fn plan(cfg: &RunConfig) -> Vec<Entry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.phantoms).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..cfg.phantoms).collect();
    order.shuffle(&mut rng);
    let [train, val, _] = cfg.split_counts();
    let mut splits = vec![Split::Test; cfg.phantoms];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    seeds
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (seed, split))| Entry { id: format!("sample_{i:04}"), split, seed })
        .collect()
}

/// Writes phantoms, their synthesized radiographs and the manifest.
pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let entries = plan(cfg);
    error::create_dir(&dir.join("volumes"))?;
    error::create_dir(&dir.join("px"))?;
    let geom = &cfg.geometry;
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let phantom = make_phantom(e.seed, geom.extents, geom, cfg.teeth)?;
        let px = synthesize_px(&phantom.volume, geom, I0, DATASET_STEP)?;
        if let Some(bad) = px.data().iter().find(|&&p| !(p > 0.0 && p <= I0)) {
            return Err(HarnessError::Numerical(format!("{}: pixel {bad} outside (0, {I0}]", e.id)));
        }
        save_volume(&dir.join(volume_path(&e.id)), &phantom.volume, Dtype::F32)?;
        save_image(&dir.join(px_path(&e.id)), &px, Dtype::F32)
    })?;

    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for e in &entries {
        manifest.push_str(&format!("{},{},{},{},{}\n", e.id, e.split.name(), e.seed, volume_path(&e.id), px_path(&e.id)));
    }
    error::write(&dir.join("manifest.csv"), manifest)?;
    error::write(&dir.join("geometry.cfg"), format_geometry(geom))?;
    error::write(
        &dir.join("dataset.cfg"),
        format!(
            "scale = {}\nseed = {}\nphantoms = {}\nteeth = {}\n",
            cfg.scale.name(),
            cfg.seed,
            cfg.phantoms,
            cfg.teeth
        ),
    )?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        scale: cfg.scale,
        seed: cfg.seed,
        teeth: cfg.teeth,
        geometry: geom.clone(),
        entries,
    })
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<Entry>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(HarnessError::format(path, "unexpected manifest header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(HarnessError::format(path, format!("bad manifest row {line:?}")));
            }
            let split = Split::parse(cols[1]).ok_or_else(|| HarnessError::format(path, format!("bad split {:?}", cols[1])))?;
            let seed = cols[2].parse().map_err(|_| HarnessError::format(path, format!("bad seed {:?}", cols[2])))?;
            Ok(Entry { id: cols[0].to_string(), split, seed })
        })
        .collect()
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta = parse_pairs(&error::read_text(&dir.join("dataset.cfg"))?, &["scale", "seed", "phantoms", "teeth"])?;
        let get = |k: &str| meta.get(k).ok_or_else(|| HarnessError::Config(format!("dataset.cfg: missing {k}")));
        let scale: Scale = get("scale")?.parse()?;
        let seed = parse_value("seed", get("seed")?)?;
        let teeth = parse_value("teeth", get("teeth")?)?;
        let geometry = parse_geometry(&error::read_text(&dir.join("geometry.cfg"))?, scale.geometry())?;
        let manifest = dir.join("manifest.csv");
        let entries = parse_manifest(&manifest, &error::read_text(&manifest)?)?;
        Ok(Self { dir: dir.to_path_buf(), scale, seed, teeth, geometry, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Raw radiograph and attenuation volume as stored.
    pub fn load_raw(&self, e: &Entry) -> Result<(Image2D, Volume3D)> {
        let px = load_image(&self.dir.join(px_path(&e.id)))?;
        let volume = load_volume(&self.dir.join(volume_path(&e.id)))?;
        Ok((px, volume))
    }

    pub fn load(&self, e: &Entry) -> Result<Sample> {
        let (px, volume) = self.load_raw(e)?;
        Ok(Sample {
            id: e.id.clone(),
            px: normalize_image(&px)?,
            volume: normalize_volume(&volume)?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split).into_iter().map(|e| self.load(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_is_deterministic_and_honours_the_split() {
        let mut cfg = RunConfig::for_scale(Scale::Toy);
        cfg.seed = 5;
        let (a, b) = (plan(&cfg), plan(&cfg));
        assert_eq!(a, b);
        let count = |s| a.iter().filter(|e| e.split == s).count();
        assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [8, 1, 1]);
        cfg.seed = 6;
        assert_ne!(plan(&cfg), a);
    }

    #[test]
    fn manifest_rows_parse_back() {
        let text = format!("{MANIFEST_HEADER}\nsample_0000,val,17,volumes/sample_0000.kvol,px/sample_0000.kvol\n");
        let e = parse_manifest(Path::new("m"), &text).unwrap();
        assert_eq!(e, vec![Entry { id: "sample_0000".into(), split: Split::Val, seed: 17 }]);
        assert!(parse_manifest(Path::new("m"), "id\n").is_err());
        assert!(parse_manifest(Path::new("m"), &format!("{MANIFEST_HEADER}\na,holdout,1,v,p\n")).is_err());
    }
}

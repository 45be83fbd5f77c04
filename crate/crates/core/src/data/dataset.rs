//! On-disk phantom dataset: NLT1 image pairs, per-slice metadata and a
//! manifest holding the train/test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::dose::{simulate_low_dose, DoseModel};
use super::patches::SlicePair;
use super::phantom::{generate_phantom, Lesion, Phantom};
use super::splitmix64;
use crate::error::{Error, Result};
use crate::io::{read_nlt1, write_nlt1};
use crate::metrics::{hu_window, HuWindow, RegionPair};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const PHANTOM_DIR: &str = "phantoms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub complexity: usize,
    pub test_count: usize,
    pub seed: u64,
    pub dose: DoseModel,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 200,
            height: 64,
            width: 64,
            complexity: 2,
            test_count: 20,
            seed: 0,
            dose: DoseModel::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.dose.validate()?;
        if self.test_count == 0 || self.test_count >= self.count {
            return Err(Error::config(format!(
                "test_count must lie in 1..{}, got {}",
                self.count, self.test_count
            )));
        }
        Ok(())
    }
}

/// Parsed `{id}_meta.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMeta {
    pub id: String,
    pub seed: u64,
    pub noise_seed: u64,
    pub height: usize,
    pub width: usize,
    pub dose: DoseModel,
    pub lesion: Option<Lesion>,
}

impl SliceMeta {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "id = {}", self.id);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "noise_seed = {}", self.noise_seed);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "dose_factor = {}", self.dose.dose_factor);
        let _ = writeln!(s, "noise_gain = {}", self.dose.gain);
        let _ = writeln!(s, "noise_floor = {}", self.dose.floor);
        if let Some(l) = &self.lesion {
            let (x0, y0, x1, y1) = l.bbox(self.height, self.width);
            let _ = writeln!(s, "lesion_bbox = {x0},{y0},{x1},{y1}");
            let _ = writeln!(s, "lesion_cx = {}", l.cx);
            let _ = writeln!(s, "lesion_cy = {}", l.cy);
            let _ = writeln!(s, "lesion_radius = {}", l.radius);
            let _ = writeln!(s, "ring_inner = {}", l.ring_inner);
            let _ = writeln!(s, "ring_outer = {}", l.ring_outer);
            let _ = writeln!(s, "contrast_hu = {}", l.contrast_hu);
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let kv = parse_key_values(text, origin)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::config(format!("{}: missing key `{k}`", origin.display())))
        };
        fn num<T: std::str::FromStr>(origin: &Path, k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{}: bad value `{v}` for `{k}`", origin.display())))
        }
        let n = |k: &str| -> Result<f64> { num(origin, k, get(k)?) };
        let lesion = if kv.contains_key("lesion_bbox") {
            Some(Lesion {
                cx: n("lesion_cx")?,
                cy: n("lesion_cy")?,
                radius: n("lesion_radius")?,
                ring_inner: n("ring_inner")?,
                ring_outer: n("ring_outer")?,
                contrast_hu: n("contrast_hu")? as f32,
            })
        } else {
            None
        };
        Ok(Self {
            id: get("id")?.to_string(),
            seed: num(origin, "seed", get("seed")?)?,
            noise_seed: num(origin, "noise_seed", get("noise_seed")?)?,
            height: num(origin, "height", get("height")?)?,
            width: num(origin, "width", get("width")?)?,
            dose: DoseModel {
                dose_factor: n("dose_factor")?,
                gain: n("noise_gain")?,
                floor: n("noise_floor")?,
                seed: num(origin, "noise_seed", get("noise_seed")?)?,
            },
            lesion,
        })
    }

    pub fn region_pair(&self) -> Result<Option<RegionPair>> {
        self.lesion
            .as_ref()
            .map(|l| l.region_pair(self.height, self.width))
            .transpose()
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("{}:{}: expected `key = value`", origin.display(), n + 1))
        })?;
        let k = k.trim();
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!(
                "{}:{}: duplicate key `{k}`",
                origin.display(),
                n + 1
            )));
        }
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

type Generated = (u64, DoseModel, Phantom, Tensor<f32>);

fn generate_one(cfg: &DatasetConfig, i: usize) -> Result<Generated> {
    let seed = splitmix64(cfg.seed ^ splitmix64(2 * i as u64));
    let noise_seed = splitmix64(cfg.seed ^ splitmix64(2 * i as u64 + 1));
    let phantom = generate_phantom(seed, cfg.height, cfg.width, cfg.complexity)?;
    let dose = DoseModel {
        seed: noise_seed,
        ..cfg.dose
    };
    let low = simulate_low_dose(&phantom.clean, &dose)?;
    Ok((seed, dose, phantom, low))
}

/// Phantoms in id order, generated on worker threads in contiguous chunks.
fn generate_all(cfg: &DatasetConfig) -> Result<Vec<Generated>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.count);
    let chunk = cfg.count.div_ceil(workers);
    let parts: Vec<Result<Vec<Generated>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                s.spawn(move || {
                    (k * chunk..((k + 1) * chunk).min(cfg.count))
                        .map(|i| generate_one(cfg, i))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("phantom worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(cfg.count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Writes the full dataset under `root`. Output bytes depend only on `cfg`.
pub fn write_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dir = root.join(PHANTOM_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = String::from("# id split\n");
    let mut entries = Vec::with_capacity(cfg.count);
    let slices = generate_all(cfg)?;
    for (i, (seed, dose, phantom, low)) in slices.into_iter().enumerate() {
        let id = format!("{i:05}");
        write_nlt1(&dir.join(format!("{id}_clean.nlt1")), &phantom.clean)?;
        write_nlt1(&dir.join(format!("{id}_low.nlt1")), &low)?;
        let meta = SliceMeta {
            id: id.clone(),
            seed,
            noise_seed: dose.seed,
            height: cfg.height,
            width: cfg.width,
            dose,
            lesion: Some(phantom.geometry.lesion),
        };
        write_text(&dir.join(format!("{id}_meta.txt")), &meta.to_text())?;
        let split = if i + cfg.test_count >= cfg.count {
            Split::Test
        } else {
            Split::Train
        };
        let _ = writeln!(manifest, "{id} {}", split.as_str());
        entries.push((id, split));
    }
    write_text(&root.join(MANIFEST), &manifest)?;
    log::info!("wrote {} phantoms to {}", cfg.count, root.display());
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<(String, Split)>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(id), Some(split), None) => entries.push((id.to_string(), Split::parse(split)?)),
                _ => {
                    return Err(Error::config(format!(
                        "{}:{}: expected `id split`",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    fn file(&self, id: &str, suffix: &str) -> PathBuf {
        self.root.join(PHANTOM_DIR).join(format!("{id}_{suffix}"))
    }

    /// Fails with the full list of ids whose files are absent.
    pub fn check_files(&self, ids: &[&str]) -> Result<()> {
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| {
                ["clean.nlt1", "low.nlt1", "meta.txt"]
                    .iter()
                    .any(|s| !self.file(id, s).is_file())
            })
            .map(|id| id.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingIds(missing))
        }
    }

    /// Clean and low-dose images in HU, each `[1, H, W]`.
    pub fn load_hu(&self, id: &str) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((
            read_nlt1(&self.file(id, "clean.nlt1"))?,
            read_nlt1(&self.file(id, "low.nlt1"))?,
        ))
    }

    pub fn load_meta(&self, id: &str) -> Result<SliceMeta> {
        let path = self.file(id, "meta.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        SliceMeta::parse(&text, &path)
    }

    /// Windowed slice pairs for every id in `split`.
    pub fn load_split(&self, split: Split, window: &HuWindow) -> Result<Vec<SlicePair>> {
        let ids = self.ids(split);
        if ids.is_empty() {
            return Err(Error::config(format!("split `{}` is empty", split.as_str())));
        }
        self.check_files(&ids)?;
        ids.iter()
            .map(|id| {
                let (clean, low) = self.load_hu(id)?;
                SlicePair::new(*id, hu_window(&clean, window), hu_window(&low, window))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            count: 4,
            height: 32,
            width: 32,
            test_count: 1,
            ..Default::default()
        }
    }

    #[test]
    fn write_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_dataset(dir.path(), &small()).unwrap();
        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.ids(Split::Test), vec!["00003"]);
        let meta = back.load_meta("00001").unwrap();
        assert_eq!(meta.height, 32);
        assert!(meta.region_pair().unwrap().is_some());
        let pairs = back.load_split(Split::Train, &HuWindow::default()).unwrap();
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_dataset(dir.path(), &small()).unwrap();
        fs::remove_file(dir.path().join("phantoms/00001_low.nlt1")).unwrap();
        fs::remove_file(dir.path().join("phantoms/00002_meta.txt")).unwrap();
        match ds.load_split(Split::Train, &HuWindow::default()) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["00001", "00002"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn key_values_reject_duplicates() {
        let p = Path::new("x");
        assert!(parse_key_values("a = 1\na = 2", p).is_err());
        let kv = parse_key_values("# c\n a = 1 # tail\n\nb=x y", p).unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x y");
    }
}

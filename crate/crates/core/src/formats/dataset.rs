use std::fs;
use std::path::{Path, PathBuf};

use super::{drag, pnm, read_correspondence, write_atomic, write_correspondence};
use crate::datagen::{EditSignal, PairMeta, SamplePair, SignalKind};
use crate::diffusion::Correspondence;
use crate::image::Image;
use crate::train::TrainingSample;
use crate::{Error, Result};

pub fn pair_dir_name(index: usize) -> String {
    format!("pair_{index:05}")
}

/// File paths inside one `pair_%05d` directory.
#[derive(Clone, Debug)]
pub struct PairFiles {
    pub dir: PathBuf,
}

impl PairFiles {
    pub fn new(root: &Path, index: usize) -> Self {
        Self { dir: root.join(pair_dir_name(index)) }
    }

    pub fn source(&self) -> PathBuf {
        self.dir.join("source.ppm")
    }

    pub fn target(&self) -> PathBuf {
        self.dir.join("target.ppm")
    }

    pub fn signal(&self, kind: SignalKind) -> PathBuf {
        self.dir.join(match kind {
            SignalKind::Sketch => "signal.pgm",
            SignalKind::Coarse => "signal.ppm",
            SignalKind::Drag => "signal.txt",
        })
    }

    /// `grid_height` is the token-grid height, e.g. `corr_res8.bin` for 8x8.
    pub fn correspondence(&self, grid_height: usize) -> PathBuf {
        self.dir.join(format!("corr_res{grid_height}.bin"))
    }

    pub fn meta(&self) -> PathBuf {
        self.dir.join("meta.txt")
    }
}

/// One pair as stored on disk.
#[derive(Clone, Debug)]
pub struct DatasetPair {
    pub source: Image,
    pub target: Image,
    pub signal: EditSignal,
    pub correspondences: Vec<Correspondence>,
    pub strides: Vec<usize>,
    pub meta: PairMeta,
}

impl DatasetPair {
    pub fn from_sample(pair: &SamplePair, strides: &[usize]) -> Self {
        Self {
            source: pair.source.clone(),
            target: pair.target.clone(),
            signal: pair.signal.clone(),
            correspondences: pair.correspondences.clone(),
            strides: strides.to_vec(),
            meta: pair.meta.clone(),
        }
    }

    pub fn training_sample(&self, patch: usize) -> Result<TrainingSample> {
        TrainingSample::new(self.source.clone(), self.target.clone(), self.signal.clone(), self.correspondences.clone(), patch)
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn render_meta(pair: &DatasetPair) -> String {
    let m = &pair.meta;
    format!(
        "signal = {}\nwidth = {}\nheight = {}\nstrides = {}\nindex = {}\nscene_seed = {}\nsrc_idx = {}\ntgt_idx = {}\nmean_flow = {}\n",
        pair.signal.kind(),
        pair.source.width,
        pair.source.height,
        join(&pair.strides),
        m.index,
        m.scene_seed,
        m.src_idx,
        m.tgt_idx,
        m.mean_flow,
    )
}

pub fn write_pair(root: &Path, pair: &DatasetPair) -> Result<()> {
    if pair.strides.len() != pair.correspondences.len() {
        return Err(Error::Shape(format!("{} strides for {} correspondences", pair.strides.len(), pair.correspondences.len())));
    }
    let files = PairFiles::new(root, pair.meta.index);
    fs::create_dir_all(&files.dir)?;
    pnm::write_image(&files.source(), &pair.source)?;
    pnm::write_image(&files.target(), &pair.target)?;
    let kind = pair.signal.kind();
    match &pair.signal {
        EditSignal::Sketch(img) | EditSignal::Coarse(img) => pnm::write_image(&files.signal(kind), img)?,
        EditSignal::Drag(points) => write_atomic(&files.signal(kind), drag::format_drag_points(points).as_bytes())?,
    }
    for c in &pair.correspondences {
        write_correspondence(&files.correspondence(c.height), c)?;
    }
    write_atomic(&files.meta(), render_meta(pair).as_bytes())
}

struct Meta {
    fields: Vec<(String, String)>,
    context: String,
}

impl Meta {
    fn parse(text: &str, context: String) -> Result<Self> {
        let mut fields = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(&context, format!("line {}: expected key = value", no + 1)))?;
            fields.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Ok(Self { fields, context })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v).ok_or_else(|| Error::format(&self.context, format!("missing {key}")))?;
        v.parse().map_err(|_| Error::format(&self.context, format!("bad {key} {v:?}")))
    }
}

/// Reads `pair_%05d` under `root`; every correspondence is re-validated.
pub fn read_pair(root: &Path, index: usize) -> Result<DatasetPair> {
    let files = PairFiles::new(root, index);
    let meta_path = files.meta();
    let meta = Meta::parse(&fs::read_to_string(&meta_path)?, meta_path.display().to_string())?;
    let kind: SignalKind = meta.get::<String>("signal")?.parse()?;
    let (width, height): (usize, usize) = (meta.get("width")?, meta.get("height")?);
    let strides = meta
        .get::<String>("strides")?
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::format(&meta.context, format!("bad stride {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let source = pnm::read_image(&files.source())?;
    let target = pnm::read_image(&files.target())?;
    for (img, path) in [(&source, files.source()), (&target, files.target())] {
        if img.channels != 3 || img.height != height || img.width != width {
            return Err(Error::format(
                path.display().to_string(),
                format!("{}x{}x{} image, meta says 3x{height}x{width}", img.channels, img.height, img.width),
            ));
        }
    }
    let signal_path = files.signal(kind);
    let signal = match kind {
        SignalKind::Drag => EditSignal::Drag(drag::read_drag_points(&signal_path, width, height)?),
        SignalKind::Sketch | SignalKind::Coarse => {
            let img = pnm::read_image(&signal_path)?;
            if Some(img.channels) != kind.raster_channels() || img.height != height || img.width != width {
                return Err(Error::format(signal_path.display().to_string(), format!("does not match a {kind} signal of {height}x{width}")));
            }
            if kind == SignalKind::Sketch {
                EditSignal::Sketch(img)
            } else {
                EditSignal::Coarse(img)
            }
        }
    };
    let mut correspondences = Vec::with_capacity(strides.len());
    for &s in &strides {
        if s == 0 || height % s != 0 || width % s != 0 {
            return Err(Error::format(&meta.context, format!("stride {s} does not tile {height}x{width}")));
        }
        correspondences.push(read_correspondence(&files.correspondence(height / s), height / s, width / s)?);
    }
    let pair_meta = PairMeta {
        index: meta.get("index")?,
        scene_seed: meta.get("scene_seed")?,
        src_idx: meta.get("src_idx")?,
        tgt_idx: meta.get("tgt_idx")?,
        mean_flow: meta.get("mean_flow")?,
    };
    if pair_meta.index != index {
        return Err(Error::format(&meta.context, format!("index {} stored under {}", pair_meta.index, pair_dir_name(index))));
    }
    Ok(DatasetPair { source, target, signal, correspondences, strides, meta: pair_meta })
}

/// Every `pair_%05d` directory under `root`, in index order. Indices must be
/// contiguous from 0 and, when `expect` is given, carry that signal type.
pub fn load_dataset(root: &Path, expect: Option<SignalKind>) -> Result<Vec<DatasetPair>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = name.strip_prefix("pair_").and_then(|s| s.parse::<usize>().ok()) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::format(root.display().to_string(), "no pair_* directories"));
    }
    if indices.iter().enumerate().any(|(k, &i)| k != i) {
        return Err(Error::format(root.display().to_string(), "pair directories are not numbered 0..n"));
    }
    let pairs = indices.into_iter().map(|i| read_pair(root, i)).collect::<Result<Vec<_>>>()?;
    if let Some(kind) = expect {
        if let Some(p) = pairs.iter().find(|p| p.signal.kind() != kind) {
            return Err(Error::Config(format!("dataset {} holds {} signals, expected {kind}", root.display(), p.signal.kind())));
        }
    }
    Ok(pairs)
}

//! Batch orchestration: corpus generation, per-window training, feature
//! extraction, fusion training and evaluation.
//!
//! Every stage is a pure function of its inputs and seeds. Work fans out
//! over clips with rayon; results are always collected in manifest order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, segment, write_wav, AudioClip};
use crate::codec::{decode_clip, embed, encode_clip, CodecConfig, Scheme, StegoJob, DEFAULT_SIGN_THRESHOLD};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedFeature, Label, MarginModel, Metrics, BLOCK_DIM, FUSED_DIM, WINDOWS};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{train, AdamConfig, AdamState, EpochRecord, NetConfig, PairedDataset, SResNet, Tensor4, TrainConfig};
use crate::spectrogram::spectrogram;
use crate::spm::{apply_filter_bank, FilterBank};

pub const MANIFEST_FILE: &str = "manifest.json";

/// SplitMix64 finalizer over two words; derives independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Cover,
    Stego,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ebr: Option<f64>,
    /// Message seed for stego entries; zero for covers.
    pub seed: u64,
    /// Identifier of the source clip; a cover and its stego twins share it.
    pub source: String,
}

impl ManifestEntry {
    pub fn label(&self) -> Label {
        match self.role {
            Role::Cover => Label::Cover,
            Role::Stego => Label::Stego,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub codec: CodecConfig,
    pub sample_rate: u32,
    pub duration_secs: f64,
    pub sign_threshold: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.sample_rate == 0 || !(self.duration_secs > 0.0) {
            return Err(Error::input("manifest needs a positive sample rate and duration"));
        }
        if self.entries.is_empty() {
            return Err(Error::input("manifest lists no clips"));
        }
        let mut paths = BTreeSet::new();
        for e in &self.entries {
            match (e.role, e.scheme, e.ebr) {
                (Role::Cover, None, None) => {}
                (Role::Stego, Some(_), Some(ebr)) if ebr > 0.0 && ebr <= 1.0 => {}
                _ => {
                    return Err(Error::input(format!(
                        "{}: covers name no scheme or rate, stegos name both",
                        e.path.display()
                    )))
                }
            }
            if !paths.insert(&e.path) {
                return Err(Error::input(format!("{} listed twice", e.path.display())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Reads an entry's clip and checks it against the declared rate and
    /// duration.
    pub fn read_clip(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        let path = self.resolve(entry);
        let clip = read_wav(&path)?;
        let expected = (self.duration_secs * self.sample_rate as f64).round() as usize;
        if clip.sample_rate() != self.sample_rate || clip.len() != expected {
            return Err(Error::input(format!(
                "{}: {} samples at {} Hz, manifest declares {expected} at {} Hz",
                path.display(),
                clip.len(),
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        Ok(clip)
    }
}

/// Options of the corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source_dir: PathBuf,
    pub out_dir: PathBuf,
    pub schemes: Vec<Scheme>,
    pub ebrs: Vec<f64>,
    pub codec: CodecConfig,
    pub seed: u64,
    /// Cut sources into clips of this length; `None` keeps whole files.
    pub segment_secs: Option<f64>,
    pub sign_threshold: u32,
}

impl DatasetSpec {
    pub fn new(source_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            source_dir: source_dir.into(),
            out_dir: out_dir.into(),
            schemes: vec![Scheme::Sign],
            ebrs: vec![1.0],
            codec: CodecConfig::default(),
            seed: 0,
            segment_secs: None,
            sign_threshold: DEFAULT_SIGN_THRESHOLD,
        }
    }
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn ebr_tag(ebr: f64) -> String {
    format!("{ebr}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Codes every source clip into a cover and one stego twin per (scheme,
/// rate), writes them under `out_dir`, and writes the manifest there.
pub fn make_dataset(spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.codec.validate()?;
    if spec.schemes.is_empty() || spec.ebrs.is_empty() {
        return Err(Error::input("at least one scheme and one embedding rate are required"));
    }
    for &ebr in &spec.ebrs {
        crate::codec::message_len(0, ebr)?;
    }
    let sources = list_wavs(&spec.source_dir)?;
    if sources.is_empty() {
        return Err(Error::input(format!(
            "no WAV files in {}",
            spec.source_dir.display()
        )));
    }
    let decoded = sources
        .par_iter()
        .map(|p| read_wav(p))
        .collect::<Result<Vec<_>>>()?;
    let rate = decoded[0].sample_rate();
    if let Some((p, c)) = sources.iter().zip(&decoded).find(|(_, c)| c.sample_rate() != rate) {
        return Err(Error::input(format!(
            "{} is sampled at {} Hz, other sources at {rate} Hz",
            p.display(),
            c.sample_rate()
        )));
    }

    let mut clips: Vec<(String, AudioClip)> = Vec::new();
    for (path, clip) in sources.iter().zip(decoded) {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match spec.segment_secs {
            Some(secs) => {
                for (k, piece) in segment(&clip, secs)?.into_iter().enumerate() {
                    clips.push((format!("{stem}-{k:03}"), piece));
                }
            }
            None => clips.push((stem, clip)),
        }
    }
    let len = clips.first().map(|(_, c)| c.len()).ok_or_else(|| {
        Error::input("sources are shorter than one segment")
    })?;
    if let Some((id, c)) = clips.iter().find(|(_, c)| c.len() != len) {
        return Err(Error::input(format!(
            "clip {id} has {} samples, others {len}; use segmentation for uniform clips",
            c.len()
        )));
    }

    create_dir(&spec.out_dir.join("cover"))?;
    let mut variants = Vec::new();
    for &scheme in &spec.schemes {
        for &ebr in &spec.ebrs {
            let rel = PathBuf::from("stego").join(format!("{}-{}", scheme.name(), ebr_tag(ebr)));
            create_dir(&spec.out_dir.join(&rel))?;
            variants.push((scheme, ebr, rel));
        }
    }

    let per_clip = clips
        .par_iter()
        .enumerate()
        .map(|(i, (id, clip))| -> Result<Vec<ManifestEntry>> {
            let stream = encode_clip(clip, &spec.codec)?;
            let cover_path = PathBuf::from("cover").join(format!("{id}.wav"));
            write_wav(&decode_clip(&stream)?, spec.out_dir.join(&cover_path))?;
            let mut entries = vec![ManifestEntry {
                path: cover_path,
                role: Role::Cover,
                scheme: None,
                ebr: None,
                seed: 0,
                source: id.clone(),
            }];
            for (v, (scheme, ebr, rel)) in variants.iter().enumerate() {
                let seed = mix_seed(mix_seed(spec.seed, i as u64), v as u64);
                let job = StegoJob::random(&stream, *scheme, *ebr, spec.sign_threshold, seed)?;
                let stego = decode_clip(&embed(&stream, &job)?)?;
                let path = rel.join(format!("{id}.wav"));
                write_wav(&stego, spec.out_dir.join(&path))?;
                entries.push(ManifestEntry {
                    path,
                    role: Role::Stego,
                    scheme: Some(*scheme),
                    ebr: Some(*ebr),
                    seed,
                    source: id.clone(),
                });
            }
            Ok(entries)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        codec: spec.codec,
        sample_rate: rate,
        duration_secs: len as f64 / rate as f64,
        sign_threshold: spec.sign_threshold,
        entries: per_clip.into_iter().flatten().collect(),
        root: spec.out_dir.clone(),
    };
    manifest.save(spec.out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Declarative experiment parameters, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub window_sizes: [usize; WINDOWS],
    pub epochs: usize,
    pub seed: u64,
    pub batch_pairs: usize,
    pub units_per_group: usize,
    pub train_fraction: f64,
    pub svm_c: f64,
    /// Network decision threshold on the stego probability.
    pub threshold: f64,
    /// Stop training a window once its epoch cross-entropy drops below this.
    pub target_loss: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window_sizes: [1024, 512, 256],
            epochs: 30,
            seed: 0,
            batch_pairs: 16,
            units_per_group: 5,
            train_fraction: 0.5,
            svm_c: fusion::DEFAULT_C,
            threshold: 0.5,
            target_loss: None,
            adam: AdamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.window_sizes;
        sorted.sort_unstable();
        if sorted.iter().any(|&n| n < 4 || !n.is_power_of_two()) || sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input(format!(
                "window sizes {:?} must be three distinct powers of two",
                self.window_sizes
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::input("train_fraction must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.batch_pairs == 0 || self.units_per_group == 0 {
            return Err(Error::input("epochs, batch_pairs and units_per_group must be positive"));
        }
        if !(self.svm_c > 0.0) {
            return Err(Error::input("svm_c must be positive"));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            units_per_group: self.units_per_group,
            ..NetConfig::default()
        }
    }

    pub fn train_config(&self, window: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_pairs: self.batch_pairs,
            seed: mix_seed(self.seed, window as u64),
            adam: self.adam,
            target_loss: self.target_loss,
        }
    }
}

/// Manifest entry indices on each side of the clip-level split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits by source clip so a cover and all its stego twins fall on the
/// same side. Every source carries the same (scheme, rate) variants, so the
/// split is stratified by construction.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<Split> {
    let mut sources: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.source.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if sources.len() < 2 {
        return Err(Error::input("a train/test split needs at least two source clips"));
    }
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5350_4c54)));
    let n_train = ((train_fraction * sources.len() as f64).round() as usize).clamp(1, sources.len() - 1);
    let train_sources: BTreeSet<&str> = sources[..n_train].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, e) in manifest.entries.iter().enumerate() {
        if train_sources.contains(e.source.as_str()) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    let train_paths: BTreeSet<&Path> = train.iter().map(|&i| manifest.entries[i].path.as_path()).collect();
    assert!(
        test.iter().all(|&i| !train_paths.contains(manifest.entries[i].path.as_path())),
        "train and test clip sets overlap"
    );
    Ok(Split { train, test })
}

/// SPM-filtered single-sample network input for one clip.
pub fn window_input(clip: &AudioClip, window: usize, bank: &FilterBank) -> Result<Tensor4<f32>> {
    let spec = spectrogram(clip, window)?;
    Ok(apply_filter_bank(&spec, bank)?.cast())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub window: usize,
    pub pairs: usize,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,data_loss,accuracy,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{:.17e},{:.17e},{:.17e},{:.17e}", r.epoch, r.loss, r.data_loss, r.accuracy, r.lr);
    }
    s
}

/// Path of the per-epoch history written next to a checkpoint.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

/// Trains one window's network on the training side of the split and
/// writes its checkpoint and history.
pub fn train_window(
    manifest: &DatasetManifest,
    window: usize,
    config: &RunConfig,
    out: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    let split = split(manifest, config.train_fraction, config.seed)?;
    let bank = FilterBank::fixed();
    let tensors = split
        .train
        .par_iter()
        .map(|&i| window_input(&manifest.read_clip(&manifest.entries[i])?, window, &bank))
        .collect::<Result<Vec<_>>>()?;
    let mut data = PairedDataset::default();
    let mut covers = BTreeMap::new();
    let mut stegos = Vec::new();
    for (&i, t) in split.train.iter().zip(tensors) {
        let e = &manifest.entries[i];
        let k = data.push_sample(t);
        match e.role {
            Role::Cover => {
                covers.insert(e.source.as_str(), k);
            }
            Role::Stego => stegos.push((e.source.as_str(), k)),
        }
    }
    for (source, s) in stegos {
        let c = covers
            .get(source)
            .ok_or_else(|| Error::input(format!("stego clip of {source} has no cover")))?;
        data.pairs.push((*c, s));
    }
    let train_config = config.train_config(window);
    let mut net = SResNet::<f32>::new(config.net_config(), bank, train_config.seed)?;
    let mut adam = AdamState::new(train_config.adam, &mut net);
    log::info!("window {window}: training on {} pairs", data.pairs.len());
    let history = train(&mut net, &data, &train_config, &mut adam, |_| {})?;
    save_checkpoint(out, &mut net, window, Some(&adam))?;
    let hist = history_path(out);
    fs::write(&hist, history_csv(&history)).map_err(|e| Error::io(&hist, e))?;
    Ok(TrainSummary {
        window,
        pairs: data.pairs.len(),
        history,
    })
}

/// Fused feature rows, one per manifest entry, with labels
/// (0 cover, 1 stego).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub window_sizes: [usize; WINDOWS],
    pub cols: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u8>,
}

const FEATURE_MAGIC: &[u8; 4] = b"FTR1";

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fused(&self, i: usize) -> FusedFeature {
        FusedFeature {
            vector: self.row(i).iter().map(|&v| f64::from(v)).collect(),
            window_sizes: self.window_sizes,
            label: Some(Label::from_stego(self.labels[i] == 1)),
        }
    }

    /// Little-endian: magic, row count, column count, the three window
    /// sizes, row-major f32 values, then one label byte per row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.values.len() * 4 + self.labels.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for n in self.window_sizes {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format(format!("feature file: {m}"));
        if bytes.len() < 24 || &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("bad magic, expected FTR1"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
        let (rows, cols) = (word(0), word(1));
        let window_sizes = [word(2), word(3), word(4)];
        if cols != FUSED_DIM {
            return Err(bad(&format!("{cols} columns, expected {FUSED_DIM}")));
        }
        let body = &bytes[24..];
        if body.len() != rows * cols * 4 + rows {
            return Err(bad("length does not match header"));
        }
        let (vals, labels) = body.split_at(rows * cols * 4);
        if labels.iter().any(|&l| l > 1) {
            return Err(bad("labels must be 0 or 1"));
        }
        Ok(Self {
            window_sizes,
            cols,
            values: vals
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            labels: labels.to_vec(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for n in self.window_sizes {
            for k in 0..BLOCK_DIM {
                let _ = write!(s, ",w{n}_{k}");
            }
        }
        s.push('\n');
        for i in 0..self.rows() {
            let _ = write!(s, "{}", self.labels[i]);
            for v in self.row(i) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Output of feature extraction: the fused table plus each window
/// network's stego probability per entry, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub table: FeatureTable,
    pub windows: [usize; WINDOWS],
    pub scores: Vec<[f64; WINDOWS]>,
}

/// Runs the three window networks over every manifest entry.
pub fn extract_features(manifest: &DatasetManifest, checkpoints: &[PathBuf]) -> Result<Extraction> {
    if checkpoints.len() != WINDOWS {
        return Err(Error::input(format!(
            "feature extraction needs {WINDOWS} checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let nets = checkpoints
        .iter()
        .map(load_checkpoint::<f32>)
        .collect::<Result<Vec<_>>>()?;
    let windows = [nets[0].window_size, nets[1].window_size, nets[2].window_size];
    let rows = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<(FusedFeature, [f64; WINDOWS])> {
            let clip = manifest.read_clip(e)?;
            let mut blocks = Vec::with_capacity(WINDOWS);
            let mut scores = [0.0; WINDOWS];
            for (k, ck) in nets.iter().enumerate() {
                let x = window_input(&clip, ck.window_size, ck.net.filter_bank())?;
                let out = ck.net.infer(&x)?;
                scores[k] = out.stego_probability()[0];
                blocks.push(out.features.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
            }
            let refs: Vec<(usize, &[f64])> = windows.iter().copied().zip(blocks.iter().map(Vec::as_slice)).collect();
            let mut fused = fusion::fuse(&refs)?;
            fused.label = Some(e.label());
            Ok((fused, scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let window_sizes = rows.first().map(|(f, _)| f.window_sizes).expect("manifest is non-empty");
    let table = FeatureTable {
        window_sizes,
        cols: FUSED_DIM,
        values: rows.iter().flat_map(|(f, _)| f.vector.iter().map(|&v| v as f32)).collect(),
        labels: rows
            .iter()
            .map(|(f, _)| u8::from(f.label.is_some_and(Label::is_stego)))
            .collect(),
    };
    Ok(Extraction {
        table,
        windows,
        scores: rows.into_iter().map(|(_, s)| s).collect(),
    })
}

fn check_alignment(table: &FeatureTable, manifest: &DatasetManifest) -> Result<()> {
    if table.rows() != manifest.entries.len() {
        return Err(Error::input(format!(
            "feature file has {} rows, manifest lists {} clips",
            table.rows(),
            manifest.entries.len()
        )));
    }
    for (i, e) in manifest.entries.iter().enumerate() {
        if (table.labels[i] == 1) != (e.role == Role::Stego) {
            return Err(Error::input(format!("feature row {i} disagrees with the manifest label")));
        }
    }
    Ok(())
}

/// Trains the margin classifier on the training side of the split.
pub fn fuse_train(table: &FeatureTable, manifest: &DatasetManifest, config: &RunConfig) -> Result<MarginModel> {
    check_alignment(table, manifest)?;
    let split = split(manifest, config.train_fraction, config.seed)?;
    let rows: Vec<FusedFeature> = split.train.iter().map(|&i| table.fused(i)).collect();
    fusion::svm_train(&rows, config.svm_c)
}

/// One test-set decision in the raw prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ebr: Option<f64>,
    pub stego: bool,
    /// Decision value (classifier) or stego probability (network).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub scheme: Scheme,
    pub ebr: f64,
    pub count: usize,
    pub tpr: f64,
    /// Mean of the cover TNR and this cell's TPR.
    pub acc: f64,
}

/// Detection summary in the layout of a per-scheme results table: one TNR
/// over all covers, one TPR per (scheme, rate), and the overall accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classifier: String,
    pub covers: usize,
    pub tnr: f64,
    pub cells: Vec<ReportCell>,
    pub stegos: usize,
    pub tpr: f64,
    pub acc: f64,
}

impl Report {
    pub fn from_predictions(classifier: impl Into<String>, predictions: &[Prediction]) -> Result<Self> {
        let predicted: Vec<bool> = predictions.iter().map(|p| p.stego).collect();
        let truth: Vec<bool> = predictions.iter().map(|p| p.role == Role::Stego).collect();
        let overall: Metrics = fusion::metrics(&predicted, &truth)?;
        let mut groups: BTreeMap<(Scheme, u64), (usize, usize)> = BTreeMap::new();
        for p in predictions.iter().filter(|p| p.role == Role::Stego) {
            let scheme = p.scheme.ok_or_else(|| Error::input("stego prediction without scheme"))?;
            let ebr = p.ebr.ok_or_else(|| Error::input("stego prediction without rate"))?;
            let slot = groups.entry((scheme, ebr.to_bits())).or_default();
            slot.0 += 1;
            slot.1 += usize::from(p.stego);
        }
        let cells = groups
            .into_iter()
            .map(|((scheme, bits), (count, hits))| {
                let tpr = hits as f64 / count as f64;
                ReportCell {
                    scheme,
                    ebr: f64::from_bits(bits),
                    count,
                    tpr,
                    acc: (overall.tnr + tpr) / 2.0,
                }
            })
            .collect();
        Ok(Self {
            classifier: classifier.into(),
            covers: overall.negatives,
            tnr: overall.tnr,
            cells,
            stegos: overall.positives,
            tpr: overall.tpr,
            acc: overall.acc,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classifier: {}", self.classifier);
        let _ = writeln!(s, "{:<8} {:<8} {:>5} {:>6} {:>8} {:>8}", "role", "scheme", "ebr", "n", "rate", "acc");
        let _ = writeln!(s, "{:<8} {:<8} {:>5} {:>6} TNR {:.4}", "cover", "-", "-", self.covers, self.tnr);
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<8} {:<8} {:>5} {:>6} TPR {:.4} {:>8.4}",
                "stego",
                c.scheme.name(),
                c.ebr,
                c.count,
                c.tpr,
                c.acc
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:<8} {:>5} {:>6} TPR {:.4} {:>8.4}",
            "all",
            "",
            "",
            self.covers + self.stegos,
            self.tpr,
            self.acc
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    /// Writes `<stem>.txt`, `<stem>.json` and `<stem>.predictions.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let files = [
            (stem.with_extension("txt"), self.report.to_table()),
            (stem.with_extension("json"), self.report.to_json() + "\n"),
            (
                stem.with_extension("predictions.json"),
                serde_json::to_string_pretty(&self.predictions).expect("predictions serialize") + "\n",
            ),
        ];
        for (path, text) in files {
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn predictions_for(
    manifest: &DatasetManifest,
    indices: &[usize],
    decide: impl Fn(usize) -> (bool, f64),
) -> Vec<Prediction> {
    indices
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            let (stego, score) = decide(i);
            Prediction {
                path: e.path.clone(),
                role: e.role,
                scheme: e.scheme,
                ebr: e.ebr,
                stego,
                score,
            }
        })
        .collect()
}

/// Applies the margin classifier to the test side of the split.
pub fn evaluate_model(
    model: &MarginModel,
    table: &FeatureTable,
    manifest: &DatasetManifest,
    config: &RunConfig,
) -> Result<Evaluation> {
    check_alignment(table, manifest)?;
    if table.window_sizes != model.window_sizes {
        return Err(Error::input("feature file and model disagree on window sizes"));
    }
    let split = split(manifest, config.train_fraction, config.seed)?;
    let predictions = predictions_for(manifest, &split.test, |i| {
        let fused = table.fused(i);
        let d = model.predict(&fused.vector);
        (d.stego, d.value)
    });
    let [a, b, c] = model.window_sizes;
    let report = Report::from_predictions(format!("fused {a}/{b}/{c}"), &predictions)?;
    Ok(Evaluation { report, predictions })
}

/// Evaluates one window network on the test side from precomputed
/// stego probabilities.
pub fn evaluate_scores(
    window: usize,
    scores: &[f64],
    manifest: &DatasetManifest,
    config: &RunConfig,
) -> Result<Evaluation> {
    if scores.len() != manifest.entries.len() {
        return Err(Error::input("one score per manifest entry is required"));
    }
    let split = split(manifest, config.train_fraction, config.seed)?;
    let predictions = predictions_for(manifest, &split.test, |i| (scores[i] >= config.threshold, scores[i]));
    let report = Report::from_predictions(format!("network N={window}"), &predictions)?;
    Ok(Evaluation { report, predictions })
}

/// Runs a single window checkpoint over the test side.
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &DatasetManifest, config: &RunConfig) -> Result<Evaluation> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let split = split(manifest, config.train_fraction, config.seed)?;
    let tested = split
        .test
        .par_iter()
        .map(|&i| -> Result<(usize, f64)> {
            let clip = manifest.read_clip(&manifest.entries[i])?;
            let x = window_input(&clip, ck.window_size, ck.net.filter_bank())?;
            Ok((i, ck.net.infer(&x)?.stego_probability()[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![f64::NAN; manifest.entries.len()];
    for (i, s) in tested {
        scores[i] = s;
    }
    evaluate_scores(ck.window_size, &scores, manifest, config)
}

/// Artifacts of a complete run under one work directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub training: Vec<TrainSummary>,
    pub features: PathBuf,
    pub model: PathBuf,
    pub fused: Evaluation,
    /// Test-side evaluation of each window network on its own.
    pub windows: Vec<Evaluation>,
}

/// Trains all three windows, extracts and fuses features, and evaluates,
/// writing every artifact under `work_dir`.
pub fn run_pipeline(manifest: &DatasetManifest, config: &RunConfig, work_dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    create_dir(work_dir)?;
    let mut checkpoints = Vec::new();
    let mut training = Vec::new();
    for &n in &config.window_sizes {
        let path = work_dir.join(format!("window-{n}.srn"));
        training.push(train_window(manifest, n, config, &path)?);
        checkpoints.push(path);
    }
    let extraction = extract_features(manifest, &checkpoints)?;
    let features = work_dir.join("features.ftr");
    extraction.table.write(&features)?;
    let model = fuse_train(&extraction.table, manifest, config)?;
    let model_path = work_dir.join("model.svm");
    model.save(&model_path)?;
    let fused = evaluate_model(&model, &extraction.table, manifest, config)?;
    fused.write(&work_dir.join("report"))?;
    let mut windows = Vec::new();
    for (k, &n) in extraction.windows.iter().enumerate() {
        let scores: Vec<f64> = extraction.scores.iter().map(|s| s[k]).collect();
        let eval = evaluate_scores(n, &scores, manifest, config)?;
        eval.write(&work_dir.join(format!("report-window-{n}")))?;
        windows.push(eval);
    }
    Ok(PipelineOutcome {
        checkpoints,
        training,
        features,
        model: model_path,
        fused,
        windows,
    })
}

/// Writes `count` synthetic source clips as `synth-XXXX.wav`.
pub fn synth_sources(out_dir: &Path, count: usize, params: &crate::synth::SynthParams, seed: u64) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    (0..count)
        .into_par_iter()
        .map(|k| {
            let clip = crate::synth::synth_clip(params, mix_seed(seed, k as u64))?;
            let path = out_dir.join(format!("synth-{k:04}.wav"));
            write_wav(&clip, &path)?;
            Ok(path)
        })
        .collect()
}

/// Reads a codec configuration from TOML.
pub fn load_codec_config(path: impl AsRef<Path>) -> Result<CodecConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: CodecConfig =
        toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

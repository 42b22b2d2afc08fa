//! Identity-confounded synthetic datasets, person-independent splits and CSV
//! storage.
//!
//! Every generated identity (speaker) has a dominant sentiment label and a
//! persistent binary trait written into the confound columns. In the training
//! population the trait agrees with the dominant label with probability
//! `confound_align`; in the test population it is a coin flip. Labels are
//! otherwise carried only by the noisy signal columns.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::ContingencyTable;
use crate::tensor::{Matrix, Rng};

/// A named block of feature columns (a modality).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Channel {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Features `X` (n×p), binary labels `y` (n×1), integer identities in `[0, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix<f64>,
    pub labels: Matrix<f64>,
    pub identities: Vec<usize>,
    pub m: usize,
    pub channels: Vec<Channel>,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix<f64>,
        labels: Matrix<f64>,
        identities: Vec<usize>,
        m: usize,
        channels: Vec<Channel>,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            identities,
            m,
            channels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.shape() != (n, 1) {
            return Err(Error::shape("dataset labels", (n, 1), self.labels.shape()));
        }
        if self.identities.len() != n {
            return Err(Error::shape("dataset identities", (n, 1), (self.identities.len(), 1)));
        }
        if let Some((row, &id)) = self.identities.iter().enumerate().find(|(_, &id)| id >= self.m) {
            return Err(Error::Range(format!("identity {id} at row {row} is not below m = {}", self.m)));
        }
        if let Some(row) = self.labels.data().iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Range(format!("label at row {row} is not 0 or 1")));
        }
        let mut next = 0;
        for ch in &self.channels {
            if ch.start != next || ch.end <= ch.start {
                return Err(Error::Range(format!(
                    "channel {:?} [{}, {}) does not continue the partition at {next}",
                    ch.name, ch.start, ch.end
                )));
            }
            next = ch.end;
        }
        if !self.channels.is_empty() && next != self.features.cols() {
            return Err(Error::Range(format!(
                "channels cover [0, {next}) but there are {} features",
                self.features.cols()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels as 0/1 bytes.
    pub fn label_bits(&self) -> Vec<u8> {
        self.labels.data().iter().map(|&y| u8::from(y == 1.0)).collect()
    }

    /// One-hot identity matrix `Z` (n×m).
    pub fn z(&self) -> Result<Matrix<f64>> {
        one_hot(&self.identities, self.m)
    }

    /// Rows at `idx`, in that order. Identity vocabulary and channels are kept.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: self.labels.select_rows(idx),
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
            m: self.m,
            channels: self.channels.clone(),
        }
    }

    /// Distinct identities in first-seen order.
    pub fn identity_set(&self) -> Vec<usize> {
        let mut seen = vec![false; self.m];
        let mut out = Vec::new();
        for &id in &self.identities {
            if !seen[id] {
                seen[id] = true;
                out.push(id);
            }
        }
        out
    }

    /// Early fusion: concatenates the named channels' columns in the given
    /// order. The special name `all` selects every channel.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<LabeledDataset> {
        let chosen: Vec<&Channel> = if names.len() == 1 && names[0].as_ref() == "all" {
            self.channels.iter().collect()
        } else {
            names
                .iter()
                .map(|n| {
                    self.channels
                        .iter()
                        .find(|c| c.name == n.as_ref())
                        .ok_or_else(|| Error::Config(format!("unknown channel {:?}", n.as_ref())))
                })
                .collect::<Result<_>>()?
        };
        if chosen.is_empty() {
            return Err(Error::Config("empty channel selection".into()));
        }
        let mut cols = Vec::new();
        let mut channels = Vec::new();
        for ch in chosen {
            let start = cols.len();
            cols.extend(ch.range());
            channels.push(Channel {
                name: ch.name.clone(),
                start,
                end: cols.len(),
            });
        }
        Ok(LabeledDataset {
            features: self.features.select_cols(&cols),
            labels: self.labels.clone(),
            identities: self.identities.clone(),
            m: self.m,
            channels,
        })
    }

    /// Identity × label utterance counts (m×2), restricted to identities present.
    pub fn identity_label_table(&self) -> Result<ContingencyTable> {
        let mut counts = vec![[0u64; 2]; self.m];
        for (&id, y) in self.identities.iter().zip(self.label_bits()) {
            counts[id][y as usize] += 1;
        }
        let rows = counts
            .into_iter()
            .filter(|r| r[0] + r[1] > 0)
            .map(|r| r.to_vec())
            .collect();
        ContingencyTable::new(rows)
    }
}

/// `n×m` indicator matrix with a single 1 per row.
pub fn one_hot(identities: &[usize], m: usize) -> Result<Matrix<f64>> {
    let mut z = Matrix::zeros(identities.len(), m);
    for (r, &id) in identities.iter().enumerate() {
        if id >= m {
            return Err(Error::Range(format!("identity {id} at row {r} is not below m = {m}")));
        }
        z.set(r, id, 1.0);
    }
    Ok(z)
}

/// Column layout of one generated modality: signal, then confound, then noise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub signal_dims: usize,
    pub confound_dims: usize,
    pub noise_dims: usize,
}

impl ChannelSpec {
    pub fn new(name: &str, signal_dims: usize, confound_dims: usize, noise_dims: usize) -> Self {
        ChannelSpec {
            name: name.to_string(),
            signal_dims,
            confound_dims,
            noise_dims,
        }
    }

    pub fn width(&self) -> usize {
        self.signal_dims + self.confound_dims + self.noise_dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub utt_per_id: usize,
    pub channels: Vec<ChannelSpec>,
    /// Std of the Gaussian noise on the ±1 label means of signal columns.
    pub signal_noise_std: f64,
    /// Std of the per-utterance jitter around an identity's ±1 trait.
    pub confound_noise_std: f64,
    /// Probability that a training identity's trait agrees with its dominant label.
    pub confound_align: f64,
    /// Probability that an utterance carries its speaker's dominant label.
    pub label_purity: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_train_ids: 40,
            n_test_ids: 20,
            utt_per_id: 30,
            channels: vec![
                ChannelSpec::new("verbal", 4, 0, 16),
                ChannelSpec::new("acoustic", 4, 0, 6),
                ChannelSpec::new("visual", 4, 4, 2),
            ],
            signal_noise_std: 2.0,
            confound_noise_std: 0.1,
            confound_align: 1.0,
            label_purity: 0.97,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_ids == 0 || self.n_test_ids == 0 || self.utt_per_id == 0 {
            return Err(Error::Config("identity and utterance counts must be >= 1".into()));
        }
        if self.channels.is_empty() || self.channels.iter().any(|c| c.width() == 0) {
            return Err(Error::Config("every channel needs at least one column".into()));
        }
        if self.channels.iter().map(|c| c.signal_dims).sum::<usize>() == 0 {
            return Err(Error::Config("at least one signal column is required".into()));
        }
        for (i, a) in self.channels.iter().enumerate() {
            if a.name == "all" || self.channels[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("channel name {:?} is reserved or repeated", a.name)));
            }
        }
        for (what, p) in [("confound_align", self.confound_align), ("label_purity", self.label_purity)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must lie in [0, 1], got {p}")));
            }
        }
        for (what, s) in [
            ("signal_noise_std", self.signal_noise_std),
            ("confound_noise_std", self.confound_noise_std),
        ] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Config(format!("{what} must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.iter().map(ChannelSpec::width).sum()
    }

    pub fn channel_layout(&self) -> Vec<Channel> {
        let mut start = 0;
        self.channels
            .iter()
            .map(|c| {
                let ch = Channel {
                    name: c.name.clone(),
                    start,
                    end: start + c.width(),
                };
                start = ch.end;
                ch
            })
            .collect()
    }

    /// Indices of all confound columns.
    pub fn confound_columns(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut start = 0;
        for c in &self.channels {
            out.extend(start + c.signal_dims..start + c.signal_dims + c.confound_dims);
            start += c.width();
        }
        out
    }
}

/// Latent per-identity attributes behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityTrait {
    pub id: usize,
    pub dominant_label: u8,
    /// +1 or −1
    pub confound: i8,
}

/// Identity-level 2×2 table: trait (−1, +1) × dominant label (0, 1).
pub fn trait_label_table(traits: &[IdentityTrait]) -> Result<ContingencyTable> {
    let mut counts = vec![vec![0u64; 2]; 2];
    for t in traits {
        counts[usize::from(t.confound > 0)][t.dominant_label as usize] += 1;
    }
    ContingencyTable::new(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_traits: Vec<IdentityTrait>,
    pub test_traits: Vec<IdentityTrait>,
}

/// Train identities are `0..n_train_ids` with `m = n_train_ids`; test
/// identities continue at `n_train_ids` with `m` covering both populations.
pub fn generate(spec: &GenSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let g = generate_detailed(spec)?;
    Ok((g.train, g.test))
}

pub fn generate_detailed(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let total = spec.n_train_ids + spec.n_test_ids;
    let train_traits = draw_traits(&mut rng, 0, spec.n_train_ids, spec.confound_align);
    let test_traits = draw_traits(&mut rng, spec.n_train_ids, spec.n_test_ids, 0.5);
    let train = draw_rows(&mut rng, spec, &train_traits, spec.n_train_ids)?;
    let test = draw_rows(&mut rng, spec, &test_traits, total)?;
    Ok(Generated {
        train,
        test,
        train_traits,
        test_traits,
    })
}

fn draw_traits(rng: &mut Rng, first_id: usize, count: usize, align: f64) -> Vec<IdentityTrait> {
    // balanced dominant labels, shuffled across identities
    let mut dominant: Vec<u8> = (0..count).map(|i| (i % 2) as u8).collect();
    rng.shuffle(&mut dominant);
    dominant
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let agrees = rng.bernoulli(align);
            let label_sign: i8 = if d == 1 { 1 } else { -1 };
            IdentityTrait {
                id: first_id + i,
                dominant_label: d,
                confound: if agrees { label_sign } else { -label_sign },
            }
        })
        .collect()
}

fn draw_rows(rng: &mut Rng, spec: &GenSpec, traits: &[IdentityTrait], m: usize) -> Result<LabeledDataset> {
    let n = traits.len() * spec.utt_per_id;
    let p = spec.feature_dim();
    let mut features = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut identities = Vec::with_capacity(n);
    for t in traits {
        for _ in 0..spec.utt_per_id {
            let y = if rng.bernoulli(spec.label_purity) {
                t.dominant_label
            } else {
                1 - t.dominant_label
            };
            let mean = if y == 1 { 1.0 } else { -1.0 };
            for ch in &spec.channels {
                for _ in 0..ch.signal_dims {
                    features.push(mean + spec.signal_noise_std * rng.normal());
                }
                for _ in 0..ch.confound_dims {
                    features.push(f64::from(t.confound) + spec.confound_noise_std * rng.normal());
                }
                for _ in 0..ch.noise_dims {
                    features.push(rng.normal());
                }
            }
            labels.push(f64::from(y));
            identities.push(t.id);
        }
    }
    LabeledDataset::new(
        Matrix::new(n, p, features)?,
        Matrix::column(labels),
        identities,
        m,
        spec.channel_layout(),
    )
}

/// Splits identities first, then utterances of the kept identities.
///
/// `floor(train_frac_ids · k)` of the `k` identities go to train+validation and
/// the rest to test. Train+validation rows are shuffled and the first
/// `floor(val_frac_utts · rows)` become validation. Validation may be empty
/// only when `val_frac_utts` is exactly zero; any other empty split is an error.
pub fn person_independent_split(
    data: &LabeledDataset,
    train_frac_ids: f64,
    val_frac_utts: f64,
    rng: &mut Rng,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if !(train_frac_ids > 0.0 && train_frac_ids < 1.0) {
        return Err(Error::Parameter(format!("train_frac_ids must be in (0, 1), got {train_frac_ids}")));
    }
    let mut ids = data.identity_set();
    ids.sort_unstable();
    rng.shuffle(&mut ids);
    let n_keep = (train_frac_ids * ids.len() as f64).floor() as usize;
    let mut keep = vec![false; data.m];
    for &id in &ids[..n_keep] {
        keep[id] = true;
    }
    let (kept, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&r| keep[data.identities[r]]);
    if kept.is_empty() || test.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "{} identities split into {n_keep} train/val and {} test",
            ids.len(),
            ids.len() - n_keep
        )));
    }
    let (train, val) = utterance_split(&data.subset(&kept), val_frac_utts, rng)?;
    Ok((train, val, data.subset(&test)))
}

/// Shuffles rows and holds out `floor(val_frac · n)` of them.
pub fn utterance_split(data: &LabeledDataset, val_frac: f64, rng: &mut Rng) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::Parameter(format!("val_frac_utts must be in [0, 1), got {val_frac}")));
    }
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut rows);
    let n_val = (val_frac * rows.len() as f64).floor() as usize;
    if n_val == rows.len() || (val_frac > 0.0 && n_val == 0) {
        return Err(Error::DegenerateSplit(format!(
            "{} rows at validation fraction {val_frac} leave an empty split",
            rows.len()
        )));
    }
    let (val, train) = rows.split_at(n_val);
    Ok((data.subset(train), data.subset(val)))
}

/// Location of the channel manifest that accompanies a CSV file.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("channels.json")
}

/// Writes `id,label,f0..f{p−1}` with shortest round-trip floats, plus a
/// channel manifest sidecar when the dataset has channels.
pub fn save_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("id,label");
    for j in 0..data.features.cols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (r, row) in data.features.iter_rows().enumerate() {
        out.push_str(&format!("{},{}", data.identities[r], data.labels.get(r, 0) as u8));
        for v in row {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if !data.channels.is_empty() {
        let mp = manifest_path(path);
        fs::write(&mp, serde_json::to_string(&data.channels)?).map_err(|e| Error::io(&mp, e))?;
    }
    Ok(())
}

/// Reads a file written by [`save_csv`]. `m` becomes the largest id plus one.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(Error::Parse {
                line: 1,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with id,label".into(),
        });
    }
    let p = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{j}, found {name:?}"),
            });
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut identities = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != p + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", p + 2, rec.len()),
            });
        }
        let id: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad identity {:?}", &rec[0]),
        })?;
        let label: i64 = rec[1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label {:?}", &rec[1]),
        })?;
        if label != 0 && label != 1 {
            return Err(Error::Value {
                line,
                msg: format!("label must be 0 or 1, found {label}"),
            });
        }
        for field in rec.iter().skip(2) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Value {
                    line,
                    msg: format!("non-finite feature {field:?}"),
                });
            }
            features.push(v);
        }
        identities.push(id);
        labels.push(label as f64);
    }
    if identities.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let mp = manifest_path(path);
    let channels = if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        serde_json::from_str(&text)?
    } else {
        Vec::new()
    };
    let m = identities.iter().max().map_or(0, |&x| x + 1);
    let n = identities.len();
    LabeledDataset::new(Matrix::new(n, p, features)?, Matrix::column(labels), identities, m, channels)
}

//! Interaction and modality-feature loading, per-user splitting and BPR
//! triplet sampling.
//!
//! Interaction files are `user<TAB>item` per line. Feature files are
//! `item<TAB>v1,v2,...,vd` per line. Raw ids are mapped to dense indices in
//! first-seen order, so reloading the same file always yields the same
//! indexing.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MargoError, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

/// Maximum number of rejected draws before negative sampling gives up.
pub const MAX_NEGATIVE_REJECTIONS: usize = 1_000;

const CACHE_MAGIC: &[u8; 4] = b"MRGF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = MargoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(MargoError::InvalidArgument(format!(
                "unknown split `{other}`"
            ))),
        }
    }
}

/// Users, items and their interactions, optionally tagged with a split.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_lookup: HashMap<String, usize>,
    item_lookup: HashMap<String, usize>,
    interactions: Vec<(usize, usize)>,
    splits: Option<Vec<Split>>,
    // Per-user sorted item sets, filled by `split`.
    train_pos: Vec<Vec<usize>>,
    val_pos: Vec<Vec<usize>>,
    test_pos: Vec<Vec<usize>>,
    all_pos: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds a dataset from raw id pairs. Ids are indexed in first-seen
    /// order; duplicate pairs collapse to one interaction.
    pub fn from_raw_pairs<I, U, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (U, V)>,
        U: AsRef<str>,
        V: AsRef<str>,
    {
        let mut ds = InteractionDataset {
            user_ids: Vec::new(),
            item_ids: Vec::new(),
            user_lookup: HashMap::new(),
            item_lookup: HashMap::new(),
            interactions: Vec::new(),
            splits: None,
            train_pos: Vec::new(),
            val_pos: Vec::new(),
            test_pos: Vec::new(),
            all_pos: Vec::new(),
        };
        let mut seen = std::collections::HashSet::new();
        for (u, i) in pairs {
            let u = intern(&mut ds.user_ids, &mut ds.user_lookup, u.as_ref());
            let i = intern(&mut ds.item_ids, &mut ds.item_lookup, i.as_ref());
            if seen.insert((u, i)) {
                ds.interactions.push((u, i));
            }
        }
        ds.all_pos = per_user_sets(ds.user_count(), ds.interactions.iter().copied());
        ds
    }

    /// Builds a dataset over an explicit catalog. `pairs` index into
    /// `user_ids` / `item_ids`; duplicates collapse.
    pub fn from_indexed(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut ds = Self::from_raw_pairs(std::iter::empty::<(&str, &str)>());
        for id in &user_ids {
            if intern(&mut ds.user_ids, &mut ds.user_lookup, id) + 1 != ds.user_ids.len() {
                return Err(MargoError::InvalidArgument(format!("duplicate user id `{id}`")));
            }
        }
        for id in &item_ids {
            if intern(&mut ds.item_ids, &mut ds.item_lookup, id) + 1 != ds.item_ids.len() {
                return Err(MargoError::InvalidArgument(format!("duplicate item id `{id}`")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (u, i) in pairs {
            if u >= user_ids.len() || i >= item_ids.len() {
                return Err(MargoError::InvalidArgument(format!(
                    "interaction ({u}, {i}) out of range"
                )));
            }
            if seen.insert((u, i)) {
                ds.interactions.push((u, i));
            }
        }
        ds.all_pos = per_user_sets(ds.user_count(), ds.interactions.iter().copied());
        Ok(ds)
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    pub fn user_id(&self, u: usize) -> &str {
        &self.user_ids[u]
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.item_ids[i]
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_lookup.get(raw).copied()
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_lookup.get(raw).copied()
    }

    pub fn is_split(&self) -> bool {
        self.splits.is_some()
    }

    /// Split tag of every interaction, aligned with [`interactions`](Self::interactions).
    pub fn split_tags(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    /// Sorted positives of user `u` in one split. Empty before splitting.
    pub fn positives(&self, u: usize, split: Split) -> &[usize] {
        let sets = match split {
            Split::Train => &self.train_pos,
            Split::Val => &self.val_pos,
            Split::Test => &self.test_pos,
        };
        sets.get(u).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sorted positives of user `u` over all splits.
    pub fn all_positives(&self, u: usize) -> &[usize] {
        &self.all_pos[u]
    }

    /// Train interactions in dataset order.
    pub fn train_interactions(&self) -> Vec<(usize, usize)> {
        match &self.splits {
            Some(tags) => self
                .interactions
                .iter()
                .zip(tags)
                .filter(|(_, t)| **t == Split::Train)
                .map(|(p, _)| *p)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Per-user random split. Each user's interactions are shuffled and
    /// partitioned by rounding `ratios`; at least one interaction always
    /// stays in train.
    pub fn split(&self, ratios: (f64, f64, f64), seed: u64) -> Result<InteractionDataset> {
        let (r_train, r_val, r_test) = ratios;
        if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
            || (r_train + r_val + r_test - 1.0).abs() > 1e-9
        {
            return Err(MargoError::InvalidArgument(format!(
                "split ratios must be in [0,1] and sum to 1, got {ratios:?}"
            )));
        }
        let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); self.user_count()];
        for (idx, &(u, _)) in self.interactions.iter().enumerate() {
            by_user[u].push(idx);
        }
        let mut rng = seeded(seed, 0x5bd1_e995);
        let mut tags = vec![Split::Train; self.interactions.len()];
        for idxs in by_user.iter_mut() {
            idxs.shuffle(&mut rng);
            let (_, n_val, n_test) = split_counts(idxs.len(), r_val, r_test);
            for &idx in &idxs[..n_val] {
                tags[idx] = Split::Val;
            }
            for &idx in &idxs[n_val..n_val + n_test] {
                tags[idx] = Split::Test;
            }
        }
        Ok(self.with_tags(tags))
    }

    /// Attaches explicit split tags (one per interaction).
    pub fn with_split_tags(&self, tags: Vec<Split>) -> Result<InteractionDataset> {
        if tags.len() != self.interactions.len() {
            return Err(MargoError::Dimension(format!(
                "{} split tags for {} interactions",
                tags.len(),
                self.interactions.len()
            )));
        }
        let ds = self.with_tags(tags);
        if let Some(u) = (0..ds.user_count()).find(|&u| ds.train_pos[u].is_empty()) {
            return Err(MargoError::Degenerate(format!(
                "user `{}` has no training interaction",
                ds.user_ids[u]
            )));
        }
        Ok(ds)
    }

    fn with_tags(&self, tags: Vec<Split>) -> InteractionDataset {
        let pick = |want: Split| {
            per_user_sets(
                self.user_count(),
                self.interactions
                    .iter()
                    .zip(&tags)
                    .filter(move |(_, t)| **t == want)
                    .map(|(p, _)| *p),
            )
        };
        let mut ds = self.clone();
        ds.train_pos = pick(Split::Train);
        ds.val_pos = pick(Split::Val);
        ds.test_pos = pick(Split::Test);
        ds.splits = Some(tags);
        ds
    }

    /// Draws `count` triplets: train interactions chosen uniformly with
    /// replacement, each paired with a uniformly drawn negative.
    pub fn sample_triplets(&self, count: usize, seed: u64) -> Result<Vec<Triplet>> {
        let train = self.require_train()?;
        let sampler = NegativeSampler::new(self)?;
        let mut rng = seeded(seed, 0x7a1e_7a1e);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (user, pos_item) = train[rng.gen_range(0..train.len())];
            let neg_item = sampler.draw(user, &mut rng)?;
            out.push(Triplet {
                user,
                pos_item,
                neg_item,
            });
        }
        Ok(out)
    }

    /// One training epoch: every train interaction exactly once, in shuffled
    /// order, each with a freshly drawn negative.
    pub fn epoch_triplets(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Triplet>> {
        let mut train = self.require_train()?;
        train.shuffle(rng);
        let sampler = NegativeSampler::new(self)?;
        train
            .into_iter()
            .map(|(user, pos_item)| {
                Ok(Triplet {
                    user,
                    pos_item,
                    neg_item: sampler.draw(user, rng)?,
                })
            })
            .collect()
    }

    fn require_train(&self) -> Result<Vec<(usize, usize)>> {
        if !self.is_split() {
            return Err(MargoError::InvalidArgument(
                "dataset must be split before sampling triplets".into(),
            ));
        }
        let train = self.train_interactions();
        if train.is_empty() {
            return Err(MargoError::Degenerate("no training interactions".into()));
        }
        Ok(train)
    }

    /// Writes the interactions as `user<TAB>item` lines.
    pub fn write_interactions(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &(u, i) in &self.interactions {
            out.push_str(&self.user_ids[u]);
            out.push('\t');
            out.push_str(&self.item_ids[i]);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| MargoError::io(path, e))
    }
}

fn intern(ids: &mut Vec<String>, lookup: &mut HashMap<String, usize>, raw: &str) -> usize {
    if let Some(&idx) = lookup.get(raw) {
        return idx;
    }
    let idx = ids.len();
    ids.push(raw.to_owned());
    lookup.insert(raw.to_owned(), idx);
    idx
}

fn per_user_sets(users: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); users];
    for (u, i) in pairs {
        sets[u].push(i);
    }
    for s in &mut sets {
        s.sort_unstable();
        s.dedup();
    }
    sets
}

/// (train, val, test) counts for a user with `n` interactions.
pub fn split_counts(n: usize, r_val: f64, r_test: f64) -> (usize, usize, usize) {
    let mut n_val = (r_val * n as f64).round() as usize;
    let mut n_test = (r_test * n as f64).round() as usize;
    while n_val + n_test >= n && n_val + n_test > 0 {
        if n_test >= n_val && n_test > 0 {
            n_test -= 1;
        } else {
            n_val -= 1;
        }
    }
    (n - n_val - n_test, n_val, n_test)
}

/// A BPR training example: `user` prefers `pos_item` over `neg_item`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// Uniform negative sampler over items a user never interacted with.
///
/// Sparse users use rejection sampling; users whose positives cover more
/// than half the catalog draw straight from their complement, which is the
/// same distribution without the rejection tail.
struct NegativeSampler<'a> {
    ds: &'a InteractionDataset,
    complements: HashMap<usize, Vec<usize>>,
}

impl<'a> NegativeSampler<'a> {
    fn new(ds: &'a InteractionDataset) -> Result<Self> {
        let n = ds.item_count();
        let mut complements = HashMap::new();
        for u in 0..ds.user_count() {
            let pos = ds.all_positives(u);
            if pos.len() >= n {
                return Err(MargoError::Degenerate(format!(
                    "user `{}` interacted with every item; no negative exists",
                    ds.user_id(u)
                )));
            }
            if pos.len() * 2 > n {
                let comp = (0..n).filter(|i| pos.binary_search(i).is_err()).collect();
                complements.insert(u, comp);
            }
        }
        Ok(NegativeSampler { ds, complements })
    }

    fn draw(&self, user: usize, rng: &mut impl Rng) -> Result<usize> {
        if let Some(comp) = self.complements.get(&user) {
            return Ok(comp[rng.gen_range(0..comp.len())]);
        }
        let pos = self.ds.all_positives(user);
        let n = self.ds.item_count();
        for _ in 0..MAX_NEGATIVE_REJECTIONS {
            let cand = rng.gen_range(0..n);
            if pos.binary_search(&cand).is_err() {
                return Ok(cand);
            }
        }
        Err(MargoError::Degenerate(format!(
            "negative sampling for user `{}` exceeded {MAX_NEGATIVE_REJECTIONS} rejections",
            self.ds.user_id(user)
        )))
    }
}

/// Loads a `user<TAB>item` interaction file.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MargoError::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (u, i) = line.split_once('\t').ok_or_else(|| MargoError::Parse {
            path: path.to_owned(),
            line: lineno + 1,
            message: "expected `user<TAB>item`".into(),
        })?;
        let (u, i) = (u.trim(), i.trim());
        if u.is_empty() || i.is_empty() || i.contains('\t') {
            return Err(MargoError::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                message: "expected exactly two non-empty tab-separated fields".into(),
            });
        }
        pairs.push((u, i));
    }
    if pairs.is_empty() {
        return Err(MargoError::EmptyFile(path.to_owned()));
    }
    Ok(InteractionDataset::from_raw_pairs(pairs))
}

/// Feature matrix of one modality, one row per dataset item.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatureTable {
    pub modality_id: usize,
    features: Matrix,
}

impl ModalityFeatureTable {
    pub fn new(modality_id: usize, features: Matrix) -> Result<Self> {
        if !features.is_finite() {
            return Err(MargoError::NonFinite(format!(
                "modality {modality_id} features contain NaN or Inf"
            )));
        }
        Ok(ModalityFeatureTable {
            modality_id,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn item_count(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn row(&self, item: usize) -> &[f64] {
        self.features.row(item)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.features
    }

    /// Writes the table as `item<TAB>v1,...,vd` lines using `item_ids` for
    /// row names. Values use shortest round-trip formatting.
    pub fn write_tsv(&self, path: &Path, item_ids: &[String]) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| MargoError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| MargoError::io(path, e);
        for (item, id) in item_ids.iter().enumerate() {
            write!(w, "{id}\t").map_err(io)?;
            for (j, v) in self.row(item).iter().enumerate() {
                if j > 0 {
                    w.write_all(b",").map_err(io)?;
                }
                write!(w, "{v}").map_err(io)?;
            }
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Binary cache: `MRGF`, u32 LE item count, u32 LE dim, then row-major
    /// LE f32 values.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.features.as_slice().len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.item_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &v in self.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8], modality_id: usize) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
            return Err(MargoError::Format("missing MRGF header".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != rows * cols * 4 {
            return Err(MargoError::Format(format!(
                "feature cache body is {} bytes, expected {}",
                body.len(),
                rows * cols * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(modality_id, Matrix::from_vec(rows, cols, data))
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| MargoError::io(path, e))
    }

    /// Reads a cache file and checks it covers `expected_items` rows.
    pub fn read_cache(path: &Path, modality_id: usize, expected_items: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MargoError::io(path, e))?;
        let table = Self::from_cache_bytes(&bytes, modality_id)?;
        if table.item_count() != expected_items {
            return Err(MargoError::Dimension(format!(
                "feature cache has {} rows, dataset has {expected_items} items",
                table.item_count()
            )));
        }
        Ok(table)
    }
}

/// Loads an `item<TAB>v1,...,vd` feature file, ordering rows by the
/// dataset's dense item index. Items absent from the dataset are ignored.
pub fn load_modality_features(
    path: impl AsRef<Path>,
    modality_id: usize,
    dataset: &InteractionDataset,
) -> Result<ModalityFeatureTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MargoError::io(path, e))?;
    let n = dataset.item_count();
    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    let parse_err = |line: usize, message: String| MargoError::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (item, values) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "expected `item<TAB>v1,...,vd`".into()))?;
        let mut row = Vec::new();
        for field in values.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(MargoError::NonFinite(format!(
                    "{}: line {lineno}: item `{item}`",
                    path.display()
                )));
            }
            row.push(v);
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(MargoError::Dimension(format!(
                    "{}: line {lineno} has {} values, earlier rows have {d}",
                    path.display(),
                    row.len()
                )))
            }
            _ => {}
        }
        if let Some(idx) = dataset.item_index(item.trim()) {
            if rows[idx].is_some() {
                return Err(parse_err(lineno, format!("duplicate row for item `{item}`")));
            }
            rows[idx] = Some(row);
        }
    }
    let dim = dim.ok_or_else(|| MargoError::EmptyFile(path.to_owned()))?;
    let mut data = Vec::with_capacity(n * dim);
    for (idx, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| MargoError::IncompleteModality {
            modality: modality_id,
            item: dataset.item_id(idx).to_owned(),
        })?;
        data.extend(row);
    }
    ModalityFeatureTable::new(modality_id, Matrix::from_vec(n, dim, data))
}

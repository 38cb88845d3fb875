//! Implicit-feedback interaction data: loading, splitting, popularity
//! statistics, strata, batch sampling and the batch-inclusion probability.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeded_rng;

/// One observed user–item pair, in contiguous index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Interaction { user, item }
    }
}

/// Bijection between raw ids seen at load time and contiguous indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    index: HashMap<String, u32>,
    raw: Vec<String>,
}

impl IdMap {
    fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len() as u32;
        self.index.insert(raw.to_owned(), i);
        self.raw.push(raw.to_owned());
        i
    }

    /// Identity map `"0".."n-1"`, used for generated data.
    pub fn identity(n: usize) -> Self {
        let mut map = IdMap::default();
        for i in 0..n {
            map.intern(&i.to_string());
        }
        map
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn index_of(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw_of(&self, index: u32) -> Option<&str> {
        self.raw.get(index as usize).map(String::as_str)
    }

    /// Writes the two-column sidecar (`raw id<TAB>index`).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.raw.len() * 12);
        for (i, raw) in self.raw.iter().enumerate() {
            out.push_str(raw);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = IdMap::default();
        for (n, line) in text.lines().enumerate() {
            let malformed = |reason: &str| Error::Malformed {
                path: path.to_owned(),
                line: n + 1,
                reason: reason.to_owned(),
            };
            let (raw, idx) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected two fields"))?;
            let idx: usize = idx.parse().map_err(|_| malformed("bad index"))?;
            if idx != map.len() {
                return Err(malformed("indices must be contiguous"));
            }
            if map.index_of(raw).is_some() {
                return Err(malformed("duplicate raw id"));
            }
            map.intern(raw);
        }
        Ok(map)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: IdMap,
    pub items: IdMap,
}

/// Deduplicated interaction list over a shared id space.
///
/// Split views (train/val/test) share the parent's id maps and counts; only
/// the loaded parent is guaranteed nonempty.
#[derive(Clone, Debug)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    edges: Vec<Interaction>,
    ids: Arc<IdMaps>,
}

impl InteractionSet {
    /// Builds a set from index pairs, dropping exact duplicates (first
    /// occurrence wins). Fails on out-of-range indices or an empty result.
    pub fn from_edges(n_users: usize, n_items: usize, edges: Vec<Interaction>) -> Result<Self> {
        let ids = IdMaps {
            users: IdMap::identity(n_users),
            items: IdMap::identity(n_items),
        };
        Self::with_ids(n_users, n_items, edges, Arc::new(ids))
    }

    fn with_ids(
        n_users: usize,
        n_items: usize,
        edges: Vec<Interaction>,
        ids: Arc<IdMaps>,
    ) -> Result<Self> {
        if let Some(e) = edges
            .iter()
            .find(|e| e.user as usize >= n_users || e.item as usize >= n_items)
        {
            return Err(Error::InvalidArgument(format!(
                "interaction ({}, {}) out of range for {} users x {} items",
                e.user, e.item, n_users, n_items
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let edges: Vec<_> = edges.into_iter().filter(|e| seen.insert(*e)).collect();
        if edges.is_empty() {
            return Err(Error::ZeroInteractions);
        }
        Ok(InteractionSet {
            n_users,
            n_items,
            edges,
            ids,
        })
    }

    pub(crate) fn view(&self, edges: Vec<Interaction>) -> Self {
        InteractionSet {
            n_users: self.n_users,
            n_items: self.n_items,
            edges,
            ids: Arc::clone(&self.ids),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn edges(&self) -> &[Interaction] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn ids(&self) -> &IdMaps {
        &self.ids
    }

    /// Items of each user, sorted ascending.
    pub fn user_items(&self) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.n_users];
        for e in &self.edges {
            lists[e.user as usize].push(e.item);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }
}

/// Field delimiter of an interaction file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    /// Any run of ASCII whitespace.
    Whitespace,
    Literal(String),
}

impl Delimiter {
    /// Parses `tab`, `space`/`whitespace`, `comma`, or a literal string such as `::`.
    pub fn parse(s: &str) -> Self {
        match s {
            "tab" | "\\t" | "\t" => Delimiter::Tab,
            "space" | "whitespace" | " " => Delimiter::Whitespace,
            "comma" => Delimiter::Literal(",".into()),
            other => Delimiter::Literal(other.to_owned()),
        }
    }

    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').collect(),
            Delimiter::Whitespace => line.split_ascii_whitespace().collect(),
            Delimiter::Literal(d) => line.split(d.as_str()).collect(),
        }
    }
}

impl fmt::Display for Delimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delimiter::Tab => f.write_str("tab"),
            Delimiter::Whitespace => f.write_str("whitespace"),
            Delimiter::Literal(d) => f.write_str(d),
        }
    }
}

/// How to read an interaction file.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadFormat {
    pub delimiter: Delimiter,
    /// When set, the third field is parsed as a rating and lines rated below
    /// this threshold are dropped (MovieLens-style explicit data).
    pub min_rating: Option<f64>,
}

impl Default for LoadFormat {
    fn default() -> Self {
        LoadFormat {
            delimiter: Delimiter::Tab,
            min_rating: None,
        }
    }
}

/// Reads `user<delim>item[<delim>...]` lines into a deduplicated set.
/// Empty lines and lines starting with `#` are skipped.
pub fn load_interactions(path: &Path, format: &LoadFormat) -> Result<InteractionSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut ids = IdMaps::default();
    let mut edges = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            path: path.to_owned(),
            line: n + 1,
            reason,
        };
        let fields = format.delimiter.fields(line);
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed(format!(
                "expected at least two '{}'-delimited fields",
                format.delimiter
            )));
        }
        if let Some(min) = format.min_rating {
            let rating: f64 = fields
                .get(2)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| malformed("missing or unparsable rating field".into()))?;
            if rating < min {
                continue;
            }
        }
        let user = ids.users.intern(fields[0].trim());
        let item = ids.items.intern(fields[1].trim());
        edges.push(Interaction { user, item });
    }
    let (n_users, n_items) = (ids.users.len(), ids.items.len());
    InteractionSet::with_ids(n_users, n_items, edges, Arc::new(ids))
}

/// Writes interactions as `user<TAB>item` lines using the raw ids.
pub fn write_interactions(set: &InteractionSet, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(set.len() * 12);
    for e in set.edges() {
        let u = set.ids.users.raw_of(e.user).unwrap_or_default();
        let i = set.ids.items.raw_of(e.item).unwrap_or_default();
        writeln!(out, "{u}\t{i}").expect("write to Vec");
    }
    crate::io::write_atomic(path, &out)
}

/// Train/validation/test views of one interaction set.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: InteractionSet,
    pub val: InteractionSet,
    pub test: InteractionSet,
}

/// Uniform random partition of the edges.
///
/// Sizes are `floor(r_train * |E|)`, `floor(r_val * |E|)` and the remainder
/// goes to test.
pub fn split(set: &InteractionSet, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be >= 0, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    let n = set.len();
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let count = |r: f64| (((r * n as f64) + 1e-9).floor() as usize).min(n);
    let n_train = count(ratios[0]);
    let n_val = count(ratios[1]).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 0x5e11));
    let pick =
        |range: std::ops::Range<usize>| range.map(|k| set.edges[order[k]]).collect::<Vec<_>>();
    Ok(Split {
        train: set.view(pick(0..n_train)),
        val: set.view(pick(n_train..n_train + n_val)),
        test: set.view(pick(n_train + n_val..n)),
    })
}

/// Degree statistics of the train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopularityIndex {
    /// `d_i`: train interactions per item.
    pub item_degree: Vec<u32>,
    /// `N(u)`: train interactions per user.
    pub user_degree: Vec<u32>,
}

pub fn item_popularity(train: &InteractionSet) -> PopularityIndex {
    let mut item_degree = vec![0u32; train.n_items];
    let mut user_degree = vec![0u32; train.n_users];
    for e in &train.edges {
        item_degree[e.item as usize] += 1;
        user_degree[e.user as usize] += 1;
    }
    PopularityIndex {
        item_degree,
        user_degree,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stratum {
    Popular,
    Neutral,
    Unpopular,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Popular, Stratum::Neutral, Stratum::Unpopular];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Popular => "popular",
            Stratum::Neutral => "neutral",
            Stratum::Unpopular => "unpopular",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrataAssignment {
    labels: Vec<Stratum>,
}

impl StrataAssignment {
    pub fn from_labels(labels: Vec<Stratum>) -> Self {
        StrataAssignment { labels }
    }

    pub fn label(&self, item: u32) -> Stratum {
        self.labels[item as usize]
    }

    pub fn labels(&self) -> &[Stratum] {
        &self.labels
    }

    pub fn count(&self, stratum: Stratum) -> usize {
        self.labels.iter().filter(|&&s| s == stratum).count()
    }
}

/// Labels the top 5% of items (by train degree) popular, the next slice up
/// to 20% cumulative neutral, and the rest unpopular.
///
/// Cutoffs are `ceil(0.05 m)` and `ceil(0.20 m)`; degree ties are broken by
/// ascending item index.
pub fn stratify(pop: &PopularityIndex) -> StrataAssignment {
    let m = pop.item_degree.len();
    let n_popular = (5 * m).div_ceil(100);
    let n_top20 = m.div_ceil(5);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pop.item_degree[b].cmp(&pop.item_degree[a]).then(a.cmp(&b)));
    let mut labels = vec![Stratum::Unpopular; m];
    for (rank, &item) in order.iter().enumerate() {
        labels[item] = if rank < n_popular {
            Stratum::Popular
        } else if rank < n_top20 {
            Stratum::Neutral
        } else {
            Stratum::Unpopular
        };
    }
    StrataAssignment { labels }
}

/// Positive pairs of one mini-batch plus `gamma` sampled negatives per positive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub positives: Vec<Interaction>,
    /// Flattened row-major `positives.len() x gamma`.
    pub negatives: Vec<u32>,
    pub gamma: usize,
}

impl Batch {
    pub fn new(positives: Vec<Interaction>, negatives: Vec<u32>, gamma: usize) -> Self {
        debug_assert_eq!(negatives.len(), positives.len() * gamma);
        Batch {
            positives,
            negatives,
            gamma,
        }
    }

    pub fn negatives_of(&self, k: usize) -> &[u32] {
        &self.negatives[k * self.gamma..(k + 1) * self.gamma]
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Cuts shuffled passes over the train edges into consecutive batches.
///
/// Positives are drawn without replacement within an epoch; negatives are
/// drawn uniformly with replacement from all items, so false negatives are
/// possible.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<u32>,
    cursor: usize,
    batch_size: usize,
    gamma: usize,
}

impl BatchSampler {
    pub fn new(n_edges: usize, batch_size: usize, gamma: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(BatchSampler {
            order: (0..n_edges as u32).collect(),
            cursor: n_edges,
            batch_size,
            gamma,
        })
    }

    /// Reshuffles the edge order for a new epoch.
    pub fn start_epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    /// Number of batches in one epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Next batch of the current epoch, or `None` once the pass is complete.
    pub fn next_batch<R: Rng + ?Sized>(
        &mut self,
        train: &InteractionSet,
        rng: &mut R,
    ) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let positives: Vec<_> = self.order[self.cursor..end]
            .iter()
            .map(|&k| train.edges[k as usize])
            .collect();
        self.cursor = end;
        let n_items = train.n_items as u32;
        let negatives = (0..positives.len() * self.gamma)
            .map(|_| rng.random_range(0..n_items))
            .collect();
        Some(Batch::new(positives, negatives, self.gamma))
    }
}

/// Draws one batch as the first batch of a fresh shuffled epoch.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &InteractionSet,
    batch_size: usize,
    gamma: usize,
    rng: &mut R,
) -> Result<Batch> {
    let mut sampler = BatchSampler::new(train.len(), batch_size, gamma)?;
    sampler.start_epoch(rng);
    Ok(sampler.next_batch(train, rng).unwrap_or_default())
}

/// `P(i in B) = 1 - (1 - |B|/|E|)^{d_i}`.
pub fn batch_inclusion_probability(degree: u64, batch_size: u64, total_edges: u64) -> Result<f64> {
    if total_edges == 0 {
        return Err(Error::InvalidArgument("total_edges must be > 0".into()));
    }
    if batch_size > total_edges {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} exceeds total_edges {total_edges}"
        )));
    }
    Ok(inclusion_from_fraction(
        degree,
        batch_size as f64 / total_edges as f64,
    ))
}

/// [`batch_inclusion_probability`] with the batch fraction given directly.
pub fn inclusion_from_fraction(degree: u64, fraction: f64) -> f64 {
    if degree == 0 || fraction <= 0.0 {
        return 0.0;
    }
    if fraction >= 1.0 {
        return 1.0;
    }
    -f64::exp_m1(degree as f64 * f64::ln_1p(-fraction))
}

/// Union probability of appearing as a positive or as one of the
/// `gamma * |B|` uniformly drawn negatives:
/// `1 - (1 - |B|/|E|)^{d_i} (1 - gamma |B| / |I|)`.
pub fn negsample_inclusion_probability(
    degree: u64,
    batch_size: u64,
    total_edges: u64,
    gamma: u64,
    n_items: u64,
) -> Result<f64> {
    if n_items == 0 {
        return Err(Error::InvalidArgument("n_items must be > 0".into()));
    }
    let positive = batch_inclusion_probability(degree, batch_size, total_edges)?;
    if gamma == 0 {
        return Ok(positive);
    }
    let neg_fraction = gamma as f64 * batch_size as f64 / n_items as f64;
    if neg_fraction > 1.0 {
        log::warn!(
            "gamma*|B| = {} exceeds |I| = {n_items}; negative-inclusion factor clamped to 0",
            gamma * batch_size
        );
    }
    let miss_negative = (1.0 - neg_fraction).max(0.0);
    Ok(1.0 - (1.0 - positive) * miss_negative)
}

/// Power-law synthetic interactions: items drawn with probability
/// proportional to `(index + 1)^(-exponent)`, users uniformly, duplicate
/// pairs rejected until `n_edges` distinct pairs exist.
pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    n_edges: usize,
    exponent: f64,
    seed: u64,
) -> Result<InteractionSet> {
    let capacity = n_users as u128 * n_items as u128;
    if n_users == 0 || n_items == 0 || n_edges == 0 || n_edges as u128 > capacity {
        return Err(Error::Infeasible(format!(
            "{n_edges} edges over {n_users} users x {n_items} items"
        )));
    }
    if !exponent.is_finite() || exponent < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "exponent must be >= 0, got {exponent}"
        )));
    }
    let weights: Vec<f64> = (1..=n_items).map(|r| (r as f64).powf(-exponent)).collect();
    let item_dist =
        WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seeded_rng(seed, 0x5947);
    let mut seen = HashSet::with_capacity(n_edges);
    let mut edges = Vec::with_capacity(n_edges);
    let budget = 64 * n_edges + 1024;
    let mut attempts = 0usize;
    while edges.len() < n_edges && attempts < budget {
        attempts += 1;
        let e = Interaction::new(
            rng.random_range(0..n_users as u32),
            item_dist.sample(&mut rng) as u32,
        );
        if seen.insert(e) {
            edges.push(e);
        }
    }
    if edges.len() < n_edges {
        // Near-saturated request: finish with a uniform draw over the
        // remaining free pairs.
        let mut free: Vec<Interaction> = (0..n_users as u32)
            .flat_map(|u| (0..n_items as u32).map(move |i| Interaction::new(u, i)))
            .filter(|e| !seen.contains(e))
            .collect();
        free.shuffle(&mut rng);
        edges.extend(free.into_iter().take(n_edges - edges.len()));
    }
    InteractionSet::from_edges(n_users, n_items, edges)
}

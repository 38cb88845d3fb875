//! NDCG@K, overall and split by item popularity stratum.
//!
//! Per user, `K = min(K_cap, N(u))` where `N(u)` is the number of relevant
//! (held-out) items. The stratified parts reuse the overall ranked list and
//! IDCG and only zero the relevance of items outside the stratum, so they sum
//! to the overall value.

use rayon::prelude::*;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::interactions::{InteractionSet, Split, StrataAssignment, Stratum};
use crate::io::{cell, cell_f64, fmt_f64};
use crate::linalg::{self, matmul_nt};

/// Scores fetched per gemm block, in matrix entries.
const BLOCK_ENTRIES: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Similarity {
    Dot,
    Cosine,
}

impl Similarity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dot" => Some(Similarity::Dot),
            "cosine" | "cos" => Some(Similarity::Cosine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        }
    }
}

/// Which ranked positions count toward DCG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Window {
    /// Positions `1..=min(K_cap, N(u))` for both DCG and IDCG.
    #[default]
    Literal,
    /// DCG over positions `1..=K_cap`; IDCG over `min(K_cap, N(u))`.
    Retrieval,
}

impl Window {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(Window::Literal),
            "retrieval" => Some(Window::Retrieval),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Literal => "literal",
            Window::Retrieval => "retrieval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScorerConfig {
    pub similarity: Similarity,
    pub k_cap: usize,
    pub window: Window,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            similarity: Similarity::Dot,
            k_cap: 20,
            window: Window::Literal,
        }
    }
}

impl ScorerConfig {
    pub fn new(similarity: Similarity) -> Self {
        ScorerConfig {
            similarity,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_cap < 1 {
            return Err(Error::config("eval_k", "must be >= 1"));
        }
        Ok(())
    }

    /// Length of the ranked list needed for a user with `n_relevant` items.
    fn list_len(&self, n_relevant: usize) -> usize {
        match self.window {
            Window::Literal => self.k_cap.min(n_relevant),
            Window::Retrieval => self.k_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ndcg_overall: f64,
    pub ndcg_popular: f64,
    pub ndcg_neutral: f64,
    pub ndcg_unpopular: f64,
    /// `ndcg_unpopular / ndcg_popular`; NaN when the popular part is 0.
    pub debias_ratio: f64,
    pub n_users_evaluated: usize,
    /// Largest per-user `|popular + neutral + unpopular - overall|`.
    pub max_decomposition_residual: f64,
}

impl MetricsReport {
    pub fn stratum(&self, s: Stratum) -> f64 {
        match s {
            Stratum::Popular => self.ndcg_popular,
            Stratum::Neutral => self.ndcg_neutral,
            Stratum::Unpopular => self.ndcg_unpopular,
        }
    }

    /// Popular minus unpopular NDCG.
    pub fn popularity_gap(&self) -> f64 {
        self.ndcg_popular - self.ndcg_unpopular
    }
}

/// Per-user result of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserNdcg {
    pub user: u32,
    pub overall: f64,
    pub strata: [f64; 3],
}

/// Top `k` non-excluded items by descending score, ties by ascending index.
/// `exclude` must be sorted ascending.
pub fn top_k(scores: &[f64], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    if k == 0 {
        return Vec::new();
    }
    let mut ex = exclude.iter().peekable();
    for (j, &s) in scores.iter().enumerate() {
        let j = j as u32;
        while ex.next_if(|&&e| e < j).is_some() {}
        if ex.next_if_eq(&&j).is_some() {
            continue;
        }
        // Scanning by ascending index means an equal score never displaces.
        if best.len() == k && s <= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(b, _)| b >= s);
        best.insert(pos, (s, j));
        best.truncate(k);
    }
    best.into_iter().map(|(_, j)| j).collect()
}

fn unit_rows(table: &EmbeddingTable, entity: &'static str) -> Result<EmbeddingTable> {
    table.normalized(entity)
}

/// Ranks all items for one user and returns the top `k`.
pub fn rank_items(
    user: u32,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    similarity: Similarity,
    exclude: &[u32],
    k: usize,
) -> Result<Vec<u32>> {
    let u = users.row(user as usize);
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "user row {user} is not finite"
        )));
    }
    let mut sorted_ex = exclude.to_vec();
    sorted_ex.sort_unstable();
    sorted_ex.dedup();
    if k > items.rows() - sorted_ex.len().min(items.rows()) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} candidate items",
            items.rows() - sorted_ex.len()
        )));
    }
    let scores: Vec<f64> = match similarity {
        Similarity::Dot => (0..items.rows())
            .map(|j| linalg::dot(u, items.row(j)))
            .collect(),
        Similarity::Cosine => {
            let nu = linalg::norm(u);
            if nu == 0.0 {
                return Err(Error::ZeroRow {
                    entity: "user",
                    index: user as usize,
                });
            }
            let unit = unit_rows(items, "item")?;
            (0..items.rows())
                .map(|j| linalg::dot(u, unit.row(j)) / nu)
                .collect()
        }
    };
    Ok(top_k(&scores, &sorted_ex, k))
}

fn discount(pos: usize) -> f64 {
    // pos is 0-based; 1 / log2(pos + 2)
    1.0 / ((pos + 2) as f64).log2()
}

fn idcg(n: usize) -> f64 {
    (0..n).map(discount).sum()
}

fn is_relevant(relevant: &[u32], item: u32) -> bool {
    relevant.binary_search(&item).is_ok()
}

/// Per-user window `K` and the DCG cutoff for `ranked`.
fn window(n_relevant: usize, k_cap: usize, window: Window) -> (usize, usize) {
    let k = k_cap.min(n_relevant);
    let cutoff = match window {
        Window::Literal => k,
        Window::Retrieval => k_cap,
    };
    (k, cutoff)
}

/// NDCG@K for one user. `relevant` must be sorted and nonempty.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32], k_cap: usize, win: Window) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let (k, cutoff) = window(relevant.len(), k_cap, win);
    let dcg: f64 = ranked
        .iter()
        .take(cutoff)
        .enumerate()
        .filter(|(_, &j)| is_relevant(relevant, j))
        .map(|(p, _)| discount(p))
        .sum();
    dcg / idcg(k)
}

/// The (popular, neutral, unpopular) parts of [`ndcg_at_k`].
pub fn stratified_ndcg(
    ranked: &[u32],
    relevant: &[u32],
    strata: &StrataAssignment,
    k_cap: usize,
    win: Window,
) -> [f64; 3] {
    let mut parts = [0.0; 3];
    if relevant.is_empty() {
        return parts;
    }
    let (k, cutoff) = window(relevant.len(), k_cap, win);
    for (p, &j) in ranked.iter().take(cutoff).enumerate() {
        if is_relevant(relevant, j) {
            parts[strata.label(j).index()] += discount(p);
        }
    }
    let ideal = idcg(k);
    parts.map(|v| v / ideal)
}

/// Per-user relevant items and candidate exclusions, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalTarget {
    pub relevant: Vec<Vec<u32>>,
    pub exclude: Vec<Vec<u32>>,
}

impl EvalTarget {
    /// Items of `held_out` are relevant; items in any of `seen` are removed
    /// from the candidates.
    pub fn new(held_out: &InteractionSet, seen: &[&InteractionSet]) -> Self {
        let relevant = sorted_lists(held_out.user_items());
        let mut exclude = vec![Vec::new(); held_out.n_users()];
        for s in seen {
            for e in s.edges() {
                exclude[e.user as usize].push(e.item);
            }
        }
        EvalTarget {
            relevant,
            exclude: sorted_lists(exclude),
        }
    }

    /// Test target with train and validation interactions excluded.
    pub fn test(split: &Split) -> Self {
        EvalTarget::new(&split.test, &[&split.train, &split.val])
    }

    /// Validation target with train interactions excluded.
    pub fn validation(split: &Split) -> Self {
        EvalTarget::new(&split.val, &[&split.train])
    }

    pub fn n_evaluable(&self) -> usize {
        self.relevant.iter().filter(|r| !r.is_empty()).count()
    }
}

fn sorted_lists(mut lists: Vec<Vec<u32>>) -> Vec<Vec<u32>> {
    for l in &mut lists {
        l.sort_unstable();
        l.dedup();
    }
    lists
}

/// Per-user NDCG for every user with a nonempty relevant set, in user order.
pub fn evaluate_users(
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    target: &EvalTarget,
    strata: &StrataAssignment,
    scorer: &ScorerConfig,
) -> Result<Vec<UserNdcg>> {
    scorer.validate()?;
    if users.dim() != items.dim()
        || target.relevant.len() != users.rows()
        || strata.labels().len() != items.rows()
    {
        return Err(Error::InvalidArgument(
            "model, target and strata sizes disagree".into(),
        ));
    }
    let evaluable: Vec<u32> = (0..users.rows() as u32)
        .filter(|&u| !target.relevant[u as usize].is_empty())
        .collect();
    if evaluable.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let (user_rows, item_rows) = match scorer.similarity {
        Similarity::Dot => (users.clone(), items.clone()),
        Similarity::Cosine => {
            let mut u = users.clone();
            for &r in &evaluable {
                let n = linalg::norm(users.row(r as usize));
                if n == 0.0 {
                    return Err(Error::ZeroRow {
                        entity: "user",
                        index: r as usize,
                    });
                }
                u.scale_row(r as usize, 1.0 / n);
            }
            (u, unit_rows(items, "item")?)
        }
    };
    let n_items = items.rows();
    let dim = items.dim();
    let block = (BLOCK_ENTRIES / n_items.max(1)).max(1);
    let blocks: Vec<&[u32]> = evaluable.chunks(block).collect();
    let results: Vec<Vec<UserNdcg>> = blocks
        .par_iter()
        .map(|chunk| {
            let mut a = Vec::with_capacity(chunk.len() * dim);
            for &u in chunk.iter() {
                a.extend_from_slice(user_rows.row(u as usize));
            }
            let scores = matmul_nt(&a, chunk.len(), dim, item_rows.values(), n_items);
            chunk
                .iter()
                .enumerate()
                .map(|(r, &u)| {
                    let rel = &target.relevant[u as usize];
                    let ranked = top_k(
                        &scores[r * n_items..(r + 1) * n_items],
                        &target.exclude[u as usize],
                        scorer.list_len(rel.len()),
                    );
                    UserNdcg {
                        user: u,
                        overall: ndcg_at_k(&ranked, rel, scorer.k_cap, scorer.window),
                        strata: stratified_ndcg(&ranked, rel, strata, scorer.k_cap, scorer.window),
                    }
                })
                .collect()
        })
        .collect();
    Ok(results.into_iter().flatten().collect())
}

/// Means over the evaluated users, summed in user order.
pub fn summarize(per_user: &[UserNdcg]) -> Result<MetricsReport> {
    if per_user.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let n = per_user.len() as f64;
    let mut sums = [0.0; 4];
    let mut residual: f64 = 0.0;
    for r in per_user {
        sums[0] += r.overall;
        for s in 0..3 {
            sums[s + 1] += r.strata[s];
        }
        residual = residual.max((r.strata.iter().sum::<f64>() - r.overall).abs());
    }
    let [overall, popular, neutral, unpopular] = sums.map(|s| s / n);
    Ok(MetricsReport {
        ndcg_overall: overall,
        ndcg_popular: popular,
        ndcg_neutral: neutral,
        ndcg_unpopular: unpopular,
        debias_ratio: if popular > 0.0 {
            unpopular / popular
        } else {
            f64::NAN
        },
        n_users_evaluated: per_user.len(),
        max_decomposition_residual: residual,
    })
}

pub fn evaluate(
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    target: &EvalTarget,
    strata: &StrataAssignment,
    scorer: &ScorerConfig,
) -> Result<MetricsReport> {
    summarize(&evaluate_users(users, items, target, strata, scorer)?)
}

pub const METRICS_HEADER: [&str; 12] = [
    "run",
    "scorer",
    "window",
    "k_cap",
    "ndcg_overall",
    "ndcg_popular",
    "ndcg_neutral",
    "ndcg_unpopular",
    "debias_ratio",
    "n_users_evaluated",
    "max_decomposition_residual",
    "split",
];

/// One CSV row per (run, scorer, split).
pub fn metrics_row(
    run: &str,
    split: &str,
    scorer: &ScorerConfig,
    m: &MetricsReport,
) -> Vec<String> {
    vec![
        run.to_string(),
        scorer.similarity.name().to_string(),
        scorer.window.name().to_string(),
        scorer.k_cap.to_string(),
        fmt_f64(m.ndcg_overall),
        fmt_f64(m.ndcg_popular),
        fmt_f64(m.ndcg_neutral),
        fmt_f64(m.ndcg_unpopular),
        fmt_f64(m.debias_ratio),
        m.n_users_evaluated.to_string(),
        fmt_f64(m.max_decomposition_residual),
        split.to_string(),
    ]
}

/// Inverse of [`metrics_row`]: `(run, split, scorer, report)`.
pub fn parse_metrics_row(row: &[String]) -> Result<(String, String, ScorerConfig, MetricsReport)> {
    let similarity =
        Similarity::parse(&row[1]).ok_or_else(|| Error::Csv(format!("bad scorer {:?}", row[1])))?;
    let window =
        Window::parse(&row[2]).ok_or_else(|| Error::Csv(format!("bad window {:?}", row[2])))?;
    let scorer = ScorerConfig {
        similarity,
        k_cap: cell(row, 3, "k_cap")?,
        window,
    };
    let report = MetricsReport {
        ndcg_overall: cell_f64(row, 4, "ndcg_overall")?,
        ndcg_popular: cell_f64(row, 5, "ndcg_popular")?,
        ndcg_neutral: cell_f64(row, 6, "ndcg_neutral")?,
        ndcg_unpopular: cell_f64(row, 7, "ndcg_unpopular")?,
        debias_ratio: cell_f64(row, 8, "debias_ratio")?,
        n_users_evaluated: cell(row, 9, "n_users_evaluated")?,
        max_decomposition_residual: cell_f64(row, 10, "max_decomposition_residual")?,
    };
    Ok((row[0].clone(), row[11].clone(), scorer, report))
}

//! Ranking losses with analytic gradients, plus weight decay.
//!
//! Every loss works on the rows touched by one [`Batch`]: the distinct users
//! and items are gathered into small local matrices, the loss and its
//! gradient are computed there, and the result is returned as a sparse
//! [`GradientBuffer`] keyed by entity id (first-appearance order, so the
//! reduction order is fixed for a given batch).
//!
//! BPR scores with the raw dot product. SSM, DirectAU and MAWU work on
//! L2-normalized rows; their gradients are pulled back through the
//! normalization, `d/dx = (g - (g . x̂) x̂) / ||x||`.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::interactions::Batch;
use crate::linalg::{self, dot, matmul_nn, matmul_nt};

/// Clamp applied to cosines before `arccos`.
const MAWU_COS_CLAMP: f64 = 1.0 - 1e-12;
/// Within this distance of |cos| = 1 the arccos derivative is treated as zero.
const MAWU_DERIV_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Bpr,
    Ssm,
    DirectAu,
    Mawu,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Bpr,
        LossKind::Ssm,
        LossKind::DirectAu,
        LossKind::Mawu,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpr" => Some(LossKind::Bpr),
            "ssm" => Some(LossKind::Ssm),
            "directau" => Some(LossKind::DirectAu),
            "mawu" => Some(LossKind::Mawu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bpr => "bpr",
            LossKind::Ssm => "ssm",
            LossKind::DirectAu => "directau",
            LossKind::Mawu => "mawu",
        }
    }

    /// Whether the loss value is invariant to positive per-row rescaling.
    pub fn is_angle_based(self) -> bool {
        !matches!(self, LossKind::Bpr)
    }

    /// Whether the loss consumes sampled negatives.
    pub fn uses_negatives(self) -> bool {
        matches!(self, LossKind::Bpr | LossKind::Ssm)
    }
}

pub fn is_angle_based(kind: LossKind) -> bool {
    kind.is_angle_based()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecayMode {
    #[default]
    None,
    /// Every row of both tables shrinks on every step.
    Full,
    /// Only rows touched by the current batch shrink.
    Batched,
}

impl DecayMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(DecayMode::None),
            "full" => Some(DecayMode::Full),
            "batched" => Some(DecayMode::Batched),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecayMode::None => "none",
            DecayMode::Full => "full",
            DecayMode::Batched => "batched",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WeightDecay {
    pub mode: DecayMode,
    pub lambda: f64,
}

/// How per-positive ranking terms are combined across a batch. Uniformity
/// terms are log-sums and are never rescaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Reduction::Sum),
            "mean" => Some(Reduction::Mean),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// DirectAU uniformity weight.
    pub gamma_uniformity: f64,
    /// MAWU user-uniformity weight.
    pub gamma_user: f64,
    /// MAWU item-uniformity weight.
    pub gamma_item: f64,
    /// Negatives per positive for BPR and SSM.
    pub n_negatives: usize,
    /// SSM softmax temperature.
    pub temperature: f64,
    pub reduction: Reduction,
    pub decay: WeightDecay,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            gamma_uniformity: 1.0,
            gamma_user: 1.0,
            gamma_item: 1.0,
            n_negatives: if kind.uses_negatives() { 10 } else { 0 },
            temperature: 1.0,
            reduction: Reduction::Sum,
            decay: WeightDecay::default(),
        }
    }

    pub fn with_decay(mut self, mode: DecayMode, lambda: f64) -> Self {
        self.decay = WeightDecay { mode, lambda };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay.lambda >= 0.0) || !self.decay.lambda.is_finite() {
            return Err(Error::config(
                "lambda",
                format!("must be >= 0, got {}", self.decay.lambda),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(
                "temperature",
                format!("must be > 0, got {}", self.temperature),
            ));
        }
        if self.kind.uses_negatives() && self.n_negatives < 1 {
            return Err(Error::config("negatives", "must be >= 1 for bpr/ssm"));
        }
        for (name, g) in [
            ("gamma", self.gamma_uniformity),
            ("gamma_user", self.gamma_user),
            ("gamma_item", self.gamma_item),
        ] {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::config(name, format!("must be >= 0, got {g}")));
            }
        }
        Ok(())
    }

    /// Negatives the batch sampler should draw for this loss.
    pub fn negatives_per_positive(&self) -> usize {
        if self.kind.uses_negatives() {
            self.n_negatives
        } else {
            0
        }
    }

    /// Loss value and gradients on one batch.
    pub fn compute(
        &self,
        batch: &Batch,
        users: &EmbeddingTable,
        items: &EmbeddingTable,
        margins: Option<&MarginTable>,
    ) -> Result<LossOutput> {
        match self.kind {
            LossKind::Bpr => bpr(batch, users, items, self.reduction),
            LossKind::Ssm => ssm(batch, users, items, self.temperature, self.reduction),
            LossKind::DirectAu => {
                directau(batch, users, items, self.gamma_uniformity, self.reduction)
            }
            LossKind::Mawu => {
                let m = margins
                    .ok_or_else(|| Error::InvalidArgument("mawu requires a margin table".into()))?;
                mawu(
                    batch,
                    users,
                    items,
                    m,
                    self.gamma_user,
                    self.gamma_item,
                    self.reduction,
                )
            }
        }
    }
}

/// Learnable per-user and per-item angular margins (MAWU).
#[derive(Clone, Debug, PartialEq)]
pub struct MarginTable {
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}

impl MarginTable {
    pub fn zeros(n_users: usize, n_items: usize) -> Self {
        MarginTable {
            user: vec![0.0; n_users],
            item: vec![0.0; n_items],
        }
    }

    /// `m <- clamp(m - eta * g, 0, pi/2)` for every margin in the buffer.
    pub fn sgd_step(&mut self, eta: f64, grads: &GradientBuffer) {
        for (id, g) in grads.user_margins.iter() {
            let m = &mut self.user[id as usize];
            *m = (*m - eta * g[0]).clamp(0.0, FRAC_PI_2);
        }
        for (id, g) in grads.item_margins.iter() {
            let m = &mut self.item[id as usize];
            *m = (*m - eta * g[0]).clamp(0.0, FRAC_PI_2);
        }
    }
}

/// Gradient rows for the entities touched by one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGrad {
    dim: usize,
    ids: Vec<u32>,
    values: Vec<f64>,
}

impl SparseGrad {
    fn new(dim: usize, ids: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert_eq!(ids.len() * dim, values.len());
        SparseGrad { dim, ids, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map(|k| &self.values[k * self.dim..(k + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> + '_ {
        self.ids
            .iter()
            .enumerate()
            .map(move |(k, &id)| (id, &self.values[k * self.dim..(k + 1) * self.dim]))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `table[id] -= eta * g[id]` for every stored row.
    pub fn descend(&self, table: &mut EmbeddingTable, eta: f64) {
        for (id, g) in self.iter() {
            linalg::axpy(-eta, g, table.row_mut(id as usize));
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBuffer {
    pub users: SparseGrad,
    pub items: SparseGrad,
    /// MAWU only; one-dimensional rows.
    pub user_margins: SparseGrad,
    pub item_margins: SparseGrad,
}

impl GradientBuffer {
    pub fn is_finite(&self) -> bool {
        self.users.is_finite()
            && self.items.is_finite()
            && self.user_margins.is_finite()
            && self.item_margins.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: GradientBuffer,
}

/// Distinct ids in first-appearance order with a lookup to local slots.
struct LocalIndex {
    ids: Vec<u32>,
    slot: HashMap<u32, usize>,
}

impl LocalIndex {
    fn new() -> Self {
        LocalIndex {
            ids: Vec::new(),
            slot: HashMap::new(),
        }
    }

    fn insert(&mut self, id: u32) -> usize {
        let next = self.ids.len();
        *self.slot.entry(id).or_insert_with(|| {
            self.ids.push(id);
            next
        })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Rows of the batch's entities gathered into a local matrix.
struct LocalRows {
    index: LocalIndex,
    rows: Vec<f64>,
    norms: Vec<f64>,
    dim: usize,
}

impl LocalRows {
    fn gather(index: LocalIndex, table: &EmbeddingTable) -> Self {
        let dim = table.dim();
        let mut rows = Vec::with_capacity(index.len() * dim);
        for &id in &index.ids {
            rows.extend_from_slice(table.row(id as usize));
        }
        let norms = rows.chunks_exact(dim).map(linalg::norm).collect();
        LocalRows {
            index,
            rows,
            norms,
            dim,
        }
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    /// Unit-normalized copy; errors on a zero row.
    fn unit(&self, entity: &'static str) -> Result<Vec<f64>> {
        let mut out = self.rows.clone();
        for (k, chunk) in out.chunks_exact_mut(self.dim).enumerate() {
            let n = self.norms[k];
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroRow {
                    entity,
                    index: self.index.ids[k] as usize,
                });
            }
            chunk.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }

    /// Maps gradients with respect to unit rows back to the raw rows.
    fn pull_back(&self, unit: &[f64], mut grad_unit: Vec<f64>) -> Vec<f64> {
        let d = self.dim;
        for k in 0..self.index.len() {
            let x = &unit[k * d..(k + 1) * d];
            let g = &mut grad_unit[k * d..(k + 1) * d];
            let radial = dot(g, x);
            let inv = 1.0 / self.norms[k];
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = (*gi - radial * xi) * inv;
            }
        }
        grad_unit
    }

    fn into_grad(self, values: Vec<f64>) -> SparseGrad {
        SparseGrad::new(self.dim, self.index.ids, values)
    }
}

fn check_batch(batch: &Batch, users: &EmbeddingTable, items: &EmbeddingTable) -> Result<()> {
    if users.dim() != items.dim() {
        return Err(Error::InvalidArgument(format!(
            "user dim {} != item dim {}",
            users.dim(),
            items.dim()
        )));
    }
    for p in &batch.positives {
        if p.user as usize >= users.rows() || p.item as usize >= items.rows() {
            return Err(Error::InvalidArgument(format!(
                "pair ({}, {}) out of range",
                p.user, p.item
            )));
        }
    }
    if batch.negatives.iter().any(|&j| j as usize >= items.rows()) {
        return Err(Error::InvalidArgument("negative item out of range".into()));
    }
    Ok(())
}

fn gather(
    batch: &Batch,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    with_negatives: bool,
) -> Result<(LocalRows, LocalRows, Vec<(usize, usize)>, Vec<usize>)> {
    check_batch(batch, users, items)?;
    let mut ui = LocalIndex::new();
    let mut ii = LocalIndex::new();
    let pairs: Vec<(usize, usize)> = batch
        .positives
        .iter()
        .map(|p| (ui.insert(p.user), ii.insert(p.item)))
        .collect();
    let negs = if with_negatives {
        batch.negatives.iter().map(|&j| ii.insert(j)).collect()
    } else {
        Vec::new()
    };
    Ok((
        LocalRows::gather(ui, users),
        LocalRows::gather(ii, items),
        pairs,
        negs,
    ))
}

fn scale_for(reduction: Reduction, n: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BPR: `-sum ln sigmoid(u.i - u.j)` over every positive/negative pair.
pub fn bpr(
    batch: &Batch,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    reduction: Reduction,
) -> Result<LossOutput> {
    if batch.gamma == 0 && !batch.is_empty() {
        return Err(Error::InvalidArgument(
            "bpr needs at least one negative per positive".into(),
        ));
    }
    let (ur, ir, pairs, negs) = gather(batch, users, items, true)?;
    let d = ur.dim;
    let scale = scale_for(reduction, batch.len());
    let mut gu = vec![0.0; ur.rows.len()];
    let mut gi = vec![0.0; ir.rows.len()];
    let mut loss = 0.0;
    for (k, &(u, i)) in pairs.iter().enumerate() {
        let (uv, iv) = (ur.row(u), ir.row(i));
        let pos = dot(uv, iv);
        for &j in &negs[k * batch.gamma..(k + 1) * batch.gamma] {
            let jv = ir.row(j);
            let x = pos - dot(uv, jv);
            loss += scale * softplus(-x);
            // d/dx of -ln sigmoid(x) = -sigmoid(-x)
            let c = -scale * sigmoid(-x);
            for t in 0..d {
                gu[u * d + t] += c * (iv[t] - jv[t]);
                gi[i * d + t] += c * uv[t];
                gi[j * d + t] -= c * uv[t];
            }
        }
    }
    Ok(LossOutput {
        loss,
        grads: GradientBuffer {
            users: ur.into_grad(gu),
            items: ir.into_grad(gi),
            ..Default::default()
        },
    })
}

/// Sampled softmax over cosine similarities at temperature `tau`.
pub fn ssm(
    batch: &Batch,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    tau: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    let (ur, ir, pairs, negs) = gather(batch, users, items, true)?;
    let d = ur.dim;
    let (uu, iu) = (ur.unit("user")?, ir.unit("item")?);
    let scale = scale_for(reduction, batch.len());
    let mut gu = vec![0.0; uu.len()];
    let mut gi = vec![0.0; iu.len()];
    let mut loss = 0.0;
    let mut slots = Vec::with_capacity(batch.gamma + 1);
    let mut logits = Vec::with_capacity(batch.gamma + 1);
    for (k, &(u, i)) in pairs.iter().enumerate() {
        let uv = &uu[u * d..(u + 1) * d];
        slots.clear();
        slots.push(i);
        slots.extend_from_slice(&negs[k * batch.gamma..(k + 1) * batch.gamma]);
        logits.clear();
        logits.extend(
            slots
                .iter()
                .map(|&s| dot(uv, &iu[s * d..(s + 1) * d]) / tau),
        );
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += scale * (max + z.ln() - logits[0]);
        for (n, &s) in slots.iter().enumerate() {
            let p = (logits[n] - max).exp() / z;
            let dl = scale * (p - if n == 0 { 1.0 } else { 0.0 }) / tau;
            for t in 0..d {
                gu[u * d + t] += dl * iu[s * d + t];
                gi[s * d + t] += dl * uv[t];
            }
        }
    }
    let gu = ur.pull_back(&uu, gu);
    let gi = ir.pull_back(&iu, gi);
    Ok(LossOutput {
        loss,
        grads: GradientBuffer {
            users: ur.into_grad(gu),
            items: ir.into_grad(gi),
            ..Default::default()
        },
    })
}

/// `log sum_{a != b} exp(-2 ||x_a - x_b||^2)` over unit rows `x` (n x d),
/// plus its gradient with respect to those unit rows. Fewer than two rows
/// contribute nothing.
fn uniformity(x: &[f64], n: usize, d: usize) -> (f64, Vec<f64>) {
    if n < 2 {
        return (0.0, vec![0.0; n * d]);
    }
    let mut w = matmul_nt(x, n, d, x, n);
    // Shift by the largest exponent; pairs of unit rows give values in [-8, 0].
    let mut max = f64::NEG_INFINITY;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let sq = (2.0 - 2.0 * w[a * n + b]).max(0.0);
                let e = -2.0 * sq;
                w[a * n + b] = e;
                max = max.max(e);
            }
        }
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in 0..n {
            let v = if a == b {
                0.0
            } else {
                (w[a * n + b] - max).exp()
            };
            w[a * n + b] = v;
            total += v;
        }
    }
    let value = max + total.ln();
    // Each unordered pair appears twice in the sum:
    // d/dx_a = sum_b (e_ab / S) * (-8) (x_a - x_b)
    let inv = 1.0 / total;
    w.iter_mut().for_each(|v| *v *= inv);
    let wx = matmul_nn(&w, n, n, x, d);
    let mut grad = vec![0.0; n * d];
    for a in 0..n {
        let rowsum: f64 = w[a * n..(a + 1) * n].iter().sum();
        for t in 0..d {
            grad[a * d + t] = -8.0 * (rowsum * x[a * d + t] - wx[a * d + t]);
        }
    }
    (value, grad)
}

/// DirectAU: alignment of normalized positive pairs plus `gamma` times the
/// user and item uniformity over the batch's distinct entities.
pub fn directau(
    batch: &Batch,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    gamma: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    let (ur, ir, pairs, _) = gather(batch, users, items, false)?;
    let d = ur.dim;
    let (uu, iu) = (ur.unit("user")?, ir.unit("item")?);
    let scale = scale_for(reduction, batch.len());
    let mut gu = vec![0.0; uu.len()];
    let mut gi = vec![0.0; iu.len()];
    let mut loss = 0.0;
    for &(u, i) in &pairs {
        let (uv, iv) = (&uu[u * d..(u + 1) * d], &iu[i * d..(i + 1) * d]);
        for t in 0..d {
            let diff = uv[t] - iv[t];
            loss += scale * diff * diff;
            gu[u * d + t] += scale * 2.0 * diff;
            gi[i * d + t] -= scale * 2.0 * diff;
        }
    }
    let (lu, guu) = uniformity(&uu, ur.index.len(), d);
    let (li, gii) = uniformity(&iu, ir.index.len(), d);
    loss += gamma * (lu + li);
    linalg::axpy(gamma, &guu, &mut gu);
    linalg::axpy(gamma, &gii, &mut gi);
    let gu = ur.pull_back(&uu, gu);
    let gi = ir.pull_back(&iu, gi);
    Ok(LossOutput {
        loss,
        grads: GradientBuffer {
            users: ur.into_grad(gu),
            items: ir.into_grad(gi),
            ..Default::default()
        },
    })
}

/// MAWU: margin-aware alignment `-sum cos(theta_ui + M_u + M_i)` plus
/// separately weighted user and item uniformity.
pub fn mawu(
    batch: &Batch,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    margins: &MarginTable,
    gamma_user: f64,
    gamma_item: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    if margins.user.len() != users.rows() || margins.item.len() != items.rows() {
        return Err(Error::InvalidArgument(
            "margin table does not cover the embedding tables".into(),
        ));
    }
    let (ur, ir, pairs, _) = gather(batch, users, items, false)?;
    let d = ur.dim;
    let (uu, iu) = (ur.unit("user")?, ir.unit("item")?);
    let scale = scale_for(reduction, batch.len());
    let mut gu = vec![0.0; uu.len()];
    let mut gi = vec![0.0; iu.len()];
    let mut gmu = vec![0.0; ur.index.len()];
    let mut gmi = vec![0.0; ir.index.len()];
    let mut loss = 0.0;
    for &(u, i) in &pairs {
        let (uv, iv) = (&uu[u * d..(u + 1) * d], &iu[i * d..(i + 1) * d]);
        let c = dot(uv, iv);
        let theta = c.clamp(-MAWU_COS_CLAMP, MAWU_COS_CLAMP).acos();
        let m = margins.user[ur.index.ids[u] as usize] + margins.item[ir.index.ids[i] as usize];
        let phase = theta + m;
        loss -= scale * phase.cos();
        let dm = scale * phase.sin();
        gmu[u] += dm;
        gmi[i] += dm;
        if 1.0 - c.abs() > MAWU_DERIV_GUARD {
            // d(-cos(theta + m))/dc = sin(theta + m) * dtheta/dc
            let dc = -dm / (1.0 - c * c).sqrt();
            for t in 0..d {
                gu[u * d + t] += dc * iv[t];
                gi[i * d + t] += dc * uv[t];
            }
        }
    }
    let (lu, guu) = uniformity(&uu, ur.index.len(), d);
    let (li, gii) = uniformity(&iu, ir.index.len(), d);
    loss += gamma_user * lu + gamma_item * li;
    linalg::axpy(gamma_user, &guu, &mut gu);
    linalg::axpy(gamma_item, &gii, &mut gi);
    let gu = ur.pull_back(&uu, gu);
    let gi = ir.pull_back(&iu, gi);
    let user_margins = SparseGrad::new(1, ur.index.ids.clone(), gmu);
    let item_margins = SparseGrad::new(1, ir.index.ids.clone(), gmi);
    Ok(LossOutput {
        loss,
        grads: GradientBuffer {
            users: ur.into_grad(gu),
            items: ir.into_grad(gi),
            user_margins,
            item_margins,
        },
    })
}

/// Multiplies rows by `(1 - eta * lambda)`: all rows for [`DecayMode::Full`],
/// only the batch's users and items (positives and negatives) for
/// [`DecayMode::Batched`].
pub fn apply_weight_decay(
    users: &mut EmbeddingTable,
    items: &mut EmbeddingTable,
    eta: f64,
    decay: WeightDecay,
    batch: &Batch,
) -> Result<()> {
    let factor = 1.0 - eta * decay.lambda;
    if !(eta * decay.lambda >= 0.0 && eta * decay.lambda < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eta * lambda = {} must lie in [0, 1)",
            eta * decay.lambda
        )));
    }
    match decay.mode {
        DecayMode::None => {}
        DecayMode::Full => {
            users.values_mut().iter_mut().for_each(|v| *v *= factor);
            items.values_mut().iter_mut().for_each(|v| *v *= factor);
        }
        DecayMode::Batched => {
            let mut ui = LocalIndex::new();
            let mut ii = LocalIndex::new();
            for p in &batch.positives {
                ui.insert(p.user);
                ii.insert(p.item);
            }
            for &j in &batch.negatives {
                ii.insert(j);
            }
            for &u in &ui.ids {
                users.scale_row(u as usize, factor);
            }
            for &i in &ii.ids {
                items.scale_row(i as usize, factor);
            }
        }
    }
    Ok(())
}

/// `max |L(c U, c' I) - L(U, I)|` for per-row positive scale factors.
pub fn check_scale_invariance(
    spec: &LossSpec,
    batch: &Batch,
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    margins: Option<&MarginTable>,
    user_scales: &[f64],
    item_scales: &[f64],
) -> Result<f64> {
    if user_scales.len() != users.rows() || item_scales.len() != items.rows() {
        return Err(Error::InvalidArgument(
            "one scale factor per row required".into(),
        ));
    }
    if user_scales.iter().chain(item_scales).any(|&c| !(c > 0.0)) {
        return Err(Error::InvalidArgument("scale factors must be > 0".into()));
    }
    let base = spec.compute(batch, users, items, margins)?.loss;
    let mut su = users.clone();
    let mut si = items.clone();
    for (r, &c) in user_scales.iter().enumerate() {
        su.scale_row(r, c);
    }
    for (r, &c) in item_scales.iter().enumerate() {
        si.scale_row(r, c);
    }
    let scaled = spec.compute(batch, &su, &si, margins)?.loss;
    Ok((scaled - base).abs())
}

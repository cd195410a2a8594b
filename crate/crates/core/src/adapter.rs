//! Low-rank adapter arithmetic on named weight sets, relative weight-change
//! ranking, and probes of how camera pose and trajectory interact inside a
//! toy two-input network.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid weight {name}: {reason}")]
    InvalidWeight { name: String, reason: String },
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("need at least one vector in each set")]
    EmptySet,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Action,
    Prope,
    Attention,
    Mlp,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::Action, Category::Prope, Category::Attention, Category::Mlp, Category::Other];

    pub fn label(&self) -> &'static str {
        match self {
            Category::Action => "action",
            Category::Prope => "prope",
            Category::Attention => "attention",
            Category::Mlp => "mlp",
            Category::Other => "other",
        }
    }

    /// Camera-conditioning parameters: the action embedding and the
    /// projective positional-encoding projections.
    pub fn is_spatial(&self) -> bool {
        matches!(self, Category::Action | Category::Prope)
    }
}

/// Category from a parameter path such as `blocks.3.attn1.to_q.weight`.
pub fn classify(name: &str) -> Category {
    let lower = name.to_ascii_lowercase();
    if lower.contains("action_in") {
        return Category::Action;
    }
    if lower.contains("prope") {
        return Category::Prope;
    }
    let tokens: Vec<&str> = lower.split(['.', '/', '_', '-']).collect();
    let is_attn = |t: &&str| matches!(*t, "q" | "k" | "v" | "qkv" | "attention") || t.starts_with("attn");
    if tokens.iter().any(is_attn) {
        return Category::Attention;
    }
    if tokens.iter().any(|t| matches!(*t, "mlp" | "ffn" | "ff")) {
        return Category::Mlp;
    }
    Category::Other
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedWeight {
    name: String,
    matrix: DMatrix<f64>,
    category: Category,
}

impl NamedWeight {
    pub fn new(name: impl Into<String>, matrix: DMatrix<f64>) -> Result<Self, AdapterError> {
        let name = name.into();
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::InvalidWeight { name, reason: "non-finite entry".into() });
        }
        let category = classify(&name);
        Ok(Self { name, matrix, category })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn category(&self) -> Category {
        self.category
    }
    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }
}

/// `W' = W + (alpha / r) B A` with `A: r×n`, `B: m×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self, AdapterError> {
        if a.nrows() == 0 {
            return Err(AdapterError::InvalidAdapter("rank must be at least 1".into()));
        }
        if b.ncols() != a.nrows() {
            return Err(AdapterError::InvalidAdapter(format!("B has {} columns but A has {} rows", b.ncols(), a.nrows())));
        }
        if !alpha.is_finite() || a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(AdapterError::InvalidAdapter("non-finite entry".into()));
        }
        Ok(Self { a, b, alpha })
    }

    /// Gaussian-initialized adapter for an `m×n` target.
    pub fn random(m: usize, n: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self, AdapterError> {
        let a = DMatrix::from_fn(rank, n, |_, _| rng.sample(StandardNormal));
        let b = DMatrix::from_fn(m, rank, |_, _| rng.sample(StandardNormal));
        Self::new(a, b, alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    fn check(&self, w: &NamedWeight) -> Result<(), AdapterError> {
        let (m, n) = w.shape();
        if self.b.nrows() != m || self.a.ncols() != n {
            return Err(AdapterError::Shape(format!(
                "adapter {}x{} does not fit {} ({m}x{n})",
                self.b.nrows(),
                self.a.ncols(),
                w.name
            )));
        }
        Ok(())
    }
}

/// Merged weight matrix.
pub fn lora_apply(w: &NamedWeight, ad: &LoraAdapter) -> Result<DMatrix<f64>, AdapterError> {
    ad.check(w)?;
    Ok(&w.matrix + (&ad.b * &ad.a) * ad.scale())
}

/// Unmerged evaluation `W x + (alpha / r) B (A x)`.
pub fn lora_forward(w: &NamedWeight, ad: &LoraAdapter, x: &DVector<f64>) -> Result<DVector<f64>, AdapterError> {
    ad.check(w)?;
    if x.len() != w.shape().1 {
        return Err(AdapterError::Shape(format!("input length {} for {} columns", x.len(), w.shape().1)));
    }
    Ok(&w.matrix * x + (&ad.b * (&ad.a * x)) * ad.scale())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub rank: usize,
    pub name: String,
    pub delta_rel: f64,
    pub delta_norm: f64,
    pub base_norm: f64,
    pub params: usize,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRow {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Descending by `delta_rel`, ties by name.
    pub rows: Vec<DeltaRow>,
    pub flagged: Vec<FlaggedRow>,
    pub category_mean: BTreeMap<Category, f64>,
}

pub const DELTA_CSV_HEADER: [&str; 7] = ["rank", "delta_rel", "delta_norm", "base_norm", "params", "category", "parameter"];

impl DeltaReport {
    pub fn top(&self, k: usize) -> &[DeltaRow] {
        &self.rows[..k.min(self.rows.len())]
    }

    pub fn csv_records(&self) -> Vec<[String; 7]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.rank.to_string(),
                    format!("{:.9e}", r.delta_rel),
                    format!("{:.9e}", r.delta_norm),
                    format!("{:.9e}", r.base_norm),
                    r.params.to_string(),
                    r.category.label().to_string(),
                    r.name.clone(),
                ]
            })
            .collect()
    }
}

/// Relative Frobenius change `‖W_ft − W_base‖ / ‖W_base‖` per parameter.
/// Unmatched names, shape mismatches and zero-norm bases are flagged and
/// left out of the ranking.
pub fn delta_rel(base: &[NamedWeight], ft: &[NamedWeight]) -> DeltaReport {
    let ft_map: BTreeMap<&str, &NamedWeight> = ft.iter().map(|w| (w.name(), w)).collect();
    let base_names: std::collections::BTreeSet<&str> = base.iter().map(|w| w.name()).collect();
    let mut rows = Vec::new();
    let mut flagged = Vec::new();
    for b in base {
        let Some(f) = ft_map.get(b.name()) else {
            flagged.push(FlaggedRow { name: b.name.clone(), reason: "missing from fine-tuned set".into() });
            continue;
        };
        if f.shape() != b.shape() {
            flagged.push(FlaggedRow { name: b.name.clone(), reason: format!("shape {:?} vs {:?}", b.shape(), f.shape()) });
            continue;
        }
        let base_norm = b.matrix.norm();
        if base_norm == 0.0 {
            flagged.push(FlaggedRow { name: b.name.clone(), reason: "zero-norm base".into() });
            continue;
        }
        let delta_norm = (&f.matrix - &b.matrix).norm();
        rows.push(DeltaRow {
            rank: 0,
            name: b.name.clone(),
            delta_rel: delta_norm / base_norm,
            delta_norm,
            base_norm,
            params: b.matrix.len(),
            category: b.category,
        });
    }
    for f in ft {
        if !base_names.contains(f.name()) {
            flagged.push(FlaggedRow { name: f.name.clone(), reason: "missing from base set".into() });
        }
    }
    rows.sort_by(|a, b| b.delta_rel.total_cmp(&a.delta_rel).then_with(|| a.name.cmp(&b.name)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let mut sums: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = sums.entry(r.category).or_default();
        e.0 += r.delta_rel;
        e.1 += 1;
    }
    let category_mean = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    DeltaReport { rows, flagged, category_mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    /// Relative file name; defaults to `<name>.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AdapterError + '_ {
    move |source| AdapterError::Io { path: path.display().to_string(), source }
}

/// Writes `manifest.json` and one row-major little-endian f32 file per weight.
pub fn write_weight_dir(dir: &Path, weights: &[NamedWeight]) -> Result<(), AdapterError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Vec::with_capacity(weights.len());
    for w in weights {
        let file = format!("{}.bin", w.name.replace('/', "_"));
        let (m, n) = w.shape();
        let mut bytes = Vec::with_capacity(m * n * 4);
        for i in 0..m {
            for j in 0..n {
                bytes.extend_from_slice(&(w.matrix[(i, j)] as f32).to_le_bytes());
            }
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        manifest.push(ManifestEntry { name: w.name.clone(), shape: [m, n], category: Some(w.category), file: Some(file) });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))
}

/// Reads a weight directory. Categories are always derived from names; a
/// manifest category that disagrees is an error.
pub fn read_weight_dir(dir: &Path) -> Result<Vec<NamedWeight>, AdapterError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| AdapterError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        let file = e.file.clone().unwrap_or_else(|| format!("{}.bin", e.name));
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let [m, n] = e.shape;
        if bytes.len() != m * n * 4 {
            return Err(AdapterError::Manifest(format!("{}: {} bytes for shape {m}x{n}", e.name, bytes.len())));
        }
        let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let w = NamedWeight::new(e.name.clone(), DMatrix::from_row_slice(m, n, &values))?;
        if let Some(c) = e.category {
            if c != w.category {
                return Err(AdapterError::Manifest(format!("{}: category {} but name implies {}", e.name, c.label(), w.category.label())));
            }
        }
        out.push(w);
    }
    Ok(out)
}

/// Toy transformer-like weight set: per block attention, MLP and a
/// positional-encoding projection, plus an action embedding.
pub fn toy_weight_set(blocks: usize, dim: usize, seed: u64) -> Vec<NamedWeight> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = vec!["action_in.linear_1.weight".to_string(), "action_in.linear_2.weight".to_string()];
    for b in 0..blocks {
        for p in ["attn1.to_q", "attn1.to_k", "attn1.to_v", "attn1.to_out", "mlp.fc1", "mlp.fc2", "prope_proj", "norm1"] {
            names.push(format!("blocks.{b}.{p}.weight"));
        }
    }
    names
        .into_iter()
        .map(|n| {
            let m = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
            NamedWeight::new(n, m).expect("finite weights")
        })
        .collect()
}

/// Fine-tune that moves spatial-pathway parameters through rank-`rank`
/// adapters and everything else by small isotropic noise, with the spatial
/// change `ratio` times larger in relative Frobenius terms.
pub fn planted_spatial_finetune(base: &[NamedWeight], rank: usize, noise: f64, ratio: f64, seed: u64) -> Vec<NamedWeight> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base.iter()
        .map(|w| {
            let (m, n) = w.shape();
            let target = w.matrix.norm() * noise * if w.category.is_spatial() { ratio } else { 1.0 };
            let delta = if w.category.is_spatial() {
                let ad = LoraAdapter::random(m, n, rank.min(m).min(n).max(1), 1.0, &mut rng).expect("valid adapter");
                lora_apply(w, &ad).expect("conformable") - &w.matrix
            } else {
                DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
            };
            let dn = delta.norm();
            let scaled = if dn > 0.0 { delta * (target / dn) } else { delta };
            NamedWeight::new(w.name.clone(), &w.matrix + scaled).expect("finite")
        })
        .collect()
}

/// Toy network with a camera-pose pathway and a trajectory pathway per block:
/// `h_l(p, τ) = S_l p + C_l τ + γ_l (M_l p) ⊙ (N_l τ)`. With every `γ_l = 0`
/// it is additively separable. Weights are small integers, so with
/// integer-valued inputs every forward pass is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPathwayNet {
    blocks: Vec<ToyBlock>,
    pose_dim: usize,
    traj_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ToyBlock {
    spatial: DMatrix<f64>,
    content: DMatrix<f64>,
    pose_mix: DMatrix<f64>,
    traj_mix: DMatrix<f64>,
    coupling: f64,
}

pub const TOY_BLOCKS: usize = 4;
pub const TOY_DIM: usize = 16;
pub const TOY_POSE_DIM: usize = 6;
pub const TOY_TRAJ_DIM: usize = 8;

impl ToyPathwayNet {
    pub fn new(couplings: &[f64], dim: usize, pose_dim: usize, traj_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut int_matrix = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| f64::from(rng.random_range(-3i32..=3)));
        let blocks = couplings
            .iter()
            .map(|&coupling| ToyBlock {
                spatial: int_matrix(dim, pose_dim),
                content: int_matrix(dim, traj_dim),
                pose_mix: int_matrix(dim, pose_dim),
                traj_mix: int_matrix(dim, traj_dim),
                coupling,
            })
            .collect();
        Self { blocks, pose_dim, traj_dim }
    }

    /// Default size, no coupling.
    pub fn separable(seed: u64) -> Self {
        Self::new(&[0.0; TOY_BLOCKS], TOY_DIM, TOY_POSE_DIM, TOY_TRAJ_DIM, seed)
    }

    /// Default size, coupling `gamma` on the last two blocks.
    pub fn coupled(gamma: f64, seed: u64) -> Self {
        Self::new(&[0.0, 0.0, gamma, gamma], TOY_DIM, TOY_POSE_DIM, TOY_TRAJ_DIM, seed)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }
    pub fn traj_dim(&self) -> usize {
        self.traj_dim
    }

    /// Per-block activations.
    pub fn forward(&self, pose: &DVector<f64>, traj: &DVector<f64>) -> Result<Vec<DVector<f64>>, AdapterError> {
        if pose.len() != self.pose_dim || traj.len() != self.traj_dim {
            return Err(AdapterError::Shape(format!(
                "inputs ({}, {}) for a ({}, {}) network",
                pose.len(),
                traj.len(),
                self.pose_dim,
                self.traj_dim
            )));
        }
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                let mut h = &b.spatial * pose + &b.content * traj;
                if b.coupling != 0.0 {
                    h += (&b.pose_mix * pose).component_mul(&(&b.traj_mix * traj)) * b.coupling;
                }
                h
            })
            .collect())
    }
}

/// `a·b / sqrt((a·a)(b·b))`, `None` when either vector is zero.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let (aa, bb) = (a.dot(a), b.dot(b));
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some(a.dot(b) / (aa * bb).sqrt())
}

/// Per block, cosine between the camera effect vectors
/// `c_α = h(B, α) − h(A, α)` and `c_β = h(B, β) − h(A, β)`; `None` marks a
/// zero effect vector.
pub fn camera_invariance_cosine(
    net: &ToyPathwayNet,
    pose_a: &DVector<f64>,
    pose_b: &DVector<f64>,
    traj_alpha: &DVector<f64>,
    traj_beta: &DVector<f64>,
) -> Result<Vec<Option<f64>>, AdapterError> {
    let (ha_a, hb_a) = (net.forward(pose_a, traj_alpha)?, net.forward(pose_b, traj_alpha)?);
    let (ha_b, hb_b) = (net.forward(pose_a, traj_beta)?, net.forward(pose_b, traj_beta)?);
    Ok((0..net.num_blocks())
        .map(|l| cosine(&(&hb_a[l] - &ha_a[l]), &(&hb_b[l] - &ha_b[l])))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub overlap: f64,
    pub dims_requested: usize,
    pub dims_used: usize,
    /// Cosines of the principal angles, descending.
    pub cosines: Vec<f64>,
    pub warnings: Vec<String>,
}

const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of the top `dims` principal directions (uncentered) of
/// the vectors, reduced to the numerical rank.
fn principal_basis(vectors: &[DVector<f64>], dims: usize) -> Result<(DMatrix<f64>, usize), AdapterError> {
    let n = vectors[0].len();
    if vectors.iter().any(|v| v.len() != n) {
        return Err(AdapterError::Shape("vectors differ in length".into()));
    }
    let stacked = DMatrix::from_columns(vectors);
    let svd = stacked.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let rank = order.iter().filter(|&&i| svd.singular_values[i] > RANK_TOL * smax.max(f64::MIN_POSITIVE)).count();
    let used = dims.min(rank);
    let cols: Vec<DVector<f64>> = order[..used].iter().map(|&i| u.column(i).into_owned()).collect();
    Ok((if cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&cols) }, rank))
}

/// Mean cosine of the principal angles between the `dims`-dimensional
/// principal subspaces of `u` and `v`.
pub fn subspace_overlap(u: &[DVector<f64>], v: &[DVector<f64>], dims: usize) -> Result<OverlapReport, AdapterError> {
    if u.is_empty() || v.is_empty() || dims == 0 {
        return Err(AdapterError::EmptySet);
    }
    if u[0].len() != v[0].len() {
        return Err(AdapterError::Shape(format!("vector length {} vs {}", u[0].len(), v[0].len())));
    }
    let (qu, ru) = principal_basis(u, dims)?;
    let (qv, rv) = principal_basis(v, dims)?;
    let mut warnings = Vec::new();
    for (label, set, r) in [("U", u, ru), ("V", v, rv)] {
        if r < dims {
            warnings.push(format!("{label}: {} vectors of rank {r}; using {r} of {dims} dims", set.len()));
        }
    }
    let used = qu.ncols().min(qv.ncols());
    if used == 0 {
        return Ok(OverlapReport { overlap: 0.0, dims_requested: dims, dims_used: 0, cosines: vec![], warnings });
    }
    let qu = qu.columns(0, used).into_owned();
    let qv = qv.columns(0, used).into_owned();
    let mut cosines: Vec<f64> = (qu.transpose() * qv).singular_values().iter().map(|s| s.min(1.0)).collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    let overlap = cosines.iter().sum::<f64>() / used as f64;
    Ok(OverlapReport { overlap, dims_requested: dims, dims_used: used, cosines, warnings })
}

/// Camera updates `h(cam) − h(base)` and trajectory updates
/// `h(cam, traj) − h(cam)` of one block, over paired probe inputs.
pub fn pathway_updates(
    net: &ToyPathwayNet,
    block: usize,
    base_pose: &DVector<f64>,
    null_traj: &DVector<f64>,
    poses: &[DVector<f64>],
    trajs: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), AdapterError> {
    let h_base = net.forward(base_pose, null_traj)?.swap_remove(block);
    let mut cam = Vec::new();
    let mut traj = Vec::new();
    for (p, t) in poses.iter().zip(trajs) {
        let h_cam = net.forward(p, null_traj)?.swap_remove(block);
        let h_both = net.forward(p, t)?.swap_remove(block);
        cam.push(&h_cam - &h_base);
        traj.push(h_both - &h_cam);
    }
    Ok((cam, traj))
}

/// Integer-valued probe input of length `n` in `[-4, 4]`.
pub fn integer_probe(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| f64::from(rng.random_range(-4i32..=4)))
}

/// Gaussian probe input.
pub fn gaussian_probe(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn classifier_examples() {
        assert_eq!(classify("action_in.linear_1.weight"), Category::Action);
        assert_eq!(classify("blocks.0.attn1.prope_proj.weight"), Category::Prope);
        assert_eq!(classify("blocks.2.attn2.to_q.weight"), Category::Attention);
        assert_eq!(classify("blocks.2.self_attn.qkv.weight"), Category::Attention);
        assert_eq!(classify("blocks.2.mlp.fc1.weight"), Category::Mlp);
        assert_eq!(classify("blocks.2.ffn.net.0.proj.weight"), Category::Mlp);
        assert_eq!(classify("blocks.2.norm1.weight"), Category::Other);
        assert_eq!(classify("patch_embedding.weight"), Category::Other);
    }

    #[test]
    fn lora_trivial_cases() {
        let mut r = rng(1);
        let w = NamedWeight::new("x", DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64)).unwrap();
        let ad = LoraAdapter::random(4, 3, 2, 0.0, &mut r).unwrap();
        assert_eq!(lora_apply(&w, &ad).unwrap(), *w.matrix());
        let z = NamedWeight::new("z", DMatrix::zeros(4, 3)).unwrap();
        let ad = LoraAdapter::random(4, 3, 2, 2.0, &mut r).unwrap();
        assert_eq!(lora_apply(&z, &ad).unwrap(), &ad.b * &ad.a);
        let bad = LoraAdapter::random(5, 3, 2, 1.0, &mut r).unwrap();
        assert!(matches!(lora_apply(&w, &bad), Err(AdapterError::Shape(_))));
        assert!(LoraAdapter::new(DMatrix::zeros(0, 3), DMatrix::zeros(4, 0), 1.0).is_err());
    }

    #[test]
    fn lora_merge_matches_runtime_rank32() {
        let mut r = rng(2);
        let w = NamedWeight::new("blocks.0.prope_proj.weight", DMatrix::from_fn(48, 40, |_, _| r.sample(StandardNormal))).unwrap();
        let ad = LoraAdapter::random(48, 40, 32, 16.0, &mut r).unwrap();
        let merged = lora_apply(&w, &ad).unwrap();
        for _ in 0..20 {
            let x = gaussian_probe(40, &mut r);
            let diff = (&merged * &x - lora_forward(&w, &ad, &x).unwrap()).amax();
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn delta_rel_examples() {
        let base = vec![NamedWeight::new("a.mlp", DMatrix::identity(2, 2)).unwrap()];
        let same = delta_rel(&base, &base);
        assert_eq!(same.rows[0].delta_rel, 0.0);
        let mut m = DMatrix::identity(2, 2);
        m[(1, 1)] += 0.1;
        let ft = vec![NamedWeight::new("a.mlp", m).unwrap()];
        let rep = delta_rel(&base, &ft);
        assert_abs_diff_eq!(rep.rows[0].delta_rel, 0.1 / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(rep.rows[0].delta_rel, 0.07071, epsilon = 1e-5);
    }

    #[test]
    fn delta_rel_flags() {
        let base = vec![
            NamedWeight::new("zero", DMatrix::zeros(2, 2)).unwrap(),
            NamedWeight::new("only_base", DMatrix::identity(2, 2)).unwrap(),
            NamedWeight::new("shape", DMatrix::identity(2, 2)).unwrap(),
        ];
        let ft = vec![
            NamedWeight::new("zero", DMatrix::identity(2, 2)).unwrap(),
            NamedWeight::new("shape", DMatrix::identity(3, 2)).unwrap(),
            NamedWeight::new("only_ft", DMatrix::identity(2, 2)).unwrap(),
        ];
        let rep = delta_rel(&base, &ft);
        assert!(rep.rows.is_empty());
        assert_eq!(rep.flagged.len(), 4);
    }

    #[test]
    fn delta_rel_scale_aware() {
        let mut r = rng(3);
        for _ in 0..50 {
            let b = DMatrix::from_fn(5, 4, |_, _| r.sample(StandardNormal));
            let f = &b + DMatrix::from_fn(5, 4, |_, _| r.sample::<f64, _>(StandardNormal) * 0.1);
            let c: f64 = r.random_range(-10.0..10.0);
            let one = delta_rel(&[NamedWeight::new("w", b.clone()).unwrap()], &[NamedWeight::new("w", f.clone()).unwrap()]);
            let scaled = delta_rel(&[NamedWeight::new("w", b * c).unwrap()], &[NamedWeight::new("w", f * c).unwrap()]);
            assert_abs_diff_eq!(one.rows[0].delta_rel, scaled.rows[0].delta_rel, epsilon = 1e-12);
        }
    }

    #[test]
    fn planted_finetune_puts_spatial_on_top() {
        let base = toy_weight_set(8, 16, 4);
        let ft = planted_spatial_finetune(&base, 4, 0.01, 10.0, 5);
        let rep = delta_rel(&base, &ft);
        assert!(rep.top(10).iter().all(|r| r.category.is_spatial()));
        assert!(rep.category_mean[&Category::Prope] > 5.0 * rep.category_mean[&Category::Attention]);
    }

    #[test]
    fn weight_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ws = toy_weight_set(1, 3, 9);
        write_weight_dir(dir.path(), &ws).unwrap();
        let back = read_weight_dir(dir.path()).unwrap();
        assert_eq!(back.len(), ws.len());
        for (a, b) in ws.iter().zip(&back) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.category(), b.category());
            let want = a.matrix().map(|v| f64::from(v as f32));
            assert_eq!(*b.matrix(), want);
        }
    }

    #[test]
    fn separable_net_cosine_is_one() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let net = ToyPathwayNet::separable(seed);
            let (pa, pb) = (integer_probe(TOY_POSE_DIM, &mut r), integer_probe(TOY_POSE_DIM, &mut r));
            let (ta, tb) = (integer_probe(TOY_TRAJ_DIM, &mut r), integer_probe(TOY_TRAJ_DIM, &mut r));
            let cos = camera_invariance_cosine(&net, &pa, &pb, &ta, &tb).unwrap();
            assert!(cos.iter().all(|c| *c == Some(1.0)), "{cos:?}");
            // generic real inputs: exact up to rounding
            let (pa, pb) = (gaussian_probe(TOY_POSE_DIM, &mut r), gaussian_probe(TOY_POSE_DIM, &mut r));
            let (ta, tb) = (gaussian_probe(TOY_TRAJ_DIM, &mut r), gaussian_probe(TOY_TRAJ_DIM, &mut r));
            for c in camera_invariance_cosine(&net, &pa, &pb, &ta, &tb).unwrap() {
                assert_abs_diff_eq!(c.unwrap(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn coupled_net_breaks_invariance() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let net = ToyPathwayNet::coupled(0.5, seed);
            let (pa, pb) = (integer_probe(TOY_POSE_DIM, &mut r), integer_probe(TOY_POSE_DIM, &mut r));
            let (ta, tb) = (integer_probe(TOY_TRAJ_DIM, &mut r), integer_probe(TOY_TRAJ_DIM, &mut r));
            let cos = camera_invariance_cosine(&net, &pa, &pb, &ta, &tb).unwrap();
            assert_eq!(cos[0], Some(1.0));
            assert!(cos.iter().flatten().any(|c| *c < 0.99), "{cos:?}");
            assert!(cos.iter().flatten().all(|c| (-1.0..=1.0 + 1e-15).contains(c)));
        }
    }

    #[test]
    fn equal_poses_flag_zero_effect() {
        let net = ToyPathwayNet::separable(0);
        let p = DVector::from_element(TOY_POSE_DIM, 1.0);
        let t = DVector::from_element(TOY_TRAJ_DIM, 1.0);
        assert!(camera_invariance_cosine(&net, &p, &p, &t, &t).unwrap().iter().all(Option::is_none));
    }

    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn overlap_fixtures() {
        let u = vec![e(4, 0), e(4, 1)];
        assert_abs_diff_eq!(subspace_overlap(&u, &u, 2).unwrap().overlap, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(subspace_overlap(&u, &[e(4, 2), e(4, 3)], 2).unwrap().overlap, 0.0, epsilon = 1e-9);
        let half = subspace_overlap(&u, &[e(4, 0) * 3.0, e(4, 2)], 2).unwrap();
        assert_abs_diff_eq!(half.overlap, 0.5, epsilon = 1e-9);
        assert!(half.warnings.is_empty());
    }

    #[test]
    fn overlap_rank_reduction_warns() {
        let u = vec![e(3, 0), e(3, 0) * 2.0];
        let rep = subspace_overlap(&u, &[e(3, 0), e(3, 1)], 2).unwrap();
        assert_eq!(rep.dims_used, 1);
        assert_eq!(rep.warnings.len(), 1);
        assert_abs_diff_eq!(rep.overlap, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn overlap_symmetric_and_rotation_invariant() {
        let mut r = rng(6);
        for _ in 0..30 {
            let u: Vec<DVector<f64>> = (0..5).map(|_| gaussian_probe(6, &mut r)).collect();
            let v: Vec<DVector<f64>> = (0..5).map(|_| gaussian_probe(6, &mut r)).collect();
            let a = subspace_overlap(&u, &v, 3).unwrap().overlap;
            let b = subspace_overlap(&v, &u, 3).unwrap().overlap;
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            let q = DMatrix::from_fn(6, 6, |_, _| r.sample::<f64, _>(StandardNormal)).qr().q();
            let ru: Vec<_> = u.iter().map(|x| &q * x).collect();
            let rv: Vec<_> = v.iter().map(|x| &q * x).collect();
            assert_abs_diff_eq!(subspace_overlap(&ru, &rv, 3).unwrap().overlap, a, epsilon = 1e-9);
            assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }

    #[test]
    fn separable_updates_are_input_independent() {
        let mut r = rng(7);
        let net = ToyPathwayNet::separable(2);
        let base = DVector::zeros(TOY_POSE_DIM);
        let null = DVector::zeros(TOY_TRAJ_DIM);
        let poses: Vec<_> = (0..6).map(|_| integer_probe(TOY_POSE_DIM, &mut r)).collect();
        let trajs: Vec<_> = (0..6).map(|_| integer_probe(TOY_TRAJ_DIM, &mut r)).collect();
        let (cam, traj) = pathway_updates(&net, 1, &base, &null, &poses, &trajs).unwrap();
        let rep = subspace_overlap(&cam, &traj, 2).unwrap();
        assert!((0.0..=1.0).contains(&rep.overlap));
        assert_eq!(cam.len(), 6);
    }
}

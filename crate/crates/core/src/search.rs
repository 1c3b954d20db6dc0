//! Head grouping by simulated annealing over a score matrix, per-layer head
//! budget allocation, and the search phase that drives both.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::cka;
use crate::attention::{AttentionParams, HeadKind, LayerAttention};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm_sq, Matrix};
use crate::model::ToyModel;
use crate::scalar::Scalar;

/// Partition of head indices into groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        Self { groups }
    }

    /// `n_groups` contiguous blocks of `0..n`.
    pub fn contiguous(n: usize, n_groups: usize) -> Result<Self> {
        if n_groups == 0 || n % n_groups != 0 {
            return Err(Error::config(format!(
                "{n} heads cannot form {n_groups} equal groups"
            )));
        }
        let size = n / n_groups;
        Ok(Self::new(
            (0..n_groups)
                .map(|g| (g * size..(g + 1) * size).collect())
                .collect(),
        ))
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    /// Checks that the groups are non-empty, equal-sized and partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::config("grouping has no groups"));
        }
        let g = self.group_size();
        if g == 0 || self.groups.iter().any(|m| m.len() != g) {
            return Err(Error::config(format!(
                "groups must be non-empty and equal-sized: {:?}",
                self.groups
            )));
        }
        let mut seen = vec![false; n];
        for &h in self.groups.iter().flatten() {
            if h >= n || seen[h] {
                return Err(Error::config(format!(
                    "grouping {:?} is not a partition of 0..{n}",
                    self.groups
                )));
            }
            seen[h] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::config(format!(
                "grouping {:?} does not cover 0..{n}",
                self.groups
            )));
        }
        Ok(())
    }

    /// Members sorted within groups, groups sorted by first member.
    pub fn canonical(&self) -> Self {
        let mut groups = self.groups.clone();
        groups.iter_mut().for_each(|g| g.sort_unstable());
        groups.sort();
        Self { groups }
    }

    /// Head order that makes every group contiguous.
    pub fn permutation(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Relabels heads: old index `perm[i]` becomes `i`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Self::new(
            self.groups
                .iter()
                .map(|g| g.iter().map(|&h| inverse[h]).collect())
                .collect(),
        )
    }
}

/// Symmetric head-to-head scores, higher meaning more alike.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix<T> {
    pub scores: Matrix<T>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(scores: Matrix<T>) -> Result<Self> {
        let n = scores.rows();
        if scores.cols() != n {
            return Err(Error::config("score matrix must be square"));
        }
        if !scores.is_finite() {
            return Err(Error::Domain("score matrix has non-finite entries".into()));
        }
        let tol = T::lit(1e-9);
        for i in 0..n {
            for j in 0..i {
                if (scores[(i, j)] - scores[(j, i)]).abs() > tol {
                    return Err(Error::Domain(format!(
                        "score matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { scores })
    }

    pub fn size(&self) -> usize {
        self.scores.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Cka,
    NegMse,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cka" => Ok(Self::Cka),
            "neg_mse" => Ok(Self::NegMse),
            other => Err(Error::config(format!(
                "unknown score mode {other:?} (expected cka or neg_mse)"
            ))),
        }
    }
}

/// Pairwise scores between the key (or value, or query) heads of a layer.
pub fn head_score_matrix<T: Scalar>(
    params: &AttentionParams<T>,
    layer: usize,
    kind: HeadKind,
    mode: ScoreMode,
) -> Result<ScoreMatrix<T>> {
    let l = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Domain(format!("layer {layer} out of range")))?;
    let heads = l.heads(kind);
    let n = heads.len();
    let mut scores = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = match mode {
                ScoreMode::Cka => cka(&heads[i], &heads[j])?,
                ScoreMode::NegMse => {
                    let d = heads[i].sub(&heads[j]);
                    -frobenius_norm_sq(&d) / T::from_count(d.data().len())
                }
            };
            scores[(i, j)] = s;
            scores[(j, i)] = s;
        }
    }
    ScoreMatrix::new(scores)
}

/// Sum of within-group scores over ordered pairs (diagonal included), halved.
pub fn grouping_score<T: Scalar>(m: &ScoreMatrix<T>, g: &Grouping) -> Result<T> {
    g.validate(m.size())?;
    Ok(raw_score(&m.scores, &g.groups))
}

fn raw_score<T: Scalar>(m: &Matrix<T>, groups: &[Vec<usize>]) -> T {
    let mut score = T::zero();
    for group in groups {
        for &i in group {
            for &j in group {
                score += m[(i, j)];
            }
        }
    }
    score / T::lit(2.0)
}

/// Temperature schedule of the annealer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealParams {
    pub t_start: f64,
    pub t_min: f64,
    pub alpha: f64,
    /// Swap proposals at each temperature; `None` means one per head.
    /// `Some(1)` gives a single proposal per cooling step.
    pub moves_per_temp: Option<usize>,
}

impl Default for AnnealParams {
    fn default() -> Self {
        Self {
            t_start: 100.0,
            t_min: 0.001,
            alpha: 0.9,
            moves_per_temp: None,
        }
    }
}

/// Anneals a random equal-size partition toward a high [`grouping_score`].
///
/// At each temperature the annealer makes a fixed number of proposals, each
/// swapping one random member between two random groups (no move when both
/// draws name the same group); improvements are always taken, others with
/// probability `exp(Δ/T)`. The best grouping
/// visited is returned in canonical order with its score.
pub fn anneal_grouping<T: Scalar>(
    m: &ScoreMatrix<T>,
    n_groups: usize,
    seed: u64,
) -> Result<(Grouping, T)> {
    anneal_grouping_with(m, n_groups, seed, AnnealParams::default())
}

pub fn anneal_grouping_with<T: Scalar>(
    m: &ScoreMatrix<T>,
    n_groups: usize,
    seed: u64,
    params: AnnealParams,
) -> Result<(Grouping, T)> {
    let p = m.size();
    if n_groups == 0 || p == 0 || p % n_groups != 0 {
        return Err(Error::config(format!(
            "{p} heads cannot form {n_groups} equal groups"
        )));
    }
    let size = p / n_groups;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<usize> = (0..p).collect();
    points.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = points.chunks(size).map(<[usize]>::to_vec).collect();
    let mut current = raw_score(&m.scores, &groups);
    let mut best = (groups.clone(), current);

    let moves = params.moves_per_temp.unwrap_or(p).max(1);
    let mut t = params.t_start;
    while t > params.t_min {
        for _ in 0..moves {
            let i = rng.gen_range(0..n_groups);
            let j = rng.gen_range(0..n_groups);
            if i != j {
                let a = rng.gen_range(0..size);
                let b = rng.gen_range(0..size);
                let mut next = groups.clone();
                let tmp = next[i][a];
                next[i][a] = next[j][b];
                next[j][b] = tmp;
                let score = raw_score(&m.scores, &next);
                let delta = (score - current).as_f64();
                if delta > 0.0 || (delta / t).exp() > rng.gen::<f64>() {
                    groups = next;
                    current = score;
                    if current > best.1 {
                        best = (groups.clone(), current);
                    }
                }
            }
        }
        t *= params.alpha;
    }
    let g = Grouping::new(best.0).canonical();
    let score = raw_score(&m.scores, &g.groups);
    Ok((g, score))
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy per-layer head allocation driven by per-layer losses.
///
/// Every layer starts at `min_alloc`. While budget allows, the single
/// highest-loss layer is raised to the largest allowed allocation. The rest
/// is handed out in steps of the smallest allowed allocation, each to the
/// layer with the highest `loss / allocation` (ties: lowest index).
pub fn allocate_layer_budgets(
    losses: &[f64],
    total: usize,
    alloc_set: &[usize],
    min_alloc: usize,
) -> Result<Vec<usize>> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::config("no layers to allocate"));
    }
    if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::config("layer losses must be finite and nonnegative"));
    }
    let step = *alloc_set
        .iter()
        .min()
        .ok_or_else(|| Error::config("empty allocation set"))?;
    let top = *alloc_set.iter().max().expect("non-empty");
    if step == 0 || min_alloc == 0 || top < min_alloc {
        return Err(Error::config(format!(
            "invalid allocation set {alloc_set:?} with minimum {min_alloc}"
        )));
    }
    let floor = n * min_alloc;
    if total < floor {
        return Err(Error::config(format!(
            "budget {total} below the minimum {floor} for {n} layers"
        )));
    }
    if (total - floor) % step != 0 || (top - min_alloc) % step != 0 {
        return Err(Error::config(format!(
            "budget {total} cannot be reached in steps of {step} from {floor}"
        )));
    }

    let mut alloc = vec![min_alloc; n];
    let sum: f64 = losses.iter().sum();
    let mut weights: Vec<f64> = if sum > 0.0 {
        losses.iter().map(|l| l / sum).collect()
    } else {
        vec![0.0; n]
    };
    let remaining = total - floor;
    let upgrades = 1.min(remaining / top);
    for _ in 0..upgrades {
        let idx = argmax_lowest(&weights);
        alloc[idx] += top - min_alloc;
        weights[idx] = 0.0;
    }
    let mut remaining = total - alloc.iter().sum::<usize>();
    while remaining > 0 {
        let ratio: Vec<f64> = losses
            .iter()
            .zip(&alloc)
            .map(|(l, &a)| l / a as f64)
            .collect();
        let idx = argmax_lowest(&ratio);
        alloc[idx] += step;
        remaining -= step;
    }
    Ok(alloc)
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Moves each count onto a divisor of `n_heads` while keeping the total.
///
/// Counts that are not divisors (or exceed `n_heads`) drop to the largest
/// divisor below them; the freed heads are then re-spent one divisor step at
/// a time on the layer with the highest `loss / count` whose next step still
/// fits.
pub fn snap_to_divisors(
    counts: &[usize],
    losses: &[f64],
    n_heads: usize,
    total: usize,
) -> Result<Vec<usize>> {
    let divs = divisors(n_heads);
    let mut out: Vec<usize> = counts
        .iter()
        .map(|&c| divs.iter().copied().filter(|&d| d <= c).max().unwrap_or(1))
        .collect();
    let mut spare = total as isize - out.iter().sum::<usize>() as isize;
    while spare > 0 {
        let mut pick: Option<(usize, usize, f64)> = None;
        for (l, &c) in out.iter().enumerate() {
            let Some(&next) = divs.iter().find(|&&d| d > c) else {
                continue;
            };
            if (next - c) as isize > spare {
                continue;
            }
            let ratio = losses[l] / c as f64;
            if pick.map_or(true, |(_, _, r)| ratio > r) {
                pick = Some((l, next, ratio));
            }
        }
        let Some((l, next, _)) = pick else { break };
        spare -= (next - out[l]) as isize;
        out[l] = next;
    }
    if spare != 0 {
        return Err(Error::config(format!(
            "budget {total} cannot be split into per-layer divisors of {n_heads} heads \
             (allocation {counts:?})"
        )));
    }
    Ok(out)
}

/// Reorders the heads of every layer so that each grouping's members are
/// contiguous, moving the matching row blocks of `w_o` along. The forward
/// function is unchanged.
pub fn permute_heads<T: Scalar>(
    params: &AttentionParams<T>,
    groupings: &[Grouping],
) -> Result<AttentionParams<T>> {
    if groupings.len() != params.layers.len() {
        return Err(Error::config(format!(
            "need one grouping per layer ({}), got {}",
            params.layers.len(),
            groupings.len()
        )));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, (layer, g)) in params.layers.iter().zip(groupings).enumerate() {
        let h = layer.w_q.len();
        if layer.w_k.len() != h || layer.w_v.len() != h {
            return Err(Error::topology(format!(
                "layer {l}: head permutation needs MHA weights"
            )));
        }
        g.validate(h)
            .map_err(|e| Error::config(format!("layer {l}: {e}")))?;
        layers.push(permute_layer(layer, &g.permutation()));
    }
    Ok(AttentionParams { layers })
}

pub(crate) fn permute_layer<T: Scalar>(
    layer: &LayerAttention<T>,
    perm: &[usize],
) -> LayerAttention<T> {
    let dk = layer.head_dim();
    let pick = |v: &[Matrix<T>]| perm.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let mut w_o = Matrix::zeros(layer.w_o.rows(), layer.w_o.cols());
    for (new, &old) in perm.iter().enumerate() {
        w_o.set_row_block(new * dk, &layer.w_o.row_block(old * dk, dk));
    }
    LayerAttention {
        w_q: pick(&layer.w_q),
        w_k: pick(&layer.w_k),
        w_v: pick(&layer.w_v),
        w_o,
    }
}

/// Per-layer key/value head counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub key_heads: Vec<usize>,
    pub value_heads: Vec<usize>,
}

impl LayerBudget {
    pub fn total(&self) -> usize {
        self.key_heads.iter().sum::<usize>() + self.value_heads.iter().sum::<usize>()
    }

    pub fn uniform(n_layers: usize, heads: usize) -> Self {
        Self {
            key_heads: vec![heads; n_layers],
            value_heads: vec![heads; n_layers],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub score_mode: ScoreMode,
    pub seed: u64,
    /// Total key + value heads over all layers.
    pub kv_budget_total: usize,
    pub alloc_set: Vec<usize>,
    pub min_alloc: usize,
}

impl SearchConfig {
    /// Allocation set scaled to the head count the way `[4, 8, 16]` relates
    /// to 32 heads: `[H/8, H/4, H/2]`, floored at 1.
    pub fn default_alloc_set(n_heads: usize) -> Vec<usize> {
        let mut set: Vec<usize> = [8, 4, 2].iter().map(|d| (n_heads / d).max(1)).collect();
        set.dedup();
        set
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    /// Per-layer key and value loss proxies fed to the allocator.
    pub key_losses: Vec<f64>,
    pub value_losses: Vec<f64>,
    pub key_scores: Vec<ScoreMatrix<T>>,
    pub value_scores: Vec<ScoreMatrix<T>>,
    pub key_groupings: Vec<Grouping>,
    pub value_groupings: Vec<Grouping>,
    pub budget: LayerBudget,
}

/// Collects per-layer head-pair activation distances over `steps` forward
/// passes, allocates per-kind head budgets from them, and groups each
/// layer's heads by annealing its score matrix.
///
/// The loss proxy of a layer is the mean over head pairs of
/// `‖K_i − K_j‖² / (‖K_i‖² + ‖K_j‖²)` on the layer's key (value)
/// activations. No parameters change.
pub fn run_search_phase<T: Scalar>(
    model: &ToyModel<T>,
    batches: &[Vec<Vec<usize>>],
    cfg: &SearchConfig,
) -> Result<SearchOutcome<T>> {
    if batches.is_empty() || batches.iter().all(Vec::is_empty) {
        return Err(Error::EmptyData(
            "search phase needs at least one batch".into(),
        ));
    }
    if !model.topology.is_identity() {
        return Err(Error::topology("search runs on an MHA model"));
    }
    let n_layers = model.config.n_layers;
    let h = model.config.n_query_heads;
    if cfg.kv_budget_total % 2 != 0 {
        return Err(Error::config(format!(
            "KV budget {} must split evenly between keys and values",
            cfg.kv_budget_total
        )));
    }

    let mut dist_k = vec![0.0f64; n_layers];
    let mut dist_v = vec![0.0f64; n_layers];
    let mut samples = 0usize;
    let steps = cfg.steps.max(1);
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        for seq in batch {
            let inputs = model.layer_inputs(None, seq)?;
            for (l, x) in inputs.iter().enumerate() {
                let layer = &model.attn.layers[l];
                dist_k[l] += mean_pair_distance(x, &layer.w_k);
                dist_v[l] += mean_pair_distance(x, &layer.w_v);
            }
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(Error::EmptyData(
            "search batches contain no sequences".into(),
        ));
    }
    let key_losses: Vec<f64> = dist_k.iter().map(|d| d / samples as f64).collect();
    let value_losses: Vec<f64> = dist_v.iter().map(|d| d / samples as f64).collect();

    let per_kind = cfg.kv_budget_total / 2;
    let alloc = |losses: &[f64]| -> Result<Vec<usize>> {
        let raw = allocate_layer_budgets(losses, per_kind, &cfg.alloc_set, cfg.min_alloc)?;
        snap_to_divisors(&raw, losses, h, per_kind)
    };
    let budget = LayerBudget {
        key_heads: alloc(&key_losses)?,
        value_heads: alloc(&value_losses)?,
    };

    let mut key_scores = Vec::with_capacity(n_layers);
    let mut value_scores = Vec::with_capacity(n_layers);
    let mut key_groupings = Vec::with_capacity(n_layers);
    let mut value_groupings = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        for (kind, count, scores, groupings) in [
            (
                HeadKind::Key,
                budget.key_heads[l],
                &mut key_scores,
                &mut key_groupings,
            ),
            (
                HeadKind::Value,
                budget.value_heads[l],
                &mut value_scores,
                &mut value_groupings,
            ),
        ] {
            let m = head_score_matrix(&model.attn, l, kind, cfg.score_mode)?;
            let g = if count == h || count == 1 {
                Grouping::contiguous(h, count)?
            } else {
                let salt = (l as u64) << 1 | u64::from(kind == HeadKind::Value);
                anneal_grouping(
                    &m,
                    count,
                    cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )?
                .0
            };
            scores.push(m);
            groupings.push(g);
        }
    }
    Ok(SearchOutcome {
        key_losses,
        value_losses,
        key_scores,
        value_scores,
        key_groupings,
        value_groupings,
        budget,
    })
}

fn mean_pair_distance<T: Scalar>(x: &Matrix<T>, heads: &[Matrix<T>]) -> f64 {
    let acts: Vec<Matrix<T>> = heads.iter().map(|w| x.mm(w)).collect();
    let power: Vec<f64> = acts.iter().map(|a| frobenius_norm_sq(a).as_f64()).collect();
    let n = acts.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let denom = power[i] + power[j];
            if denom > 0.0 {
                total += frobenius_norm_sq(&acts[i].sub(&acts[j])).as_f64() / denom;
            }
        }
    }
    total * 2.0 / (n * (n - 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{mha_forward, random_uniform, ModelConfig};

    fn sym(n: usize, seed: u64) -> ScoreMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        ScoreMatrix::new(m).unwrap()
    }

    fn double_loop(m: &ScoreMatrix<f64>, g: &Grouping) -> f64 {
        let mut s = 0.0;
        for group in &g.groups {
            for a in group {
                for b in group {
                    s += m.scores[(*a, *b)];
                }
            }
        }
        s / 2.0
    }

    #[test]
    fn score_cases() {
        let g = Grouping::contiguous(4, 2).unwrap();
        let id = ScoreMatrix::new(Matrix::<f64>::identity(4)).unwrap();
        assert_eq!(grouping_score(&id, &g).unwrap(), 2.0);
        let ones = ScoreMatrix::new(Matrix::<f64>::filled(4, 4, 1.0)).unwrap();
        assert_eq!(grouping_score(&ones, &g).unwrap(), 4.0);
        let m = sym(6, 3);
        let g = Grouping::new(vec![vec![5, 0], vec![2, 3], vec![1, 4]]);
        assert!((grouping_score(&m, &g).unwrap() - double_loop(&m, &g)).abs() < 1e-15);
        assert!(
            grouping_score(&m, &Grouping::new(vec![vec![0, 1], vec![1, 2], vec![3, 4]])).is_err()
        );
    }

    #[test]
    fn score_relabel_invariance() {
        let m = sym(6, 4);
        let a = Grouping::new(vec![vec![0, 3], vec![1, 5], vec![2, 4]]);
        let b = Grouping::new(vec![vec![4, 2], vec![3, 0], vec![5, 1]]);
        assert!((grouping_score(&m, &a).unwrap() - grouping_score(&m, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn constant_scores_any_partition_is_optimal() {
        let m = ScoreMatrix::new(Matrix::<f64>::filled(6, 6, 0.3)).unwrap();
        let (g, s) = anneal_grouping(&m, 3, 1).unwrap();
        g.validate(6).unwrap();
        assert!((s - 0.3 * 3.0 * 4.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn anneal_is_self_consistent_and_seeded() {
        let m = sym(8, 5);
        let (g1, s1) = anneal_grouping(&m, 4, 42).unwrap();
        let (g2, s2) = anneal_grouping(&m, 4, 42).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(s1, s2);
        assert!((grouping_score(&m, &g1).unwrap() - s1).abs() < 1e-15);
        assert!(anneal_grouping(&m, 3, 0).is_err());
    }

    #[test]
    fn allocation_cases() {
        assert_eq!(
            allocate_layer_budgets(&[4.0, 3.0, 2.0, 1.0], 16, &[4, 8, 16], 4).unwrap(),
            vec![4, 4, 4, 4]
        );
        // 16 spare: layer 0 is raised to 16, the last 4 go to the best loss/alloc
        assert_eq!(
            allocate_layer_budgets(&[4.0, 3.0, 2.0, 1.0], 32, &[4, 8, 16], 4).unwrap(),
            vec![16, 8, 4, 4]
        );
        let a = allocate_layer_budgets(&[1.0, 5.0, 2.0, 2.0], 40, &[4, 8, 16], 4).unwrap();
        assert_eq!(a.iter().sum::<usize>(), 40);
        assert!(a.iter().all(|&x| x >= 4));
        assert!(allocate_layer_budgets(&[1.0; 4], 12, &[4, 8, 16], 4).is_err());
        assert!(allocate_layer_budgets(&[1.0; 4], 18, &[4, 8, 16], 4).is_err());
    }

    #[test]
    fn allocation_ties_go_to_lowest_index() {
        let a = allocate_layer_budgets(&[1.0; 4], 24, &[4, 8, 16], 4).unwrap();
        assert_eq!(a, vec![8, 8, 4, 4]);
        let b = allocate_layer_budgets(&[0.0; 3], 24, &[4, 8, 16], 4).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 24);
    }

    #[test]
    fn snapping_keeps_total_on_divisors() {
        assert_eq!(
            snap_to_divisors(&[10, 2, 2, 2], &[10.0, 1.0, 1.0, 1.0], 8, 16).unwrap(),
            vec![8, 4, 2, 2]
        );
        assert_eq!(
            snap_to_divisors(&[4, 4, 4, 4], &[1.0; 4], 8, 16).unwrap(),
            vec![4; 4]
        );
        let s = snap_to_divisors(&[3, 3, 3, 3], &[1.0, 2.0, 3.0, 4.0], 8, 12).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 12);
        assert!(s.iter().all(|c| 8 % c == 0));
        assert!(snap_to_divisors(&[8, 8], &[1.0, 1.0], 8, 17).is_err());
    }

    #[test]
    fn permutation_preserves_forward() {
        let cfg = ModelConfig::new(1, 4, 3, 5, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = AttentionParams::<f64>::random(&cfg, 0.6, &mut rng);
        let x = random_uniform(5, 12, 1.0, &mut rng);
        let base = mha_forward(&x, &params.layers[0]).unwrap();

        let id = permute_heads(&params, &[Grouping::contiguous(4, 2).unwrap()]).unwrap();
        assert_eq!(id, params);

        let g = Grouping::new(vec![vec![3, 0], vec![2, 1]]);
        let p = permute_heads(&params, &[g]).unwrap();
        let out = mha_forward(&x, &p.layers[0]).unwrap();
        assert!(out.max_abs_diff(&base) <= 1e-12);
        assert!(permute_heads(&params, &[Grouping::new(vec![vec![0, 0], vec![1, 2]])]).is_err());
    }

    #[test]
    fn swap_two_heads_by_hand() {
        let cfg = ModelConfig::new(1, 2, 2, 5, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = AttentionParams::<f64>::random(&cfg, 0.6, &mut rng);
        let p = permute_heads(&params, &[Grouping::new(vec![vec![1], vec![0]])]).unwrap();
        let l = &params.layers[0];
        let q = &p.layers[0];
        assert_eq!(q.w_q[0], l.w_q[1]);
        assert_eq!(q.w_k[1], l.w_k[0]);
        assert_eq!(q.w_v[0], l.w_v[1]);
        for c in 0..4 {
            for r in 0..2 {
                assert_eq!(q.w_o[(r, c)], l.w_o[(r + 2, c)]);
                assert_eq!(q.w_o[(r + 2, c)], l.w_o[(r, c)]);
            }
        }
    }

    #[test]
    fn relabel_tracks_permutation() {
        let g = Grouping::new(vec![vec![2, 0], vec![1, 3]]);
        let perm = g.permutation();
        assert_eq!(perm, vec![2, 0, 1, 3]);
        let other = Grouping::new(vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(
            other.relabel(&perm).canonical(),
            Grouping::new(vec![vec![0, 3], vec![1, 2]])
        );
    }

    #[test]
    fn neg_mse_and_cka_modes() {
        let cfg = ModelConfig::new(1, 4, 2, 5, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = AttentionParams::<f64>::random(&cfg, 0.6, &mut rng);
        let w = params.layers[0].w_k[0].clone();
        params.layers[0].w_k = vec![w; 4];
        let neg = head_score_matrix(&params, 0, HeadKind::Key, ScoreMode::NegMse).unwrap();
        assert!(neg.scores.is_zero());
        let c = head_score_matrix(&params, 0, HeadKind::Key, ScoreMode::Cka).unwrap();
        assert!(c.scores.data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let v = &params.layers[0].w_v;
        let m = head_score_matrix(&params, 0, HeadKind::Value, ScoreMode::NegMse).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for r in 0..8 {
                    for cc in 0..2 {
                        s += (v[i][(r, cc)] - v[j][(r, cc)]).powi(2);
                    }
                }
                assert!((m.scores[(i, j)] + s / 16.0).abs() < 1e-14);
                assert!(
                    (head_score_matrix(&params, 0, HeadKind::Value, ScoreMode::Cka)
                        .unwrap()
                        .scores[(i, j)]
                        - cka(&v[i], &v[j]).unwrap())
                    .abs()
                        < 1e-15
                );
            }
        }
        assert!("bogus".parse::<ScoreMode>().is_err());
        assert_eq!("neg_mse".parse::<ScoreMode>().unwrap(), ScoreMode::NegMse);
    }

    #[test]
    fn default_alloc_sets() {
        assert_eq!(SearchConfig::default_alloc_set(32), vec![4, 8, 16]);
        assert_eq!(SearchConfig::default_alloc_set(8), vec![1, 2, 4]);
        assert_eq!(SearchConfig::default_alloc_set(2), vec![1]);
    }
}

//! Linear head fusion: per-query-head coefficients over the key/value heads
//! of the query's group, the intra-group disagreement loss, the decaying
//! margin and multiplier of the constrained objective, and materialization
//! of fused heads.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, AttentionParams, DhaTopology, HeadKind, HeadMix, LayerAttention, LayerTopology,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::search::Grouping;

/// Fusion-loss value below which the fusion phase stops.
pub const TERMINATION_LOSS: f64 = 1e-3;

/// Coefficient resolution: one per head channel, or one per group member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    #[default]
    PerChannel,
    Scalar,
}

/// Fusion coefficients for one projection kind of one layer.
///
/// `omega[h]` has shape `(g, width)`: row `j` weights the `j`-th member of
/// `h`'s group, column `c` the head channel (`width == 1` in scalar mode).
#[derive(Debug, Clone, PartialEq)]
pub struct KindFusion<T> {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
    omega: Vec<Matrix<T>>,
}

impl<T: Scalar> KindFusion<T> {
    /// Kronecker-delta coefficients: query head `h` weights only its own head.
    pub fn identity(grouping: &Grouping, n_heads: usize, width: usize) -> Result<Self> {
        grouping.validate(n_heads)?;
        let g = grouping.group_size();
        let mut group_of = vec![0; n_heads];
        let mut omega = vec![Matrix::zeros(g, width); n_heads];
        for (n, members) in grouping.groups.iter().enumerate() {
            for (j, &h) in members.iter().enumerate() {
                group_of[h] = n;
                omega[h] = Matrix::zeros(g, width);
                omega[h].row_mut(j).fill(T::one());
            }
        }
        Ok(Self {
            groups: grouping.groups.clone(),
            group_of,
            omega,
        })
    }

    pub fn from_parts(groups: Vec<Vec<usize>>, omega: Vec<Matrix<T>>) -> Result<Self> {
        let n_heads = omega.len();
        let grouping = Grouping::new(groups);
        grouping.validate(n_heads)?;
        let g = grouping.group_size();
        let width = omega.first().map_or(1, Matrix::cols);
        if omega.iter().any(|m| m.shape() != (g, width)) {
            return Err(Error::config(format!(
                "every omega block must be {g}x{width}"
            )));
        }
        let mut group_of = vec![0; n_heads];
        for (n, members) in grouping.groups.iter().enumerate() {
            for &h in members {
                group_of[h] = n;
            }
        }
        Ok(Self {
            groups: grouping.groups,
            group_of,
            omega,
        })
    }

    #[inline]
    pub fn n_query_heads(&self) -> usize {
        self.omega.len()
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.omega.first().map_or(1, Matrix::cols)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn grouping(&self) -> Grouping {
        Grouping::new(self.groups.clone())
    }

    pub fn group_of(&self, h: usize) -> usize {
        self.group_of[h]
    }

    #[inline]
    pub fn members_of(&self, h: usize) -> &[usize] {
        &self.groups[self.group_of[h]]
    }

    #[inline]
    pub fn coef(&self, h: usize, j: usize, c: usize) -> T {
        let m = &self.omega[h];
        m[(j, if m.cols() == 1 { 0 } else { c })]
    }

    pub fn omega(&self) -> &[Matrix<T>] {
        &self.omega
    }

    pub fn omega_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.omega
    }

    pub fn zero_grads(&self) -> Vec<Matrix<T>> {
        self.omega
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }

    /// Mean coefficient block over the query heads of group `n`.
    pub fn group_mean(&self, n: usize) -> Matrix<T> {
        let members = &self.groups[n];
        let mut acc = Matrix::zeros(self.group_size(), self.width());
        for &h in members {
            acc.add_assign(&self.omega[h]);
        }
        acc.scale(T::one() / T::from_count(members.len()))
    }

    /// Replaces every row block by its group mean.
    pub fn force_group_means(&mut self) {
        for n in 0..self.groups.len() {
            let mean = self.group_mean(n);
            for &h in &self.groups[n] {
                self.omega[h] = mean.clone();
            }
        }
    }

    /// Sum over unordered intra-group pairs of the pair loss, and the
    /// normalizer `H·g·W·(g−1)/2` (number of squared differences).
    fn pair_sum(&self) -> (T, T) {
        let g = self.group_size();
        let w = self.width();
        let per_pair = T::one() / T::from_count(g * w);
        let mut total = T::zero();
        for members in &self.groups {
            for (a, &h) in members.iter().enumerate() {
                for &h2 in &members[a + 1..] {
                    total += sq_diff_sum(&self.omega[h], &self.omega[h2]) * per_pair;
                }
            }
        }
        let count = self.n_query_heads() * g * w * g.saturating_sub(1) / 2;
        (total, T::from_count(count))
    }

    /// Accumulates `scale · ∂(pair sum)/∂ω` into `grads`.
    fn pair_sum_grad(&self, scale: T, grads: &mut [Matrix<T>]) {
        let g = self.group_size();
        let w = self.width();
        let coeff = scale * T::lit(2.0) / T::from_count(g * w);
        for members in &self.groups {
            for (a, &h) in members.iter().enumerate() {
                for &h2 in &members[a + 1..] {
                    let diff = self.omega[h].sub(&self.omega[h2]);
                    grads[h].axpy(coeff, &diff);
                    grads[h2].axpy(-coeff, &diff);
                }
            }
        }
    }
}

fn sq_diff_sum<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFusion<T> {
    pub key: KindFusion<T>,
    pub value: KindFusion<T>,
}

impl<T: Scalar> LayerFusion<T> {
    pub fn kind(&self, kind: HeadKind) -> Result<&KindFusion<T>> {
        match kind {
            HeadKind::Key => Ok(&self.key),
            HeadKind::Value => Ok(&self.value),
            HeadKind::Query => Err(Error::Domain("query heads are never fused".into())),
        }
    }

    /// Loss contribution and normalizer of this layer.
    fn layer_loss(&self) -> T {
        let (sk, nk) = self.key.pair_sum();
        let (sv, nv) = self.value.pair_sum();
        let n = nk + nv;
        if n.is_zero() {
            T::zero()
        } else {
            (sk + sv) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOperator<T> {
    pub layers: Vec<LayerFusion<T>>,
}

/// Gradient buffers shaped like a [`FusionOperator`]'s coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaGrads<T> {
    /// `layers[l] = (key blocks, value blocks)`
    pub layers: Vec<(Vec<Matrix<T>>, Vec<Matrix<T>>)>,
}

impl<T: Scalar> OmegaGrads<T> {
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().flat_map(|(k, v)| k.iter().chain(v))
    }
}

impl<T: Scalar> FusionOperator<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_grads(&self) -> OmegaGrads<T> {
        OmegaGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (l.key.zero_grads(), l.value.zero_grads()))
                .collect(),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.key.omega.iter().chain(&l.value.omega))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.key.omega.iter_mut().chain(l.value.omega.iter_mut()))
    }

    pub fn force_group_means(&mut self) {
        for l in &mut self.layers {
            l.key.force_group_means();
            l.value.force_group_means();
        }
    }
}

/// Delta-initialized operator; the fused forward equals the MHA forward.
pub fn init_identity<T: Scalar>(
    mha: &AttentionParams<T>,
    grouping_k: &[Grouping],
    grouping_v: &[Grouping],
    mode: OmegaMode,
) -> Result<FusionOperator<T>> {
    if grouping_k.len() != mha.layers.len() || grouping_v.len() != mha.layers.len() {
        return Err(Error::config(format!(
            "need one key and one value grouping per layer ({}), got {} and {}",
            mha.layers.len(),
            grouping_k.len(),
            grouping_v.len()
        )));
    }
    let mut layers = Vec::with_capacity(mha.layers.len());
    for (l, layer) in mha.layers.iter().enumerate() {
        let h = layer.w_q.len();
        if layer.w_k.len() != h || layer.w_v.len() != h {
            return Err(Error::topology(format!(
                "layer {l}: fusion starts from MHA weights"
            )));
        }
        let width = match mode {
            OmegaMode::PerChannel => layer.head_dim(),
            OmegaMode::Scalar => 1,
        };
        let wrap = |e: Error| Error::config(format!("layer {l}: {e}"));
        layers.push(LayerFusion {
            key: KindFusion::identity(&grouping_k[l], h, width).map_err(wrap)?,
            value: KindFusion::identity(&grouping_v[l], h, width).map_err(wrap)?,
        });
    }
    Ok(FusionOperator { layers })
}

/// Attention with channelwise fused keys and values, one layer.
pub fn fused_forward<T: Scalar>(
    x: &Matrix<T>,
    mha: &LayerAttention<T>,
    op: &LayerFusion<T>,
) -> Result<Matrix<T>> {
    Ok(attend(x, mha, HeadMix::Fused(&op.key), HeadMix::Fused(&op.value))?.0)
}

/// Mean squared difference between the coefficient blocks of two query
/// heads that share a group.
pub fn head_pair_loss<T: Scalar>(
    op: &FusionOperator<T>,
    layer: usize,
    kind: HeadKind,
    group: usize,
    h: usize,
    h2: usize,
) -> Result<T> {
    let lf = op
        .layers
        .get(layer)
        .ok_or_else(|| Error::Domain(format!("layer {layer} out of range")))?;
    let kf = lf.kind(kind)?;
    let members = kf
        .groups
        .get(group)
        .ok_or_else(|| Error::Domain(format!("group {group} out of range")))?;
    if !members.contains(&h) || !members.contains(&h2) {
        return Err(Error::Domain(format!(
            "heads {h} and {h2} are not both in group {group} ({members:?})"
        )));
    }
    let n = kf.omega[h].data().len();
    Ok(sq_diff_sum(&kf.omega[h], &kf.omega[h2]) / T::from_count(n))
}

/// Intra-group disagreement of the coefficients, averaged over layers.
///
/// Per layer, the pair losses of both kinds are summed and divided by
/// `Σ_kind H·g·W·(g−1)/2`.
pub fn fusion_loss<T: Scalar>(op: &FusionOperator<T>) -> T {
    if op.layers.is_empty() {
        return T::zero();
    }
    let total: T = op.layers.iter().map(LayerFusion::layer_loss).sum();
    total / T::from_count(op.layers.len())
}

/// `fusion_loss` and its gradient with respect to every coefficient.
pub fn fusion_loss_grad<T: Scalar>(op: &FusionOperator<T>) -> (T, OmegaGrads<T>) {
    let mut grads = op.zero_grads();
    let n_layers = T::from_count(op.layers.len().max(1));
    for (lf, (gk, gv)) in op.layers.iter().zip(grads.layers.iter_mut()) {
        let (_, nk) = lf.key.pair_sum();
        let (_, nv) = lf.value.pair_sum();
        let n = nk + nv;
        if n.is_zero() {
            continue;
        }
        let scale = T::one() / (n * n_layers);
        lf.key.pair_sum_grad(scale, gk);
        lf.value.pair_sum_grad(scale, gv);
    }
    (fusion_loss(op), grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub step: usize,
}

impl MarginSchedule {
    pub fn new(base: f64, warmup_steps: usize) -> Result<Self> {
        if !(base > 0.0 && base < 1.0) {
            return Err(Error::config(format!("margin base {base} not in (0, 1)")));
        }
        if warmup_steps == 0 {
            return Err(Error::config("warm-up steps must be at least 1"));
        }
        Ok(Self {
            base,
            warmup_steps,
            step: 0,
        })
    }

    pub fn at(self, step: usize) -> Self {
        Self { step, ..self }
    }
}

/// `max(0, b^s · (1 − s/k))`.
pub fn margin(sched: &MarginSchedule) -> f64 {
    let s = sched.step as f64;
    let decay = sched.base.powf(s);
    let linear = 1.0 - s / sched.warmup_steps as f64;
    (decay * linear).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub lr_lambda: f64,
}

impl LagrangeState {
    pub fn new(lr_lambda: f64) -> Result<Self> {
        if !(lr_lambda > 0.0) || !lr_lambda.is_finite() {
            return Err(Error::config(format!("lr_lambda {lr_lambda} must be > 0")));
        }
        Ok(Self {
            lambda: 0.0,
            lr_lambda,
        })
    }
}

/// `λ · max(L_fusion − t, 0)`.
pub fn constrained_penalty(loss_fusion: f64, sched: &MarginSchedule, lag: &LagrangeState) -> f64 {
    lag.lambda * (loss_fusion - margin(sched)).max(0.0)
}

/// One projected ascent step on the multiplier.
pub fn lagrange_step(lag: &LagrangeState, loss_fusion: f64, target: f64) -> LagrangeState {
    let violation = (loss_fusion - target).max(0.0);
    LagrangeState {
        lambda: (lag.lambda + lag.lr_lambda * violation).max(0.0),
        lr_lambda: lag.lr_lambda,
    }
}

fn fuse_heads<T: Scalar>(heads: &[Matrix<T>], kf: &KindFusion<T>) -> Vec<Matrix<T>> {
    (0..kf.groups.len())
        .map(|n| {
            let mean = kf.group_mean(n);
            let members = &kf.groups[n];
            let (rows, cols) = heads[members[0]].shape();
            let mut fused = Matrix::zeros(rows, cols);
            for (j, &src) in members.iter().enumerate() {
                let w = &heads[src];
                for c in 0..cols {
                    let coef = mean[(j, if mean.cols() == 1 { 0 } else { c })];
                    for r in 0..rows {
                        fused[(r, c)] += coef * w[(r, c)];
                    }
                }
            }
            fused
        })
        .collect()
}

/// Builds one key and one value head per group from group-averaged
/// coefficients and the matching DHA topology.
pub fn materialize_dha<T: Scalar>(
    mha: &AttentionParams<T>,
    op: &FusionOperator<T>,
) -> Result<(AttentionParams<T>, DhaTopology)> {
    if mha.layers.len() != op.layers.len() {
        return Err(Error::topology(format!(
            "{} attention layers, {} fusion layers",
            mha.layers.len(),
            op.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(mha.layers.len());
    let mut topo = Vec::with_capacity(mha.layers.len());
    for (layer, lf) in mha.layers.iter().zip(&op.layers) {
        layers.push(LayerAttention {
            w_q: layer.w_q.clone(),
            w_k: fuse_heads(&layer.w_k, &lf.key),
            w_v: fuse_heads(&layer.w_v, &lf.value),
            w_o: layer.w_o.clone(),
        });
        topo.push(LayerTopology {
            key_heads: lf.key.groups.len(),
            value_heads: lf.value.groups.len(),
            key_map: lf.key.group_of.clone(),
            value_map: lf.value.group_of.clone(),
        });
    }
    Ok((AttentionParams { layers }, DhaTopology { layers: topo }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{dha_forward, mha_forward, random_uniform, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(h: usize) -> Grouping {
        Grouping::new((0..h / 2).map(|i| vec![2 * i, 2 * i + 1]).collect())
    }

    fn model(seed: u64, layers: usize, h: usize, dk: usize) -> AttentionParams<f64> {
        let cfg = ModelConfig::new(layers, h, dk, 4, 8).unwrap();
        AttentionParams::random(&cfg, 0.6, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn randomize(op: &mut FusionOperator<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in op.matrices_mut() {
            m.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-1.0..1.5));
        }
    }

    #[test]
    fn delta_init_reproduces_mha() {
        let params = model(1, 1, 4, 3);
        let gk = vec![pairs(4)];
        let gv = vec![Grouping::new(vec![vec![0, 1, 2, 3]])];
        let op = init_identity(&params, &gk, &gv, OmegaMode::PerChannel).unwrap();
        let x = random_uniform(5, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = fused_forward(&x, &params.layers[0], &op.layers[0]).unwrap();
        let b = mha_forward(&x, &params.layers[0]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
        for h in 0..4 {
            for c in 0..3 {
                let s: f64 = (0..2).map(|j| op.layers[0].key.coef(h, j, c)).sum();
                assert_eq!(s, 1.0);
            }
        }
        let two = KindFusion::<f64>::identity(&Grouping::new(vec![vec![0, 1]]), 2, 1).unwrap();
        assert_eq!(two.omega()[0].data(), &[1.0, 0.0]);
        assert_eq!(two.omega()[1].data(), &[0.0, 1.0]);
    }

    #[test]
    fn invalid_partition_rejected() {
        let params = model(1, 1, 4, 2);
        let bad = vec![Grouping::new(vec![vec![0, 1], vec![1, 2]])];
        assert!(matches!(
            init_identity(&params, &bad, &[pairs(4)], OmegaMode::PerChannel),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_weights_over_identical_values() {
        let mut params = model(3, 1, 2, 2);
        params.layers[0].w_v[1] = params.layers[0].w_v[0].clone();
        let g = vec![pairs(2)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        for m in op.layers[0].value.omega_mut() {
            m.fill(0.5);
        }
        let x = random_uniform(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let a = fused_forward(&x, &params.layers[0], &op.layers[0]).unwrap();
        let b = mha_forward(&x, &params.layers[0]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    /// Materializes one weight column set per (query head, channel) and runs
    /// the map-based forward.
    fn weight_space_oracle(
        x: &Matrix<f64>,
        layer: &LayerAttention<f64>,
        lf: &LayerFusion<f64>,
    ) -> Matrix<f64> {
        let h = layer.w_q.len();
        let build = |heads: &[Matrix<f64>], kf: &KindFusion<f64>| -> Vec<Matrix<f64>> {
            (0..h)
                .map(|q| {
                    let (r, c) = heads[0].shape();
                    Matrix::from_fn(r, c, |i, ch| {
                        kf.members_of(q)
                            .iter()
                            .enumerate()
                            .map(|(j, &src)| kf.coef(q, j, ch) * heads[src][(i, ch)])
                            .sum()
                    })
                })
                .collect()
        };
        let per_head = LayerAttention {
            w_q: layer.w_q.clone(),
            w_k: build(&layer.w_k, &lf.key),
            w_v: build(&layer.w_v, &lf.value),
            w_o: layer.w_o.clone(),
        };
        dha_forward(x, &per_head, &LayerTopology::identity(h)).unwrap()
    }

    #[test]
    fn random_omega_matches_weight_space_oracle() {
        for mode in [OmegaMode::PerChannel, OmegaMode::Scalar] {
            let params = model(5, 1, 4, 3);
            let gk = vec![Grouping::new(vec![vec![3, 0], vec![1, 2]])];
            let gv = vec![Grouping::new(vec![vec![0, 1, 2, 3]])];
            let mut op = init_identity(&params, &gk, &gv, mode).unwrap();
            randomize(&mut op, 6);
            let x = random_uniform(6, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
            let a = fused_forward(&x, &params.layers[0], &op.layers[0]).unwrap();
            let b = weight_space_oracle(&x, &params.layers[0], &op.layers[0]);
            assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn pair_loss_cases() {
        let params = model(1, 1, 2, 1);
        let g = vec![pairs(2)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        assert_eq!(head_pair_loss(&op, 0, HeadKind::Key, 0, 0, 1).unwrap(), 1.0);
        op.layers[0].key.force_group_means();
        assert_eq!(head_pair_loss(&op, 0, HeadKind::Key, 0, 0, 1).unwrap(), 0.0);

        let params = model(1, 1, 4, 3);
        let g = vec![pairs(4)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        randomize(&mut op, 8);
        let a = &op.layers[0].value.omega()[2];
        let b = &op.layers[0].value.omega()[3];
        let mut oracle = 0.0;
        for j in 0..2 {
            for c in 0..3 {
                oracle += (a[(j, c)] - b[(j, c)]).powi(2);
            }
        }
        oracle /= 6.0;
        let got = head_pair_loss(&op, 0, HeadKind::Value, 1, 2, 3).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!(matches!(
            head_pair_loss(&op, 0, HeadKind::Value, 0, 0, 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn fusion_loss_zero_iff_rows_shared() {
        let params = model(2, 2, 4, 2);
        let g = vec![pairs(4), pairs(4)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        assert!(fusion_loss(&op) > 0.0);
        randomize(&mut op, 3);
        assert!(fusion_loss(&op) > 0.0);
        op.force_group_means();
        assert!(fusion_loss(&op) < 1e-30);
        let (_, grads) = fusion_loss_grad(&op);
        assert!(grads
            .matrices()
            .all(|m| m.data().iter().all(|x| x.abs() < 1e-15)));
    }

    #[test]
    fn fusion_loss_gradient_closed_form() {
        // one group of two heads, one channel: loss = (a0-b0)^2+(a1-b1)^2 over
        // g·W = 2, divided by N = 2·2·1·1/2 = 2 per kind (value kind identical rows)
        let params = model(2, 1, 2, 1);
        let g = vec![pairs(2)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        op.layers[0].value.force_group_means();
        op.layers[0].key.omega_mut()[0] = Matrix::from_vec(2, 1, vec![0.7, 0.1]).unwrap();
        op.layers[0].key.omega_mut()[1] = Matrix::from_vec(2, 1, vec![0.2, 0.5]).unwrap();
        let norm = 2.0 * 4.0; // g·W times the per-layer N
        let (loss, grads) = fusion_loss_grad(&op);
        let expected = ((0.5f64).powi(2) + (0.4f64).powi(2)) / norm;
        assert!((loss - expected).abs() < 1e-15);
        let gk = &grads.layers[0].0;
        assert!((gk[0][(0, 0)] - 2.0 * 0.5 / norm).abs() < 1e-15);
        assert!((gk[0][(1, 0)] - 2.0 * -0.4 / norm).abs() < 1e-15);
        assert!((gk[1][(0, 0)] + 2.0 * 0.5 / norm).abs() < 1e-15);
    }

    #[test]
    fn margin_cases() {
        let s = MarginSchedule::new(0.999, 200).unwrap();
        assert_eq!(margin(&s.at(0)), 1.0);
        assert_eq!(margin(&s.at(200)), 0.0);
        assert_eq!(margin(&s.at(500)), 0.0);
        let expected = 0.999f64.powi(100) * 0.5;
        assert!((margin(&s.at(100)) - expected).abs() < 1e-15);
        assert!(MarginSchedule::new(1.0, 5).is_err());
        assert!(MarginSchedule::new(0.5, 0).is_err());
    }

    #[test]
    fn penalty_and_multiplier() {
        let s = MarginSchedule::new(0.999, 200).unwrap().at(200);
        let lag = LagrangeState {
            lambda: 2.0,
            lr_lambda: 0.01,
        };
        let mut sched = s;
        sched.step = 0;
        assert_eq!(constrained_penalty(0.5, &sched, &lag), 0.0);
        assert_eq!(
            constrained_penalty(0.3, &s, &LagrangeState { lambda: 0.0, ..lag }),
            0.0
        );
        // t = 0.1 via a direct hinge
        assert!((lag.lambda * (0.3f64 - 0.1).max(0.0) - 0.4).abs() < 1e-15);

        let fresh = LagrangeState::new(0.01).unwrap();
        assert_eq!(lagrange_step(&fresh, 0.05, 0.1).lambda, 0.0);
        assert!((lagrange_step(&fresh, 0.5, 0.0).lambda - 0.005).abs() < 1e-18);
        let mut st = fresh;
        for _ in 0..10 {
            let next = lagrange_step(&st, 0.4, 0.1);
            assert!(next.lambda >= st.lambda);
            st = next;
        }
        assert!(LagrangeState::new(0.0).is_err());
    }

    #[test]
    fn materialize_shared_delta_rows_picks_member() {
        let params = model(4, 1, 4, 2);
        let g = vec![pairs(4)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        // both heads of group 0 use member 1 only
        let row = op.layers[0].key.omega()[1].clone();
        op.layers[0].key.omega_mut()[0] = row;
        let (fused, topo) = materialize_dha(&params, &op).unwrap();
        assert_eq!(fused.layers[0].w_k[0], params.layers[0].w_k[1]);
        assert_eq!(topo.layers[0].key_heads, 2);
        assert_eq!(topo.layers[0].key_map, vec![0, 0, 1, 1]);
        topo.validate(4).unwrap();
    }

    #[test]
    fn materialized_forward_matches_fused_when_rows_shared() {
        let params = model(9, 1, 4, 3);
        let gk = vec![Grouping::new(vec![vec![0, 2], vec![1, 3]])];
        let gv = vec![Grouping::new(vec![vec![0, 1, 2, 3]])];
        let mut op = init_identity(&params, &gk, &gv, OmegaMode::PerChannel).unwrap();
        randomize(&mut op, 10);
        op.force_group_means();
        let (fused, topo) = materialize_dha(&params, &op).unwrap();
        let x = random_uniform(7, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let a = dha_forward(&x, &fused.layers[0], &topo.layers[0]).unwrap();
        let b = fused_forward(&x, &params.layers[0], &op.layers[0]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn uniform_over_identical_heads_materializes_to_member() {
        let mut params = model(4, 1, 2, 2);
        params.layers[0].w_k[1] = params.layers[0].w_k[0].clone();
        let g = vec![pairs(2)];
        let mut op = init_identity(&params, &g, &g, OmegaMode::PerChannel).unwrap();
        for m in op.layers[0].key.omega_mut() {
            m.fill(0.5);
        }
        let (fused, _) = materialize_dha(&params, &op).unwrap();
        assert!(fused.layers[0].w_k[0].max_abs_diff(&params.layers[0].w_k[0]) < 1e-15);
    }
}

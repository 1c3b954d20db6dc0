//! Attention parameter containers, MHA / GQA / DHA forward passes and
//! KV-cache sizing.
//!
//! All three variants share one engine: every query head `h` reads an
//! effective key `K̃_h` and value `Ṽ_h` built from the layer's source heads
//! through a [`HeadMix`]. A plain map (`d(h)`) picks one source head; a fused
//! mix combines the members of `h`'s group channel by channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::KindFusion;
use crate::linalg::{softmax_in_place, Matrix};
use crate::scalar::Scalar;

/// Logit written into masked (future) positions before the softmax.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Hidden width of the feed-forward block.
    pub d_ff: usize,
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_query_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Result<Self> {
        let d_model = n_query_heads * head_dim;
        let cfg = Self {
            n_layers,
            n_query_heads,
            head_dim,
            d_model,
            vocab_size,
            max_seq,
            d_ff: 2 * d_model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_query_heads", self.n_query_heads),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model != self.n_query_heads * self.head_dim {
            return Err(Error::config(format!(
                "d_model {} != n_query_heads {} x head_dim {}",
                self.d_model, self.n_query_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Projection weights of one attention layer. Head matrices are
/// `(d_model, head_dim)`; `w_o` is `(d_model, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention<T> {
    pub w_q: Vec<Matrix<T>>,
    pub w_k: Vec<Matrix<T>>,
    pub w_v: Vec<Matrix<T>>,
    pub w_o: Matrix<T>,
}

impl<T: Scalar> LayerAttention<T> {
    pub fn random<R: Rng>(
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let head = |rng: &mut R| {
            (0..n_heads)
                .map(|_| random_uniform(d_model, head_dim, bound, rng))
                .collect::<Vec<_>>()
        };
        let w_q = head(rng);
        let w_k = head(rng);
        let w_v = head(rng);
        let w_o = random_uniform(d_model, d_model, bound, rng);
        Self { w_q, w_k, w_v, w_o }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &[Matrix<T>]| {
            v.iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_o: Matrix::zeros(self.w_o.rows(), self.w_o.cols()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::cols)
    }

    pub fn heads(&self, kind: HeadKind) -> &[Matrix<T>] {
        match kind {
            HeadKind::Query => &self.w_q,
            HeadKind::Key => &self.w_k,
            HeadKind::Value => &self.w_v,
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(std::iter::once(&self.w_o))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.w_q
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain(std::iter::once(&mut self.w_o))
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }
}

/// Attention weights for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub layers: Vec<LayerAttention<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn random<R: Rng>(config: &ModelConfig, bound: f64, rng: &mut R) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|_| {
                    LayerAttention::random(
                        config.d_model,
                        config.n_query_heads,
                        config.head_dim,
                        bound,
                        rng,
                    )
                })
                .collect(),
        }
    }

    /// Checks head counts against `topo` and finiteness.
    pub fn validate(&self, topo: &DhaTopology) -> Result<()> {
        if self.layers.len() != topo.layers.len() {
            return Err(Error::topology(format!(
                "{} attention layers but topology has {}",
                self.layers.len(),
                topo.layers.len()
            )));
        }
        for (l, (layer, t)) in self.layers.iter().zip(&topo.layers).enumerate() {
            if layer.w_q.len() != t.key_map.len() {
                return Err(Error::topology(format!(
                    "layer {l}: {} query heads but maps have length {}",
                    layer.w_q.len(),
                    t.key_map.len()
                )));
            }
            if layer.w_k.len() != t.key_heads || layer.w_v.len() != t.value_heads {
                return Err(Error::topology(format!(
                    "layer {l}: params have {}/{} key/value heads, topology {}/{}",
                    layer.w_k.len(),
                    layer.w_v.len(),
                    t.key_heads,
                    t.value_heads
                )));
            }
            if !layer.is_finite() {
                return Err(Error::Domain(format!("layer {l}: non-finite weights")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Query,
    Key,
    Value,
}

impl HeadKind {
    pub fn short(self) -> &'static str {
        match self {
            HeadKind::Query => "q",
            HeadKind::Key => "k",
            HeadKind::Value => "v",
        }
    }
}

/// Per-layer key/value head counts and query→key/value maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTopology {
    pub key_heads: usize,
    pub value_heads: usize,
    pub key_map: Vec<usize>,
    pub value_map: Vec<usize>,
}

impl LayerTopology {
    pub fn identity(n_query_heads: usize) -> Self {
        let map: Vec<usize> = (0..n_query_heads).collect();
        Self {
            key_heads: n_query_heads,
            value_heads: n_query_heads,
            key_map: map.clone(),
            value_map: map,
        }
    }

    /// Contiguous grouping: query head `h` reads head `⌊h·G/H⌋`.
    pub fn contiguous(n_query_heads: usize, n_groups: usize) -> Result<Self> {
        if n_groups == 0 || n_query_heads % n_groups != 0 {
            return Err(Error::config(format!(
                "{n_query_heads} query heads cannot be split into {n_groups} equal groups"
            )));
        }
        let map: Vec<usize> = (0..n_query_heads)
            .map(|h| h * n_groups / n_query_heads)
            .collect();
        Ok(Self {
            key_heads: n_groups,
            value_heads: n_groups,
            key_map: map.clone(),
            value_map: map,
        })
    }

    pub fn validate(&self, n_query_heads: usize) -> Result<()> {
        for (name, heads, map) in [
            ("key", self.key_heads, &self.key_map),
            ("value", self.value_heads, &self.value_map),
        ] {
            if map.len() != n_query_heads {
                return Err(Error::topology(format!(
                    "{name} map has length {}, expected {n_query_heads}",
                    map.len()
                )));
            }
            if heads == 0 || heads > n_query_heads {
                return Err(Error::topology(format!(
                    "{name} head count {heads} outside [1, {n_query_heads}]"
                )));
            }
            let mut hit = vec![false; heads];
            for (h, &d) in map.iter().enumerate() {
                if d >= heads {
                    return Err(Error::topology(format!(
                        "{name} map sends query head {h} to {d}, only {heads} heads"
                    )));
                }
                hit[d] = true;
            }
            if let Some(miss) = hit.iter().position(|&x| !x) {
                return Err(Error::topology(format!(
                    "{name} head {miss} is not used by any query head"
                )));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.key_map.iter().enumerate().all(|(h, &d)| h == d)
            && self.value_map.iter().enumerate().all(|(h, &d)| h == d)
            && self.key_heads == self.key_map.len()
            && self.value_heads == self.value_map.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhaTopology {
    pub layers: Vec<LayerTopology>,
}

impl DhaTopology {
    pub fn identity(n_layers: usize, n_query_heads: usize) -> Self {
        Self {
            layers: vec![LayerTopology::identity(n_query_heads); n_layers],
        }
    }

    pub fn gqa(n_layers: usize, n_query_heads: usize, n_groups: usize) -> Result<Self> {
        Ok(Self {
            layers: vec![LayerTopology::contiguous(n_query_heads, n_groups)?; n_layers],
        })
    }

    pub fn validate(&self, n_query_heads: usize) -> Result<()> {
        for (l, t) in self.layers.iter().enumerate() {
            t.validate(n_query_heads)
                .map_err(|e| Error::topology(format!("layer {l}: {e}")))?;
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(LayerTopology::is_identity)
    }

    /// `Some(G)` when every layer uses the same contiguous map for both keys
    /// and values.
    pub fn uniform_groups(&self) -> Option<usize> {
        let first = self.layers.first()?;
        let g = first.key_heads;
        let expected = LayerTopology::contiguous(first.key_map.len(), g).ok()?;
        self.layers.iter().all(|t| *t == expected).then_some(g)
    }

    pub fn total_key_heads(&self) -> usize {
        self.layers.iter().map(|t| t.key_heads).sum()
    }

    pub fn total_value_heads(&self) -> usize {
        self.layers.iter().map(|t| t.value_heads).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheSpec {
    pub batch: u64,
    pub seq_len: u64,
    pub bytes_per_element: u64,
}

impl KvCacheSpec {
    pub fn new(batch: u64, seq_len: u64, bytes_per_element: u64) -> Result<Self> {
        if batch == 0 || seq_len == 0 || bytes_per_element == 0 {
            return Err(Error::config("KV-cache spec fields must be at least 1"));
        }
        Ok(Self {
            batch,
            seq_len,
            bytes_per_element,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum KvLayout<'a> {
    Mha,
    Gqa(usize),
    Dha(&'a DhaTopology),
}

/// Bytes held by the KV cache. Each cached head stores `head_dim` values per
/// token.
pub fn kv_cache_bytes(config: &ModelConfig, layout: KvLayout<'_>, spec: &KvCacheSpec) -> u64 {
    let per_head = spec.seq_len * config.head_dim as u64 * spec.batch * spec.bytes_per_element;
    let heads: u64 = match layout {
        KvLayout::Mha => 2 * config.n_layers as u64 * config.n_query_heads as u64,
        KvLayout::Gqa(g) => 2 * config.n_layers as u64 * g as u64,
        KvLayout::Dha(topo) => (topo.total_key_heads() + topo.total_value_heads()) as u64,
    };
    heads * per_head
}

/// How query heads read their effective key (or value) from source heads.
#[derive(Debug, Clone, Copy)]
pub enum HeadMix<'a, T> {
    /// Query head `h` reads source head `map[h]`.
    Map(&'a [usize]),
    /// Channelwise linear combination of the group's source heads.
    Fused(&'a KindFusion<T>),
}

impl<T: Scalar> HeadMix<'_, T> {
    fn effective(&self, sources: &[Matrix<T>], h: usize) -> Matrix<T> {
        match self {
            HeadMix::Map(map) => sources[map[h]].clone(),
            HeadMix::Fused(op) => {
                let members = op.members_of(h);
                let first = &sources[members[0]];
                let (rows, cols) = first.shape();
                let mut out = Matrix::zeros(rows, cols);
                for (j, &src) in members.iter().enumerate() {
                    let s = &sources[src];
                    for c in 0..cols {
                        let w = op.coef(h, j, c);
                        for r in 0..rows {
                            out[(r, c)] += w * s[(r, c)];
                        }
                    }
                }
                out
            }
        }
    }

    fn check(&self, n_query: usize, n_sources: usize, what: &str) -> Result<()> {
        match self {
            HeadMix::Map(map) => {
                if map.len() != n_query {
                    return Err(Error::topology(format!(
                        "{what} map length {} != {n_query} query heads",
                        map.len()
                    )));
                }
                if let Some((h, &d)) = map.iter().enumerate().find(|(_, &d)| d >= n_sources) {
                    return Err(Error::topology(format!(
                        "{what} map sends query head {h} to {d}, only {n_sources} heads"
                    )));
                }
            }
            HeadMix::Fused(op) => {
                if op.n_query_heads() != n_query {
                    return Err(Error::topology(format!(
                        "{what} fusion covers {} query heads, layer has {n_query}",
                        op.n_query_heads()
                    )));
                }
                if n_sources != n_query {
                    return Err(Error::topology(format!(
                        "{what} fusion needs one source head per query head, got {n_sources}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttnTrace<T> {
    pub x: Matrix<T>,
    pub q: Vec<Matrix<T>>,
    pub k_src: Vec<Matrix<T>>,
    pub v_src: Vec<Matrix<T>>,
    pub k_eff: Vec<Matrix<T>>,
    pub v_eff: Vec<Matrix<T>>,
    pub probs: Vec<Matrix<T>>,
    pub concat: Matrix<T>,
}

pub(crate) struct AttnGrads<T> {
    pub dx: Matrix<T>,
    pub params: LayerAttention<T>,
    pub d_omega_k: Option<Vec<Matrix<T>>>,
    pub d_omega_v: Option<Vec<Matrix<T>>>,
}

/// Causal attention for one layer.
pub(crate) fn attend<T: Scalar>(
    x: &Matrix<T>,
    layer: &LayerAttention<T>,
    kmix: HeadMix<'_, T>,
    vmix: HeadMix<'_, T>,
) -> Result<(Matrix<T>, AttnTrace<T>)> {
    let n_q = layer.w_q.len();
    if n_q == 0 {
        return Err(Error::topology("layer has no query heads"));
    }
    kmix.check(n_q, layer.w_k.len(), "key")?;
    vmix.check(n_q, layer.w_v.len(), "value")?;
    let d_model = layer.w_o.rows();
    if x.cols() != d_model || layer.w_o.cols() != d_model {
        return Err(Error::topology(format!(
            "input width {} does not match d_model {d_model}",
            x.cols()
        )));
    }
    let dk = layer.head_dim();
    if n_q * dk != d_model {
        return Err(Error::topology(format!(
            "{n_q} heads x {dk} != d_model {d_model}"
        )));
    }
    let scale = T::one() / T::from_count(dk).sqrt();
    let p = x.rows();

    let q: Vec<_> = layer.w_q.iter().map(|w| x.mm(w)).collect();
    let k_src: Vec<_> = layer.w_k.iter().map(|w| x.mm(w)).collect();
    let v_src: Vec<_> = layer.w_v.iter().map(|w| x.mm(w)).collect();
    let mut k_eff = Vec::with_capacity(n_q);
    let mut v_eff = Vec::with_capacity(n_q);
    let mut probs = Vec::with_capacity(n_q);
    let mut concat = Matrix::zeros(p, d_model);
    let masked = T::lit(MASKED_LOGIT);
    for h in 0..n_q {
        let kt = kmix.effective(&k_src, h);
        let vt = vmix.effective(&v_src, h);
        let mut s = q[h].mmt(&kt);
        for i in 0..p {
            let row = s.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j > i { masked } else { *v * scale };
            }
            softmax_in_place(row);
        }
        let o = s.mm(&vt);
        concat.set_col_block(h * dk, &o);
        k_eff.push(kt);
        v_eff.push(vt);
        probs.push(s);
    }
    let out = concat.mm(&layer.w_o);
    Ok((
        out,
        AttnTrace {
            x: x.clone(),
            q,
            k_src,
            v_src,
            k_eff,
            v_eff,
            probs,
            concat,
        },
    ))
}

pub(crate) fn attend_backward<T: Scalar>(
    trace: &AttnTrace<T>,
    layer: &LayerAttention<T>,
    kmix: HeadMix<'_, T>,
    vmix: HeadMix<'_, T>,
    d_out: &Matrix<T>,
) -> AttnGrads<T> {
    let n_q = layer.w_q.len();
    let dk = layer.head_dim();
    let scale = T::one() / T::from_count(dk).sqrt();
    let x = &trace.x;
    let mut grads = layer.zeros_like();
    grads.w_o = trace.concat.tmm(d_out);
    let d_concat = d_out.mmt(&layer.w_o);

    let mut dk_src: Vec<Matrix<T>> = trace
        .k_src
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut dv_src: Vec<Matrix<T>> = trace
        .v_src
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut d_omega_k = omega_grad_buffer(&kmix);
    let mut d_omega_v = omega_grad_buffer(&vmix);
    let mut dx = Matrix::zeros(x.rows(), x.cols());

    for h in 0..n_q {
        let d_o = d_concat.col_block(h * dk, dk);
        let a = &trace.probs[h];
        let d_a = d_o.mmt(&trace.v_eff[h]);
        let d_vt = a.tmm(&d_o);
        // softmax backward; masked entries have a == 0 so stay zero
        let mut d_s = Matrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            let dot: T = a.row(i).iter().zip(d_a.row(i)).map(|(&p, &g)| p * g).sum();
            for j in 0..=i.min(a.cols() - 1) {
                d_s[(i, j)] = a[(i, j)] * (d_a[(i, j)] - dot) * scale;
            }
        }
        let d_q = d_s.mm(&trace.k_eff[h]);
        let d_kt = d_s.tmm(&trace.q[h]);
        grads.w_q[h] = x.tmm(&d_q);
        dx.add_assign(&d_q.mmt(&layer.w_q[h]));
        scatter_mix(
            &kmix,
            h,
            &d_kt,
            &trace.k_src,
            &mut dk_src,
            d_omega_k.as_mut(),
        );
        scatter_mix(
            &vmix,
            h,
            &d_vt,
            &trace.v_src,
            &mut dv_src,
            d_omega_v.as_mut(),
        );
    }
    for (i, d) in dk_src.iter().enumerate() {
        grads.w_k[i] = x.tmm(d);
        dx.add_assign(&d.mmt(&layer.w_k[i]));
    }
    for (i, d) in dv_src.iter().enumerate() {
        grads.w_v[i] = x.tmm(d);
        dx.add_assign(&d.mmt(&layer.w_v[i]));
    }
    AttnGrads {
        dx,
        params: grads,
        d_omega_k,
        d_omega_v,
    }
}

fn omega_grad_buffer<T: Scalar>(mix: &HeadMix<'_, T>) -> Option<Vec<Matrix<T>>> {
    match mix {
        HeadMix::Map(_) => None,
        HeadMix::Fused(op) => Some(op.zero_grads()),
    }
}

fn scatter_mix<T: Scalar>(
    mix: &HeadMix<'_, T>,
    h: usize,
    d_eff: &Matrix<T>,
    sources: &[Matrix<T>],
    d_sources: &mut [Matrix<T>],
    d_omega: Option<&mut Vec<Matrix<T>>>,
) {
    match mix {
        HeadMix::Map(map) => d_sources[map[h]].add_assign(d_eff),
        HeadMix::Fused(op) => {
            let d_omega = d_omega.expect("fused mix carries an omega gradient");
            let scalar_mode = op.width() == 1;
            for (j, &src) in op.members_of(h).iter().enumerate() {
                let s = &sources[src];
                let ds = &mut d_sources[src];
                for c in 0..d_eff.cols() {
                    let w = op.coef(h, j, c);
                    let mut acc = T::zero();
                    for r in 0..d_eff.rows() {
                        ds[(r, c)] += w * d_eff[(r, c)];
                        acc += d_eff[(r, c)] * s[(r, c)];
                    }
                    let col = if scalar_mode { 0 } else { c };
                    d_omega[h][(j, col)] += acc;
                }
            }
        }
    }
}

fn check_mha<T>(layer: &LayerAttention<T>) -> Result<()> {
    let h = layer.w_q.len();
    if layer.w_k.len() != h || layer.w_v.len() != h {
        return Err(Error::topology(format!(
            "MHA needs one key/value head per query head: {h} query, {} key, {} value",
            layer.w_k.len(),
            layer.w_v.len()
        )));
    }
    Ok(())
}

/// Multi-head attention for one layer: concat of per-head causal attention,
/// projected by `w_o`.
pub fn mha_forward<T: Scalar>(x: &Matrix<T>, layer: &LayerAttention<T>) -> Result<Matrix<T>> {
    check_mha(layer)?;
    let map: Vec<usize> = (0..layer.w_q.len()).collect();
    Ok(attend(x, layer, HeadMix::Map(&map), HeadMix::Map(&map))?.0)
}

/// Decoupled-head attention for one layer: query head `h` uses key head
/// `key_map[h]` and value head `value_map[h]`.
pub fn dha_forward<T: Scalar>(
    x: &Matrix<T>,
    layer: &LayerAttention<T>,
    topo: &LayerTopology,
) -> Result<Matrix<T>> {
    if layer.w_k.len() != topo.key_heads || layer.w_v.len() != topo.value_heads {
        return Err(Error::topology(format!(
            "params have {}/{} key/value heads, topology expects {}/{}",
            layer.w_k.len(),
            layer.w_v.len(),
            topo.key_heads,
            topo.value_heads
        )));
    }
    Ok(attend(
        x,
        layer,
        HeadMix::Map(&topo.key_map),
        HeadMix::Map(&topo.value_map),
    )?
    .0)
}

/// Mean-pools contiguous groups of MHA key and value heads into GQA heads.
pub fn gqa_init_mean_pool<T: Scalar>(
    mha: &AttentionParams<T>,
    n_groups: usize,
) -> Result<(AttentionParams<T>, DhaTopology)> {
    let n_heads = mha.layers.first().map_or(0, |l| l.w_q.len());
    let layer_topo = LayerTopology::contiguous(n_heads, n_groups)?;
    let size = n_heads / n_groups;
    let inv = T::one() / T::from_count(size);
    let pool = |heads: &[Matrix<T>]| -> Vec<Matrix<T>> {
        heads
            .chunks(size)
            .map(|chunk| {
                let mut acc = Matrix::zeros(chunk[0].rows(), chunk[0].cols());
                for m in chunk {
                    acc.add_assign(m);
                }
                acc.scale(inv)
            })
            .collect()
    };
    let mut layers = Vec::with_capacity(mha.layers.len());
    for (l, layer) in mha.layers.iter().enumerate() {
        check_mha(layer).map_err(|e| Error::topology(format!("layer {l}: {e}")))?;
        layers.push(LayerAttention {
            w_q: layer.w_q.clone(),
            w_k: pool(&layer.w_k),
            w_v: pool(&layer.w_v),
            w_o: layer.w_o.clone(),
        });
    }
    let topo = DhaTopology {
        layers: vec![layer_topo; mha.layers.len()],
    };
    Ok((AttentionParams { layers }, topo))
}

/// Inverse of pooling: copies each shared key/value head back to every query
/// head that reads it, giving an MHA layer with the same forward function.
pub fn expand_to_mha<T: Scalar>(
    params: &AttentionParams<T>,
    topo: &DhaTopology,
) -> Result<AttentionParams<T>> {
    params.validate(topo)?;
    let layers = params
        .layers
        .iter()
        .zip(&topo.layers)
        .map(|(layer, t)| LayerAttention {
            w_q: layer.w_q.clone(),
            w_k: t.key_map.iter().map(|&d| layer.w_k[d].clone()).collect(),
            w_v: t.value_map.iter().map(|&d| layer.w_v[d].clone()).collect(),
            w_o: layer.w_o.clone(),
        })
        .collect();
    Ok(AttentionParams { layers })
}

pub fn random_uniform<T: Scalar, R: Rng>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        T::lit(if bound > 0.0 {
            rng.gen_range(-bound..bound)
        } else {
            0.0
        })
    })
}

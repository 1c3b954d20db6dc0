//! Desk-scale decoder-only language model.
//!
//! Token and learned position embeddings feed `n_layers` residual blocks of
//! causal attention followed by a GELU feed-forward pair, then a linear
//! projection to vocabulary logits. There are no normalization layers and
//! no biases. Attention in each block reads its keys/values either through
//! the model's [`DhaTopology`] or, during fusion, through an attached
//! [`FusionOperator`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, attend_backward, random_uniform, AttentionParams, AttnTrace, DhaTopology, HeadMix,
    LayerAttention, ModelConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionOperator, OmegaGrads};
use crate::linalg::{softmax_in_place, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    /// `(d_model, d_ff)`
    pub w1: Matrix<T>,
    /// `(d_ff, d_model)`
    pub w2: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub attn: AttentionParams<T>,
    pub topology: DhaTopology,
    pub ff: Vec<FeedForward<T>>,
    pub out_proj: Matrix<T>,
}

/// Gradients shaped like a [`ToyModel`] (plus fusion coefficients when an
/// operator was attached).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub attn: AttentionParams<T>,
    pub ff: Vec<FeedForward<T>>,
    pub out_proj: Matrix<T>,
    pub omega: Option<OmegaGrads<T>>,
}

/// A batch of token sequences.
pub type Batch = [Vec<usize>];

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(z: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * z * (T::one() + (k * (z + T::lit(GELU_C) * z * z * z)).tanh())
}

fn gelu_grad<T: Scalar>(z: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let t = (k * (z + T::lit(GELU_C) * z * z * z)).tanh();
    half * (T::one() + t)
        + half * z * (T::one() - t * t) * k * (T::one() + T::lit(3.0 * GELU_C) * z * z)
}

struct BlockTrace<T> {
    attn: AttnTrace<T>,
    h1: Matrix<T>,
    z: Matrix<T>,
    act: Matrix<T>,
}

struct SeqTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    h_final: Matrix<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Seeded random MHA initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let proj = (3.0 / d).sqrt();
        let emb = 0.3;
        let tok_emb = random_uniform(config.vocab_size, config.d_model, emb, &mut rng);
        let pos_emb = random_uniform(config.max_seq, config.d_model, emb * 0.3, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut ff = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut layer = LayerAttention::random(
                config.d_model,
                config.n_query_heads,
                config.head_dim,
                proj,
                &mut rng,
            );
            layer.w_o = random_uniform(config.d_model, config.d_model, proj * 0.5, &mut rng);
            layers.push(layer);
            ff.push(FeedForward {
                w1: random_uniform(config.d_model, config.d_ff, proj, &mut rng),
                w2: random_uniform(
                    config.d_ff,
                    config.d_model,
                    (3.0 / config.d_ff as f64).sqrt() * 0.5,
                    &mut rng,
                ),
            });
        }
        let out_proj = random_uniform(config.d_model, config.vocab_size, proj, &mut rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            attn: AttentionParams { layers },
            topology: DhaTopology::identity(config.n_layers, config.n_query_heads),
            ff,
            out_proj,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let shape_err = |what: &str| Error::topology(format!("{what} has the wrong shape"));
        if self.tok_emb.shape() != (c.vocab_size, c.d_model) {
            return Err(shape_err("token embedding"));
        }
        if self.pos_emb.shape() != (c.max_seq, c.d_model) {
            return Err(shape_err("position embedding"));
        }
        if self.out_proj.shape() != (c.d_model, c.vocab_size) {
            return Err(shape_err("output projection"));
        }
        if self.attn.layers.len() != c.n_layers || self.ff.len() != c.n_layers {
            return Err(Error::topology("layer count does not match config"));
        }
        self.topology.validate(c.n_query_heads)?;
        self.attn.validate(&self.topology)?;
        for (l, (layer, f)) in self.attn.layers.iter().zip(&self.ff).enumerate() {
            let head_ok = |m: &Matrix<T>| m.shape() == (c.d_model, c.head_dim);
            if !layer
                .matrices()
                .take(layer.w_q.len() + layer.w_k.len() + layer.w_v.len())
                .all(head_ok)
                || layer.w_o.shape() != (c.d_model, c.d_model)
            {
                return Err(shape_err(&format!("layer {l} attention")));
            }
            if f.w1.shape() != (c.d_model, c.d_ff) || f.w2.shape() != (c.d_ff, c.d_model) {
                return Err(shape_err(&format!("layer {l} feed-forward")));
            }
        }
        if !self.matrices().all(Matrix::is_finite) {
            return Err(Error::Domain("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Every parameter matrix in a fixed order.
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix<T>> {
        std::iter::once(&self.tok_emb)
            .chain(std::iter::once(&self.pos_emb))
            .chain(
                self.attn
                    .layers
                    .iter()
                    .zip(&self.ff)
                    .flat_map(|(a, f)| a.matrices().chain([&f.w1, &f.w2])),
            )
            .chain(std::iter::once(&self.out_proj))
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for (a, f) in self.attn.layers.iter_mut().zip(self.ff.iter_mut()) {
            out.extend(a.matrices_mut());
            out.push(&mut f.w1);
            out.push(&mut f.w2);
        }
        out.push(&mut self.out_proj);
        out
    }

    pub fn n_params(&self) -> usize {
        self.matrices().map(|m| m.data().len()).sum()
    }

    fn check_fusion(&self, op: Option<&FusionOperator<T>>) -> Result<()> {
        if let Some(op) = op {
            if !self.topology.is_identity() {
                return Err(Error::topology(
                    "a fusion operator can only be attached to an MHA model",
                ));
            }
            if op.n_layers() != self.config.n_layers {
                return Err(Error::topology(format!(
                    "fusion operator has {} layers, model {}",
                    op.n_layers(),
                    self.config.n_layers
                )));
            }
        }
        Ok(())
    }

    fn mixes<'a>(
        &'a self,
        op: Option<&'a FusionOperator<T>>,
        l: usize,
    ) -> (HeadMix<'a, T>, HeadMix<'a, T>) {
        match op {
            Some(op) => (
                HeadMix::Fused(&op.layers[l].key),
                HeadMix::Fused(&op.layers[l].value),
            ),
            None => (
                HeadMix::Map(&self.topology.layers[l].key_map),
                HeadMix::Map(&self.topology.layers[l].value_map),
            ),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyData("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Domain(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Domain(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Matrix<T> {
        let d = self.config.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = h.row_mut(t);
            for ((r, &e), &p) in row
                .iter_mut()
                .zip(self.tok_emb.row(tok))
                .zip(self.pos_emb.row(t))
            {
                *r = e + p;
            }
        }
        h
    }

    fn forward_traced(
        &self,
        op: Option<&FusionOperator<T>>,
        tokens: &[usize],
    ) -> Result<(Matrix<T>, SeqTrace<T>)> {
        self.check_tokens(tokens)?;
        let mut h = self.embed(tokens);
        let mut blocks = Vec::with_capacity(self.config.n_layers);
        for (l, (layer, f)) in self.attn.layers.iter().zip(&self.ff).enumerate() {
            let (km, vm) = self.mixes(op, l);
            let (a, attn) = attend(&h, layer, km, vm)?;
            let h1 = h.add(&a);
            let z = h1.mm(&f.w1);
            let act = z.map(gelu);
            h = h1.add(&act.mm(&f.w2));
            blocks.push(BlockTrace { attn, h1, z, act });
        }
        let logits = h.mm(&self.out_proj);
        Ok((logits, SeqTrace { blocks, h_final: h }))
    }

    /// Vocabulary logits for one sequence, `(len, vocab)`.
    pub fn logits(&self, op: Option<&FusionOperator<T>>, tokens: &[usize]) -> Result<Matrix<T>> {
        self.check_fusion(op)?;
        Ok(self.forward_traced(op, tokens)?.0)
    }

    /// Inputs to each layer's attention for one sequence.
    pub fn layer_inputs(
        &self,
        op: Option<&FusionOperator<T>>,
        tokens: &[usize],
    ) -> Result<Vec<Matrix<T>>> {
        self.check_fusion(op)?;
        let (_, trace) = self.forward_traced(op, tokens)?;
        Ok(trace.blocks.into_iter().map(|b| b.attn.x).collect())
    }

    /// Mean next-token cross-entropy over every predicted position.
    pub fn lm_loss(&self, op: Option<&FusionOperator<T>>, batch: &Batch) -> Result<T> {
        self.check_fusion(op)?;
        let count = prediction_count(batch)?;
        let mut total = T::zero();
        for seq in batch {
            let (logits, _) = self.forward_traced(op, seq)?;
            total += seq_cross_entropy(&logits, seq, None);
        }
        Ok(total / T::from_count(count))
    }

    /// Loss and exact reverse-mode gradients.
    pub fn loss_and_grads(
        &self,
        op: Option<&FusionOperator<T>>,
        batch: &Batch,
    ) -> Result<(T, ModelGrads<T>)> {
        self.check_fusion(op)?;
        let count = prediction_count(batch)?;
        let inv = T::one() / T::from_count(count);
        let mut grads = self.zero_grads(op);
        let mut total = T::zero();
        for seq in batch {
            let (logits, trace) = self.forward_traced(op, seq)?;
            let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
            total += seq_cross_entropy(&logits, seq, Some((&mut d_logits, inv)));
            self.backward_seq(op, seq, &trace, &d_logits, &mut grads);
        }
        Ok((total * inv, grads))
    }

    fn zero_grads(&self, op: Option<&FusionOperator<T>>) -> ModelGrads<T> {
        ModelGrads {
            tok_emb: Matrix::zeros(self.tok_emb.rows(), self.tok_emb.cols()),
            pos_emb: Matrix::zeros(self.pos_emb.rows(), self.pos_emb.cols()),
            attn: AttentionParams {
                layers: self
                    .attn
                    .layers
                    .iter()
                    .map(LayerAttention::zeros_like)
                    .collect(),
            },
            ff: self
                .ff
                .iter()
                .map(|f| FeedForward {
                    w1: Matrix::zeros(f.w1.rows(), f.w1.cols()),
                    w2: Matrix::zeros(f.w2.rows(), f.w2.cols()),
                })
                .collect(),
            out_proj: Matrix::zeros(self.out_proj.rows(), self.out_proj.cols()),
            omega: op.map(FusionOperator::zero_grads),
        }
    }

    fn backward_seq(
        &self,
        op: Option<&FusionOperator<T>>,
        tokens: &[usize],
        trace: &SeqTrace<T>,
        d_logits: &Matrix<T>,
        grads: &mut ModelGrads<T>,
    ) {
        grads.out_proj.add_assign(&trace.h_final.tmm(d_logits));
        let mut dh = d_logits.mmt(&self.out_proj);
        for l in (0..self.config.n_layers).rev() {
            let b = &trace.blocks[l];
            let f = &self.ff[l];
            let g = &mut grads.ff[l];
            g.w2.add_assign(&b.act.tmm(&dh));
            let mut dz = dh.mmt(&f.w2);
            for (d, &z) in dz.data_mut().iter_mut().zip(b.z.data()) {
                *d *= gelu_grad(z);
            }
            g.w1.add_assign(&b.h1.tmm(&dz));
            let dh1 = dh.add(&dz.mmt(&f.w1));

            let (km, vm) = self.mixes(op, l);
            let ag = attend_backward(&b.attn, &self.attn.layers[l], km, vm, &dh1);
            let target = &mut grads.attn.layers[l];
            for (t, s) in target.matrices_mut().zip(ag.params.matrices()) {
                t.add_assign(s);
            }
            if let Some(og) = grads.omega.as_mut() {
                let (gk, gv) = &mut og.layers[l];
                for (t, s) in gk.iter_mut().zip(ag.d_omega_k.iter().flatten()) {
                    t.add_assign(s);
                }
                for (t, s) in gv.iter_mut().zip(ag.d_omega_v.iter().flatten()) {
                    t.add_assign(s);
                }
            }
            dh = dh1.add(&ag.dx);
        }
        for (t, &tok) in tokens.iter().enumerate() {
            let row = dh.row(t);
            for (e, &g) in grads.tok_emb.row_mut(tok).iter_mut().zip(row) {
                *e += g;
            }
            for (e, &g) in grads.pos_emb.row_mut(t).iter_mut().zip(row) {
                *e += g;
            }
        }
    }
}

impl<T: Scalar> ModelGrads<T> {
    /// Model-parameter gradients in the order of [`ToyModel::matrices`].
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix<T>> {
        std::iter::once(&self.tok_emb)
            .chain(std::iter::once(&self.pos_emb))
            .chain(
                self.attn
                    .layers
                    .iter()
                    .zip(&self.ff)
                    .flat_map(|(a, f)| a.matrices().chain([&f.w1, &f.w2])),
            )
            .chain(std::iter::once(&self.out_proj))
    }
}

fn prediction_count(batch: &Batch) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::EmptyData("empty batch".into()));
    }
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(Error::EmptyData(
            "batch has no positions to predict (sequences shorter than 2)".into(),
        ));
    }
    Ok(count)
}

/// Summed cross-entropy of one sequence; optionally writes `scale · ∂/∂logits`.
fn seq_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    tokens: &[usize],
    grad: Option<(&mut Matrix<T>, T)>,
) -> T {
    let mut total = T::zero();
    let mut grad = grad;
    for t in 0..tokens.len().saturating_sub(1) {
        let target = tokens[t + 1];
        let mut probs = logits.row(t).to_vec();
        softmax_in_place(&mut probs);
        let row = logits.row(t);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[target];
        if let Some((g, scale)) = grad.as_mut() {
            let out = g.row_mut(t);
            for (o, &p) in out.iter_mut().zip(&probs) {
                *o = p * *scale;
            }
            out[target] -= *scale;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ToyModel<f64> {
        let cfg = ModelConfig::new(2, 2, 3, 7, 6).unwrap().with_d_ff(5);
        ToyModel::init(cfg, seed).unwrap()
    }

    #[test]
    fn zero_output_projection_gives_log_vocab() {
        let mut m = tiny(1);
        m.out_proj.fill(0.0);
        let loss = m.lm_loss(None, &[vec![1, 2, 3, 4], vec![0, 6]]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let seq = [2usize, 0, 1, 2];
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = Matrix::from_fn(4, 3, |t, v| {
                if t + 1 < 4 && v == seq[t + 1] {
                    margin
                } else {
                    0.0
                }
            });
            let loss = seq_cross_entropy(&logits, &seq, None) / 3.0;
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    /// Independent softmax cross-entropy evaluation over the model's logits.
    #[test]
    fn loss_matches_direct_oracle() {
        let m = tiny(3);
        let batch = vec![vec![0, 5, 2, 6, 1], vec![4, 4, 3]];
        let mut total = 0.0;
        let mut count = 0;
        for seq in &batch {
            let logits = m.logits(None, seq).unwrap();
            for t in 0..seq.len() - 1 {
                let z: f64 = logits.row(t).iter().map(|v| v.exp()).sum();
                total += -(logits[(t, seq[t + 1])].exp() / z).ln();
                count += 1;
            }
        }
        let loss = m.lm_loss(None, &batch).unwrap();
        assert!((loss - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn token_errors() {
        let m = tiny(4);
        assert!(matches!(
            m.lm_loss(None, &[vec![0, 7]]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            m.lm_loss(None, &[vec![0; 7]]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(m.lm_loss(None, &[]), Err(Error::EmptyData(_))));
        assert!(matches!(
            m.lm_loss(None, &[vec![1]]),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn perfect_fit_has_zero_output_gradient() {
        // uniform-target task where the loss is already at its floor: a
        // single-token vocabulary leaves no gradient anywhere
        let cfg = ModelConfig::new(1, 2, 2, 1, 4).unwrap();
        let m = ToyModel::<f64>::init(cfg, 5).unwrap();
        let (loss, g) = m.loss_and_grads(None, &[vec![0, 0, 0]]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.out_proj.is_zero());
    }

    #[test]
    fn validate_catches_shape_errors() {
        let mut m = tiny(6);
        m.validate().unwrap();
        m.ff[1].w2 = Matrix::zeros(2, 2);
        assert!(m.validate().is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for z in [-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_grad(z)).abs() < 1e-8);
        }
    }
}

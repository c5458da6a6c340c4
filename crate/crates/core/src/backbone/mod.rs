//! Small pre-norm encoder-decoder transformer with analytic gradients.
//!
//! Learned positions, GELU feed-forward blocks, a shared token embedding for
//! both stacks and an untied output projection.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, BOS};
use layers::{AttentionCache, AttnKind, DropoutMask, FeedForwardCache, LayerNormCache, Mode};
pub use params::{init_normal, BackboneParams, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl BackboneConfig {
    /// Desk-scale default: width 128, 4 heads, 2 + 2 layers.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 512,
            max_positions: 128,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// The configuration used for gradient checking.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 16,
            max_positions: 32,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub params: BackboneParams<T>,
}

impl<T: Scalar> ParamSet<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.params.visit(prefix, f)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix<T>)) {
        self.params.visit_mut(prefix, f)
    }
}

struct EncoderLayerCache<T> {
    ln_attn: LayerNormCache<T>,
    attn: AttentionCache<T>,
    drop_attn: DropoutMask<T>,
    ln_ffn: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    drop_ffn: DropoutMask<T>,
}

pub struct EncoderCache<T> {
    ids: Vec<TokenId>,
    layers: Vec<EncoderLayerCache<T>>,
    norm: LayerNormCache<T>,
}

struct DecoderLayerCache<T> {
    ln_self: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    drop_self: DropoutMask<T>,
    ln_cross: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    drop_cross: DropoutMask<T>,
    ln_ffn: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    drop_ffn: DropoutMask<T>,
}

pub struct DecoderCache<T> {
    ids: Vec<TokenId>,
    memory_rows: usize,
    layers: Vec<DecoderLayerCache<T>>,
    norm: LayerNormCache<T>,
    hidden: Matrix<T>,
}

impl<T: Scalar> DecoderCache<T> {
    /// Cross-attention distribution of the first head in the last layer.
    pub fn cross_attention_row(&self, i: usize) -> &[f64] {
        self.layers.last().expect("at least one layer").cross_attn.probs_row(0, i)
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = BackboneParams::blank(&config);
        init_normal(&mut params, config.seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: BackboneConfig, params: BackboneParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = BackboneParams::<T>::blank(&config);
        let shapes = |p: &BackboneParams<T>| {
            p.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.shape()))
                .collect::<Vec<_>>()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::Checkpoint("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    fn heads(&self) -> usize {
        self.config.n_heads
    }

    fn check_ids(&self, ids: &[TokenId], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Invalid(format!("{what} is empty")));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Invalid(format!(
                "{what} of length {} exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "{what} contains token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], pos: &Matrix<T>) -> Matrix<T> {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            let e = self.params.token_embed.row(id as usize);
            let p = pos.row(t);
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = *a + *b;
            }
        }
        x
    }

    /// Token-level encoder states, `len x d`. `valid[t] == false` marks a
    /// padding position that no other position attends to.
    pub fn encode_seq(
        &self,
        ids: &[TokenId],
        valid: Option<&[bool]>,
        mode: &mut Mode,
    ) -> Result<(Matrix<T>, EncoderCache<T>)> {
        self.check_ids(ids, "encoder input")?;
        if let Some(v) = valid {
            if v.len() != ids.len() {
                return Err(Error::Invalid("pad mask length differs from input length".into()));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::Invalid("encoder input is entirely padding".into()));
            }
        }
        let mut x = self.embed(ids, &self.params.enc_pos);
        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let (h, ln_attn) = layer.ln_attn.forward(&x);
            let (mut a, attn) = layer.attn.forward(&h, &h, valid, false, self.heads(), AttnKind::EncoderSelf);
            let drop_attn = mode.dropout(&mut a);
            x.add_assign(&a);
            let (h, ln_ffn) = layer.ln_ffn.forward(&x);
            let (mut f, ffn) = layer.ffn.forward(&h);
            let drop_ffn = mode.dropout(&mut f);
            x.add_assign(&f);
            layers.push(EncoderLayerCache {
                ln_attn,
                attn,
                drop_attn,
                ln_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (out, norm) = self.params.enc_norm.forward(&x);
        Ok((
            out,
            EncoderCache {
                ids: ids.to_vec(),
                layers,
                norm,
            },
        ))
    }

    /// Accumulates encoder parameter gradients given `d_out` w.r.t. the
    /// encoder output.
    pub fn encode_backward(&self, cache: &EncoderCache<T>, d_out: &Matrix<T>, grads: &mut BackboneParams<T>) {
        let heads = self.heads();
        let mut dx = self.params.enc_norm.backward(&cache.norm, d_out, &mut grads.enc_norm);
        for (i, lc) in cache.layers.iter().enumerate().rev() {
            let layer = &self.params.encoder[i];
            let g = &mut grads.encoder[i];
            let df = lc.drop_ffn.backward(&dx);
            let dh = layer.ffn.backward(&lc.ffn, &df, &mut g.ffn);
            dx.add_assign(&layer.ln_ffn.backward(&lc.ln_ffn, &dh, &mut g.ln_ffn));
            let da = lc.drop_attn.backward(&dx);
            let (mut dh, dkv) = layer.attn.backward(&lc.attn, &da, heads, &mut g.attn);
            dh.add_assign(&dkv);
            dx.add_assign(&layer.ln_attn.backward(&lc.ln_attn, &dh, &mut g.ln_attn));
        }
        self.embed_backward(&cache.ids, &dx, true, grads);
    }

    fn embed_backward(&self, ids: &[TokenId], dx: &Matrix<T>, encoder: bool, grads: &mut BackboneParams<T>) {
        for (t, &id) in ids.iter().enumerate() {
            let g = dx.row(t);
            for (o, v) in grads.token_embed.row_mut(id as usize).iter_mut().zip(g) {
                *o = *o + *v;
            }
            let pos = if encoder { &mut grads.enc_pos } else { &mut grads.dec_pos };
            for (o, v) in pos.row_mut(t).iter_mut().zip(g) {
                *o = *o + *v;
            }
        }
    }

    /// Next-token logits for every prefix position, `len x vocab`. Row `t`
    /// sees decoder inputs `0..=t` and the whole (unmasked) memory.
    pub fn decode_logits(
        &self,
        ids: &[TokenId],
        memory: &Matrix<T>,
        memory_valid: Option<&[bool]>,
        mode: &mut Mode,
    ) -> Result<(Matrix<T>, DecoderCache<T>)> {
        self.check_ids(ids, "decoder input")?;
        if memory.rows() == 0 {
            return Err(Error::Invalid("decoder memory is empty".into()));
        }
        if memory.cols() != self.config.d_model {
            return Err(Error::Invalid("decoder memory width differs from d_model".into()));
        }
        let heads = self.heads();
        let mut x = self.embed(ids, &self.params.dec_pos);
        let mut layers = Vec::with_capacity(self.params.decoder.len());
        for layer in &self.params.decoder {
            let (h, ln_self) = layer.ln_self.forward(&x);
            let (mut a, self_attn) = layer.self_attn.forward(&h, &h, None, true, heads, AttnKind::DecoderSelf);
            let drop_self = mode.dropout(&mut a);
            x.add_assign(&a);
            let (h, ln_cross) = layer.ln_cross.forward(&x);
            let (mut c, cross_attn) =
                layer
                    .cross_attn
                    .forward(&h, memory, memory_valid, false, heads, AttnKind::DecoderCross);
            let drop_cross = mode.dropout(&mut c);
            x.add_assign(&c);
            let (h, ln_ffn) = layer.ln_ffn.forward(&x);
            let (mut f, ffn) = layer.ffn.forward(&h);
            let drop_ffn = mode.dropout(&mut f);
            x.add_assign(&f);
            layers.push(DecoderLayerCache {
                ln_self,
                self_attn,
                drop_self,
                ln_cross,
                cross_attn,
                drop_cross,
                ln_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (hidden, norm) = self.params.dec_norm.forward(&x);
        let logits = self.params.lm_head.forward(&hidden);
        Ok((
            logits,
            DecoderCache {
                ids: ids.to_vec(),
                memory_rows: memory.rows(),
                layers,
                norm,
                hidden,
            },
        ))
    }

    /// Accumulates decoder gradients and returns the gradient w.r.t. the
    /// memory.
    pub fn decode_backward(
        &self,
        cache: &DecoderCache<T>,
        d_logits: &Matrix<T>,
        grads: &mut BackboneParams<T>,
    ) -> Matrix<T> {
        let heads = self.heads();
        let dh = self.params.lm_head.backward(&cache.hidden, d_logits, &mut grads.lm_head);
        let mut dx = self.params.dec_norm.backward(&cache.norm, &dh, &mut grads.dec_norm);
        let mut d_memory = Matrix::zeros(cache.memory_rows, self.config.d_model);
        for (i, lc) in cache.layers.iter().enumerate().rev() {
            let layer = &self.params.decoder[i];
            let g = &mut grads.decoder[i];
            let df = lc.drop_ffn.backward(&dx);
            let dh = layer.ffn.backward(&lc.ffn, &df, &mut g.ffn);
            dx.add_assign(&layer.ln_ffn.backward(&lc.ln_ffn, &dh, &mut g.ln_ffn));

            let dc = lc.drop_cross.backward(&dx);
            let (dq, dmem) = layer.cross_attn.backward(&lc.cross_attn, &dc, heads, &mut g.cross_attn);
            d_memory.add_assign(&dmem);
            dx.add_assign(&layer.ln_cross.backward(&lc.ln_cross, &dq, &mut g.ln_cross));

            let da = lc.drop_self.backward(&dx);
            let (mut dq, dkv) = layer.self_attn.backward(&lc.self_attn, &da, heads, &mut g.self_attn);
            dq.add_assign(&dkv);
            dx.add_assign(&layer.ln_self.backward(&lc.ln_self, &dq, &mut g.ln_self));
        }
        self.embed_backward(&cache.ids, &dx, false, grads);
        d_memory
    }

    /// Prepares incremental decoding over a fixed memory.
    pub fn start_decoding<'m>(&'m self, memory: &Matrix<T>) -> Result<IncrementalDecoder<'m, T>> {
        if memory.rows() == 0 {
            return Err(Error::Invalid("decoder memory is empty".into()));
        }
        let cross = self
            .params
            .decoder
            .iter()
            .map(|l| (l.cross_attn.wk.forward(memory), l.cross_attn.wv.forward(memory)))
            .collect();
        Ok(IncrementalDecoder { model: self, cross })
    }
}

/// Decoder over a fixed memory with projected cross-attention keys and
/// values, advancing one token at a time.
pub struct IncrementalDecoder<'m, T> {
    model: &'m Backbone<T>,
    cross: Vec<(Matrix<T>, Matrix<T>)>,
}

/// Self-attention keys/values of the tokens consumed so far, plus the
/// next-token logits.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    len: usize,
    logits: Vec<f64>,
}

impl<T: Scalar> DecoderState<T> {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<T: Scalar> IncrementalDecoder<'_, T> {
    pub fn max_positions(&self) -> usize {
        self.model.config.max_positions
    }

    /// State after consuming BOS.
    pub fn start(&self) -> Result<DecoderState<T>> {
        let empty = DecoderState {
            keys: vec![Matrix::zeros(0, self.model.config.d_model); self.cross.len()],
            values: vec![Matrix::zeros(0, self.model.config.d_model); self.cross.len()],
            len: 0,
            logits: Vec::new(),
        };
        self.advance(&empty, BOS)
    }

    /// Consumes `token` and returns the next state.
    pub fn advance(&self, state: &DecoderState<T>, token: TokenId) -> Result<DecoderState<T>> {
        let m = self.model;
        let p = &m.params;
        if state.len >= m.config.max_positions {
            return Err(Error::Invalid("decoder prefix exceeds max_positions".into()));
        }
        if token as usize >= m.config.vocab_size {
            return Err(Error::Invalid(format!("token id {token} outside vocabulary")));
        }
        let heads = m.config.n_heads;
        let d = m.config.d_model;
        let mut x = Matrix::zeros(1, d);
        for ((o, a), b) in x
            .row_mut(0)
            .iter_mut()
            .zip(p.token_embed.row(token as usize))
            .zip(p.dec_pos.row(state.len))
        {
            *o = *a + *b;
        }
        let mut next = state.clone();
        for (i, layer) in p.decoder.iter().enumerate() {
            let (h, _) = layer.ln_self.forward(&x);
            let k = layer.self_attn.wk.forward(&h);
            let v = layer.self_attn.wv.forward(&h);
            next.keys[i] = Matrix::vstack(&[&state.keys[i], &k]);
            next.values[i] = Matrix::vstack(&[&state.values[i], &v]);
            let q = layer.self_attn.wq.forward(&h);
            let a = layer
                .self_attn
                .attend_row(q.row(0), &next.keys[i], &next.values[i], None, heads, AttnKind::DecoderSelf);
            x.add_assign(&a);
            let (h, _) = layer.ln_cross.forward(&x);
            let q = layer.cross_attn.wq.forward(&h);
            let (ck, cv) = &self.cross[i];
            let c = layer
                .cross_attn
                .attend_row(q.row(0), ck, cv, None, heads, AttnKind::DecoderCross);
            x.add_assign(&c);
            let (h, _) = layer.ln_ffn.forward(&x);
            let (f, _) = layer.ffn.forward(&h);
            x.add_assign(&f);
        }
        let (h, _) = p.dec_norm.forward(&x);
        let logits = p.lm_head.forward(&h);
        next.logits = logits.row(0).iter().map(|v| v.widen()).collect();
        next.len = state.len + 1;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    fn model() -> Backbone<f64> {
        Backbone::new(BackboneConfig {
            seed: 3,
            ..BackboneConfig::tiny(30)
        })
        .unwrap()
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let m = model();
        let ids = [7, 8, 9, 10, 11];
        let (a, _) = m.encode_seq(&ids, None, &mut Mode::eval()).unwrap();
        let (b, _) = m.encode_seq(&ids, None, &mut Mode::eval()).unwrap();
        assert_eq!(a.shape(), (5, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn padding_tail_is_invisible() {
        let m = model();
        let valid = [true, true, true, false, false];
        let (a, _) = m.encode_seq(&[7, 8, 9, 0, 0], Some(&valid), &mut Mode::eval()).unwrap();
        let (b, _) = m.encode_seq(&[7, 8, 9, 12, 20], Some(&valid), &mut Mode::eval()).unwrap();
        assert_eq!(a.slice_rows(0, 3), b.slice_rows(0, 3));
    }

    #[test]
    fn oversized_and_empty_inputs_rejected() {
        let m = model();
        let long = vec![7; 33];
        assert!(m.encode_seq(&long, None, &mut Mode::eval()).is_err());
        let mem = Matrix::<f64>::zeros(0, 8);
        assert!(m.decode_logits(&[1, 7], &mem, None, &mut Mode::eval()).is_err());
    }

    #[test]
    fn decoder_is_causal_and_normalized() {
        let m = model();
        let (mem, _) = m.encode_seq(&[7, 8, 9], None, &mut Mode::eval()).unwrap();
        let (a, _) = m.decode_logits(&[1, 10, 11, 12], &mem, None, &mut Mode::eval()).unwrap();
        let (b, _) = m.decode_logits(&[1, 10, 13, 12], &mem, None, &mut Mode::eval()).unwrap();
        assert_eq!(a.slice_rows(0, 2), b.slice_rows(0, 2));
        assert_ne!(a.row(2), b.row(2));
        for r in 0..a.rows() {
            let row: Vec<f64> = a.row(r).to_vec();
            assert!((softmax(&row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn incremental_matches_full_decode() {
        let m = model();
        let (mem, _) = m.encode_seq(&[7, 8, 9, 10], None, &mut Mode::eval()).unwrap();
        let prefix = [1, 14, 15, 16];
        let (full, _) = m.decode_logits(&prefix, &mem, None, &mut Mode::eval()).unwrap();
        let dec = m.start_decoding(&mem).unwrap();
        let mut st = dec.start().unwrap();
        for (t, &tok) in prefix.iter().enumerate() {
            if t > 0 {
                st = dec.advance(&st, tok).unwrap();
            }
            for (a, b) in st.logits().iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

//! Named parameter tensors.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Attention, FeedForward, LayerNorm, Linear};
use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// A closed set of named tensors with a fixed traversal order.
pub trait ParamSet<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix<T>));

    fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill_zero());
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled_from(&mut self, other: &Self, alpha: f64) {
        let src = other.named_tensors();
        for ((_, dst), (_, s)) in self.named_tensors_mut().into_iter().zip(src) {
            dst.add_scaled(s, alpha);
        }
    }

    fn add_from(&mut self, other: &Self) {
        let src = other.named_tensors();
        for ((_, dst), (_, s)) in self.named_tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    /// Errors with the first tensor holding a NaN or infinity.
    fn check_finite(&self, what: &str) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("{what} {name}")));
            }
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> ParamSet<T> for Matrix<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix<T>)) {
        f(prefix.to_string(), self)
    }
}

/// Implements `ParamSet` for a struct by visiting the listed fields.
macro_rules! param_struct {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: Scalar> ParamSet<T> for $ty<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
                $( self.$field.visit(&$crate::backbone::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix<T>)) {
                $( self.$field.visit_mut(&$crate::backbone::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use param_struct;

param_struct!(Linear { weight, bias });
param_struct!(LayerNorm { gain, bias });
param_struct!(FeedForward { up, down });
param_struct!(Attention { wq, wk, wv, wo });

impl<T: Scalar, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}
param_struct!(EncoderLayer { ln_attn, attn, ln_ffn, ffn });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub ln_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln_cross: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}
param_struct!(DecoderLayer { ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn });

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    /// `vocab x d`, shared by encoder and decoder inputs.
    pub token_embed: Matrix<T>,
    pub enc_pos: Matrix<T>,
    pub dec_pos: Matrix<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: LayerNorm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: LayerNorm<T>,
    /// `d x vocab`.
    pub lm_head: Linear<T>,
}
param_struct!(BackboneParams {
    token_embed,
    enc_pos,
    dec_pos,
    encoder,
    enc_norm,
    decoder,
    dec_norm,
    lm_head,
});

impl<T: Scalar> BackboneParams<T> {
    /// All-zero tensors with layer-norm gains at one.
    pub fn blank(cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        let enc = EncoderLayer {
            ln_attn: LayerNorm::new(d),
            attn: Attention::zeros(d),
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::zeros(d, cfg.d_ff),
        };
        let dec = DecoderLayer {
            ln_self: LayerNorm::new(d),
            self_attn: Attention::zeros(d),
            ln_cross: LayerNorm::new(d),
            cross_attn: Attention::zeros(d),
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::zeros(d, cfg.d_ff),
        };
        Self {
            token_embed: Matrix::zeros(cfg.vocab_size, d),
            enc_pos: Matrix::zeros(cfg.max_positions, d),
            dec_pos: Matrix::zeros(cfg.max_positions, d),
            encoder: vec![enc; cfg.enc_layers],
            enc_norm: LayerNorm::new(d),
            decoder: vec![dec; cfg.dec_layers],
            dec_norm: LayerNorm::new(d),
            lm_head: Linear::zeros(d, cfg.vocab_size),
        }
    }
}

pub const INIT_STD: f64 = 0.02;

/// Seeded initialization: biases zero, layer-norm gains one, everything else
/// normal with standard deviation 0.02, drawn in traversal order.
pub fn init_normal<T: Scalar, P: ParamSet<T>>(params: &mut P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    params.visit_mut("", &mut |name, t| {
        if name.ends_with(".bias") {
            t.fill_zero();
        } else if name.ends_with(".gain") {
            t.as_mut_slice().iter_mut().for_each(|v| *v = T::one());
        } else {
            t.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = T::narrow(normal.sample(&mut rng)));
        }
    });
}

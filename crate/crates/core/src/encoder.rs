//! Frozen text-encoder stand-in with an exact vector-Jacobian product.
//!
//! Tokens are mean-pooled with fixed per-position scales, mapped through a
//! linear layer or a one-hidden-layer tanh MLP, and projected to the unit sphere.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, ParseErrorKind, Result};
use crate::math::{dot, norm};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    LinearMean,
    TanhMlp,
}

impl EncoderKind {
    fn tag(self) -> u8 {
        match self {
            EncoderKind::LinearMean => 0,
            EncoderKind::TanhMlp => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(EncoderKind::LinearMean),
            1 => Some(EncoderKind::TanhMlp),
            _ => None,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::LinearMean => "linear-mean",
            EncoderKind::TanhMlp => "tanh-mlp",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear-mean" => Ok(EncoderKind::LinearMean),
            "tanh-mlp" => Ok(EncoderKind::TanhMlp),
            other => Err(format!("expected linear-mean or tanh-mlp, got `{other}`")),
        }
    }
}

/// Shape of an encoder. `context_len` is n; the encoder accepts n + 1 tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub token_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::LinearMean,
            token_dim: 24,
            feature_dim: 16,
            hidden_dim: 32,
            context_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    Linear {
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Mlp {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    kind: EncoderKind,
    token_dim: usize,
    feature_dim: usize,
    hidden_dim: usize,
    position_scales: Vec<f64>,
    params: Params,
    fingerprint: u64,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activation {
    pub feature: Vec<f64>,
    z_norm: f64,
    hidden: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

fn matvec_t(w: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, gr) in g.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
    out
}

impl FrozenEncoder {
    /// Draws weights from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) and position
    /// scales from uniform(0.5, 1.5). All values are f32-representable so the
    /// encoder file reproduces them exactly.
    pub fn seeded(spec: EncoderSpec, seed: u64) -> Result<Self> {
        if spec.token_dim == 0 || spec.feature_dim == 0 {
            return Err(Error::invalid(
                "encoder dims",
                "token and feature dims must be positive",
            ));
        }
        if spec.kind == EncoderKind::TanhMlp && spec.hidden_dim == 0 {
            return Err(Error::invalid(
                "encoder dims",
                "tanh-mlp needs a hidden width",
            ));
        }
        let mut rng = stream(seed, Domain::Encoder, 0);
        let scales: Vec<f64> = (0..spec.context_len + 1)
            .map(|_| (0.5 + rng.random::<f64>()) as f32 as f64)
            .collect();
        let mut uniform = |len: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len)
                .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32 as f64)
                .collect()
        };
        let (dt, df, h) = (spec.token_dim, spec.feature_dim, spec.hidden_dim);
        let params = match spec.kind {
            EncoderKind::LinearMean => Params::Linear {
                w: uniform(df * dt, dt),
                b: uniform(df, dt),
            },
            EncoderKind::TanhMlp => Params::Mlp {
                w1: uniform(h * dt, dt),
                b1: uniform(h, dt),
                w2: uniform(df * h, h),
                b2: uniform(df, h),
            },
        };
        let hidden = if spec.kind == EncoderKind::TanhMlp {
            h
        } else {
            0
        };
        Ok(Self::assemble(spec.kind, dt, df, hidden, scales, params))
    }

    /// Builds an encoder from explicit values. `params` is the flat list in
    /// declaration order: `W, b` or `W1, b1, W2, b2`, matrices row-major.
    pub fn from_parts(
        kind: EncoderKind,
        token_dim: usize,
        feature_dim: usize,
        hidden_dim: usize,
        position_scales: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if token_dim == 0 || feature_dim == 0 || position_scales.is_empty() {
            return Err(Error::invalid(
                "encoder dims",
                "dims and scale count must be positive",
            ));
        }
        let (dt, df, h) = (token_dim, feature_dim, hidden_dim);
        let expected = match kind {
            EncoderKind::LinearMean => df * dt + df,
            EncoderKind::TanhMlp => h * dt + h + df * h + df,
        };
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "encoder params",
                expected,
                got: params.len(),
            });
        }
        if kind == EncoderKind::TanhMlp && h == 0 {
            return Err(Error::invalid(
                "encoder dims",
                "tanh-mlp needs a hidden width",
            ));
        }
        if params
            .iter()
            .chain(&position_scales)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("encoder params"));
        }
        let mut rest = params.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let packed = match kind {
            EncoderKind::LinearMean => Params::Linear {
                w: take(df * dt),
                b: take(df),
            },
            EncoderKind::TanhMlp => Params::Mlp {
                w1: take(h * dt),
                b1: take(h),
                w2: take(df * h),
                b2: take(df),
            },
        };
        let hidden = if kind == EncoderKind::TanhMlp { h } else { 0 };
        Ok(Self::assemble(
            kind,
            dt,
            df,
            hidden,
            position_scales,
            packed,
        ))
    }

    fn assemble(
        kind: EncoderKind,
        token_dim: usize,
        feature_dim: usize,
        hidden_dim: usize,
        position_scales: Vec<f64>,
        params: Params,
    ) -> Self {
        let mut enc = FrozenEncoder {
            kind,
            token_dim,
            feature_dim,
            hidden_dim,
            position_scales,
            params,
            fingerprint: 0,
        };
        enc.fingerprint = enc.compute_fingerprint();
        enc
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Number of context tokens n (one fewer than the sequence length).
    pub fn context_len(&self) -> usize {
        self.position_scales.len() - 1
    }

    pub fn position_scales(&self) -> &[f64] {
        &self.position_scales
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// All parameters flattened in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        match &self.params {
            Params::Linear { w, b } => [w.as_slice(), b].concat(),
            Params::Mlp { w1, b1, w2, b2 } => [w1.as_slice(), b1, w2, b2].concat(),
        }
    }

    fn header_bytes(&self) -> Writer {
        let mut w = Writer::default();
        w.u8(self.kind.tag());
        w.u32(self.token_dim as u32);
        w.u32(self.feature_dim as u32);
        w.u32(self.hidden_dim as u32);
        w.u32(self.position_scales.len() as u32);
        w.f32_slice(&self.position_scales);
        w.f32_slice(&self.flat_params());
        w
    }

    fn compute_fingerprint(&self) -> u64 {
        let digest = Sha256::digest(&self.header_bytes().buf);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn check_tokens<T: AsRef<[f64]>>(&self, tokens: &[T]) -> Result<()> {
        if tokens.len() != self.position_scales.len() {
            return Err(Error::DimensionMismatch {
                what: "token sequence length",
                expected: self.position_scales.len(),
                got: tokens.len(),
            });
        }
        for t in tokens {
            if t.as_ref().len() != self.token_dim {
                return Err(Error::DimensionMismatch {
                    what: "token dim",
                    expected: self.token_dim,
                    got: t.as_ref().len(),
                });
            }
        }
        Ok(())
    }

    /// (1/(n+1)) Σ_s scale_s · token_s
    pub fn pool<T: AsRef<[f64]>>(&self, tokens: &[T]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let denom = tokens.len() as f64;
        let mut pooled = vec![0.0; self.token_dim];
        for (t, s) in tokens.iter().zip(&self.position_scales) {
            crate::math::axpy(&mut pooled, s / denom, t.as_ref());
        }
        Ok(pooled)
    }

    /// Pooled contribution of the n context tokens alone.
    pub(crate) fn pool_context(&self, context: &[Vec<f64>]) -> Vec<f64> {
        let denom = self.position_scales.len() as f64;
        let mut pooled = vec![0.0; self.token_dim];
        for (t, s) in context.iter().zip(&self.position_scales) {
            crate::math::axpy(&mut pooled, s / denom, t);
        }
        pooled
    }

    /// Weight of token slot `s` inside the pooled vector.
    pub(crate) fn slot_weight(&self, s: usize) -> f64 {
        self.position_scales[s] / self.position_scales.len() as f64
    }

    pub(crate) fn class_slot_weight(&self) -> f64 {
        self.slot_weight(self.context_len())
    }

    pub fn forward_pooled(&self, pooled: &[f64]) -> Result<Activation> {
        let (z, hidden) = match &self.params {
            Params::Linear { w, b } => {
                let mut z = matvec(w, pooled, self.feature_dim);
                crate::math::axpy(&mut z, 1.0, b);
                (z, Vec::new())
            }
            Params::Mlp { w1, b1, w2, b2 } => {
                let mut pre = matvec(w1, pooled, self.hidden_dim);
                crate::math::axpy(&mut pre, 1.0, b1);
                let h: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
                let mut z = matvec(w2, &h, self.feature_dim);
                crate::math::axpy(&mut z, 1.0, b2);
                (z, h)
            }
        };
        let z_norm = norm(&z);
        if z_norm == 0.0 || !z_norm.is_finite() {
            return Err(Error::DegenerateEncoding);
        }
        Ok(Activation {
            feature: z.iter().map(|x| x / z_norm).collect(),
            z_norm,
            hidden,
        })
    }

    /// Gradient of `upstream · feature` with respect to the pooled input.
    pub fn backward_pooled(&self, act: &Activation, upstream: &[f64]) -> Vec<f64> {
        let f = &act.feature;
        let proj = dot(f, upstream);
        let g_z: Vec<f64> = upstream
            .iter()
            .zip(f)
            .map(|(u, fi)| (u - fi * proj) / act.z_norm)
            .collect();
        match &self.params {
            Params::Linear { w, .. } => matvec_t(w, &g_z, self.token_dim),
            Params::Mlp { w1, w2, .. } => {
                let g_h = matvec_t(w2, &g_z, self.hidden_dim);
                let g_pre: Vec<f64> = g_h
                    .iter()
                    .zip(&act.hidden)
                    .map(|(g, h)| g * (1.0 - h * h))
                    .collect();
                matvec_t(w1, &g_pre, self.token_dim)
            }
        }
    }

    pub fn encode<T: AsRef<[f64]>>(&self, tokens: &[T]) -> Result<Vec<f64>> {
        let pooled = self.pool(tokens)?;
        Ok(self.forward_pooled(&pooled)?.feature)
    }

    /// Exact gradient of `upstream · encode(tokens)` with respect to every token.
    pub fn encode_vjp<T: AsRef<[f64]>>(
        &self,
        tokens: &[T],
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        if upstream.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "upstream",
                expected: self.feature_dim,
                got: upstream.len(),
            });
        }
        let pooled = self.pool(tokens)?;
        let act = self.forward_pooled(&pooled)?;
        let g = self.backward_pooled(&act, upstream);
        Ok((0..tokens.len())
            .map(|s| {
                let w = self.slot_weight(s);
                g.iter().map(|x| w * x).collect()
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.header(b"NEGE");
        w.buf.extend_from_slice(&self.header_bytes().buf);
        w.u64(self.fingerprint);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new("encoder", buf);
        r.header(b"NEGE")?;
        let kind_at = r.offset();
        let tag = r.u8()?;
        let kind = EncoderKind::from_tag(tag).ok_or_else(|| {
            r.error_at(
                kind_at,
                ParseErrorKind::BadTag {
                    field: "encoder kind",
                    value: tag as u64,
                },
            )
        })?;
        let dims_at = r.offset();
        let dt = r.u32()? as usize;
        let df = r.u32()? as usize;
        let h = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dt == 0 || df == 0 || count == 0 || (kind == EncoderKind::TanhMlp && h == 0) {
            return Err(r
                .error_at(
                    dims_at,
                    ParseErrorKind::BadTag {
                        field: "encoder dims",
                        value: 0,
                    },
                )
                .into());
        }
        let scales = r.f32_vec(count)?;
        let n_params = match kind {
            EncoderKind::LinearMean => df * dt + df,
            EncoderKind::TanhMlp => h * dt + h + df * h + df,
        };
        let params = r.f32_vec(n_params)?;
        let fp_at = r.offset();
        let stored = r.u64()?;
        r.finish()?;
        let enc = Self::from_parts(kind, dt, df, h, scales, params)?;
        if enc.fingerprint != stored {
            return Err(r
                .error_at(
                    fp_at,
                    ParseErrorKind::FingerprintMismatch {
                        stored,
                        computed: enc.fingerprint,
                    },
                )
                .into());
        }
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

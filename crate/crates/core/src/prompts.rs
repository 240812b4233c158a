//! Learnable prompt state and checkpoints.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, ParseErrorKind, Result};
use crate::rng::{gaussian_vec, stream, Domain};
use crate::world::ClassVocabulary;

/// Standard deviation of the positive context initialization.
pub const INIT_SIGMA: f64 = 0.02;
/// Default jitter added to each negative context at initialization.
pub const DEFAULT_JITTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    tokens: Vec<Vec<f64>>,
}

impl PromptContext {
    pub fn new(tokens: Vec<Vec<f64>>) -> Result<Self> {
        let dt = tokens.first().ok_or(Error::Empty("prompt context"))?.len();
        if dt == 0 {
            return Err(Error::Empty("context token"));
        }
        for t in &tokens {
            if t.len() != dt {
                return Err(Error::DimensionMismatch {
                    what: "context token",
                    expected: dt,
                    got: t.len(),
                });
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("context token"));
            }
        }
        Ok(PromptContext { tokens })
    }

    pub fn from_flat(flat: &[f64], token_dim: usize) -> Result<Self> {
        if token_dim == 0 || !flat.len().is_multiple_of(token_dim) {
            return Err(Error::invalid(
                "prompt context",
                "length is not a multiple of token dim",
            ));
        }
        Self::new(flat.chunks(token_dim).map(<[f64]>::to_vec).collect())
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tokens.concat()
    }

    /// Tokens followed by the class token, ready for the encoder.
    pub fn with_class(&self, class_token: &[f64]) -> Vec<Vec<f64>> {
        let mut t = self.tokens.clone();
        t.push(class_token.to_vec());
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivePrompt {
    context: PromptContext,
    frozen: bool,
}

impl PositivePrompt {
    pub fn new(context: PromptContext) -> Self {
        PositivePrompt {
            context,
            frozen: false,
        }
    }

    pub fn frozen(context: PromptContext) -> Self {
        PositivePrompt {
            context,
            frozen: true,
        }
    }

    pub fn context(&self) -> &PromptContext {
        &self.context
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_context(&mut self, context: PromptContext) -> Result<()> {
        if self.frozen {
            return Err(Error::invalid(
                "positive prompt",
                "frozen prompts are immutable",
            ));
        }
        self.context = context;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativePromptSet {
    contexts: Vec<PromptContext>,
}

impl NegativePromptSet {
    pub fn new(contexts: Vec<PromptContext>) -> Result<Self> {
        let first = contexts
            .first()
            .ok_or(Error::Empty("negative prompt set"))?;
        let (n, dt) = (first.len(), first.token_dim());
        if contexts.iter().any(|c| c.len() != n || c.token_dim() != dt) {
            return Err(Error::invalid(
                "negative prompt set",
                "contexts differ in shape",
            ));
        }
        Ok(NegativePromptSet { contexts })
    }

    pub fn contexts(&self) -> &[PromptContext] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Gaussian(0, 0.02) tokens, deterministic per seed.
pub fn init_positive(seed: u64, n: usize, token_dim: usize) -> Result<PositivePrompt> {
    if n == 0 || token_dim == 0 {
        return Err(Error::invalid(
            "prompt shape",
            "n and token dim must be positive",
        ));
    }
    let mut rng = stream(seed, Domain::PositiveInit, 0);
    let flat = gaussian_vec(&mut rng, n * token_dim, INIT_SIGMA);
    Ok(PositivePrompt::new(PromptContext::from_flat(
        &flat, token_dim,
    )?))
}

pub(crate) fn jittered_copies(
    base: &PromptContext,
    p: usize,
    jitter: f64,
    seed: u64,
) -> Result<NegativePromptSet> {
    if p == 0 {
        return Err(Error::Empty("negative prompt set"));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::invalid("jitter", "must be finite and >= 0"));
    }
    if p > 1 && jitter == 0.0 {
        return Err(Error::SymmetricInit { p });
    }
    let flat = base.flat();
    let contexts = (0..p)
        .map(|l| {
            let mut rng = stream(seed, Domain::NegativeInit, l as u64);
            let noise = gaussian_vec(&mut rng, flat.len(), jitter);
            let v: Vec<f64> = flat.iter().zip(&noise).map(|(a, e)| a + e).collect();
            PromptContext::from_flat(&v, base.token_dim())
        })
        .collect::<Result<Vec<_>>>()?;
    NegativePromptSet::new(contexts)
}

/// Copies the frozen positive context `p` times, each with its own jitter draw.
pub fn init_negative_from_positive(
    pos: &PositivePrompt,
    p: usize,
    jitter: f64,
    seed: u64,
) -> Result<NegativePromptSet> {
    if !pos.is_frozen() {
        return Err(Error::UnfrozenPositive);
    }
    jittered_copies(pos.context(), p, jitter, seed)
}

/// encode(context ++ [c_i]) for each class in `class_subset`, in the given order.
pub fn compute_class_features(
    enc: &FrozenEncoder,
    context: &PromptContext,
    vocab: &ClassVocabulary,
    class_subset: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if class_subset.is_empty() {
        return Err(Error::Empty("class subset"));
    }
    class_subset
        .iter()
        .map(|&i| {
            let entry = vocab.entries().get(i).ok_or(Error::LabelOutOfRange {
                label: i,
                classes: vocab.len(),
            })?;
            enc.encode(&context.with_class(&entry.token))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub positive: PositivePrompt,
    pub negatives: Option<NegativePromptSet>,
    pub tau: f64,
    pub encoder_fingerprint: u64,
    pub trained_classes: Vec<String>,
}

impl Checkpoint {
    pub fn num_negatives(&self) -> usize {
        self.negatives.as_ref().map_or(0, NegativePromptSet::len)
    }

    pub fn verify(&self, enc: &FrozenEncoder) -> Result<()> {
        if self.encoder_fingerprint != enc.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.encoder_fingerprint,
                found: enc.fingerprint(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ctx = self.positive.context();
        let mut w = Writer::default();
        w.header(b"NEGP");
        w.u32(ctx.token_dim() as u32);
        w.u32(ctx.len() as u32);
        w.u32(self.num_negatives() as u32);
        w.f64(self.tau);
        w.u64(self.encoder_fingerprint);
        w.f32_slice(&ctx.flat());
        for c in self.negatives.iter().flat_map(|s| s.contexts()) {
            w.f32_slice(&c.flat());
        }
        w.u32(self.trained_classes.len() as u32);
        for name in &self.trained_classes {
            w.string(name);
        }
        w.buf
    }

    /// Decodes without checking the encoder fingerprint.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", buf);
        r.header(b"NEGP")?;
        let dims_at = r.offset();
        let dt = r.u32()? as usize;
        let n = r.u32()? as usize;
        if dt == 0 || n == 0 {
            return Err(r
                .error_at(dims_at, ParseErrorKind::Empty("prompt context"))
                .into());
        }
        let p = r.u32()? as usize;
        let tau_at = r.offset();
        let tau = r.f64()?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(r
                .error_at(
                    tau_at,
                    ParseErrorKind::BadTag {
                        field: "tau",
                        value: tau.to_bits(),
                    },
                )
                .into());
        }
        let fingerprint = r.u64()?;
        let positive = PromptContext::from_flat(&r.f32_vec(n * dt)?, dt)?;
        let mut negs = Vec::with_capacity(p.min(1 << 10));
        for _ in 0..p {
            negs.push(PromptContext::from_flat(&r.f32_vec(n * dt)?, dt)?);
        }
        let count = r.u32()? as usize;
        let mut trained_classes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            trained_classes.push(r.string()?);
        }
        r.finish()?;
        Ok(Checkpoint {
            positive: PositivePrompt::frozen(positive),
            negatives: if p == 0 {
                None
            } else {
                Some(NegativePromptSet::new(negs)?)
            },
            tau,
            encoder_fingerprint: fingerprint,
            trained_classes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads and checks the fingerprint against `enc`.
    pub fn load(path: impl AsRef<Path>, enc: &FrozenEncoder) -> Result<Self> {
        let ckpt = Self::from_bytes(&std::fs::read(path)?)?;
        ckpt.verify(enc)?;
        Ok(ckpt)
    }
}

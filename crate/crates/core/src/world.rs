//! Synthetic ID/OOD worlds and the feature-bundle and vocabulary file formats.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{quantize, Reader, Writer};
use crate::encoder::{EncoderSpec, FrozenEncoder};
use crate::error::{Error, ParseErrorKind, Result};
use crate::math::{argmax, dot, l2_normalize, norm};
use crate::rng::{gaussian_vec, stream, Domain};

/// Loader tolerance on stored feature norms.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    IdTrain,
    IdTest,
    OodTest,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::IdTrain => 0,
            Split::IdTest => 1,
            Split::OodTest => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        [Split::IdTrain, Split::IdTest, Split::OodTest]
            .into_iter()
            .find(|s| s.tag() == tag)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::IdTrain => "id_train.neb",
            Split::IdTest => "id_test.neb",
            Split::OodTest => "ood_test.neb",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub name: String,
    pub token: Vec<f64>,
    pub is_id: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    entries: Vec<VocabEntry>,
}

impl ClassVocabulary {
    pub fn new(entries: Vec<VocabEntry>) -> Result<Self> {
        let first = entries.first().ok_or(Error::Empty("vocabulary"))?;
        let dt = first.token.len();
        if dt == 0 {
            return Err(Error::Empty("class token"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::invalid(
                    "vocabulary",
                    format!("duplicate class name `{}`", e.name),
                ));
            }
            if e.token.len() != dt {
                return Err(Error::DimensionMismatch {
                    what: "class token",
                    expected: dt,
                    got: e.token.len(),
                });
            }
            if e.token.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("class token"));
            }
        }
        Ok(ClassVocabulary { entries })
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.entries[0].token.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Indices of in-distribution classes, in vocabulary order.
    pub fn id_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].is_id).collect()
    }

    pub fn ood_classes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.entries[i].is_id)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.header(b"NEGV");
        w.u32(self.token_dim() as u32);
        w.u32(self.len() as u32);
        for e in &self.entries {
            w.string(&e.name);
            w.u8(e.is_id as u8);
            w.f32_slice(&e.token);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new("vocabulary", buf);
        r.header(b"NEGV")?;
        let dt = r.u32()? as usize;
        let count_at = r.offset();
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(r
                .error_at(count_at, ParseErrorKind::Empty("vocabulary"))
                .into());
        }
        if dt == 0 {
            return Err(r.error_at(6, ParseErrorKind::Empty("class token")).into());
        }
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_at = r.offset();
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(r
                    .error_at(name_at, ParseErrorKind::DuplicateName(name))
                    .into());
            }
            let mask_at = r.offset();
            let is_id = match r.u8()? {
                0 => false,
                1 => true,
                v => {
                    return Err(r
                        .error_at(
                            mask_at,
                            ParseErrorKind::BadTag {
                                field: "id mask",
                                value: v as u64,
                            },
                        )
                        .into())
                }
            };
            let token = r.f32_vec(dt)?;
            entries.push(VocabEntry { name, token, is_id });
        }
        r.finish()?;
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Precomputed image features with labels into a per-bundle name table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    split: Split,
    feature_dim: usize,
    label_names: Vec<String>,
    /// f32-exact values as written to disk
    stored: Vec<Vec<f64>>,
    /// `stored`, renormalized
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// Renormalizes `v`, or reports its norm when it is too far from 1.
fn renormalize(v: &[f64]) -> std::result::Result<Vec<f64>, f64> {
    let n = norm(v);
    if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(n);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl LabeledFeatureSet {
    /// Features are rounded to f32 (the stored precision) and renormalized;
    /// any whose norm is off by more than [`NORM_TOLERANCE`] is rejected.
    pub fn new(
        split: Split,
        label_names: Vec<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: features.len(),
                got: labels.len(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = label_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(
                "label table",
                format!("duplicate name `{dup}`"),
            ));
        }
        let feature_dim = features.first().map_or(0, Vec::len);
        let mut normed = Vec::with_capacity(features.len());
        let mut stored = Vec::with_capacity(features.len());
        for (f, &l) in features.iter().zip(&labels) {
            if f.len() != feature_dim || feature_dim == 0 {
                return Err(Error::DimensionMismatch {
                    what: "feature",
                    expected: feature_dim,
                    got: f.len(),
                });
            }
            if l >= label_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: label_names.len(),
                });
            }
            let q = quantize(f);
            normed.push(
                renormalize(&q).map_err(|n| {
                    Error::invalid("feature", format!("norm out of tolerance ({n})"))
                })?,
            );
            stored.push(q);
        }
        Ok(LabeledFeatureSet {
            split,
            feature_dim,
            label_names,
            stored,
            features: normed,
            labels,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn label_name(&self, record: usize) -> &str {
        &self.label_names[self.labels[record]]
    }

    /// Checks every label against the vocabulary and the split's ID/OOD side.
    pub fn check_against(&self, vocab: &ClassVocabulary) -> Result<()> {
        let want_id = self.split != Split::OodTest;
        for name in &self.label_names {
            let i = vocab
                .index_of(name)
                .ok_or_else(|| Error::UnknownClass(name.clone()))?;
            if vocab.entries()[i].is_id != want_id {
                return Err(Error::invalid(
                    "bundle",
                    format!("class `{name}` is on the wrong side of the ID/OOD split"),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.header(b"NEGB");
        w.u8(self.split.tag());
        w.u32(self.feature_dim as u32);
        w.u64(self.len() as u64);
        w.u32(self.label_names.len() as u32);
        for n in &self.label_names {
            w.string(n);
        }
        for (f, l) in self.stored.iter().zip(&self.labels) {
            w.u32(*l as u32);
            w.f32_slice(f);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new("bundle", buf);
        r.header(b"NEGB")?;
        let split_at = r.offset();
        let tag = r.u8()?;
        let split = Split::from_tag(tag).ok_or_else(|| {
            r.error_at(
                split_at,
                ParseErrorKind::BadTag {
                    field: "split",
                    value: tag as u64,
                },
            )
        })?;
        let df_at = r.offset();
        let df = r.u32()? as usize;
        if df == 0 {
            return Err(r
                .error_at(df_at, ParseErrorKind::Empty("feature dim"))
                .into());
        }
        let count = r.u64()?;
        let names = r.u32()? as usize;
        let mut label_names = Vec::with_capacity(names.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..names {
            let at = r.offset();
            let n = r.string()?;
            if !seen.insert(n.clone()) {
                return Err(r.error_at(at, ParseErrorKind::DuplicateName(n)).into());
            }
            label_names.push(n);
        }
        let mut features = Vec::new();
        let mut stored = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let l = r.u32()? as usize;
            if l >= label_names.len() {
                return Err(r
                    .error_at(
                        at,
                        ParseErrorKind::BadTag {
                            field: "label index",
                            value: l as u64,
                        },
                    )
                    .into());
            }
            let vec_at = r.offset();
            let raw = r.f32_vec(df)?;
            let f = renormalize(&raw)
                .map_err(|norm| r.error_at(vec_at, ParseErrorKind::NormOutOfTolerance { norm }))?;
            features.push(f);
            stored.push(raw);
            labels.push(l);
        }
        r.finish()?;
        Ok(LabeledFeatureSet {
            split,
            feature_dim: df,
            label_names,
            stored,
            features,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub id_classes: usize,
    pub ood_classes: usize,
    pub shots_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub hardness: f64,
    /// Standard deviation of the i.i.d. gaussian class tokens.
    pub class_token_scale: f64,
    pub encoder: EncoderSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            id_classes: 20,
            ood_classes: 20,
            shots_per_class: 16,
            test_per_class: 100,
            noise_sigma: 0.15,
            hardness: 0.5,
            class_token_scale: 4.0,
            encoder: EncoderSpec::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("id_classes", self.id_classes),
            ("ood_classes", self.ood_classes),
            ("shots_per_class", self.shots_per_class),
            ("test_per_class", self.test_per_class),
            ("token_dim", self.encoder.token_dim),
            ("feature_dim", self.encoder.feature_dim),
            ("context_len", self.encoder.context_len),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::invalid(
                    "world config",
                    format!("{what} must be positive"),
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("world config", "noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(Error::invalid(
                "world config",
                "hardness must lie in [0, 1]",
            ));
        }
        if !(self.class_token_scale > 0.0 && self.class_token_scale.is_finite()) {
            return Err(Error::invalid(
                "world config",
                "class_token_scale must be > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub encoder: FrozenEncoder,
    pub vocab: ClassVocabulary,
    pub id_train: LabeledFeatureSet,
    pub id_test: LabeledFeatureSet,
    pub ood_test: LabeledFeatureSet,
}

impl World {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.encoder.save(dir.join("encoder.nfe"))?;
        self.vocab.save(dir.join("vocab.nvc"))?;
        for set in [&self.id_train, &self.id_test, &self.ood_test] {
            set.save(dir.join(set.split().file_name()))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let world = World {
            encoder: FrozenEncoder::load(dir.join("encoder.nfe"))?,
            vocab: ClassVocabulary::load(dir.join("vocab.nvc"))?,
            id_train: LabeledFeatureSet::load(dir.join(Split::IdTrain.file_name()))?,
            id_test: LabeledFeatureSet::load(dir.join(Split::IdTest.file_name()))?,
            ood_test: LabeledFeatureSet::load(dir.join(Split::OodTest.file_name()))?,
        };
        world.check()?;
        Ok(world)
    }

    /// Cross-checks dims, splits and labels of the parts.
    pub fn check(&self) -> Result<()> {
        if self.vocab.token_dim() != self.encoder.token_dim() {
            return Err(Error::DimensionMismatch {
                what: "vocabulary token dim",
                expected: self.encoder.token_dim(),
                got: self.vocab.token_dim(),
            });
        }
        let expected = [Split::IdTrain, Split::IdTest, Split::OodTest];
        for (set, split) in [&self.id_train, &self.id_test, &self.ood_test]
            .into_iter()
            .zip(expected)
        {
            if set.split() != split {
                return Err(Error::invalid(
                    "bundle",
                    format!("expected {split:?}, found {:?}", set.split()),
                ));
            }
            if !set.is_empty() && set.feature_dim() != self.encoder.feature_dim() {
                return Err(Error::DimensionMismatch {
                    what: "bundle feature dim",
                    expected: self.encoder.feature_dim(),
                    got: set.feature_dim(),
                });
            }
            set.check_against(&self.vocab)?;
        }
        Ok(())
    }
}

/// encode(all-zero context, c_i) for every vocabulary entry.
pub fn class_prototypes(enc: &FrozenEncoder, vocab: &ClassVocabulary) -> Result<Vec<Vec<f64>>> {
    let zeros = vec![vec![0.0; enc.token_dim()]; enc.context_len()];
    vocab
        .entries()
        .iter()
        .map(|e| {
            let mut tokens = zeros.clone();
            tokens.push(e.token.clone());
            enc.encode(&tokens)
        })
        .collect()
}

/// normalize((1 - h)·own + h·nearest) with nearest chosen by cosine among `anchors`.
pub fn mix_toward_nearest(own: &[f64], anchors: &[Vec<f64>], h: f64) -> Result<Vec<f64>> {
    let sims: Vec<f64> = anchors.iter().map(|a| dot(own, a)).collect();
    let nearest = &anchors[argmax(&sims)];
    let mixed: Vec<f64> = own
        .iter()
        .zip(nearest)
        .map(|(o, n)| (1.0 - h) * o + h * n)
        .collect();
    l2_normalize(&mixed)
}

fn sample_split(
    cfg: &WorldConfig,
    split: Split,
    domain: Domain,
    prototypes: &[Vec<f64>],
    names: Vec<String>,
    per_class: usize,
) -> Result<LabeledFeatureSet> {
    let total = prototypes.len() * per_class;
    let features = (0..total)
        .into_par_iter()
        .map(|r| {
            let proto = &prototypes[r / per_class];
            let mut rng = stream(cfg.seed, domain, r as u64);
            let noise = gaussian_vec(&mut rng, proto.len(), cfg.noise_sigma);
            let noisy: Vec<f64> = proto.iter().zip(&noise).map(|(p, e)| p + e).collect();
            l2_normalize(&noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..total).map(|r| r / per_class).collect();
    LabeledFeatureSet::new(split, names, features, labels)
}

/// Generates encoder, vocabulary and the three feature splits.
///
/// Features go through the same f32 rounding as the bundle files, so an
/// in-memory world equals its saved and reloaded copy.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let encoder = FrozenEncoder::seeded(cfg.encoder, cfg.seed)?;
    let k = cfg.id_classes;
    let dt = cfg.encoder.token_dim;
    let entries: Vec<VocabEntry> = (0..k + cfg.ood_classes)
        .map(|i| {
            let mut rng = stream(cfg.seed, Domain::ClassToken, i as u64);
            let token = quantize(&gaussian_vec(&mut rng, dt, cfg.class_token_scale));
            let (name, is_id) = if i < k {
                (format!("id-{i:03}"), true)
            } else {
                (format!("ood-{:03}", i - k), false)
            };
            VocabEntry { name, token, is_id }
        })
        .collect();
    let vocab = ClassVocabulary::new(entries)?;
    let protos = class_prototypes(&encoder, &vocab)?;
    let (id_protos, ood_raw) = protos.split_at(k);
    let ood_protos = ood_raw
        .iter()
        .map(|o| mix_toward_nearest(o, id_protos, cfg.hardness))
        .collect::<Result<Vec<_>>>()?;
    let id_names: Vec<String> = vocab.entries()[..k]
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let ood_names: Vec<String> = vocab.entries()[k..]
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let id_train = sample_split(
        cfg,
        Split::IdTrain,
        Domain::IdTrain,
        id_protos,
        id_names.clone(),
        cfg.shots_per_class,
    )?;
    let id_test = sample_split(
        cfg,
        Split::IdTest,
        Domain::IdTest,
        id_protos,
        id_names,
        cfg.test_per_class,
    )?;
    let ood_test = sample_split(
        cfg,
        Split::OodTest,
        Domain::OodTest,
        &ood_protos,
        ood_names,
        cfg.test_per_class,
    )?;
    Ok(World {
        encoder,
        vocab,
        id_train,
        id_test,
        ood_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            id_classes: 4,
            ood_classes: 3,
            shots_per_class: 2,
            test_per_class: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn default_counts() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(
            (w.id_train.len(), w.id_test.len(), w.ood_test.len()),
            (320, 2000, 2000)
        );
        w.check().unwrap();
    }

    #[test]
    fn zero_classes_rejected() {
        let cfg = WorldConfig {
            id_classes: 0,
            ..small()
        };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn noiseless_features_sit_on_prototypes() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            hardness: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        let protos = class_prototypes(&w.encoder, &w.vocab).unwrap();
        for (f, &l) in w.id_test.features().iter().zip(w.id_test.labels()) {
            assert!((dot(f, &protos[l]) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bundle_roundtrip_exact() {
        let w = generate_world(&small()).unwrap();
        for set in [&w.id_train, &w.id_test, &w.ood_test] {
            assert_eq!(
                &LabeledFeatureSet::from_bytes(&set.to_bytes()).unwrap(),
                set
            );
        }
        assert_eq!(
            ClassVocabulary::from_bytes(&w.vocab.to_bytes()).unwrap(),
            w.vocab
        );
    }

    #[test]
    fn bundle_rejects_short_vector() {
        let set = LabeledFeatureSet::new(
            Split::IdTest,
            vec!["a".into()],
            vec![vec![1.0, 0.0]],
            vec![0],
        )
        .unwrap();
        let mut bytes = set.to_bytes();
        let at = bytes.len() - 8;
        bytes[at..at + 4].copy_from_slice(&0.9f32.to_le_bytes());
        let err = LabeledFeatureSet::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("norm out of tolerance"), "{err}");
        assert!(err.to_string().contains(&format!("byte {at}")), "{err}");
    }

    #[test]
    fn vocab_rejects_duplicates_and_empty() {
        let e = VocabEntry {
            name: "x".into(),
            token: vec![1.0],
            is_id: true,
        };
        assert!(ClassVocabulary::new(vec![e.clone(), e.clone()]).is_err());
        assert!(ClassVocabulary::new(vec![]).is_err());
        let mut w = Writer::default();
        w.header(b"NEGV");
        w.u32(1);
        w.u32(2);
        for _ in 0..2 {
            w.string("x");
            w.u8(1);
            w.f32_slice(&[1.0]);
        }
        let err = ClassVocabulary::from_bytes(&w.buf).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let mut w = Writer::default();
        w.header(b"NEGV");
        w.u32(1);
        w.u32(0);
        assert!(ClassVocabulary::from_bytes(&w.buf).is_err());
    }

    #[test]
    fn split_labels_disjoint() {
        let w = generate_world(&small()).unwrap();
        let id: HashSet<_> = w.id_test.label_names().iter().collect();
        assert!(w.ood_test.label_names().iter().all(|n| !id.contains(n)));
    }
}

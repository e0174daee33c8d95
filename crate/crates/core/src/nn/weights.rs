//! Model parameters in one flat buffer with a named layout.
//!
//! Storing every tensor contiguously makes the optimizer, the
//! finite-difference oracle, freezing, and checkpoint io uniform: they all
//! walk the same flat array. Forward code resolves tensors through
//! [`ParamIds`], which is built once per configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::math::{sc, Scalar};
use super::ModelConfig;

/// Parameter group, in flat-buffer order: encoder, decoder, classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub group: Group,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: LnIds,
    pub wqkv: usize,
    pub bqkv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2: LnIds,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Indices into the layout for every tensor the forward passes touch.
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub patch_w: usize,
    pub patch_b: usize,
    pub enc_pos: usize,
    pub enc_blocks: Vec<BlockIds>,
    pub enc_norm: LnIds,
    pub dec_pos: usize,
    pub dec_blocks: Vec<BlockIds>,
    pub dec_norm: LnIds,
    pub dec_head_w: usize,
    pub dec_head_b: usize,
    pub cls_pos: usize,
    pub cls_token: usize,
    pub cls_in_w: usize,
    pub cls_in_b: usize,
    pub cls_blocks: Vec<BlockIds>,
    pub cls_norm: LnIds,
    pub cls_head_w: usize,
    pub cls_head_b: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub ids: ParamIds,
    pub total: usize,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    offset: usize,
    group: Group,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name,
            offset: self.offset,
            rows,
            cols,
            group: self.group,
        });
        self.offset += rows * cols;
        idx
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.push(format!("{prefix}.g"), 1, d),
            b: self.push(format!("{prefix}.b"), 1, d),
        }
    }

    fn block(&mut self, prefix: &str, d: usize) -> BlockIds {
        BlockIds {
            ln1: self.ln(&format!("{prefix}.ln1"), d),
            wqkv: self.push(format!("{prefix}.attn.wqkv"), d, 3 * d),
            bqkv: self.push(format!("{prefix}.attn.bqkv"), 1, 3 * d),
            wo: self.push(format!("{prefix}.attn.wo"), d, d),
            bo: self.push(format!("{prefix}.attn.bo"), 1, d),
            ln2: self.ln(&format!("{prefix}.ln2"), d),
            w1: self.push(format!("{prefix}.mlp.w1"), d, 4 * d),
            b1: self.push(format!("{prefix}.mlp.b1"), 1, 4 * d),
            w2: self.push(format!("{prefix}.mlp.w2"), 4 * d, d),
            b2: self.push(format!("{prefix}.mlp.b2"), 1, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.embed_dim;
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            offset: 0,
            group: Group::Encoder,
        };

        let patch_w = b.push("enc.patch.w".to_string(), cfg.patch_samples, d);
        let patch_b = b.push("enc.patch.b".to_string(), 1, d);
        let enc_pos = b.push("enc.pos".to_string(), cfg.max_tokens, d);
        let enc_blocks = (0..cfg.n_enc_blocks)
            .map(|i| b.block(&format!("enc.{i}"), d))
            .collect();
        let enc_norm = b.ln("enc.norm", d);

        b.group = Group::Decoder;
        let dec_pos = b.push("dec.pos".to_string(), cfg.max_tokens, d);
        let dec_blocks = (0..cfg.n_dec_blocks)
            .map(|i| b.block(&format!("dec.{i}"), d))
            .collect();
        let dec_norm = b.ln("dec.norm", d);
        let dec_head_w = b.push("dec.head.w".to_string(), d, cfg.spec_bins);
        let dec_head_b = b.push("dec.head.b".to_string(), 1, cfg.spec_bins);

        b.group = Group::Classifier;
        let cls_pos = b.push("cls.pos".to_string(), cfg.max_tokens, d);
        let cls_token = b.push("cls.token".to_string(), 1, 2 * d);
        let cls_in_w = b.push("cls.in.w".to_string(), 2 * d, d);
        let cls_in_b = b.push("cls.in.b".to_string(), 1, d);
        let cls_blocks = (0..cfg.n_cls_layers)
            .map(|i| b.block(&format!("cls.{i}"), d))
            .collect();
        let cls_norm = b.ln("cls.norm", d);
        let cls_head_w = b.push("cls.head.w".to_string(), d, 1);
        let cls_head_b = b.push("cls.head.b".to_string(), 1, 1);

        Layout {
            total: b.offset,
            ids: ParamIds {
                patch_w,
                patch_b,
                enc_pos,
                enc_blocks,
                enc_norm,
                dec_pos,
                dec_blocks,
                dec_norm,
                dec_head_w,
                dec_head_b,
                cls_pos,
                cls_token,
                cls_in_w,
                cls_in_b,
                cls_blocks,
                cls_norm,
                cls_head_w,
                cls_head_b,
            },
            entries: b.entries,
        }
    }

    /// Flat data range covered by one parameter group. Groups are laid out
    /// contiguously, so the range is exact.
    pub fn group_range(&self, group: Group) -> std::ops::Range<usize> {
        let mut start = self.total;
        let mut end = 0;
        for e in &self.entries {
            if e.group == group {
                start = start.min(e.offset);
                end = end.max(e.offset + e.len());
            }
        }
        start..end
    }
}

/// All model parameters. The flat `data` buffer follows `layout`.
#[derive(Debug, Clone)]
pub struct ModelWeights<E> {
    pub cfg: ModelConfig,
    pub data: Vec<E>,
    layout: Layout,
}

impl<E: PartialEq> PartialEq for ModelWeights<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.data == other.data
    }
}

impl<E: Scalar> ModelWeights<E> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = Layout::new(cfg);
        ModelWeights {
            cfg: *cfg,
            data: vec![E::ZERO; layout.total],
            layout,
        }
    }

    /// ViT-style initialization: truncated normal (std 0.02, clipped at two
    /// standard deviations) for weights, positions, and the class token;
    /// zeros for biases and the binary head; ones for layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn trunc(rng: &mut ChaCha8Rng) -> f64 {
            loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    return z * 0.02;
                }
            }
        }
        let ids = w.layout.ids.clone();
        let fill_normal = |w: &mut Self, idx: usize, rng: &mut ChaCha8Rng| {
            for v in w.p_mut(idx) {
                *v = sc(trunc(rng));
            }
        };
        let fill_ones = |w: &mut Self, idx: usize| {
            for v in w.p_mut(idx) {
                *v = E::ONE;
            }
        };
        fill_normal(&mut w, ids.patch_w, &mut rng);
        fill_normal(&mut w, ids.enc_pos, &mut rng);
        fill_normal(&mut w, ids.dec_pos, &mut rng);
        fill_normal(&mut w, ids.cls_pos, &mut rng);
        fill_normal(&mut w, ids.cls_token, &mut rng);
        fill_normal(&mut w, ids.cls_in_w, &mut rng);
        fill_normal(&mut w, ids.dec_head_w, &mut rng);
        for blocks in [&ids.enc_blocks, &ids.dec_blocks, &ids.cls_blocks] {
            for blk in blocks.iter() {
                fill_normal(&mut w, blk.wqkv, &mut rng);
                fill_normal(&mut w, blk.wo, &mut rng);
                fill_normal(&mut w, blk.w1, &mut rng);
                fill_normal(&mut w, blk.w2, &mut rng);
                fill_ones(&mut w, blk.ln1.g);
                fill_ones(&mut w, blk.ln2.g);
            }
        }
        fill_ones(&mut w, ids.enc_norm.g);
        fill_ones(&mut w, ids.dec_norm.g);
        fill_ones(&mut w, ids.cls_norm.g);
        w
    }

    /// Overwrites every parameter with normal draws of the given std.
    /// Gradient checks use this so no path is hidden behind a zero weight.
    pub fn randomize_all(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sc(z * std);
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn ids(&self) -> &ParamIds {
        &self.layout.ids
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.layout.entries[idx]
    }

    /// Tensor `idx` as a flat slice (row-major `rows x cols`).
    pub fn p(&self, idx: usize) -> &[E] {
        let e = &self.layout.entries[idx];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn p_mut(&mut self, idx: usize) -> &mut [E] {
        let e = &self.layout.entries[idx];
        let (o, l) = (e.offset, e.len());
        &mut self.data[o..o + l]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts every parameter, preserving layout. Used to derive the f32
    /// runtime weights from an f64 reference initialization.
    pub fn cast<F: Scalar>(&self) -> ModelWeights<F> {
        ModelWeights {
            cfg: self.cfg,
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Gradient slice helper mirroring [`ModelWeights::p`] on a flat gradient
/// buffer.
pub fn grad<'g, E: Scalar>(grads: &'g mut [E], w: &ModelWeights<E>, idx: usize) -> &'g mut [E] {
    let e = w.entry(idx);
    &mut grads[e.offset..e.offset + e.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_grouped() {
        let cfg = ModelConfig::tiny();
        let layout = Layout::new(&cfg);
        let mut expect = 0;
        for e in &layout.entries {
            assert_eq!(e.offset, expect, "{} not contiguous", e.name);
            expect += e.len();
        }
        assert_eq!(expect, layout.total);
        let enc = layout.group_range(Group::Encoder);
        let dec = layout.group_range(Group::Decoder);
        let cls = layout.group_range(Group::Classifier);
        assert_eq!(enc.start, 0);
        assert_eq!(enc.end, dec.start);
        assert_eq!(dec.end, cls.start);
        assert_eq!(cls.end, layout.total);
        let names: std::collections::HashSet<&str> =
            layout.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), layout.entries.len());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::tiny();
        let a = ModelWeights::<f32>::init(&cfg, 7);
        let b = ModelWeights::<f32>::init(&cfg, 7);
        assert_eq!(a, b);
        assert!(a.all_finite());
        let ids = a.ids().clone();
        assert!(a.p(ids.enc_norm.g).iter().all(|&g| g == 1.0));
        assert!(a.p(ids.cls_head_w).iter().all(|&g| g == 0.0));
        assert!(a.p(ids.patch_w).iter().any(|&g| g != 0.0));
        let c = ModelWeights::<f32>::init(&cfg, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn f64_init_casts_to_the_same_f32_values() {
        let cfg = ModelConfig::tiny();
        let w64 = ModelWeights::<f64>::init(&cfg, 3);
        let w32 = w64.cast::<f32>();
        let direct = ModelWeights::<f32>::init(&cfg, 3);
        for (a, b) in w32.data.iter().zip(&direct.data) {
            assert!((a - b).abs() <= f32::EPSILON * a.abs().max(1.0));
        }
    }
}

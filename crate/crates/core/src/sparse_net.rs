//! The sparse refinement network: a small 3-D convolutional encoder/decoder
//! with one spectral self-attention block and a Top-K channel bottleneck.
//!
//! Layout for `levels = 2` and `base_channels = C`:
//!
//! ```text
//! input [1, h, w, d]
//!   enc.0  conv 3×3×3, 1 → C,  stride 1        (skip)
//!   enc.1  conv 3×3×3, C → 2C, stride (2,2,1)
//!   attn   pre-norm spectral attention on [2C, h/2, w/2, d]
//!   topk   channel selection at every position
//!   dec.0  transposed conv 2×2×3, 2C → C, stride (2,2,1), + skip
//!   out    conv 1×1×1, C → 1 (zero-initialized)
//! ```
//!
//! Strides only act on the two spatial axes, so any band count works.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kept_channels, ConvGeometry, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseNetConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub attention_heads: usize,
    pub topk_ratio_init: f64,
    /// When `false` the Top-K bottleneck is skipped entirely.
    pub topk_enabled: bool,
}

impl Default for SparseNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            levels: 2,
            attention_heads: 1,
            topk_ratio_init: 0.5,
            topk_enabled: true,
        }
    }
}

impl SparseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.levels < 1 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.attention_heads != 1 {
            return Err(Error::Config("only single-head attention is supported".into()));
        }
        let r = self.topk_ratio_init;
        if !(r > 1.0 / self.base_channels as f64 && r <= 1.0) {
            return Err(Error::Config(format!(
                "topk_ratio_init must lie in (1/{}, 1], got {r}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels at the bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Required divisor of the two spatial extents.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Logit whose sigmoid is `ratio`; a ratio of one maps to a logit large
/// enough that the sigmoid rounds to exactly 1.
pub fn ratio_to_logit(ratio: f64) -> f64 {
    if ratio >= 1.0 {
        40.0
    } else {
        (ratio / (1.0 - ratio)).ln()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter handles of one sparse network. The values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SparseNet {
    pub config: SparseNetConfig,
    encoders: Vec<ConvIds>,
    decoders: Vec<ConvIds>,
    out: ConvIds,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    topk_logit: ParamId,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct SparseOutput {
    /// Single-channel output with the input's `(n1, n2, n3)` shape.
    pub output: Var,
    /// Bottleneck features after attention, before selection.
    pub bottleneck: Var,
    /// Bottleneck features after selection (same as `bottleneck` when disabled).
    pub selected: Var,
    /// Attention weights `[h·w, d, d]`; rows sum to one.
    pub attention: Var,
    /// Current Top-K ratio.
    pub ratio: Var,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (3.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

impl SparseNet {
    /// Registers freshly initialized weights under `prefix` in `store`.
    pub fn init(
        config: SparseNetConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut encoders = Vec::new();
        for l in 0..config.levels {
            let cin = if l == 0 { 1 } else { config.channels(l - 1) };
            let cout = config.channels(l);
            let w = uniform(rng, &[cout, cin, 3, 3, 3], cin * 27);
            encoders.push(ConvIds {
                weight: store.add(format!("{prefix}.enc.{l}.weight"), w),
                bias: store.add(format!("{prefix}.enc.{l}.bias"), ArrayD::zeros(IxDyn(&[cout]))),
            });
        }
        let c = config.bottleneck_channels();
        let norm_gamma = store.add(format!("{prefix}.attn.norm.gamma"), ArrayD::ones(IxDyn(&[c])));
        let norm_beta = store.add(format!("{prefix}.attn.norm.beta"), ArrayD::zeros(IxDyn(&[c])));
        let wq = store.add(format!("{prefix}.attn.wq"), uniform(rng, &[c, c], c));
        let wk = store.add(format!("{prefix}.attn.wk"), uniform(rng, &[c, c], c));
        let wv = store.add(format!("{prefix}.attn.wv"), uniform(rng, &[c, c], c));
        let topk_logit = store.add(
            format!("{prefix}.topk.logit"),
            ArrayD::from_elem(IxDyn(&[]), ratio_to_logit(config.topk_ratio_init)),
        );
        let mut decoders = Vec::new();
        for l in (0..config.levels - 1).rev() {
            let cin = config.channels(l + 1);
            let cout = config.channels(l);
            let w = uniform(rng, &[cin, cout, 2, 2, 3], cin * 12);
            decoders.push(ConvIds {
                weight: store.add(format!("{prefix}.dec.{l}.weight"), w),
                bias: store.add(format!("{prefix}.dec.{l}.bias"), ArrayD::zeros(IxDyn(&[cout]))),
            });
        }
        let c0 = config.base_channels;
        let out = ConvIds {
            weight: store.add(format!("{prefix}.out.weight"), ArrayD::zeros(IxDyn(&[1, c0, 1, 1, 1]))),
            bias: store.add(format!("{prefix}.out.bias"), ArrayD::zeros(IxDyn(&[1]))),
        };
        Ok(Self {
            config,
            encoders,
            decoders,
            out,
            norm_gamma,
            norm_beta,
            wq,
            wk,
            wv,
            topk_logit,
        })
    }

    /// Every parameter handle owned by this network.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in self.encoders.iter().chain(&self.decoders).chain([&self.out]) {
            ids.push(c.weight);
            ids.push(c.bias);
        }
        ids.extend([
            self.norm_gamma,
            self.norm_beta,
            self.wq,
            self.wk,
            self.wv,
            self.topk_logit,
        ]);
        ids.sort();
        ids
    }

    pub fn topk_logit(&self) -> ParamId {
        self.topk_logit
    }

    pub fn output_weight(&self) -> ParamId {
        self.out.weight
    }

    pub fn output_bias(&self) -> ParamId {
        self.out.bias
    }

    /// Current Top-K ratio `sigmoid(logit)`.
    pub fn ratio(&self, store: &ParamStore) -> f64 {
        let logit = *store.get(self.topk_logit).value.iter().next().expect("scalar");
        crate::autodiff::sigmoid(logit)
    }

    /// Runs the network on a three-dimensional node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<SparseOutput> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!("sparse net input {shape:?}")));
        }
        let div = self.config.spatial_divisor();
        if !shape[0].is_multiple_of(div) || !shape[1].is_multiple_of(div) {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {}x{} not divisible by {div}",
                shape[0], shape[1]
            )));
        }
        let mut h = tape.reshape(input, &[1, shape[0], shape[1], shape[2]])?;
        let mut skips = Vec::new();
        for (l, ids) in self.encoders.iter().enumerate() {
            let geom = if l == 0 {
                ConvGeometry::same()
            } else {
                ConvGeometry {
                    stride: [2, 2, 1],
                    padding: [1, 1, 1],
                }
            };
            let w = tape.param(store, ids.weight);
            let b = tape.param(store, ids.bias);
            h = tape.conv3d(h, w, b, geom)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        skips.pop();

        let (attended, attention) = self.attention_block(tape, store, h)?;
        let logit = tape.param(store, self.topk_logit);
        let ratio = tape.sigmoid(logit);
        let selected = if self.config.topk_enabled {
            tape.topk_channels(attended, ratio)?
        } else {
            attended
        };

        let mut h = selected;
        let up = ConvGeometry {
            stride: [2, 2, 1],
            padding: [0, 0, 1],
        };
        for ids in &self.decoders {
            let w = tape.param(store, ids.weight);
            let b = tape.param(store, ids.bias);
            h = tape.conv_transpose3d(h, w, b, up)?;
            let skip = skips.pop().expect("one skip per decoder");
            h = tape.add(h, skip)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let w = tape.param(store, self.out.weight);
        let b = tape.param(store, self.out.bias);
        let out = tape.conv3d(h, w, b, ConvGeometry::pointwise())?;
        let output = tape.reshape(out, &shape)?;
        Ok(SparseOutput {
            output,
            bottleneck: attended,
            selected,
            attention,
            ratio,
        })
    }

    /// Pre-norm single-head self-attention over the spectral axis of
    /// `features: [C, h, w, d]`. Tokens are the `d` spectral positions at each
    /// spatial location; the embedding is the channel vector.
    ///
    /// Returns the updated features and the attention weights.
    pub fn attention_block(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<(Var, Var)> {
        let s = tape.shape(features).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("attention input {s:?}")));
        }
        let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
        let tokens = tape.permute(features, &[1, 2, 3, 0])?;
        let tokens = tape.reshape(tokens, &[h * w, d, c])?;
        let gamma = tape.param(store, self.norm_gamma);
        let beta = tape.param(store, self.norm_beta);
        let normed = tape.layer_norm(tokens, gamma, beta, LAYER_NORM_EPS)?;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(normed, wq)?;
        let k = tape.matmul(normed, wk)?;
        let v = tape.matmul(normed, wv)?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attention = tape.softmax(scores, 2)?;
        let mixed = tape.matmul(attention, v)?;
        let out = tape.add(tokens, mixed)?;
        let out = tape.reshape(out, &[h, w, d, c])?;
        let out = tape.permute(out, &[3, 0, 1, 2])?;
        Ok((out, attention))
    }

    /// Number of channels the bottleneck keeps at the current ratio.
    pub fn kept_channels(&self, store: &ParamStore) -> Result<usize> {
        let c = self.config.bottleneck_channels();
        if self.config.topk_enabled {
            kept_channels(self.ratio(store), c)
        } else {
            Ok(c)
        }
    }
}

/// Seeded generator used for weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

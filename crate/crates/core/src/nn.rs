//! Parameter storage and the layers shared by the detector networks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    /// Replaces every tensor by the same-named one in `other`, which must
    /// have identical names and shapes in the same order.
    pub fn load_from(&mut self, other: &[NamedTensor]) -> crate::Result<()> {
        if other.len() != self.entries.len() {
            return Err(crate::Error::LengthMismatch {
                expected: self.entries.len(),
                found: other.len(),
            });
        }
        for (mine, theirs) in self.entries.iter().zip(other) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Gradient accumulator laid out like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor, scale: f64) {
        self.grads[id.0].add_scaled(grad, scale);
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Anything that owns a parameter store.
pub trait Model {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Fully connected layer on `[m, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        Self::with_gain(store, rng, name, inp, out, 1.0)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        gain: f64,
    ) -> Self {
        let bound = gain * math::sqrt(3.0 / inp as f64);
        let w = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[inp, out], bound),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// 2-D convolution on `[c, h, w]` maps.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = gain * math::sqrt(6.0 / fan_in as f64);
        let w = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[out_ch, fan_in], bound),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            w,
            b,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, self.kernel, self.stride, self.pad);
        tape.add_channel(y, b)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { g, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.g);
        let b = tape.param(store, self.b);
        let n = tape.layer_norm_rows(x, 1e-5);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }
}

/// `silu(x + conv(silu(conv(x))))`, shape preserving.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        ch: usize,
    ) -> Self {
        let a = Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1, 1.0);
        let b = Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1, 0.5);
        Self { a, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.a.forward(tape, store, x);
        let h = tape.silu(h);
        let h = self.b.forward(tape, store, h);
        let y = tape.add(x, h);
        tape.silu(y)
    }
}

/// Small residual convnet trunk: a strided stem, then `(ResBlock, strided
/// conv)` stages, ending in global average pooling. Produces a `[1, width]`
/// feature row.
#[derive(Clone, Debug)]
pub struct ResNetTrunk {
    stem: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
    out_ch: usize,
}

impl ResNetTrunk {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        widths: &[usize],
    ) -> Self {
        Self::with_stem_stride(store, rng, name, in_ch, widths, 1)
    }

    pub fn with_stem_stride<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        widths: &[usize],
        stem_stride: usize,
    ) -> Self {
        assert!(!widths.is_empty() && stem_stride >= 1);
        let stem = Conv2d::new(
            store,
            rng,
            &format!("{name}.stem"),
            in_ch,
            widths[0],
            3,
            stem_stride,
            1,
            1.0,
        );
        let mut stages = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let block = ResBlock::new(store, rng, &format!("{name}.stage{i}.res"), pair[0]);
            let down = Conv2d::new(
                store,
                rng,
                &format!("{name}.stage{i}.down"),
                pair[0],
                pair[1],
                3,
                2,
                1,
                1.0,
            );
            stages.push((block, down));
        }
        Self {
            stem,
            stages,
            out_ch: *widths.last().unwrap(),
        }
    }

    pub fn width(&self) -> usize {
        self.out_ch
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.stem.forward(tape, store, x);
        let mut h = tape.silu(h);
        for (block, down) in &self.stages {
            h = block.forward(tape, store, h);
            h = down.forward(tape, store, h);
            h = tape.silu(h);
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2]]);
        let t = tape.transpose(flat);
        let pooled = tape.mean_rows(t);
        tape.reshape(pooled, &[1, self.out_ch])
    }
}

/// Pre-norm transformer encoder block with multi-head self-attention.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    width: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must divide into heads");
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), width, 3 * width),
            proj: Linear::with_gain(store, rng, &format!("{name}.proj"), width, width, 0.5),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, 2 * width),
            fc2: Linear::with_gain(store, rng, &format!("{name}.fc2"), 2 * width, width, 0.5),
            heads,
            width,
        }
    }

    /// `x` is `[tokens, width]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let head_dim = self.width / self.heads;
        let scale = 1.0 / math::sqrt(head_dim as f64);
        let h = self.norm1.forward(tape, store, x);
        let qkv = self.qkv.forward(tape, store, h);
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let q = tape.slice_cols(qkv, hd * head_dim, head_dim);
            let k = tape.slice_cols(qkv, self.width + hd * head_dim, head_dim);
            let v = tape.slice_cols(qkv, 2 * self.width + hd * head_dim, head_dim);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, v));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            concat_cols(tape, &heads)
        };
        let a = self.proj.forward(tape, store, merged);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h);
        let h = tape.silu(h);
        let h = self.fc2.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Column-wise concatenation of `[m, n_i]` blocks.
pub fn concat_cols(tape: &mut Tape, parts: &[Var]) -> Var {
    let rows: Vec<Var> = parts.iter().map(|&p| tape.transpose(p)).collect();
    let stacked = tape.concat(&rows);
    tape.transpose(stacked)
}

/// Attention pooling: `softmax(tokens * w) ^T tokens` with a learned scoring
/// vector, `[m, d] -> [1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPool {
    score: Linear,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Self {
        Self {
            score: Linear::with_gain(store, rng, &format!("{name}.score"), dim, 1, 0.1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Var {
        let s = self.score.forward(tape, store, tokens);
        let s = tape.transpose(s);
        let a = tape.softmax_rows(s);
        tape.matmul(a, tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_round_trips_through_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::new();
        Linear::new(&mut a, &mut rng, "fc", 4, 2);
        let mut b = ParamStore::new();
        Linear::new(&mut b, &mut rng, "fc", 4, 2);
        assert_ne!(a, b);
        b.load_from(a.entries()).unwrap();
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        Linear::new(&mut c, &mut rng, "other", 4, 2);
        assert!(c.load_from(a.entries()).is_err());
    }

    #[test]
    fn attention_pool_of_identical_tokens_is_the_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, &mut rng, "p", 3);
        let mut tape = Tape::new();
        let row = [0.3, -1.0, 2.0];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let x = tape.constant(Tensor::from_vec(&[4, 3], data));
        let y = pool.forward(&mut tape, &store, x);
        for (a, b) in tape.value(y).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trunk_outputs_requested_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let trunk = ResNetTrunk::new(&mut store, &mut rng, "t", 3, &[4, 6]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 8, 10], 0.5));
        let y = trunk.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[1, 6]);
    }
}

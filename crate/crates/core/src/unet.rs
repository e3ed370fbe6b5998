//! The residual-predicting UNet.
//!
//! Nine 3x3 convolutions: three encoder stages each followed by a
//! fixed-pooling layer, two bottleneck convolutions, three decoder stages that
//! upsample bilinearly and concatenate the matching encoder activation, and a
//! sigmoid head. With base width `b` the channel plan is
//!
//! ```text
//! E1 3->b, E2 b->2b, E3 2b->4b, B1 4b->8b, B2 8b->8b,
//! D3 12b->4b, D2 6b->2b, D1 3b->b, head b->3
//! ```
//!
//! The head output is floored at [`DELTA_MIN`] and kept strictly below one so
//! that dividing by the residual stays finite.
//!
//! # Weights file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 8 | magic `ZSHDRW01` |
//! | 8 | 4 | format version (`1`) |
//! | 12 | 4 | base channels |
//! | 16 | 4 | pooling depth (`3`) |
//! | 20 | 4 | kernel size (`3`) |
//! | 24 | 4 | input channels (`3`) |
//! | 28 | 4 | output channels (`3`) |
//! | 32 | 4 | parameter tensor count |
//! | 36 | 8 | total scalar count |
//! | 44 | 1 | bytes per float (`8`) |
//! | 45 | 1 | Adam moments present (`0`/`1`) |
//! | 46 | 8 | FNV-1a 64 fingerprint of bytes 12..32 |
//! | 54 | .. | parameter values in architecture order |
//!
//! When moments are present, each parameter then contributes its step count
//! (`u64`) followed by its first and second moment tensors.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    bilinear_upsample2x, bilinear_upsample2x_backward, concat_channels, conv2d, conv2d_backward,
    pool2x2, relu, relu_backward, sigmoid_scalar, split_channels, PoolMode, Pooled,
};
use crate::optim::Parameter;
use crate::tensor::Tensor;

pub const DELTA_MIN: f64 = 1e-3;
/// Largest `f64` strictly below one.
pub const DELTA_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

pub const DEPTH: usize = 3;
pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
pub const CONV_COUNT: usize = 9;
/// Spatial dimensions must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;

const MAGIC: &[u8; 8] = b"ZSHDRW01";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 54;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base_channels: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels > u32::MAX as usize / 16 {
            return Err(Error::InvalidConfig(format!(
                "base channels must be >= 1, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// `(in, out)` channels of the nine convolutions in forward order.
    pub fn conv_channels(&self) -> [(usize, usize); CONV_COUNT] {
        let b = self.base_channels;
        [
            (3, b),
            (b, 2 * b),
            (2 * b, 4 * b),
            (4 * b, 8 * b),
            (8 * b, 8 * b),
            (8 * b + 4 * b, 4 * b),
            (4 * b + 2 * b, 2 * b),
            (2 * b + b, b),
            (b, 3),
        ]
    }

    fn header_fields(&self) -> [u32; 5] {
        [self.base_channels as u32, DEPTH as u32, KERNEL as u32, 3, 3]
    }

    fn header_bytes(&self) -> Vec<u8> {
        self.header_fields()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// FNV-1a 64 over the serialized config fields.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&self.header_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Conv index of each layer, for readability in the forward pass.
#[derive(Debug, Clone, Copy)]
enum Conv {
    E1 = 0,
    E2,
    E3,
    B1,
    B2,
    D3,
    D2,
    D1,
    Head,
}

/// All trainable state of the network.
///
/// Parameters are ordered as `(weight, bias)` for each convolution in forward
/// order, followed by the three fixed-pooling mix logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    fingerprint: u64,
    pub params: Vec<Parameter>,
}

/// Initializes conv weights uniformly in `±1/sqrt(fan_in)`, with zero
/// biases and zero mix logits.
///
/// He-normal weights are about 2.4x larger per layer; with nine layers and no
/// normalization the first Adam step at lr 1e-3 then saturates the sigmoid
/// head.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(2 * CONV_COUNT + DEPTH);
    for (cin, cout) in config.conv_channels() {
        let bound = 1.0 / ((cin * KERNEL * KERNEL) as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("bound is finite and positive");
        let shape = [cout, cin, KERNEL, KERNEL];
        let w = Tensor::from_fn(shape, |_| uniform.sample(&mut rng));
        params.push(Parameter::new(w));
        params.push(Parameter::new(Tensor::zeros([1, 1, 1, cout])));
    }
    for _ in 0..DEPTH {
        params.push(Parameter::new(Tensor::zeros([1, 1, 1, 1])));
    }
    Ok(ModelWeights {
        config,
        fingerprint: config.fingerprint(),
        params,
    })
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    a1: Tensor,
    a2: Tensor,
    a3: Tensor,
    pools: Vec<FixedPoolCache>,
    a4: Tensor,
    a5: Tensor,
    k3: Tensor,
    a6: Tensor,
    k2: Tensor,
    a7: Tensor,
    k1: Tensor,
    a8: Tensor,
    sig: Tensor,
    /// Network output in `[DELTA_MIN, DELTA_MAX]`.
    pub output: Tensor,
}

impl ForwardCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

#[derive(Debug, Clone)]
struct FixedPoolCache {
    max: Pooled,
    avg: Pooled,
    mix: f64,
    output: Tensor,
}

impl ModelWeights {
    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn conv_weight(&self, c: Conv) -> &Tensor {
        &self.params[2 * c as usize].value
    }

    fn conv_bias(&self, c: Conv) -> &[f64] {
        self.params[2 * c as usize + 1].value.data()
    }

    /// Mixing weight of pooling layer `level` (0-based).
    pub fn pool_mix(&self, level: usize) -> f64 {
        sigmoid_scalar(self.params[2 * CONV_COUNT + level].value.data()[0])
    }

    pub fn set_pool_logit(&mut self, level: usize, logit: f64) {
        self.params[2 * CONV_COUNT + level].value.fill(logit);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn conv(&self, c: Conv, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.conv_weight(c), self.conv_bias(c), PADDING)
    }

    fn check_input(input: &Tensor) -> Result<()> {
        let [_, c, h, w] = input.shape();
        if c != 3 {
            return Err(Error::Shape(format!(
                "network input needs 3 channels, got {c}"
            )));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "network input {h}x{w} is not a multiple of {SIZE_MULTIPLE}; pad it first"
            )));
        }
        Ok(())
    }

    fn fixed_pool(&self, level: usize, x: &Tensor) -> Result<FixedPoolCache> {
        let max = pool2x2(x, PoolMode::Max)?;
        let avg = pool2x2(x, PoolMode::Avg)?;
        let mix = self.pool_mix(level);
        let output = max
            .output
            .zip_map(&avg.output, |m, a| mix * m + (1.0 - mix) * a)?;
        Ok(FixedPoolCache {
            max,
            avg,
            mix,
            output,
        })
    }

    /// Predicted residual for a `[N, 3, H, W]` input with `H`, `W` multiples of 8.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Self::check_input(input)?;
        let a1 = relu(&self.conv(Conv::E1, input)?);
        let p1 = self.fixed_pool(0, &a1)?.output;
        let a2 = relu(&self.conv(Conv::E2, &p1)?);
        drop(p1);
        let p2 = self.fixed_pool(1, &a2)?.output;
        let a3 = relu(&self.conv(Conv::E3, &p2)?);
        drop(p2);
        let p3 = self.fixed_pool(2, &a3)?.output;
        let a4 = relu(&self.conv(Conv::B1, &p3)?);
        let a5 = relu(&self.conv(Conv::B2, &a4)?);
        drop(a4);
        let k3 = concat_channels(&bilinear_upsample2x(&a5), &a3)?;
        drop((a5, a3));
        let a6 = relu(&self.conv(Conv::D3, &k3)?);
        drop(k3);
        let k2 = concat_channels(&bilinear_upsample2x(&a6), &a2)?;
        drop((a6, a2));
        let a7 = relu(&self.conv(Conv::D2, &k2)?);
        drop(k2);
        let k1 = concat_channels(&bilinear_upsample2x(&a7), &a1)?;
        drop((a7, a1));
        let a8 = relu(&self.conv(Conv::D1, &k1)?);
        drop(k1);
        let logits = self.conv(Conv::Head, &a8)?;
        Ok(logits.map(|z| sigmoid_scalar(z).clamp(DELTA_MIN, DELTA_MAX)))
    }

    /// Forward pass that keeps every activation needed by [`Self::backward`].
    pub fn forward_train(&self, input: &Tensor) -> Result<ForwardCache> {
        Self::check_input(input)?;
        let a1 = relu(&self.conv(Conv::E1, input)?);
        let fp1 = self.fixed_pool(0, &a1)?;
        let a2 = relu(&self.conv(Conv::E2, &fp1.output)?);
        let fp2 = self.fixed_pool(1, &a2)?;
        let a3 = relu(&self.conv(Conv::E3, &fp2.output)?);
        let fp3 = self.fixed_pool(2, &a3)?;
        let a4 = relu(&self.conv(Conv::B1, &fp3.output)?);
        let a5 = relu(&self.conv(Conv::B2, &a4)?);
        let k3 = concat_channels(&bilinear_upsample2x(&a5), &a3)?;
        let a6 = relu(&self.conv(Conv::D3, &k3)?);
        let k2 = concat_channels(&bilinear_upsample2x(&a6), &a2)?;
        let a7 = relu(&self.conv(Conv::D2, &k2)?);
        let k1 = concat_channels(&bilinear_upsample2x(&a7), &a1)?;
        let a8 = relu(&self.conv(Conv::D1, &k1)?);
        let sig = self.conv(Conv::Head, &a8)?.map(sigmoid_scalar);
        let output = sig.map(|s| s.clamp(DELTA_MIN, DELTA_MAX));
        Ok(ForwardCache {
            input: input.clone(),
            a1,
            a2,
            a3,
            pools: vec![fp1, fp2, fp3],
            a4,
            a5,
            k3,
            a6,
            k2,
            a7,
            k1,
            a8,
            sig,
            output,
        })
    }

    fn conv_backward(&mut self, c: Conv, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let grads = conv2d_backward(input, self.conv_weight(c), PADDING, grad_out)?;
        let i = 2 * c as usize;
        self.params[i].accumulate(&grads.weight)?;
        for (g, d) in self.params[i + 1]
            .grad
            .data_mut()
            .iter_mut()
            .zip(&grads.bias)
        {
            *g += d;
        }
        Ok(grads.input)
    }

    fn fixed_pool_backward(
        &mut self,
        level: usize,
        cache: &FixedPoolCache,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let m = cache.mix;
        let mut grad_in = cache.max.backward(&grad_out.scale(m))?;
        grad_in.add_assign(&cache.avg.backward(&grad_out.scale(1.0 - m))?)?;
        let dmix: f64 = grad_out
            .data()
            .iter()
            .zip(cache.max.output.data().iter().zip(cache.avg.output.data()))
            .map(|(g, (mx, av))| g * (mx - av))
            .sum();
        self.params[2 * CONV_COUNT + level].grad.data_mut()[0] += dmix * m * (1.0 - m);
        Ok(grad_in)
    }

    /// Accumulates parameter gradients given `d loss / d output`.
    ///
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Tensor> {
        cache.output.expect_same_shape(grad_output)?;
        // Clamped outputs pass no gradient.
        let g_logits = Tensor::new(
            grad_output.shape(),
            grad_output
                .data()
                .iter()
                .zip(cache.sig.data())
                .map(|(&g, &s)| {
                    if (DELTA_MIN..=DELTA_MAX).contains(&s) {
                        g * s * (1.0 - s)
                    } else {
                        0.0
                    }
                })
                .collect(),
        )?;
        let g_a8 = self.conv_backward(Conv::Head, &cache.a8, &g_logits)?;

        let g_c8 = relu_backward(&cache.a8, &g_a8)?;
        let g_k1 = self.conv_backward(Conv::D1, &cache.k1, &g_c8)?;
        let (g_u1, mut g_a1) = split_channels(&g_k1, cache.a7.channels())?;
        let g_a7 = bilinear_upsample2x_backward(cache.a7.shape(), &g_u1)?;

        let g_c7 = relu_backward(&cache.a7, &g_a7)?;
        let g_k2 = self.conv_backward(Conv::D2, &cache.k2, &g_c7)?;
        let (g_u2, mut g_a2) = split_channels(&g_k2, cache.a6.channels())?;
        let g_a6 = bilinear_upsample2x_backward(cache.a6.shape(), &g_u2)?;

        let g_c6 = relu_backward(&cache.a6, &g_a6)?;
        let g_k3 = self.conv_backward(Conv::D3, &cache.k3, &g_c6)?;
        let (g_u3, mut g_a3) = split_channels(&g_k3, cache.a5.channels())?;
        let g_a5 = bilinear_upsample2x_backward(cache.a5.shape(), &g_u3)?;

        let g_c5 = relu_backward(&cache.a5, &g_a5)?;
        let g_a4 = self.conv_backward(Conv::B2, &cache.a4, &g_c5)?;
        let g_c4 = relu_backward(&cache.a4, &g_a4)?;
        let g_p3 = self.conv_backward(Conv::B1, &cache.pools[2].output, &g_c4)?;
        g_a3.add_assign(&self.fixed_pool_backward(2, &cache.pools[2], &g_p3)?)?;

        let g_c3 = relu_backward(&cache.a3, &g_a3)?;
        let g_p2 = self.conv_backward(Conv::E3, &cache.pools[1].output, &g_c3)?;
        g_a2.add_assign(&self.fixed_pool_backward(1, &cache.pools[1], &g_p2)?)?;

        let g_c2 = relu_backward(&cache.a2, &g_a2)?;
        let g_p1 = self.conv_backward(Conv::E2, &cache.pools[0].output, &g_c2)?;
        g_a1.add_assign(&self.fixed_pool_backward(0, &cache.pools[0], &g_p1)?)?;

        let g_c1 = relu_backward(&cache.a1, &g_a1)?;
        self.conv_backward(Conv::E1, &cache.input, &g_c1)
    }

    pub fn to_bytes(&self, include_moments: bool) -> Vec<u8> {
        let scalars = self.parameter_count();
        let mut out =
            Vec::with_capacity(HEADER_LEN + scalars * 8 * if include_moments { 3 } else { 1 });
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.header_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&(scalars as u64).to_le_bytes());
        out.push(8);
        out.push(u8::from(include_moments));
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        for p in &self.params {
            p.value
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if include_moments {
            for p in &self.params {
                out.extend_from_slice(&p.step_count.to_le_bytes());
                p.m.data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                p.v.data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(origin, 0, "bad magic, not a weights file"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "weights format version {version}"
            )));
        }
        let fields_at = r.pos;
        let fields = [
            r.u32("base channels")?,
            r.u32("depth")?,
            r.u32("kernel")?,
            r.u32("input channels")?,
            r.u32("output channels")?,
        ];
        let config = ModelConfig {
            base_channels: fields[0] as usize,
        };
        let tensor_count = r.u32("parameter count")? as usize;
        let scalar_count = r.u64("scalar count")?;
        let precision = r.take(1, "precision")?[0];
        let moments = r.take(1, "moments flag")?[0];
        let found = r.u64("fingerprint")?;
        let expected = fnv1a64(&bytes[fields_at..fields_at + 20]);
        if found != expected {
            return Err(Error::FingerprintMismatch { expected, found });
        }
        if fields != config.header_fields() {
            return Err(Error::Unsupported(format!(
                "architecture {fields:?}; only depth {DEPTH}, kernel {KERNEL}, RGB in/out is supported"
            )));
        }
        if precision != 8 {
            return Err(Error::Unsupported(format!(
                "{precision}-byte floats in weights file"
            )));
        }
        if moments > 1 {
            return Err(Error::format(
                origin,
                45,
                format!("bad moments flag {moments}"),
            ));
        }
        let mut weights = init_model(config, 0)?;
        let actual_scalars = weights.parameter_count() as u64;
        if tensor_count != weights.params.len() || scalar_count != actual_scalars {
            return Err(Error::format(
                origin,
                32,
                format!(
                    "header declares {tensor_count} tensors / {scalar_count} values, architecture has {} / {actual_scalars}",
                    weights.params.len()
                ),
            ));
        }
        for p in &mut weights.params {
            r.f64s(p.value.data_mut())?;
        }
        if moments == 1 {
            for p in &mut weights.params {
                p.step_count = r.u64("step count")?;
                r.f64s(p.m.data_mut())?;
                r.f64s(p.v.data_mut())?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                origin,
                r.pos as u64,
                "trailing bytes after weights",
            ));
        }
        Ok(weights)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.origin,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(out.len() * 8, "parameter values")?;
        for (o, chunk) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn save_weights(weights: &ModelWeights, path: &Path, include_moments: bool) -> Result<()> {
    fs::write(path, weights.to_bytes(include_moments)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelWeights {
        init_model(ModelConfig { base_channels: 2 }, 11).unwrap()
    }

    fn random_input(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn nine_convolutions_with_documented_widths() {
        let w = init_model(ModelConfig::default(), 0).unwrap();
        assert_eq!(w.params.len(), 2 * CONV_COUNT + DEPTH);
        let shapes: Vec<[usize; 4]> = (0..CONV_COUNT).map(|i| w.params[2 * i].shape()).collect();
        assert_eq!(
            shapes,
            vec![
                [32, 3, 3, 3],
                [64, 32, 3, 3],
                [128, 64, 3, 3],
                [256, 128, 3, 3],
                [256, 256, 3, 3],
                [128, 384, 3, 3],
                [64, 192, 3, 3],
                [32, 96, 3, 3],
                [3, 32, 3, 3],
            ]
        );
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(ModelConfig { base_channels: 4 }, 3).unwrap();
        let b = init_model(ModelConfig { base_channels: 4 }, 3).unwrap();
        let c = init_model(ModelConfig { base_channels: 4 }, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for level in 0..DEPTH {
            assert_eq!(a.pool_mix(level), 0.5);
        }
        assert!(a.params[1].value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_bounds_and_spread() {
        // The B2 layer of base width 8 is exactly 64 -> 64, fan-in 576.
        let w = init_model(ModelConfig { base_channels: 8 }, 2).unwrap();
        let b2 = &w.params[2 * Conv::B2 as usize].value;
        assert_eq!(b2.shape(), [64, 64, 3, 3]);
        let bound = 1.0 / 24.0;
        assert!(b2.data().iter().all(|v| v.abs() <= bound));
        // Uniform on [-b, b] has std b / sqrt(3).
        let m = b2.mean();
        let sd = (b2.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / b2.len() as f64).sqrt();
        let expected = bound / 3f64.sqrt();
        assert!(
            (sd - expected).abs() / expected < 0.02,
            "empirical std {sd}"
        );
        assert!(m.abs() < 0.01 * bound);
    }

    #[test]
    fn output_range_and_shape() {
        let w = small();
        for &(h, wd) in &[(8, 8), (16, 24), (64, 64)] {
            let x = random_input(h, wd, 5);
            let y = w.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.min() >= DELTA_MIN && y.max() < 1.0);
        }
    }

    #[test]
    fn output_clamps_extreme_logits() {
        let mut w = small();
        let head_bias = 2 * Conv::Head as usize + 1;
        w.params[head_bias].value.fill(100.0);
        let y = w.forward(&random_input(8, 8, 1)).unwrap();
        assert!(y.max() < 1.0);
        w.params[head_bias].value.fill(-100.0);
        let y = w.forward(&random_input(8, 8, 1)).unwrap();
        assert!(y.min() >= DELTA_MIN);
    }

    #[test]
    fn rejects_unpadded_input() {
        let w = small();
        assert!(w.forward(&random_input(12, 16, 0)).is_err());
        assert!(w.forward_train(&random_input(16, 12, 0)).is_err());
    }

    #[test]
    fn train_and_inference_forward_agree() {
        let w = small();
        let x = random_input(16, 16, 9);
        assert_eq!(w.forward(&x).unwrap(), w.forward_train(&x).unwrap().output);
        assert_eq!(w.forward(&x).unwrap(), w.forward(&x).unwrap());
    }

    #[test]
    fn fixed_pool_extremes() {
        let mut w = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn([1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let max = pool2x2(&x, PoolMode::Max).unwrap().output;
        let avg = pool2x2(&x, PoolMode::Avg).unwrap().output;
        w.set_pool_logit(0, 50.0);
        let out = w.fixed_pool(0, &x).unwrap().output;
        for (a, b) in out.data().iter().zip(max.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        w.set_pool_logit(0, -50.0);
        let out = w.fixed_pool(0, &x).unwrap().output;
        for (a, b) in out.data().iter().zip(avg.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bytes_round_trip() {
        let w = small();
        let back = ModelWeights::from_bytes(&w.to_bytes(false), Path::new("mem")).unwrap();
        assert_eq!(w, back);

        let mut trained = w.clone();
        trained.params[0].m.fill(0.25);
        trained.params[3].step_count = 7;
        let back = ModelWeights::from_bytes(&trained.to_bytes(true), Path::new("mem")).unwrap();
        assert_eq!(trained, back);
    }

    #[test]
    fn header_layout() {
        let w = small();
        let bytes = w.to_bytes(false);
        assert_eq!(&bytes[0..8], b"ZSHDRW01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 21);
        assert_eq!(bytes[44], 8);
        assert_eq!(bytes[45], 0);
        assert_eq!(
            u64::from_le_bytes(bytes[46..54].try_into().unwrap()),
            fnv1a64(&bytes[12..32])
        );
        assert_eq!(bytes.len(), HEADER_LEN + 8 * w.parameter_count());
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn detects_corruption() {
        let w = small();
        let mut bytes = w.to_bytes(false);
        bytes[50] ^= 0x40;
        match ModelWeights::from_bytes(&bytes, Path::new("mem")) {
            Err(Error::FingerprintMismatch { expected, found }) => assert_ne!(expected, found),
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
        let bytes = w.to_bytes(false);
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(ModelWeights::from_bytes(&long, Path::new("mem")).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(ModelWeights::from_bytes(&magic, Path::new("mem")).is_err());
    }
}

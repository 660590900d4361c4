//! Dual-head encoder–decoder segmentation network.
//!
//! Layer list for `depth = d`, `base = b`, stage widths `c_i = b·2^i`:
//!
//! | layer        | kernel | in channels                 | out channels          |
//! |--------------|--------|-----------------------------|-----------------------|
//! | `enc{i}`     | 3×3    | `in_channels` or `c_{i-1}`  | `c_i`                 |
//! | `bottleneck` | 3×3    | `c_{d-1}`                   | `c_{d-1}`             |
//! | `dec{i}`     | 3×3    | previous out + `c_i` (skip) | `c_{i-1}` (`c_0` at 0)|
//! | `head_o`     | 1×1    | `c_0`                       | `num_classes`         |
//! | `head_v`     | 1×1    | `c_0`                       | `num_classes`         |
//!
//! Encoder stages are conv → ReLU → 2×2 max-pool; decoder stages are nearest
//! upsample → skip concat → conv → ReLU (→ dropout in MC-dropout mode). Decoder
//! stages run from `d-1` down to `0`. The variance head is softplus-activated.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BUDASEG1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Only used in MC-dropout mode.
    pub dropout_rate: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, num_classes: 5, base_channels: 16, depth: 3, dropout_rate: 0.3 }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return bad(format!("model depth must be >= 1, got {}", self.depth));
        }
        if self.base_channels < 4 {
            return bad(format!("base_channels must be >= 4, got {}", self.base_channels));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels < 1 {
            return bad("in_channels must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Spatial dims must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// `(name, out, in, kernel)` for every conv layer in parameter order.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut layers = Vec::new();
        let mut prev = self.in_channels;
        for i in 0..self.depth {
            layers.push((format!("enc{i}"), self.width(i), prev, 3));
            prev = self.width(i);
        }
        layers.push(("bottleneck".into(), prev, prev, 3));
        for i in (0..self.depth).rev() {
            let out = self.width(i.saturating_sub(1));
            layers.push((format!("dec{i}"), out, prev + self.width(i), 3));
            prev = out;
        }
        layers.push(("head_o".into(), self.num_classes, prev, 1));
        layers.push(("head_v".into(), self.num_classes, prev, 1));
        layers
    }
}

/// The model's two heads: logits `o` and nonnegative standard deviations `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPair<V> {
    pub o: V,
    pub v: V,
}

pub enum ForwardMode<'a> {
    Standard,
    McDropout(&'a mut crate::Rng),
}

pub struct SegNet<T: Element = f32> {
    config: SegNetConfig,
    params: Vec<Parameter<T>>,
    forwards: AtomicU64,
}

impl<T: Element> Clone for SegNet<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl<T: Element> std::fmt::Debug for SegNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegNet").field("config", &self.config).field("parameters", &self.parameter_count()).finish()
    }
}

impl<T: Element> SegNet<T> {
    /// He-uniform weights, zero biases, drawn in layer order. The variance
    /// head starts at zero weight, so `V = softplus(0) = ln 2` everywhere
    /// until adaptation trains it; supervised pretraining never touches it.
    pub fn build<R: Rng + ?Sized>(config: SegNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, out, inp, k) in config.layers() {
            let fan_in = (inp * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weight = if name == "head_v" {
                Tensor::zeros([out, inp, k, k])
            } else {
                Tensor::from_fn([out, inp, k, k], |_| T::lit(rng.random_range(-bound..bound)))
            };
            params.push(Parameter::new(format!("{name}.weight"), weight));
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros([out])));
        }
        Ok(Self { config, params, forwards: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Network forward passes executed so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    /// Adds the gradients held by `g` for the bound parameters.
    pub fn accumulate_grads(&mut self, g: &mut Graph<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(grad) = g.take_grad(v) {
                p.accumulate(&grad);
            }
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::shape("forward", format!("expected [N,C,H,W], got {shape:?}")));
        };
        if *c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 || *h == 0 || *w == 0 {
            return Err(Error::shape("forward", format!("spatial dims {h}x{w} must be nonzero multiples of {m}")));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        x: Var,
        mut mode: ForwardMode<'_>,
    ) -> Result<OutputPair<Var>> {
        self.check_input(g.value(x).shape())?;
        if bound.len() != self.params.len() {
            return Err(Error::invalid("forward", "bound parameter list does not match the model"));
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let depth = self.config.depth;
        let mut layer = bound.chunks(2);
        let mut conv = |g: &mut Graph<T>, h: Var, pad: usize| -> Result<Var> {
            let wb = layer.next().expect("layer list matches parameters");
            g.conv2d(h, wb[0], wb[1], 1, pad)
        };

        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for _ in 0..depth {
            let a = conv(g, h, 1)?;
            let a = g.relu(a);
            skips.push(a);
            h = g.maxpool2d(a, 2)?;
        }
        let b = conv(g, h, 1)?;
        h = g.relu(b);
        for skip in skips.into_iter().rev() {
            let up = g.upsample_nearest(h, 2)?;
            let cat = g.concat_channels(up, skip)?;
            let a = conv(g, cat, 1)?;
            h = g.relu(a);
            if let ForwardMode::McDropout(rng) = &mut mode {
                h = g.dropout(h, self.config.dropout_rate, &mut **rng)?;
            }
        }
        let o = conv(g, h, 0)?;
        let raw_v = conv(g, h, 0)?;
        let v = g.softplus(raw_v);
        Ok(OutputPair { o, v })
    }

    /// Standard-mode inference without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<OutputPair<Tensor<T>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, ForwardMode::Standard)?;
        Ok(OutputPair { o: g.value(out.o).clone(), v: g.value(out.v).clone() })
    }

    pub fn cast<U: Element>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Parameter::new(p.name.clone(), p.value.cast())).collect(),
            forwards: AtomicU64::new(0),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: SegNetConfig,
    layers: Vec<CheckpointLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointLayer {
    name: String,
    shape: Vec<usize>,
}

impl SegNet<f32> {
    /// Checkpoint bytes: magic `BUDASEG1`, header length as u64 LE, the JSON
    /// header, then every parameter as little-endian f32 in header order.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            layers: self
                .params
                .iter()
                .map(|p| CheckpointLayer { name: p.name.clone(), shape: p.value.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing BUDASEG1 magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        header.config.validate()?;
        let expected = header.config.layers();
        if header.layers.len() != 2 * expected.len() {
            return Err(bad("layer list does not match the configured architecture"));
        }
        let mut offset = 16 + len;
        let mut params = Vec::with_capacity(header.layers.len());
        for (i, layer) in header.layers.iter().enumerate() {
            let (name, out, inp, k) = &expected[i / 2];
            let (want_name, want_shape) = if i % 2 == 0 {
                (format!("{name}.weight"), vec![*out, *inp, *k, *k])
            } else {
                (format!("{name}.bias"), vec![*out])
            };
            if layer.name != want_name || layer.shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: found {} {:?}, expected {want_name} {want_shape:?}",
                    layer.name, layer.shape
                )));
            }
            let numel: usize = layer.shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * numel).ok_or_else(|| bad("truncated parameter data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.push(Parameter::new(layer.name.clone(), Tensor::new(layer.shape.clone(), data)?));
            offset += 4 * numel;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Self { config: header.config, params, forwards: AtomicU64::new(0) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

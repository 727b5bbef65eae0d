//! Encoder, latent head and decoder of the convolutional autoencoder, plus
//! checkpoint persistence.
//!
//! Encoder: four `4×4 / s2 / p1` convolutions with LeakyReLU, a 1×1
//! bottleneck convolution (also LeakyReLU), then `z = W·GAP(z_map) + b`.
//! Decoder: one affine unprojection to `C×H/16×W/16`, three transposed
//! convolutions with LeakyReLU and a final transposed convolution with sigmoid.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use roicae_numerics::{Graph, ParamSet, Rng, Stream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::losses::LossWeights;
use crate::preprocess::{Canvas, RoiBox};

pub const DOWNSAMPLE: usize = 16;
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the four encoder stages.
    pub channels: [usize; 4],
    pub bottleneck: usize,
    pub latent: usize,
    pub leaky_slope: f64,
}

impl CaeConfig {
    pub fn scaled(canvas: Canvas) -> Self {
        Self {
            input_height: canvas.height,
            input_width: canvas.width,
            channels: [8, 16, 32, 64],
            bottleneck: 64,
            latent: 128,
            leaky_slope: 0.1,
        }
    }

    pub fn wide(canvas: Canvas) -> Self {
        Self {
            channels: [32, 64, 128, 256],
            bottleneck: 256,
            ..Self::scaled(canvas)
        }
    }

    pub fn validate(&self) -> Result<()> {
        Canvas::new(self.input_width, self.input_height)?;
        if self.latent < 8 {
            return Err(invalid("latent dimension must be at least 8"));
        }
        if self.channels.iter().any(|&c| c == 0) || self.bottleneck == 0 {
            return Err(invalid("channel widths must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / DOWNSAMPLE, self.input_width / DOWNSAMPLE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::P1 => "P1",
            Phase::P2 => "P2",
        })
    }
}

/// Parameter handles on one tape, in [`ParamSet`] order.
struct Bound<'a>(&'a [Var]);

impl Bound<'_> {
    fn enc(&self, i: usize) -> (Var, Var) {
        (self.0[2 * i], self.0[2 * i + 1])
    }
    fn bottleneck(&self) -> (Var, Var) {
        (self.0[8], self.0[9])
    }
    fn proj(&self) -> (Var, Var) {
        (self.0[10], self.0[11])
    }
    fn unproj(&self) -> (Var, Var) {
        (self.0[12], self.0[13])
    }
    fn dec(&self, i: usize) -> (Var, Var) {
        (self.0[14 + 2 * i], self.0[15 + 2 * i])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z_map: Var,
    pub z: Var,
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct Cae {
    pub config: CaeConfig,
    pub params: ParamSet,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

impl Cae {
    /// Uniform `±1/√fan_in` initialisation from the `Init` stream of `seed`.
    pub fn new(config: CaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        let mut push = |name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(format!("{name}.weight"), uniform_tensor(shape, bound, rng));
            params.push(format!("{name}.bias"), uniform_tensor(&[shape[if name.starts_with("dec") { 1 } else { 0 }]], bound, rng));
        };
        let c = config.channels;
        let mut cin = 1;
        for (i, &cout) in c.iter().enumerate() {
            push(&format!("enc{}", i + 1), &[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, &mut rng);
            cin = cout;
        }
        push("bottleneck", &[config.bottleneck, c[3], 1, 1], c[3], &mut rng);
        push("proj", &[config.latent, config.bottleneck], config.bottleneck, &mut rng);
        let (h, w) = config.grid();
        push("unproj", &[config.bottleneck * h * w, config.latent], config.latent, &mut rng);
        // transposed kernels are In×Out×k×k; each output sees In·(k/2)² taps
        let dec_channels = [config.bottleneck, c[2], c[1], c[0], 1];
        for i in 0..4 {
            let (ci, co) = (dec_channels[i], dec_channels[i + 1]);
            push(&format!("dec{}", i + 1), &[ci, co, KERNEL, KERNEL], ci * 4, &mut rng);
        }
        Ok(Self { config, params })
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        if trainable {
            self.params.register(g)
        } else {
            self.params.iter().map(|(_, _, t)| g.constant(t.clone())).collect()
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4("cae input")?;
        if c != 1 || h != self.config.input_height || w != self.config.input_width {
            return Err(invalid(format!(
                "input is {c}×{h}×{w}, model expects 1×{}×{}",
                self.config.input_height, self.config.input_width
            )));
        }
        Ok(n)
    }

    /// Returns `(z_map, z)` for an `N×1×H×W` input node.
    pub fn encode(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let p = Bound(p);
        let a = self.config.leaky_slope;
        let mut h = x;
        for i in 0..4 {
            let (k, b) = p.enc(i);
            let y = g.conv2d(h, k, b, 2, 1)?;
            h = g.leaky_relu(y, a)?;
        }
        let (k, b) = p.bottleneck();
        let y = g.conv2d(h, k, b, 1, 0)?;
        let z_map = g.leaky_relu(y, a)?;
        let pooled = g.global_avg_pool(z_map)?;
        let (w, b) = p.proj();
        let z = g.linear(pooled, w, b)?;
        Ok((z_map, z))
    }

    /// Maps an `N×latent` node to an `N×1×H×W` reconstruction.
    pub fn decode_var(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let p = Bound(p);
        let a = self.config.leaky_slope;
        let n = g.value(z).shape()[0];
        let (gh, gw) = self.config.grid();
        let (w, b) = p.unproj();
        let flat = g.linear(z, w, b)?;
        let mut h = g.reshape(flat, &[n, self.config.bottleneck, gh, gw])?;
        for i in 0..4 {
            let (k, b) = p.dec(i);
            let y = g.conv_transpose2d(h, k, b, 2, 1)?;
            h = if i < 3 { g.leaky_relu(y, a)? } else { g.sigmoid(y) };
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<ForwardVars> {
        let (z_map, z) = self.encode(g, p, x)?;
        let recon = self.decode_var(g, p, z)?;
        Ok(ForwardVars { z_map, z, recon })
    }

    /// Inference: `N×1×H×W → (N×C×h×w, N×latent)`.
    pub fn encode_latent(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (zm, z) = self.encode(&mut g, &p, xv)?;
        Ok((g.value(zm).clone(), g.value(z).clone()))
    }

    /// Inference: `N×latent → N×1×H×W` in `(0, 1)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, l) = z.dims2("decode")?;
        if l != self.config.latent {
            return Err(invalid(format!("latent has {l} entries, model expects {}", self.config.latent)));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let r = self.decode_var(&mut g, &p, zv)?;
        Ok(g.value(r).clone())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (_, z) = self.encode_latent(x)?;
        self.decode(&z)
    }
}

/// Mean of one sample's `C×h×w` feature map over the grid cells touched by
/// `roi` (floor/ceil coverage so thin boxes keep at least one cell).
pub fn roi_pool_features(z_map: &Tensor, sample: usize, roi: &RoiBox) -> Result<Vec<f64>> {
    let (n, c, h, w) = z_map.dims4("roi_pool_features")?;
    if sample >= n {
        return Err(invalid(format!("sample {sample} out of range for batch of {n}")));
    }
    let s = DOWNSAMPLE as f64;
    let span = |lo: f64, hi: f64, len: usize| {
        let a = ((lo / s).floor().max(0.0) as usize).min(len - 1);
        let b = ((hi / s).ceil() as usize).clamp(a + 1, len);
        (a, b)
    };
    let (x0, x1) = span(roi.x1, roi.x2, w);
    let (y0, y1) = span(roi.y1, roi.y2, h);
    let cells = ((x1 - x0) * (y1 - y0)) as f64;
    let base = sample * c * h * w;
    Ok((0..c)
        .map(|ch| {
            let plane = &z_map.data()[base + ch * h * w..base + (ch + 1) * h * w];
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += plane[y * w + x];
                }
            }
            acc / cells
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub weights: Option<LossWeights>,
    #[serde(default)]
    pub held_out: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Cae,
    pub phase: Phase,
    pub meta: CheckpointMeta,
}

pub const CHECKPOINT_FORMAT: &str = "roicae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamBlock {
    name: String,
    shape: Vec<usize>,
    /// Base64 of little-endian `f64`.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: CaeConfig,
    phase: Phase,
    meta: CheckpointMeta,
    params: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self
            .model
            .params
            .iter()
            .map(|(_, name, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                ParamBlock {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: B64.encode(bytes),
                }
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            phase: self.phase,
            meta: self.meta.clone(),
            params,
        };
        let text = serde_json::to_string(&file).expect("checkpoint serialises");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let corrupt = |detail: String| CoreError::Corrupt {
            path: path.to_path_buf(),
            detail,
        };
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unexpected format tag `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(CoreError::CheckpointMismatch(format!(
                "file version {} (supported: {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut model = Cae::new(file.config, 0)?;
        if file.params.len() != model.params.len() {
            return Err(CoreError::CheckpointMismatch(format!(
                "{} parameter blocks, config implies {}",
                file.params.len(),
                model.params.len()
            )));
        }
        for (id, block) in model.params.ids().into_iter().zip(file.params) {
            let expect = model.params.get(id).shape().to_vec();
            if block.name != model.params.name(id) || block.shape != expect {
                return Err(CoreError::CheckpointMismatch(format!(
                    "block `{}` {:?} does not match `{}` {:?}",
                    block.name,
                    block.shape,
                    model.params.name(id),
                    expect
                )));
            }
            let bytes = B64.decode(&block.data).map_err(|e| corrupt(format!("`{}`: {e}", block.name)))?;
            if bytes.len() != 8 * expect.iter().product::<usize>() {
                return Err(corrupt(format!("`{}`: payload has {} bytes", block.name, bytes.len())));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            model.params.set(id, Tensor::new(expect, data)?)?;
        }
        Ok(Self {
            model,
            phase: file.phase,
            meta: file.meta,
        })
    }

    /// Loads and rejects files whose architecture differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &CaeConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.model.config != expected {
            return Err(CoreError::CheckpointMismatch(format!(
                "file config {:?} differs from expected {:?}",
                ck.model.config, expected
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CaeConfig {
        CaeConfig {
            latent: 16,
            ..CaeConfig::scaled(Canvas::new(32, 32).unwrap())
        }
    }

    #[test]
    fn desk_shapes() {
        let m = Cae::new(CaeConfig::scaled(Canvas::DESK), 1000).unwrap();
        let x = Tensor::full(&[1, 1, 112, 160], 0.3);
        let (zm, z) = m.encode_latent(&x).unwrap();
        assert_eq!(zm.shape(), &[1, 64, 7, 10]);
        assert_eq!(z.shape(), &[1, 128]);
        let r = m.decode(&z).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert!(r.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_input_with_zero_biases_gives_projection_bias() {
        let mut m = Cae::new(small(), 3).unwrap();
        for id in m.params.ids() {
            if m.params.name(id).ends_with(".bias") && !m.params.name(id).starts_with("proj") {
                let shape = m.params.get(id).shape().to_vec();
                m.params.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let (_, z) = m.encode_latent(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        let b = m.params.get(m.params.find("proj.bias").unwrap());
        assert_eq!(z.data(), b.data());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = Cae::new(small(), 3).unwrap();
        assert!(m.encode_latent(&Tensor::zeros(&[1, 1, 32, 48])).is_err());
        assert!(m.decode(&Tensor::zeros(&[1, 15])).is_err());
    }

    #[test]
    fn roi_pooling() {
        let zm = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let full = RoiBox::full(Canvas::new(48, 32).unwrap());
        let pooled = roi_pool_features(&zm, 0, &full).unwrap();
        assert_eq!(pooled, vec![2.5, 8.5]);

        let mut one = Tensor::zeros(&[1, 1, 7, 10]);
        one.data_mut()[2 * 10 + 3] = 4.0;
        let cell = RoiBox::new(49.0, 33.0, 63.0, 47.0).unwrap();
        assert_eq!(roi_pool_features(&one, 0, &cell).unwrap(), vec![4.0]);

        // a box straddling a cell boundary covers both cells
        let straddle = RoiBox::new(60.0, 33.0, 70.0, 47.0).unwrap();
        assert_eq!(roi_pool_features(&one, 0, &straddle).unwrap(), vec![2.0]);
    }
}

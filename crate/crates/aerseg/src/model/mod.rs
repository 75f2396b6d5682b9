//! The segmentation network: a hierarchical transformer encoder with
//! overlapped patch merging, spatially reduced self-attention and a
//! depthwise-convolution FFN (no positional encodings anywhere), followed by
//! an all-MLP decoder. Four variants are provided; `Tiny` is a test-scale
//! miniature, B0/B3/B5 match the published parameter budgets.

mod checkpoint;

pub use checkpoint::{load_weights, read_weight_file, save_weights};

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::types::{PlaneImage, ScoreKind, ScoreMap};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Spatial downscale of each encoder stage relative to the input.
pub const STAGE_SCALES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    B0,
    B3,
    B5,
    Tiny,
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B0" => Ok(ModelVariant::B0),
            "B3" => Ok(ModelVariant::B3),
            "B5" => Ok(ModelVariant::B5),
            "TINY" => Ok(ModelVariant::Tiny),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub reduction_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path_rate: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.stage_heads[i] == 0 || self.stage_dims[i] % self.stage_heads[i] != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: dim {} not divisible by heads {}",
                    self.stage_dims[i], self.stage_heads[i]
                )));
            }
            if self.reduction_ratios[i] == 0 {
                return Err(Error::InvalidConfig(format!("stage {i}: zero reduction ratio")));
            }
            if self.stage_depths[i] == 0 {
                return Err(Error::InvalidConfig(format!("stage {i}: zero depth")));
            }
        }
        if self.num_classes == 0 || self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("zero-sized head configuration".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::InvalidConfig("drop_path_rate must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Constants for the named variant with `num_classes` output channels.
pub fn make_config(variant: ModelVariant, num_classes: usize) -> ModelConfig {
    let (stage_dims, stage_depths, stage_heads, decoder_dim) = match variant {
        ModelVariant::B0 => ([32, 64, 160, 256], [2, 2, 2, 2], [1, 2, 5, 8], 256),
        ModelVariant::B3 => ([64, 128, 320, 512], [3, 4, 18, 3], [1, 2, 5, 8], 768),
        ModelVariant::B5 => ([64, 128, 320, 512], [3, 6, 40, 3], [1, 2, 5, 8], 768),
        ModelVariant::Tiny => ([8, 16, 24, 32], [1, 1, 1, 1], [1, 2, 3, 4], 32),
    };
    ModelConfig {
        stage_dims,
        stage_depths,
        stage_heads,
        reduction_ratios: [8, 4, 2, 1],
        mlp_ratio: 4,
        decoder_dim,
        num_classes,
        drop_path_rate: 0.0,
    }
}

/// Named-tensor checkpoint container.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for WeightStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let prior = self.tensors.insert(name.clone(), tensor);
        assert!(prior.is_none(), "duplicate tensor name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Every tensor required by `cfg` present with the exact shape, nothing
    /// extra. The first offending tensor is named in the error.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = tensor_specs(cfg);
        for (name, shape) in &specs {
            match self.tensors.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let expected: std::collections::BTreeSet<&str> =
                specs.iter().map(|(n, _)| n.as_str()).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.contains(k.as_str()))
                .expect("length mismatch implies an extra name");
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }
}

/// Canonical (name, shape) enumeration of every learnable tensor.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| specs.push((name, shape));

    let mut cin = 3usize;
    for s in 0..4 {
        let c = cfg.stage_dims[s];
        let k = if s == 0 { 7 } else { 3 };
        let p = format!("enc.stage{s}");
        push(format!("{p}.patch.weight"), vec![c, cin * k * k]);
        push(format!("{p}.patch.bias"), vec![c]);
        push(format!("{p}.patch.norm.gamma"), vec![c]);
        push(format!("{p}.patch.norm.beta"), vec![c]);
        for b in 0..cfg.stage_depths[s] {
            let bp = format!("{p}.block{b}");
            push(format!("{bp}.norm1.gamma"), vec![c]);
            push(format!("{bp}.norm1.beta"), vec![c]);
            for proj in ["q", "k", "v", "proj"] {
                push(format!("{bp}.attn.{proj}.weight"), vec![c, c]);
                push(format!("{bp}.attn.{proj}.bias"), vec![c]);
            }
            let r = cfg.reduction_ratios[s];
            if r > 1 {
                push(format!("{bp}.attn.sr.weight"), vec![c, c * r * r]);
                push(format!("{bp}.attn.sr.bias"), vec![c]);
                push(format!("{bp}.attn.sr_norm.gamma"), vec![c]);
                push(format!("{bp}.attn.sr_norm.beta"), vec![c]);
            }
            push(format!("{bp}.norm2.gamma"), vec![c]);
            push(format!("{bp}.norm2.beta"), vec![c]);
            let hidden = c * cfg.mlp_ratio;
            push(format!("{bp}.ffn.fc1.weight"), vec![c, hidden]);
            push(format!("{bp}.ffn.fc1.bias"), vec![hidden]);
            push(format!("{bp}.ffn.dw.weight"), vec![hidden, 9]);
            push(format!("{bp}.ffn.dw.bias"), vec![hidden]);
            push(format!("{bp}.ffn.fc2.weight"), vec![hidden, c]);
            push(format!("{bp}.ffn.fc2.bias"), vec![c]);
        }
        push(format!("{p}.norm.gamma"), vec![c]);
        push(format!("{p}.norm.beta"), vec![c]);
        cin = c;
    }

    let d = cfg.decoder_dim;
    for s in 0..4 {
        push(format!("dec.proj{s}.weight"), vec![cfg.stage_dims[s], d]);
        push(format!("dec.proj{s}.bias"), vec![d]);
    }
    push("dec.fuse.weight".into(), vec![4 * d, d]);
    push("dec.fuse.bias".into(), vec![d]);
    push("dec.fuse_norm.gamma".into(), vec![d]);
    push("dec.fuse_norm.beta".into(), vec![d]);
    push("dec.classify.weight".into(), vec![d, cfg.num_classes]);
    push("dec.classify.bias".into(), vec![cfg.num_classes]);
    specs
}

/// Exact count of learnable scalars; independent of input resolution.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    tensor_specs(cfg).iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
}

/// Fresh weights: truncated normal (std 0.02, cut at two sigma) for
/// projection and convolution weights, zeros for biases and norm shifts,
/// ones for norm scales.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> WeightStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid stddev");
    let mut store = WeightStore::new();
    for (name, shape) in tensor_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                })
                .collect()
        };
        store.insert(name, Tensor::new(shape, data));
    }
    store
}

/// One encoder stage output as a plain raster.
#[derive(Clone, Debug)]
pub struct FeatureRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// The four multiscale encoder outputs at 1/4, 1/8, 1/16 and 1/32 of the
/// (padded) input resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: [FeatureRaster; 4],
}

/// Differentiable graph builder. Owns the tape and interns one leaf per
/// weight tensor so gradients can be collected by name after backward.
pub struct GraphBuilder<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s WeightStore<T>,
    vars: BTreeMap<String, Var>,
    /// Stochastic-depth decisions are drawn from here when set.
    droppath_rng: Option<ChaCha8Rng>,
    drop_path_rate: f32,
}

impl<'s, T: Real> GraphBuilder<'s, T> {
    pub fn new(store: &'s WeightStore<T>) -> Self {
        GraphBuilder {
            tape: Tape::new(),
            store,
            vars: BTreeMap::new(),
            droppath_rng: None,
            drop_path_rate: 0.0,
        }
    }

    /// Enable stochastic depth for a training pass.
    pub fn with_droppath(mut self, rate: f32, seed: u64) -> Self {
        self.drop_path_rate = rate;
        self.droppath_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn weight(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let v = self.tape.leaf(t.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn weight_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn eps(&self) -> T {
        T::from_f64(LAYER_NORM_EPS)
    }

    fn linear_named(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.weight(&format!("{prefix}.weight"))?;
        let b = self.weight(&format!("{prefix}.bias"))?;
        Ok(self.tape.linear(x, w, b))
    }

    fn layer_norm_named(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.weight(&format!("{prefix}.gamma"))?;
        let b = self.weight(&format!("{prefix}.beta"))?;
        let eps = self.eps();
        Ok(self.tape.layer_norm(x, g, b, eps))
    }

    /// Strided overlapping convolution plus channel layer norm. Stage 0 uses
    /// kernel 7 / stride 4 / pad 3; later stages kernel 3 / stride 2 / pad 1.
    pub fn overlapped_patch_merge(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        stage: usize,
        prefix: &str,
    ) -> Result<(Var, usize, usize)> {
        let (kernel, stride, pad) = if stage == 0 { (7, 4, 3) } else { (3, 2, 1) };
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::Dimension {
                axis: if h + 2 * pad < kernel { 'y' } else { 'x' },
                message: format!("raster {w}x{h} smaller than merge kernel {kernel}"),
            });
        }
        let cin = self.tape.value(x).shape()[1];
        let wname = format!("{prefix}.weight");
        let cout = self
            .store
            .get(&wname)
            .ok_or_else(|| Error::MissingTensor(wname.clone()))?
            .shape()[0];
        let spec = Conv2dSpec { in_h: h, in_w: w, cin, cout, kernel, stride, pad };
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let wv = self.weight(&wname)?;
        let bv = self.weight(&format!("{prefix}.bias"))?;
        let y = self.tape.conv2d(x, wv, bv, spec);
        let y = self.layer_norm_named(y, &format!("{prefix}.norm"))?;
        Ok((y, oh, ow))
    }

    /// Multi-head self-attention whose keys and values come from a
    /// kernel-R / stride-R learned spatial reduction (layer-normalized).
    /// R = 1 is plain multi-head self-attention.
    pub fn efficient_self_attention(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        heads: usize,
        r: usize,
        prefix: &str,
    ) -> Result<Var> {
        if r > h || r > w {
            return Err(Error::Dimension {
                axis: if r > w { 'x' } else { 'y' },
                message: format!("reduction ratio {r} exceeds raster {w}x{h}"),
            });
        }
        let c = self.tape.value(x).shape()[1];
        let q = self.linear_named(x, &format!("{prefix}.q"))?;
        let kv_src = if r > 1 {
            let spec = Conv2dSpec { in_h: h, in_w: w, cin: c, cout: c, kernel: r, stride: r, pad: 0 };
            let wv = self.weight(&format!("{prefix}.sr.weight"))?;
            let bv = self.weight(&format!("{prefix}.sr.bias"))?;
            let red = self.tape.conv2d(x, wv, bv, spec);
            self.layer_norm_named(red, &format!("{prefix}.sr_norm"))?
        } else {
            x
        };
        let k = self.linear_named(kv_src, &format!("{prefix}.k"))?;
        let v = self.linear_named(kv_src, &format!("{prefix}.v"))?;
        let scale = T::from_f64(1.0 / ((c / heads) as f64).sqrt());
        let scores = self.tape.attn_scores(q, k, heads, scale);
        let attn = self.tape.softmax_rows(scores);
        let ctx = self.tape.attn_apply(attn, v, heads);
        self.linear_named(ctx, &format!("{prefix}.proj"))
    }

    /// Expand, 3x3 depthwise convolution over the raster layout, GELU,
    /// project back. The caller adds the residual.
    pub fn mix_ffn(&mut self, x: Var, h: usize, w: usize, prefix: &str) -> Result<Var> {
        let e = self.linear_named(x, &format!("{prefix}.fc1"))?;
        let wv = self.weight(&format!("{prefix}.dw.weight"))?;
        let bv = self.weight(&format!("{prefix}.dw.bias"))?;
        let d = self.tape.dwconv3x3(e, wv, bv, h, w);
        let g = self.tape.gelu(d);
        self.linear_named(g, &format!("{prefix}.fc2"))
    }

    fn residual(&mut self, x: Var, branch: Var, drop_p: f32) -> Var {
        let branch = if drop_p > 0.0 {
            let rng = self.droppath_rng.as_mut().expect("droppath rng set when rate > 0");
            if rand::Rng::gen::<f32>(rng) < drop_p {
                self.tape.scale(branch, T::zero())
            } else {
                self.tape.scale(branch, T::from_f64(1.0 / (1.0 - drop_p as f64)))
            }
        } else {
            branch
        };
        self.tape.add(x, branch)
    }

    /// Full encoder + decoder. `input` is a standardized `[h*w, 3]` raster
    /// whose sides must be multiples of 32. Returns the logits node
    /// (`[h*w, num_classes]`) and the four stage rasters.
    pub fn forward(
        &mut self,
        cfg: &ModelConfig,
        input: Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<(Var, [(Var, usize, usize); 4])> {
        assert_eq!(input.shape(), [h * w, 3], "input raster shape");
        assert!(h % 32 == 0 && w % 32 == 0, "input sides must be multiples of 32");
        let total_blocks: usize = cfg.stage_depths.iter().sum();
        let mut block_index = 0usize;
        let mut x = self.tape.leaf(input);
        let (mut ch, mut cw) = (h, w);
        let mut stages: Vec<(Var, usize, usize)> = Vec::with_capacity(4);
        for s in 0..4 {
            let (y, oh, ow) =
                self.overlapped_patch_merge(x, ch, cw, s, &format!("enc.stage{s}.patch"))?;
            x = y;
            ch = oh;
            cw = ow;
            for b in 0..cfg.stage_depths[s] {
                let bp = format!("enc.stage{s}.block{b}");
                // stochastic depth rate ramps linearly over block depth
                let drop_p = if total_blocks > 1 {
                    cfg.drop_path_rate * block_index as f32 / (total_blocks - 1) as f32
                } else {
                    0.0
                };
                block_index += 1;
                let n1 = self.layer_norm_named(x, &format!("{bp}.norm1"))?;
                let a = self.efficient_self_attention(
                    n1,
                    ch,
                    cw,
                    cfg.stage_heads[s],
                    cfg.reduction_ratios[s],
                    &format!("{bp}.attn"),
                )?;
                x = self.residual(x, a, drop_p);
                let n2 = self.layer_norm_named(x, &format!("{bp}.norm2"))?;
                let f = self.mix_ffn(n2, ch, cw, &format!("{bp}.ffn"))?;
                x = self.residual(x, f, drop_p);
            }
            x = self.layer_norm_named(x, &format!("enc.stage{s}.norm"))?;
            stages.push((x, ch, cw));
        }

        let (h4, w4) = (stages[0].1, stages[0].2);
        let mut parts = Vec::with_capacity(4);
        for (s, &(feat, fh, fw)) in stages.iter().enumerate() {
            let p = self.linear_named(feat, &format!("dec.proj{s}"))?;
            let up = if (fh, fw) == (h4, w4) {
                p
            } else {
                self.tape.bilinear_resize(p, fh, fw, h4, w4)
            };
            parts.push(up);
        }
        let cat = self.tape.concat_cols(&parts);
        let fused = self.linear_named(cat, "dec.fuse")?;
        let fused = self.layer_norm_named(fused, "dec.fuse_norm")?;
        let fused = self.tape.gelu(fused);
        let logits4 = self.linear_named(fused, "dec.classify")?;
        let logits = self.tape.bilinear_resize(logits4, h4, w4, h, w);
        let stages: [(Var, usize, usize); 4] =
            [stages[0], stages[1], stages[2], stages[3]];
        Ok((logits, stages))
    }
}

/// Right/bottom reflection padding of a channel-innermost raster to the next
/// multiple of `mult` per side.
fn reflect_pad<T: Real>(
    data: &[T],
    h: usize,
    w: usize,
    c: usize,
    mult: usize,
) -> (Vec<T>, usize, usize) {
    let ph = h.div_ceil(mult) * mult;
    let pw = w.div_ceil(mult) * mult;
    if (ph, pw) == (h, w) {
        return (data.to_vec(), h, w);
    }
    let mirror = |i: usize, dim: usize| -> usize {
        if dim == 1 {
            return 0;
        }
        // bounce between the borders for pads wider than the image
        let period = 2 * (dim - 1);
        let m = i % period;
        if m < dim {
            m
        } else {
            period - m
        }
    };
    let mut out = vec![T::zero(); ph * pw * c];
    for y in 0..ph {
        let sy = mirror(y, h);
        for x in 0..pw {
            let sx = mirror(x, w);
            let src = (sy * w + sx) * c;
            let dst = (y * pw + x) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    (out, ph, pw)
}

/// Inference forward: standardized RGB in, dense logits out. Inputs whose
/// sides are not multiples of 32 are reflection-padded right/bottom and the
/// logits cropped back; the forward is a pure function of its arguments.
pub fn forward(img: &PlaneImage, cfg: &ModelConfig, store: &WeightStore<f32>) -> Result<ScoreMap> {
    Ok(forward_with_pyramid(img, cfg, store)?.0)
}

/// As [`forward`] but also returning the encoder's multiscale features
/// (at fractions of the padded resolution).
pub fn forward_with_pyramid(
    img: &PlaneImage,
    cfg: &ModelConfig,
    store: &WeightStore<f32>,
) -> Result<(ScoreMap, FeaturePyramid)> {
    if img.channels != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {}", img.channels)));
    }
    cfg.validate()?;
    store.validate(cfg)?;
    let (h, w) = (img.height, img.width);
    let (padded, ph, pw) = reflect_pad(img.data(), h, w, 3, 32);
    let input = Tensor::new(vec![ph * pw, 3], padded);
    let mut gb: GraphBuilder<f32> = GraphBuilder::new(store);
    let (logits_var, stage_vars) = gb.forward(cfg, input, ph, pw)?;

    let k = cfg.num_classes;
    let full = gb.tape.value(logits_var).data();
    let mut data = Vec::with_capacity(h * w * k);
    for y in 0..h {
        data.extend_from_slice(&full[y * pw * k..(y * pw + w) * k]);
    }
    let logits = ScoreMap::new(w, h, k, ScoreKind::Logits, data);

    let stages = stage_vars.map(|(var, sh, sw)| FeatureRaster {
        height: sh,
        width: sw,
        channels: gb.tape.value(var).shape()[1],
        data: gb.tape.value(var).data().to_vec(),
    });
    Ok((logits, FeaturePyramid { stages }))
}

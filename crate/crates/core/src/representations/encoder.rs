//! Forward pass of the wav2vec2/HuBERT family: a strided 1-D convolutional
//! feature encoder followed by a transformer context network. Every operation
//! is built from differentiable tensor primitives, and the weights are plain
//! (non-variable) tensors, so gradients reach the waveform but never the
//! model.

use candle_core::{DType, Tensor, D};

use super::checkpoint::{ArchConfig, FeatNorm, WeightStore};
use crate::{Error, Result};

struct Affine {
    weight: Tensor,
    bias: Tensor,
}

impl Affine {
    fn load(w: &WeightStore, name: &str, dtype: DType) -> Result<Self> {
        // Older fairseq-converted checkpoints call these gamma/beta.
        let weight = if w.contains(&format!("{name}.weight")) {
            w.get(&format!("{name}.weight"))?
        } else {
            w.get(&format!("{name}.gamma"))?
        };
        let bias = if w.contains(&format!("{name}.bias")) {
            w.get(&format!("{name}.bias"))?
        } else {
            w.get(&format!("{name}.beta"))?
        };
        Ok(Self { weight: weight.to_dtype(dtype)?, bias: bias.to_dtype(dtype)? })
    }

    /// Layer normalisation over the last dimension.
    fn layer_norm(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

struct Linear {
    /// Stored transposed, `in x out`.
    weight_t: Tensor,
    bias: Tensor,
}

impl Linear {
    fn load(w: &WeightStore, name: &str, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight_t: w.get(&format!("{name}.weight"))?.to_dtype(dtype)?.t()?.contiguous()?,
            bias: w.get(&format!("{name}.bias"))?.to_dtype(dtype)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight_t)?.broadcast_add(&self.bias)?)
    }
}

struct ConvLayer {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    norm: Option<(FeatNorm, Affine)>,
}

struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_norm: Affine,
    ff_in: Linear,
    ff_out: Linear,
    final_norm: Affine,
}

pub(crate) struct Wav2VecEncoder {
    arch: ArchConfig,
    conv: Vec<ConvLayer>,
    proj_norm: Option<Affine>,
    projection: Linear,
    pos_weight: Tensor,
    pos_bias: Tensor,
    enc_norm: Affine,
    layers: Vec<TransformerLayer>,
    parameters: Vec<(String, Tensor)>,
}

/// Grouped 1-D convolution as a concatenation of per-group convolutions,
/// which keeps it differentiable (the backend autograd handles groups = 1).
/// Padding is applied explicitly: the conv backward pass underflows when the
/// padding exceeds the output length.
fn grouped_conv1d(x: &Tensor, weight: &Tensor, padding: usize, groups: usize) -> Result<Tensor> {
    let x = x.pad_with_zeros(2, padding, padding)?;
    let in_per = x.dim(1)? / groups;
    let out_per = weight.dim(0)? / groups;
    let parts = (0..groups)
        .map(|g| {
            let xg = x.narrow(1, g * in_per, in_per)?;
            let wg = weight.narrow(0, g * out_per, out_per)?;
            xg.conv1d(&wg, 0, 1, 1, 1)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 1)?)
}

/// Numerically stable softmax over the last dimension.
fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

impl Wav2VecEncoder {
    pub(crate) fn new(arch: ArchConfig, w: &WeightStore, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let mut conv = Vec::new();
        let mut in_ch = 1;
        for (i, (&out, &stride)) in arch.conv_dim.iter().zip(&arch.conv_stride).enumerate() {
            let p = format!("feature_extractor.conv_layers.{i}");
            let weight = w.get(&format!("{p}.conv.weight"))?.to_dtype(dtype)?;
            let expected = [out, in_ch, arch.conv_kernel[i]];
            if weight.dims() != expected {
                return Err(Error::Checkpoint(format!("{p}.conv.weight has shape {:?}, expected {expected:?}", weight.dims())));
            }
            let bias = if arch.conv_bias {
                Some(w.get(&format!("{p}.conv.bias"))?.to_dtype(dtype)?)
            } else {
                None
            };
            let norm = match arch.feat_extract_norm {
                FeatNorm::Group if i == 0 => Some((FeatNorm::Group, Affine::load(w, &format!("{p}.layer_norm"), dtype)?)),
                FeatNorm::Layer => Some((FeatNorm::Layer, Affine::load(w, &format!("{p}.layer_norm"), dtype)?)),
                FeatNorm::Group => None,
            };
            conv.push(ConvLayer { weight, bias, stride, norm });
            in_ch = out;
        }
        let proj_norm = if arch.feat_proj_layer_norm {
            Some(Affine::load(w, "feature_projection.layer_norm", dtype)?)
        } else {
            None
        };
        let projection = Linear::load(w, "feature_projection.projection", dtype)?;
        let (pos_weight, pos_bias) = Self::positional_weight(w, dtype)?;
        let enc_norm = Affine::load(w, "encoder.layer_norm", dtype)?;
        let layers = (0..arch.num_hidden_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                Ok(TransformerLayer {
                    q: Linear::load(w, &format!("{p}.attention.q_proj"), dtype)?,
                    k: Linear::load(w, &format!("{p}.attention.k_proj"), dtype)?,
                    v: Linear::load(w, &format!("{p}.attention.v_proj"), dtype)?,
                    out: Linear::load(w, &format!("{p}.attention.out_proj"), dtype)?,
                    attn_norm: Affine::load(w, &format!("{p}.layer_norm"), dtype)?,
                    ff_in: Linear::load(w, &format!("{p}.feed_forward.intermediate_dense"), dtype)?,
                    ff_out: Linear::load(w, &format!("{p}.feed_forward.output_dense"), dtype)?,
                    final_norm: Affine::load(w, &format!("{p}.final_layer_norm"), dtype)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut enc = Self {
            arch,
            conv,
            proj_norm,
            projection,
            pos_weight,
            pos_bias,
            enc_norm,
            layers,
            parameters: Vec::new(),
        };
        enc.parameters = enc.collect_parameters();
        Ok(enc)
    }

    /// Resolves the weight-normalised positional convolution kernel
    /// (`g * v / ||v||`, norm over all but the kernel axis).
    fn positional_weight(w: &WeightStore, dtype: DType) -> Result<(Tensor, Tensor)> {
        let base = "encoder.pos_conv_embed.conv";
        let bias = w.get(&format!("{base}.bias"))?.to_dtype(dtype)?;
        if w.contains(&format!("{base}.weight")) {
            return Ok((w.get(&format!("{base}.weight"))?.to_dtype(dtype)?, bias));
        }
        let (g, v) = if w.contains(&format!("{base}.weight_g")) {
            (w.get(&format!("{base}.weight_g"))?, w.get(&format!("{base}.weight_v"))?)
        } else {
            (
                w.get(&format!("{base}.parametrizations.weight.original0"))?,
                w.get(&format!("{base}.parametrizations.weight.original1"))?,
            )
        };
        let v = v.to_dtype(DType::F64)?;
        let g = g.to_dtype(DType::F64)?;
        let norm = v.sqr()?.sum_keepdim(0)?.sum_keepdim(1)?.sqrt()?;
        let weight = v.broadcast_div(&norm)?.broadcast_mul(&g)?;
        Ok((weight.to_dtype(dtype)?, bias))
    }

    fn collect_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), c.weight.clone()));
            if let Some(b) = &c.bias {
                out.push((format!("conv.{i}.bias"), b.clone()));
            }
            if let Some((_, n)) = &c.norm {
                out.push((format!("conv.{i}.norm.weight"), n.weight.clone()));
                out.push((format!("conv.{i}.norm.bias"), n.bias.clone()));
            }
        }
        if let Some(n) = &self.proj_norm {
            out.push(("proj_norm.weight".into(), n.weight.clone()));
            out.push(("proj_norm.bias".into(), n.bias.clone()));
        }
        out.push(("projection.weight".into(), self.projection.weight_t.clone()));
        out.push(("projection.bias".into(), self.projection.bias.clone()));
        out.push(("pos.weight".into(), self.pos_weight.clone()));
        out.push(("pos.bias".into(), self.pos_bias.clone()));
        out.push(("enc_norm.weight".into(), self.enc_norm.weight.clone()));
        out.push(("enc_norm.bias".into(), self.enc_norm.bias.clone()));
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, lin) in [("q", &layer.q), ("k", &layer.k), ("v", &layer.v), ("out", &layer.out), ("ff_in", &layer.ff_in), ("ff_out", &layer.ff_out)] {
                out.push((format!("layers.{l}.{name}.weight"), lin.weight_t.clone()));
                out.push((format!("layers.{l}.{name}.bias"), lin.bias.clone()));
            }
            for (name, n) in [("attn_norm", &layer.attn_norm), ("final_norm", &layer.final_norm)] {
                out.push((format!("layers.{l}.{name}.weight"), n.weight.clone()));
                out.push((format!("layers.{l}.{name}.bias"), n.bias.clone()));
            }
        }
        out
    }

    pub(crate) fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub(crate) fn parameters(&self) -> &[(String, Tensor)] {
        &self.parameters
    }

    /// Convolutional feature encoder: 1-D waveform of `L` samples to a
    /// `T x C` feature matrix.
    pub(crate) fn feature_encoder(&self, wav: &Tensor) -> Result<Tensor> {
        let len = wav.dim(0)?;
        let mut x = wav.reshape((1, 1, len))?;
        for layer in &self.conv {
            x = x.conv1d(&layer.weight, 0, layer.stride, 1, 1)?;
            if let Some(b) = &layer.bias {
                x = x.broadcast_add(&b.reshape((1, (), 1))?)?;
            }
            x = match &layer.norm {
                // One group per channel: normalise each channel over time.
                Some((FeatNorm::Group, n)) => {
                    let mean = x.mean_keepdim(2)?;
                    let centred = x.broadcast_sub(&mean)?;
                    let var = centred.sqr()?.mean_keepdim(2)?;
                    let normed = centred.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
                    normed
                        .broadcast_mul(&n.weight.reshape((1, (), 1))?)?
                        .broadcast_add(&n.bias.reshape((1, (), 1))?)?
                }
                Some((FeatNorm::Layer, n)) => n.layer_norm(&x.transpose(1, 2)?, 1e-5)?.transpose(1, 2)?,
                None => x,
            };
            x = x.gelu_erf()?;
        }
        Ok(x.squeeze(0)?.t()?)
    }

    fn attention(&self, layer: &TransformerLayer, x: &Tensor) -> Result<Tensor> {
        let (t, h) = x.dims2()?;
        let heads = self.arch.num_attention_heads;
        let d = h / heads;
        let split = |y: Tensor| -> Result<Tensor> { Ok(y.reshape((t, heads, d))?.transpose(0, 1)?.contiguous()?) };
        let q = split((layer.q.forward(x)? * (d as f64).powf(-0.5))?)?;
        let k = split(layer.k.forward(x)?)?;
        let v = split(layer.v.forward(x)?)?;
        let scores = q.matmul(&k.t()?)?;
        let ctx = softmax_last(&scores)?.matmul(&v)?;
        layer.out.forward(&ctx.transpose(0, 1)?.reshape((t, h))?)
    }

    fn feed_forward(&self, layer: &TransformerLayer, x: &Tensor) -> Result<Tensor> {
        layer.ff_out.forward(&layer.ff_in.forward(x)?.gelu_erf()?)
    }

    /// Transformer context network applied to `T x C` encoder features,
    /// returning `T x hidden`.
    pub(crate) fn context(&self, features: &Tensor) -> Result<Tensor> {
        let eps = self.arch.layer_norm_eps;
        let mut h = match &self.proj_norm {
            Some(n) => n.layer_norm(features, eps)?,
            None => features.clone(),
        };
        h = self.projection.forward(&h)?;
        let t = h.dim(0)?;
        let k = self.arch.num_conv_pos_embeddings;
        let pos = grouped_conv1d(
            &h.t()?.unsqueeze(0)?.contiguous()?,
            &self.pos_weight,
            k / 2,
            self.arch.num_conv_pos_embedding_groups,
        )?
        .broadcast_add(&self.pos_bias.reshape((1, (), 1))?)?
        .narrow(2, 0, t)?
        .gelu_erf()?
        .squeeze(0)?
        .t()?;
        h = (h + pos)?;
        if self.arch.do_stable_layer_norm {
            for layer in &self.layers {
                let a = self.attention(layer, &layer.attn_norm.layer_norm(&h, eps)?)?;
                h = (h + a)?;
                let f = self.feed_forward(layer, &layer.final_norm.layer_norm(&h, eps)?)?;
                h = (h + f)?;
            }
            self.enc_norm.layer_norm(&h, eps)
        } else {
            h = self.enc_norm.layer_norm(&h, eps)?;
            for layer in &self.layers {
                let a = self.attention(layer, &h)?;
                h = layer.attn_norm.layer_norm(&(h + a)?, eps)?;
                let f = self.feed_forward(layer, &h)?;
                h = layer.final_norm.layer_norm(&(h + f)?, eps)?;
            }
            Ok(h)
        }
    }
}

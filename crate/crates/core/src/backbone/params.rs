use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub norm1_scale: Array1<T>,
    pub norm1_bias: Array1<T>,
    pub qkv_weight: Array2<T>,
    pub qkv_bias: Array1<T>,
    pub proj_weight: Array2<T>,
    pub proj_bias: Array1<T>,
    pub norm2_scale: Array1<T>,
    pub norm2_bias: Array1<T>,
    pub fc1_weight: Array2<T>,
    pub fc1_bias: Array1<T>,
    pub fc2_weight: Array2<T>,
    pub fc2_bias: Array1<T>,
}

/// Every learnable tensor of the backbone. Linear weights are stored
/// `in x out`. The same structure holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub patch_weight: Array2<T>,
    pub patch_bias: Array1<T>,
    pub cls_token: Array1<T>,
    pub pos_embed: Array2<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_scale: Array1<T>,
    pub norm_bias: Array1<T>,
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

macro_rules! named_tensors {
    ($self:expr, $view:ident, $($mutability:tt)*) => {{
        let Weights {
            patch_weight, patch_bias, cls_token, pos_embed, blocks,
            norm_scale, norm_bias, head_weight, head_bias,
        } = $self;
        let mut out = vec![
            ("patch_embed.weight".to_string(), patch_weight.$view().into_dyn()),
            ("patch_embed.bias".to_string(), patch_bias.$view().into_dyn()),
            ("cls_token".to_string(), cls_token.$view().into_dyn()),
            ("pos_embed".to_string(), pos_embed.$view().into_dyn()),
        ];
        for (i, b) in blocks.$($mutability)*().enumerate() {
            let BlockWeights {
                norm1_scale, norm1_bias, qkv_weight, qkv_bias, proj_weight, proj_bias,
                norm2_scale, norm2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias,
            } = b;
            let p = format!("blocks.{i}");
            out.push((format!("{p}.norm1.scale"), norm1_scale.$view().into_dyn()));
            out.push((format!("{p}.norm1.bias"), norm1_bias.$view().into_dyn()));
            out.push((format!("{p}.attn.qkv.weight"), qkv_weight.$view().into_dyn()));
            out.push((format!("{p}.attn.qkv.bias"), qkv_bias.$view().into_dyn()));
            out.push((format!("{p}.attn.proj.weight"), proj_weight.$view().into_dyn()));
            out.push((format!("{p}.attn.proj.bias"), proj_bias.$view().into_dyn()));
            out.push((format!("{p}.norm2.scale"), norm2_scale.$view().into_dyn()));
            out.push((format!("{p}.norm2.bias"), norm2_bias.$view().into_dyn()));
            out.push((format!("{p}.mlp.fc1.weight"), fc1_weight.$view().into_dyn()));
            out.push((format!("{p}.mlp.fc1.bias"), fc1_bias.$view().into_dyn()));
            out.push((format!("{p}.mlp.fc2.weight"), fc2_weight.$view().into_dyn()));
            out.push((format!("{p}.mlp.fc2.bias"), fc2_bias.$view().into_dyn()));
        }
        out.push(("norm.scale".to_string(), norm_scale.$view().into_dyn()));
        out.push(("norm.bias".to_string(), norm_bias.$view().into_dyn()));
        out.push(("head.weight".to_string(), head_weight.$view().into_dyn()));
        out.push(("head.bias".to_string(), head_bias.$view().into_dyn()));
        out
    }};
}

impl<T: Scalar> Weights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let block = || BlockWeights {
            norm1_scale: Array1::zeros(d),
            norm1_bias: Array1::zeros(d),
            qkv_weight: Array2::zeros((d, 3 * d)),
            qkv_bias: Array1::zeros(3 * d),
            proj_weight: Array2::zeros((d, d)),
            proj_bias: Array1::zeros(d),
            norm2_scale: Array1::zeros(d),
            norm2_bias: Array1::zeros(d),
            fc1_weight: Array2::zeros((d, config.mlp_dim)),
            fc1_bias: Array1::zeros(config.mlp_dim),
            fc2_weight: Array2::zeros((config.mlp_dim, d)),
            fc2_bias: Array1::zeros(d),
        };
        Self {
            patch_weight: Array2::zeros((config.patch_dim(), d)),
            patch_bias: Array1::zeros(d),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((config.n_tokens(), d)),
            blocks: (0..config.depth).map(|_| block()).collect(),
            norm_scale: Array1::zeros(d),
            norm_bias: Array1::zeros(d),
            head_weight: Array2::zeros((d, config.n_classes)),
            head_bias: Array1::zeros(config.n_classes),
        }
    }

    /// Tensors keyed by layer path, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        named_tensors!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        named_tensors!(self, view_mut, iter_mut)
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: T, other: &Weights<T>) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(alpha, &b);
        }
    }

    /// All values concatenated in [`Weights::tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let mut out = Weights::<U>::zeros_like_dims(self);
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, s| *d = U::of(s.as_f64()));
        }
        out
    }

    fn zeros_like_dims<U: Scalar>(other: &Weights<U>) -> Self {
        let block = |b: &BlockWeights<U>| BlockWeights {
            norm1_scale: Array1::zeros(b.norm1_scale.dim()),
            norm1_bias: Array1::zeros(b.norm1_bias.dim()),
            qkv_weight: Array2::zeros(b.qkv_weight.dim()),
            qkv_bias: Array1::zeros(b.qkv_bias.dim()),
            proj_weight: Array2::zeros(b.proj_weight.dim()),
            proj_bias: Array1::zeros(b.proj_bias.dim()),
            norm2_scale: Array1::zeros(b.norm2_scale.dim()),
            norm2_bias: Array1::zeros(b.norm2_bias.dim()),
            fc1_weight: Array2::zeros(b.fc1_weight.dim()),
            fc1_bias: Array1::zeros(b.fc1_bias.dim()),
            fc2_weight: Array2::zeros(b.fc2_weight.dim()),
            fc2_bias: Array1::zeros(b.fc2_bias.dim()),
        };
        Self {
            patch_weight: Array2::zeros(other.patch_weight.dim()),
            patch_bias: Array1::zeros(other.patch_bias.dim()),
            cls_token: Array1::zeros(other.cls_token.dim()),
            pos_embed: Array2::zeros(other.pos_embed.dim()),
            blocks: other.blocks.iter().map(block).collect(),
            norm_scale: Array1::zeros(other.norm_scale.dim()),
            norm_bias: Array1::zeros(other.norm_bias.dim()),
            head_weight: Array2::zeros(other.head_weight.dim()),
            head_bias: Array1::zeros(other.head_bias.dim()),
        }
    }
}

/// Whether weight decay applies to a tensor: linear weights only, not
/// biases, norms, or embeddings.
pub fn is_decayed(path: &str) -> bool {
    path.ends_with(".weight")
}

/// A backbone: its configuration plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn count(&self) -> usize {
        self.weights.count()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Truncated-normal weights (std 0.02, cut at two standard deviations),
/// zero biases, unit norm scales.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut weights = Weights::<T>::zeros(config);
    for (i, (path, mut t)) in weights.tensors_mut().into_iter().enumerate() {
        if path.ends_with(".scale") {
            t.fill(T::one());
        } else if !path.ends_with(".bias") {
            let mut r = rng::rng_for(seed, &[tags::INIT, i as u64]);
            t.mapv_inplace(|_| T::of(trunc_normal(&mut r, INIT_STD)));
        }
    }
    if !weights.all_finite() {
        return Err(Error::NonFinite("initial parameters".into()));
    }
    Ok(ModelParams {
        config: config.clone(),
        weights,
    })
}

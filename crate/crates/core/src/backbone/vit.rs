//! Pre-norm Vision Transformer with hand-written backward pass.
//!
//! Tokens are kept as a `(B * N) x D` matrix, example-major, where `N` is
//! the number of patches plus the class token (row 0 of every example).
//! Dropout sites: `embed` (after the positional embedding), and per block
//! `attn` (after the output projection), `mlp_hidden` (after the GELU) and
//! `mlp_out` (after the second linear layer). One stochastic-depth gate per
//! block and example multiplies both residual branches of that block.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis, Zip};

use crate::backbone::drop::{DropRealization, ForwardMasks};
use crate::backbone::{ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-6;

/// Which gradients [`backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub input: bool,
}

impl GradRequest {
    pub const PARAMS: Self = Self {
        params: true,
        input: false,
    };
    pub const INPUT: Self = Self {
        params: false,
        input: true,
    };
    pub const BOTH: Self = Self {
        params: true,
        input: true,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub weights: Option<Weights<T>>,
    pub input: Option<Array4<T>>,
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Array2<T>,
    ln1: LnCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    probs: Array3<T>,
    attn_out: Array2<T>,
    attn_mask: Option<Array2<T>>,
    ln2: LnCache<T>,
    h2: Array2<T>,
    fc1_pre: Array2<T>,
    hidden: Array2<T>,
    hidden_mask: Option<Array2<T>>,
    out_mask: Option<Array2<T>>,
    gates: Array1<T>,
}

/// Activations saved by [`forward_cached`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    patches: Array2<T>,
    embed_mask: Option<Array2<T>>,
    blocks: Vec<BlockCache<T>>,
    tokens_out: Array2<T>,
    final_ln: LnCache<T>,
    cls_norm: Array2<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Token matrix entering block `i` (`(B*N) x D`).
    pub fn block_input(&self, i: usize) -> &Array2<T> {
        &self.blocks[i].input
    }

    /// Token matrix after the last block.
    pub fn final_tokens(&self) -> &Array2<T> {
        &self.tokens_out
    }

    /// Residual multiplier applied in block `i` for each example.
    pub fn block_gates(&self, i: usize) -> &Array1<T> {
        &self.blocks[i].gates
    }
}

fn check_input<T>(config: &ModelConfig, x: &Array4<T>) -> Result<()> {
    let (b, h, w, c) = x.dim();
    if b == 0 || h != config.image_size || w != config.image_size || c != config.channels {
        return Err(Error::shape(format!(
            "input {:?} does not match model {}x{}x{}",
            x.dim(),
            config.image_size,
            config.image_size,
            config.channels
        )));
    }
    Ok(())
}

/// `B x H x W x C` into `(B * n_patches) x (p * p * C)`, patch vectors in
/// `(row, column, channel)` order.
fn patchify<T: Scalar>(config: &ModelConfig, x: &Array4<T>) -> Array2<T> {
    let (b, _, _, c) = x.dim();
    let (p, g) = (config.patch_size, config.grid());
    let mut out = Array2::zeros((b * g * g, config.patch_dim()));
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let mut row = out.row_mut(n * g * g + gy * g + gx);
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            row[k] = x[[n, gy * p + py, gx * p + px, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn unpatchify<T: Scalar>(config: &ModelConfig, dp: &Array2<T>, batch: usize) -> Array4<T> {
    let (p, g, c) = (config.patch_size, config.grid(), config.channels);
    let mut out = Array4::zeros((batch, config.image_size, config.image_size, c));
    for n in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                let row = dp.row(n * g * g + gy * g + gx);
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            out[[n, gy * p + py, gx * p + px, ch]] = row[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn linear<T: Scalar>(x: &ArrayView2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn layer_norm<T: Scalar>(x: &Array2<T>, scale: &Array1<T>, bias: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (rows, d) = x.dim();
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for (r, (xr, mut hr)) in x.rows().into_iter().zip(xhat.rows_mut()).enumerate() {
        let mean = xr.sum() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        Zip::from(&mut hr).and(&xr).for_each(|h, &v| *h = (v - mean) * rs);
    }
    let mut y = &xhat * scale;
    y += bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    scale: &Array1<T>,
    grads: Option<(&mut Array1<T>, &mut Array1<T>)>,
) -> Array2<T> {
    if let Some((dscale, dbias)) = grads {
        *dscale += &(dy * &cache.xhat).sum_axis(Axis(0));
        *dbias += &dy.sum_axis(Axis(0));
    }
    let d = dy.dim().1;
    let inv_d = T::one() / T::of(d as f64);
    let dxhat = dy * scale;
    let mut dx = Array2::zeros(dy.dim());
    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() * inv_d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let rs = cache.rstd[r];
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = rs * (gi - mean_g - xi * mean_gx));
    }
    dx
}

fn gelu_coeffs<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

/// Tanh-approximated GELU.
fn gelu<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_coeffs::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_coeffs::<T>();
    let half = T::of(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * a * x * x)
}

/// Per-row dropout multipliers for a site, or `None` if nothing is dropped.
fn site_mask<T: Scalar>(
    drop: &DropRealization,
    site: &str,
    batch: usize,
    tokens: usize,
    width: usize,
    trace: &mut Option<ForwardMasks>,
) -> Option<Array2<T>> {
    let mut mask: Option<Array2<T>> = None;
    for n in 0..batch {
        if let Some(m) = drop.dropout_scale::<T>(site, n, tokens * width, trace) {
            let full = mask.get_or_insert_with(|| Array2::zeros((batch * tokens, width)));
            let mut view = full.slice_mut(s![n * tokens..(n + 1) * tokens, ..]);
            for (dst, src) in view.iter_mut().zip(m) {
                *dst = src;
            }
        }
    }
    mask
}

fn apply_mask<T: Scalar>(x: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Runs the backbone and keeps every activation needed for [`backward`].
pub fn forward_cached<T: Scalar>(
    params: &ModelParams<T>,
    x: &Array4<T>,
    drop: &DropRealization,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let cfg = &params.config;
    let w = &params.weights;
    check_input(cfg, x)?;
    let batch = x.dim().0;
    let (n_tok, n_patch, d) = (cfg.n_tokens(), cfg.n_patches(), cfg.embed_dim);
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut trace = drop.start_trace();

    let patches = patchify(cfg, x);
    let embedded = linear(&patches.view(), &w.patch_weight, &w.patch_bias);
    let mut tokens = Array2::<T>::zeros((batch * n_tok, d));
    for n in 0..batch {
        let base = n * n_tok;
        tokens.row_mut(base).assign(&(&w.cls_token + &w.pos_embed.row(0)));
        let mut rows = tokens.slice_mut(s![base + 1..base + n_tok, ..]);
        rows.assign(&embedded.slice(s![n * n_patch..(n + 1) * n_patch, ..]));
        rows += &w.pos_embed.slice(s![1.., ..]);
    }
    let embed_mask = site_mask(drop, "embed", batch, n_tok, d, &mut trace);
    apply_mask(&mut tokens, &embed_mask);

    let mut blocks = Vec::with_capacity(cfg.depth);
    for (bi, bw) in w.blocks.iter().enumerate() {
        let input = tokens;
        let gates: Array1<T> = (0..batch)
            .map(|n| drop.depth_scale::<T>(bi, n, &mut trace))
            .collect();

        let (h1, ln1) = layer_norm(&input, &bw.norm1_scale, &bw.norm1_bias);
        let qkv = linear(&h1.view(), &bw.qkv_weight, &bw.qkv_bias);
        let mut probs = Array3::<T>::zeros((batch * heads, n_tok, n_tok));
        let mut attn_out = Array2::<T>::zeros((batch * n_tok, d));
        for n in 0..batch {
            let rows = n * n_tok..(n + 1) * n_tok;
            for h in 0..heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                sc *= scale;
                softmax_rows(&mut sc);
                attn_out
                    .slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&sc.dot(&v));
                probs.index_axis_mut(Axis(0), n * heads + h).assign(&sc);
            }
        }
        let mut proj = linear(&attn_out.view(), &bw.proj_weight, &bw.proj_bias);
        let attn_mask = site_mask(drop, &format!("blocks.{bi}.attn"), batch, n_tok, d, &mut trace);
        apply_mask(&mut proj, &attn_mask);
        let mut mid = input.clone();
        add_gated(&mut mid, &proj, &gates, n_tok);

        let (h2, ln2) = layer_norm(&mid, &bw.norm2_scale, &bw.norm2_bias);
        let fc1_pre = linear(&h2.view(), &bw.fc1_weight, &bw.fc1_bias);
        let mut hidden = fc1_pre.mapv(gelu);
        let hidden_mask = site_mask(
            drop,
            &format!("blocks.{bi}.mlp_hidden"),
            batch,
            n_tok,
            cfg.mlp_dim,
            &mut trace,
        );
        apply_mask(&mut hidden, &hidden_mask);
        let mut out = linear(&hidden.view(), &bw.fc2_weight, &bw.fc2_bias);
        let out_mask = site_mask(drop, &format!("blocks.{bi}.mlp_out"), batch, n_tok, d, &mut trace);
        apply_mask(&mut out, &out_mask);
        add_gated(&mut mid, &out, &gates, n_tok);
        tokens = mid;

        blocks.push(BlockCache {
            input,
            ln1,
            h1,
            qkv,
            probs,
            attn_out,
            attn_mask,
            ln2,
            h2,
            fc1_pre,
            hidden,
            hidden_mask,
            out_mask,
            gates,
        });
    }

    let cls = tokens.select(Axis(0), &(0..batch).map(|n| n * n_tok).collect::<Vec<_>>());
    let (cls_norm, final_ln) = layer_norm(&cls, &w.norm_scale, &w.norm_bias);
    let logits = linear(&cls_norm.view(), &w.head_weight, &w.head_bias);
    drop.finish_trace(trace);

    Ok((
        logits,
        ForwardCache {
            batch,
            patches,
            embed_mask,
            blocks,
            tokens_out: tokens,
            final_ln,
            cls_norm,
        },
    ))
}

/// `x[rows of example n] += gate[n] * branch[rows of example n]`.
fn add_gated<T: Scalar>(x: &mut Array2<T>, branch: &Array2<T>, gates: &Array1<T>, n_tok: usize) {
    for (n, &g) in gates.iter().enumerate() {
        let rows = n * n_tok..(n + 1) * n_tok;
        x.slice_mut(s![rows.clone(), ..])
            .scaled_add(g, &branch.slice(s![rows, ..]));
    }
}

fn scale_rows_by_gate<T: Scalar>(dy: &Array2<T>, gates: &Array1<T>, n_tok: usize) -> Array2<T> {
    let mut out = dy.clone();
    for (n, &g) in gates.iter().enumerate() {
        out.slice_mut(s![n * n_tok..(n + 1) * n_tok, ..])
            .mapv_inplace(|v| v * g);
    }
    out
}

/// Logits only.
pub fn forward<T: Scalar>(params: &ModelParams<T>, x: &Array4<T>, drop: &DropRealization) -> Result<Array2<T>> {
    forward_cached(params, x, drop).map(|(logits, _)| logits)
}

/// Backpropagates `dlogits` through the cached forward pass.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array2<T>,
    request: GradRequest,
) -> Gradients<T> {
    let cfg = &params.config;
    let w = &params.weights;
    let batch = cache.batch;
    let (n_tok, n_patch, d) = (cfg.n_tokens(), cfg.n_patches(), cfg.embed_dim);
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut g = request.params.then(|| Weights::<T>::zeros(cfg));

    if let Some(g) = g.as_mut() {
        g.head_weight += &cache.cls_norm.t().dot(dlogits);
        g.head_bias += &dlogits.sum_axis(Axis(0));
    }
    let dcls_norm = dlogits.dot(&w.head_weight.t());
    let dcls = layer_norm_backward(
        &dcls_norm,
        &cache.final_ln,
        &w.norm_scale,
        g.as_mut().map(|g| (&mut g.norm_scale, &mut g.norm_bias)),
    );
    let mut dtokens = Array2::<T>::zeros((batch * n_tok, d));
    for n in 0..batch {
        dtokens.row_mut(n * n_tok).assign(&dcls.row(n));
    }

    for (bi, (bw, bc)) in w.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        // MLP branch.
        let mut dout = scale_rows_by_gate(&dtokens, &bc.gates, n_tok);
        apply_mask(&mut dout, &bc.out_mask);
        let mut dhidden = dout.dot(&bw.fc2_weight.t());
        apply_mask(&mut dhidden, &bc.hidden_mask);
        Zip::from(&mut dhidden)
            .and(&bc.fc1_pre)
            .for_each(|dh, &pre| *dh = *dh * gelu_grad(pre));
        let dh2 = dhidden.dot(&bw.fc1_weight.t());
        let gb = g.as_mut().map(|g| &mut g.blocks[bi]);
        let dmid = match gb {
            Some(gb) => {
                gb.fc2_weight += &bc.hidden.t().dot(&dout);
                gb.fc2_bias += &dout.sum_axis(Axis(0));
                gb.fc1_weight += &bc.h2.t().dot(&dhidden);
                gb.fc1_bias += &dhidden.sum_axis(Axis(0));
                layer_norm_backward(&dh2, &bc.ln2, &bw.norm2_scale, Some((&mut gb.norm2_scale, &mut gb.norm2_bias)))
            }
            None => layer_norm_backward(&dh2, &bc.ln2, &bw.norm2_scale, None),
        };
        dtokens += &dmid;

        // Attention branch.
        let mut dproj = scale_rows_by_gate(&dtokens, &bc.gates, n_tok);
        apply_mask(&mut dproj, &bc.attn_mask);
        let dattn = dproj.dot(&bw.proj_weight.t());
        let mut dqkv = Array2::<T>::zeros((batch * n_tok, 3 * d));
        for n in 0..batch {
            let rows = n * n_tok..(n + 1) * n_tok;
            for h in 0..heads {
                let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
                let p = bc.probs.index_axis(Axis(0), n * heads + h);
                let q = bc.qkv.slice(s![rows.clone(), qc..qc + dh]);
                let k = bc.qkv.slice(s![rows.clone(), kc..kc + dh]);
                let v = bc.qkv.slice(s![rows.clone(), vc..vc + dh]);
                let dout_h = dattn.slice(s![rows.clone(), qc..qc + dh]);
                let dp = dout_h.dot(&v.t());
                let dv = p.t().dot(&dout_h);
                let mut ds = &dp * &p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let sum = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|r, &pv| *r = *r - pv * sum);
                }
                let mut dq = ds.dot(&k);
                dq *= scale;
                let mut dk = ds.t().dot(&q);
                dk *= scale;
                dqkv.slice_mut(s![rows.clone(), qc..qc + dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), kc..kc + dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), vc..vc + dh]).assign(&dv);
            }
        }
        let dh1 = dqkv.dot(&bw.qkv_weight.t());
        let gb = g.as_mut().map(|g| &mut g.blocks[bi]);
        let din = match gb {
            Some(gb) => {
                gb.proj_weight += &bc.attn_out.t().dot(&dproj);
                gb.proj_bias += &dproj.sum_axis(Axis(0));
                gb.qkv_weight += &bc.h1.t().dot(&dqkv);
                gb.qkv_bias += &dqkv.sum_axis(Axis(0));
                layer_norm_backward(&dh1, &bc.ln1, &bw.norm1_scale, Some((&mut gb.norm1_scale, &mut gb.norm1_bias)))
            }
            None => layer_norm_backward(&dh1, &bc.ln1, &bw.norm1_scale, None),
        };
        dtokens += &din;
    }

    apply_mask(&mut dtokens, &cache.embed_mask);
    let mut dembedded = Array2::<T>::zeros((batch * n_patch, d));
    for n in 0..batch {
        let base = n * n_tok;
        if let Some(g) = g.as_mut() {
            g.cls_token += &dtokens.row(base);
            g.pos_embed += &dtokens.slice(s![base..base + n_tok, ..]);
        }
        dembedded
            .slice_mut(s![n * n_patch..(n + 1) * n_patch, ..])
            .assign(&dtokens.slice(s![base + 1..base + n_tok, ..]));
    }
    if let Some(g) = g.as_mut() {
        g.patch_weight += &cache.patches.t().dot(&dembedded);
        g.patch_bias += &dembedded.sum_axis(Axis(0));
    }
    let input = request.input.then(|| {
        let dpatches = dembedded.dot(&w.patch_weight.t());
        unpatchify(cfg, &dpatches, batch)
    });
    Gradients { weights: g, input }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!("label {l} out of range for {k} classes")));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut loss = T::zero();
    for (n, &y) in labels.iter().enumerate() {
        let row = logits.row(n);
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[y];
        probs[[n, y]] -= T::one();
    }
    probs *= inv_b;
    Ok((loss * inv_b, probs))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predict<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> usize {
    predict(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Forward, cross-entropy and backward in one call.
#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: T,
    pub logits: Array2<T>,
    pub grads: Gradients<T>,
}

pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    x: &Array4<T>,
    labels: &[usize],
    drop: &DropRealization,
    request: GradRequest,
) -> Result<LossEval<T>> {
    let (logits, cache) = forward_cached(params, x, drop)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let grads = backward(params, &cache, &dlogits, request);
    Ok(LossEval { loss, logits, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;
    use crate::rng;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            embed_dim: 8,
            depth: 2,
            n_heads: 2,
            mlp_dim: 12,
            n_classes: 3,
            dropout_p: 0.0,
            stochdepth_p: 0.0,
        }
    }

    fn random_input(cfg: &ModelConfig, b: usize, seed: u64) -> Array4<f64> {
        let mut r = rng::rng_for(seed, &[]);
        Array4::from_shape_fn((b, cfg.image_size, cfg.image_size, cfg.channels), |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn patchify_roundtrip() {
        let cfg = tiny();
        let x = random_input(&cfg, 3, 1);
        let p = patchify(&cfg, &x);
        assert_eq!(p.dim(), (3 * 4, 32));
        assert_eq!(unpatchify(&cfg, &p, 3), x);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Array2::<f64>::zeros((2, 4));
        let (loss, d) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((d[[0, 0]] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let logits = Array2::<f32>::from_shape_vec((2, 3), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(predict(&logits), vec![0, 1]);
    }

    #[test]
    fn wrong_input_shape_is_structural_error() {
        let cfg = tiny();
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let x = Array4::<f64>::zeros((1, 9, 8, 2));
        assert!(matches!(
            forward(&p, &x, &DropRealization::disabled()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let cfg = tiny();
        let params = init_params::<f64>(&cfg, 3).unwrap();
        // Larger weights make every path matter numerically.
        let mut params = params;
        for (_, mut t) in params.weights.tensors_mut() {
            t.mapv_inplace(|v| v * 10.0);
        }
        let x = random_input(&cfg, 2, 5);
        let labels = [1, 2];
        let drop = DropRealization::disabled();
        let eval = loss_and_grads(&params, &x, &labels, &drop, GradRequest::BOTH).unwrap();
        let grads = eval.grads.weights.unwrap();
        let analytic = grads.flatten();
        let mut r = rng::rng_for(9, &[]);
        let total = params.count();
        let h = 1e-6;
        for _ in 0..60 {
            let idx = r.random_range(0..total);
            let loss_at = |delta: f64| {
                let mut p = params.clone();
                let mut offset = 0;
                for (_, mut t) in p.weights.tensors_mut() {
                    if idx < offset + t.len() {
                        let v = t.iter_mut().nth(idx - offset).unwrap();
                        *v += delta;
                        break;
                    }
                    offset += t.len();
                }
                let logits = forward(&p, &x, &drop).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let a = analytic[idx];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            assert!(err < 1e-4, "param {idx}: analytic {a} vs fd {fd}");
        }
    }
}

//! Windowed self-attention with an adaptive per-window gate.
//!
//! Volumes are tiled into cubic token windows (optionally cyclically
//! shifted between consecutive blocks), each window runs multi-head
//! scaled dot-product attention `A = softmax(QKᵀ/√d_k)`, and a learned
//! gate `g = sigmoid(mlp(mean window token))` in (0,1) scales each head's
//! output before the residual merge. Ablating the gate fixes `g ≡ 1` and
//! never reads the gate parameters.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::scaled_uniform;
use crate::ops::{
    from_token_matrix, gelu, gelu_backward, gemm, layer_norm, layer_norm_backward, linear,
    linear_backward, sigmoid, sigmoid_backward, softmax, softmax_backward, to_token_matrix,
    LayerNormCache,
};
use crate::tensor::{ParamId, ParameterStore, Tensor};
use crate::threading;

/// Cubic window tiling: edge length in tokens and cyclic shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize) -> Result<WindowSpec> {
        if window == 0 {
            return Err(Error::config("window must be positive"));
        }
        if shift >= window {
            return Err(Error::config(format!(
                "shift {shift} must be smaller than window {window}"
            )));
        }
        Ok(WindowSpec { window, shift })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window * self.window
    }
}

fn check_divisible(extents: [usize; 3], window: usize) -> Result<()> {
    const AXES: [&str; 3] = ["H", "W", "D"];
    for (i, &e) in extents.iter().enumerate() {
        if e % window != 0 {
            return Err(Error::geometry(format!(
                "axis {} extent {e} is not divisible by window {window}",
                AXES[i]
            )));
        }
    }
    Ok(())
}

/// Global token index of every window slot.
///
/// Windows are ordered lexicographically by origin in the shifted
/// coordinate space; slots are row-major local (h,w,d). The entry is the
/// token's index in the original (unshifted) grid: shifting rolls the grid
/// so position `i` shows the token originally at `(i + shift) mod extent`.
pub fn window_index_map(extents: [usize; 3], spec: &WindowSpec) -> Result<Vec<Vec<usize>>> {
    check_divisible(extents, spec.window)?;
    let [h, w, d] = extents;
    let win = spec.window;
    let s = spec.shift;
    let mut map = Vec::with_capacity((h / win) * (w / win) * (d / win));
    for oh in (0..h).step_by(win) {
        for ow in (0..w).step_by(win) {
            for od in (0..d).step_by(win) {
                let mut slots = Vec::with_capacity(win * win * win);
                for lh in 0..win {
                    let sh = (oh + lh + s) % h;
                    for lw in 0..win {
                        let sw = (ow + lw + s) % w;
                        for ld in 0..win {
                            let sd = (od + ld + s) % d;
                            slots.push((sh * w + sw) * d + sd);
                        }
                    }
                }
                map.push(slots);
            }
        }
    }
    Ok(map)
}

fn gather_rows(mat: &Tensor, rows: &[usize]) -> Tensor {
    let c = mat.shape()[1];
    let mut out = vec![0.0; rows.len() * c];
    for (i, &r) in rows.iter().enumerate() {
        out[i * c..(i + 1) * c].copy_from_slice(&mat.data()[r * c..(r + 1) * c]);
    }
    Tensor::from_vec(&[rows.len(), c], out).expect("gather shape")
}

fn scatter_rows(dst: &mut Tensor, rows: &[usize], src: &Tensor) {
    let c = dst.shape()[1];
    for (i, &r) in rows.iter().enumerate() {
        dst.data_mut()[r * c..(r + 1) * c].copy_from_slice(&src.data()[i * c..(i + 1) * c]);
    }
}

/// Lossless tiling of `[C,H,W,D]` into windows of `window³` tokens, each
/// returned as a `[T, C]` matrix.
pub fn window_partition(tokens: &Tensor, spec: &WindowSpec) -> Result<Vec<Tensor>> {
    if tokens.rank() != 4 {
        return Err(Error::shape(format!(
            "window_partition expects [C,H,W,D], got {:?}",
            tokens.shape()
        )));
    }
    let extents = [tokens.shape()[1], tokens.shape()[2], tokens.shape()[3]];
    let map = window_index_map(extents, spec)?;
    let mat = to_token_matrix(tokens)?;
    Ok(map.iter().map(|rows| gather_rows(&mat, rows)).collect())
}

/// Exact inverse of [`window_partition`], including undoing the shift.
pub fn window_reverse(
    windows: &[Tensor],
    spec: &WindowSpec,
    extents: [usize; 3],
) -> Result<Tensor> {
    let map = window_index_map(extents, spec)?;
    if windows.len() != map.len() {
        return Err(Error::shape(format!(
            "{} windows but tiling wants {}",
            windows.len(),
            map.len()
        )));
    }
    let t = spec.tokens_per_window();
    let c = windows
        .first()
        .map(|w| w.shape()[1])
        .ok_or_else(|| Error::shape("no windows"))?;
    let n: usize = extents.iter().product();
    let mut mat = Tensor::zeros(&[n, c]);
    for (win, rows) in windows.iter().zip(map.iter()) {
        if win.shape() != [t, c] {
            return Err(Error::shape(format!(
                "window must be [{t}, {c}], got {:?}",
                win.shape()
            )));
        }
        scatter_rows(&mut mat, rows, win);
    }
    from_token_matrix(&mat, extents)
}

/// `A = softmax(QKᵀ/√d_k)` row-wise; returns `(A·V, A)`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(format!(
            "attention expects equal [T,d_k] shapes, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (t, dk) = (q.shape()[0], q.shape()[1]);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = vec![0.0; t * t];
    gemm::matmul_nt(t, dk, t, q.data(), k.data(), &mut scores);
    for s in &mut scores {
        *s *= scale;
    }
    let attn = softmax(&Tensor::from_vec(&[t, t], scores)?, 1)?;
    let mut out = vec![0.0; t * dk];
    gemm::matmul(t, t, dk, attn.data(), v.data(), &mut out);
    Ok((Tensor::from_vec(&[t, dk], out)?, attn))
}

/// Gradients of [`scaled_dot_attention`] given the cached attention matrix.
pub fn scaled_dot_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    attn: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, dk) = (q.shape()[0], q.shape()[1]);
    if grad_out.shape() != [t, dk] {
        return Err(Error::shape(format!(
            "attention grad_out must be [{t}, {dk}], got {:?}",
            grad_out.shape()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    // dV = Aᵀ · dOut
    let mut dv = vec![0.0; t * dk];
    gemm::matmul_tn(t, t, dk, attn.data(), grad_out.data(), &mut dv);
    // dA = dOut · Vᵀ
    let mut dattn = vec![0.0; t * t];
    gemm::matmul_nt(t, dk, t, grad_out.data(), v.data(), &mut dattn);
    let mut dscores = softmax_backward(attn, &Tensor::from_vec(&[t, t], dattn)?, 1)?;
    for s in dscores.data_mut() {
        *s *= scale;
    }
    let mut dq = vec![0.0; t * dk];
    gemm::matmul(t, t, dk, dscores.data(), k.data(), &mut dq);
    let mut dk_out = vec![0.0; t * dk];
    gemm::matmul_tn(t, t, dk, dscores.data(), q.data(), &mut dk_out);
    Ok((
        Tensor::from_vec(&[t, dk], dq)?,
        Tensor::from_vec(&[t, dk], dk_out)?,
        Tensor::from_vec(&[t, dk], dv)?,
    ))
}

/// Gate MLP weights: two affine layers `dim → dim/2 → heads`.
pub struct GateParams<'a> {
    pub fc1_w: &'a Tensor,
    pub fc1_b: &'a Tensor,
    pub fc2_w: &'a Tensor,
    pub fc2_b: &'a Tensor,
}

pub struct GateCache {
    pooled: Tensor,
    hidden: Tensor,
    pub gates: Tensor,
    tokens_t: usize,
}

/// Per-head gate `g = sigmoid(fc2(fc1(mean over T of tokens)))`, g ∈ (0,1).
pub fn adaptive_gate(window_tokens: &Tensor, params: &GateParams) -> Result<(Tensor, GateCache)> {
    if window_tokens.rank() != 2 {
        return Err(Error::shape(format!(
            "gate expects [T,dim] tokens, got {:?}",
            window_tokens.shape()
        )));
    }
    let (t, dim) = (window_tokens.shape()[0], window_tokens.shape()[1]);
    let mut pooled = vec![0.0; dim];
    for row in window_tokens.data().chunks_exact(dim) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= t as f64;
    }
    let pooled = Tensor::from_vec(&[1, dim], pooled)?;
    let hidden = linear(&pooled, params.fc1_w, Some(params.fc1_b))?;
    let raw = linear(&hidden, params.fc2_w, Some(params.fc2_b))?;
    let heads = raw.shape()[1];
    let gates = sigmoid(&raw).reshaped(&[heads])?;
    Ok((
        gates.clone(),
        GateCache {
            pooled,
            hidden,
            gates,
            tokens_t: t,
        },
    ))
}

/// Gradients of [`adaptive_gate`]: token grads plus the four MLP grads.
pub fn adaptive_gate_backward(
    cache: &GateCache,
    params: &GateParams,
    grad_gates: &Tensor,
) -> Result<(Tensor, [Tensor; 4])> {
    let heads = cache.gates.numel();
    let g2 = cache.gates.clone().reshaped(&[1, heads])?;
    let dg2 = grad_gates.clone().reshaped(&[1, heads])?;
    let draw = sigmoid_backward(&g2, &dg2)?;
    let (dhidden, dfc2w, dfc2b) = linear_backward(&cache.hidden, params.fc2_w, true, &draw)?;
    let (dpooled, dfc1w, dfc1b) = linear_backward(&cache.pooled, params.fc1_w, true, &dhidden)?;
    let t = cache.tokens_t;
    let dim = dpooled.shape()[1];
    let mut dtokens = vec![0.0; t * dim];
    for row in dtokens.chunks_exact_mut(dim) {
        for (o, &v) in row.iter_mut().zip(dpooled.data()) {
            *o = v / t as f64;
        }
    }
    Ok((
        Tensor::from_vec(&[t, dim], dtokens)?,
        [
            dfc1w,
            dfc1b.expect("gate fc1 has bias"),
            dfc2w,
            dfc2b.expect("gate fc2 has bias"),
        ],
    ))
}


struct GateIds {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

struct WindowAttnCache {
    attn: Vec<Tensor>,
    head_outs: Vec<Tensor>,
}

/// Batched gate state: one row per window.
struct BatchGateCache {
    pooled: Tensor,
    hidden: Tensor,
    gates: Tensor,
}

struct BlockCache {
    extents: [usize; 3],
    index_map: Vec<Vec<usize>>,
    ln1: LayerNormCache,
    ln1_out: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    windows: Vec<WindowAttnCache>,
    gate: Option<BatchGateCache>,
    attn_cat: Tensor,
    ln2: LayerNormCache,
    ln2_out: Tensor,
    h_pre: Tensor,
    h_act: Tensor,
}

/// One transformer block: windowed gated attention plus a token MLP, both
/// behind pre-norm residuals.
///
/// `x ← x + Windows(g ⊙ MHA(LN(x)));  x ← x + MLP(LN(x))`
pub struct SwinBlock {
    dim: usize,
    heads: usize,
    head_dim: usize,
    spec: WindowSpec,
    ablate_adaptive: bool,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    gate: Option<GateIds>,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    cache: Option<BlockCache>,
}

pub const MLP_RATIO: usize = 4;

impl SwinBlock {
    /// Register all block parameters under `prefix`. `gated` controls
    /// whether gate parameters exist at all; [`SwinBlock::set_ablate_adaptive`]
    /// controls whether they are used.
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        spec: WindowSpec,
        gated: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<SwinBlock> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "dim {dim} must be divisible by heads {heads}"
            )));
        }
        if dim % 2 != 0 {
            return Err(Error::config(format!("dim {dim} must be even for the gate MLP")));
        }
        let mlp_hidden = dim * MLP_RATIO;
        let ln1_g = store.register(format!("{prefix}.ln1.gamma"), Tensor::full(&[dim], 1.0))?;
        let ln1_b = store.register(format!("{prefix}.ln1.beta"), Tensor::zeros(&[dim]))?;
        let proj = |store: &mut ParameterStore, name: &str, rng: &mut ChaCha8Rng| {
            store.register(
                format!("{prefix}.attn.{name}"),
                scaled_uniform(rng, &[dim, dim], dim, dim),
            )
        };
        let wq = proj(store, "wq", rng)?;
        let wk = proj(store, "wk", rng)?;
        let wv = proj(store, "wv", rng)?;
        let wo = proj(store, "wo", rng)?;
        let gate = if gated {
            let half = dim / 2;
            Some(GateIds {
                fc1_w: store.register(
                    format!("{prefix}.gate.fc1.weight"),
                    scaled_uniform(rng, &[dim, half], dim, half),
                )?,
                fc1_b: store
                    .register(format!("{prefix}.gate.fc1.bias"), Tensor::zeros(&[half]))?,
                fc2_w: store.register(
                    format!("{prefix}.gate.fc2.weight"),
                    scaled_uniform(rng, &[half, heads], half, heads),
                )?,
                fc2_b: store
                    .register(format!("{prefix}.gate.fc2.bias"), Tensor::zeros(&[heads]))?,
            })
        } else {
            None
        };
        let ln2_g = store.register(format!("{prefix}.ln2.gamma"), Tensor::full(&[dim], 1.0))?;
        let ln2_b = store.register(format!("{prefix}.ln2.beta"), Tensor::zeros(&[dim]))?;
        let fc1_w = store.register(
            format!("{prefix}.mlp.fc1.weight"),
            scaled_uniform(rng, &[dim, mlp_hidden], dim, mlp_hidden),
        )?;
        let fc1_b = store.register(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros(&[mlp_hidden]))?;
        let fc2_w = store.register(
            format!("{prefix}.mlp.fc2.weight"),
            scaled_uniform(rng, &[mlp_hidden, dim], mlp_hidden, dim),
        )?;
        let fc2_b = store.register(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[dim]))?;
        Ok(SwinBlock {
            dim,
            heads,
            head_dim: dim / heads,
            spec,

            ablate_adaptive: !gated,
            ln1_g,
            ln1_b,
            wq,
            wk,
            wv,
            wo,
            gate,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            cache: None,
        })
    }

    /// Force `g ≡ 1`; with the flag set the gate parameters are never read,
    /// so the output is bit-identical for any gate values.
    pub fn set_ablate_adaptive(&mut self, ablate: bool) {
        self.ablate_adaptive = ablate;
    }

    pub fn window_spec(&self) -> WindowSpec {
        self.spec
    }

    fn gate_active(&self) -> bool {
        self.gate.is_some() && !self.ablate_adaptive
    }

    /// Attention matrices cached by the latest forward, window-major then
    /// head-major. Empty before the first forward or after a backward.
    pub fn cached_attention(&self) -> Vec<&Tensor> {
        self.cache
            .as_ref()
            .map(|c| c.windows.iter().flat_map(|w| w.attn.iter()).collect())
            .unwrap_or_default()
    }

    /// Gate matrix `[windows, heads]` cached by the latest forward; `None`
    /// when the gate is absent or ablated.
    pub fn cached_gates(&self) -> Option<&Tensor> {
        self.cache
            .as_ref()
            .and_then(|c| c.gate.as_ref().map(|g| &g.gates))
    }

    /// Mean of `mat` rows `rows` into row `w` of `dst`.
    fn pool_window(dst: &mut Tensor, w: usize, mat: &Tensor, rows: &[usize]) {
        let c = mat.shape()[1];
        let inv = 1.0 / rows.len() as f64;
        let out = &mut dst.data_mut()[w * c..(w + 1) * c];
        for &r in rows {
            for (o, &v) in out.iter_mut().zip(&mat.data()[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
    }

    /// Rows `rows`, head column block `h`, of a `[N, dim]` matrix.
    fn gather_head(&self, mat: &Tensor, rows: &[usize], h: usize) -> Tensor {
        let c = self.dim;
        let lo = h * self.head_dim;
        let mut out = vec![0.0; rows.len() * self.head_dim];
        for (i, &r) in rows.iter().enumerate() {
            out[i * self.head_dim..(i + 1) * self.head_dim]
                .copy_from_slice(&mat.data()[r * c + lo..r * c + lo + self.head_dim]);
        }
        Tensor::from_vec(&[rows.len(), self.head_dim], out).expect("gather shape")
    }

    fn scatter_head(&self, dst: &mut Tensor, rows: &[usize], h: usize, src: &Tensor) {
        let c = self.dim;
        let lo = h * self.head_dim;
        for (i, &r) in rows.iter().enumerate() {
            dst.data_mut()[r * c + lo..r * c + lo + self.head_dim]
                .copy_from_slice(&src.data()[i * self.head_dim..(i + 1) * self.head_dim]);
        }
    }

    pub fn forward(&mut self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[0] != self.dim {
            return Err(Error::shape(format!(
                "block expects [{}, H, W, D], got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let extents = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let index_map = window_index_map(extents, &self.spec)?;
        let n_win = index_map.len();
        let t0 = to_token_matrix(x)?;
        let (ln1_out, ln1) = layer_norm(&t0, store.value(self.ln1_g), store.value(self.ln1_b))?;

        // Projections and the gate MLP are row-wise, so they batch over all
        // windows at once; only the attention itself is per window.
        let q = linear(&ln1_out, store.value(self.wq), None)?;
        let k = linear(&ln1_out, store.value(self.wk), None)?;
        let v = linear(&ln1_out, store.value(self.wv), None)?;
        let gate = if self.gate_active() {
            let ids = self.gate.as_ref().expect("gate ids");
            let mut pooled = Tensor::zeros(&[n_win, self.dim]);
            for (w, rows) in index_map.iter().enumerate() {
                Self::pool_window(&mut pooled, w, &ln1_out, rows);
            }
            let hidden = linear(&pooled, store.value(ids.fc1_w), Some(store.value(ids.fc1_b)))?;
            let raw = linear(&hidden, store.value(ids.fc2_w), Some(store.value(ids.fc2_b)))?;
            Some(BatchGateCache {
                pooled,
                hidden,
                gates: sigmoid(&raw),
            })
        } else {
            None
        };

        let per_window = threading::indexed_map(n_win, |wi| -> Result<(Vec<Tensor>, WindowAttnCache)> {
            let rows = &index_map[wi];
            let mut gated = Vec::with_capacity(self.heads);
            let mut attns = Vec::with_capacity(self.heads);
            let mut head_outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = self.gather_head(&q, rows, h);
                let kh = self.gather_head(&k, rows, h);
                let vh = self.gather_head(&v, rows, h);
                let (oh, ah) = scaled_dot_attention(&qh, &kh, &vh)?;
                gated.push(match &gate {
                    Some(g) => oh.scale(g.gates.data()[wi * self.heads + h]),
                    None => oh.clone(),
                });
                attns.push(ah);
                head_outs.push(oh);
            }
            Ok((gated, WindowAttnCache { attn: attns, head_outs }))
        });
        let n = t0.shape()[0];
        let mut attn_cat = Tensor::zeros(&[n, self.dim]);
        let mut windows = Vec::with_capacity(n_win);
        for (wi, res) in per_window.into_iter().enumerate() {
            let (gated, cache) = res?;
            for (h, go) in gated.iter().enumerate() {
                self.scatter_head(&mut attn_cat, &index_map[wi], h, go);
            }
            windows.push(cache);
        }
        let attn_tokens = linear(&attn_cat, store.value(self.wo), None)?;
        let x1 = t0.add(&attn_tokens)?;
        let (ln2_out, ln2) = layer_norm(&x1, store.value(self.ln2_g), store.value(self.ln2_b))?;
        let h_pre = linear(&ln2_out, store.value(self.fc1_w), Some(store.value(self.fc1_b)))?;
        let h_act = gelu(&h_pre);
        let mlp_out = linear(&h_act, store.value(self.fc2_w), Some(store.value(self.fc2_b)))?;
        let x2 = x1.add(&mlp_out)?;
        let out = from_token_matrix(&x2, extents)?;
        self.cache = Some(BlockCache {
            extents,
            index_map,
            ln1,
            ln1_out,
            q,
            k,
            v,
            windows,
            gate,
            attn_cat,
            ln2,
            ln2_out,
            h_pre,
            h_act,
        });
        Ok(out)
    }

    pub fn backward(&mut self, store: &mut ParameterStore, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("block backward before forward".into()))?;
        let dx2 = to_token_matrix(dy)?;
        // MLP branch.
        let (dh_act, dfc2w, dfc2b) =
            linear_backward(&cache.h_act, store.value(self.fc2_w), true, &dx2)?;
        let dh_pre = gelu_backward(&cache.h_pre, &dh_act)?;
        let (dln2_out, dfc1w, dfc1b) =
            linear_backward(&cache.ln2_out, store.value(self.fc1_w), true, &dh_pre)?;
        let (dx1_ln, dg2, db2) =
            layer_norm_backward(&cache.ln2, store.value(self.ln2_g), &dln2_out)?;
        let dx1 = dx2.add(&dx1_ln)?;
        store.add_to_grad(self.fc2_w, &dfc2w)?;
        store.add_to_grad(self.fc2_b, &dfc2b.expect("mlp fc2 bias"))?;
        store.add_to_grad(self.fc1_w, &dfc1w)?;
        store.add_to_grad(self.fc1_b, &dfc1b.expect("mlp fc1 bias"))?;
        store.add_to_grad(self.ln2_g, &dg2)?;
        store.add_to_grad(self.ln2_b, &db2)?;

        // Attention branch: W_O backward is one batched gemm.
        let (dattn_cat, dwo, _) =
            linear_backward(&cache.attn_cat, store.value(self.wo), false, &dx1)?;
        store.add_to_grad(self.wo, &dwo)?;

        let n_win = cache.index_map.len();
        let heads = self.heads;
        let per_window =
            threading::indexed_map(n_win, |wi| -> Result<(Vec<(Tensor, Tensor, Tensor)>, Vec<f64>)> {
                let rows = &cache.index_map[wi];
                let wc = &cache.windows[wi];
                let mut grads = Vec::with_capacity(heads);
                let mut dgates = vec![0.0; heads];
                for h in 0..heads {
                    let dgo = self.gather_head(&dattn_cat, rows, h);
                    let doh = match &cache.gate {
                        Some(g) => {
                            dgates[h] = wc.head_outs[h]
                                .data()
                                .iter()
                                .zip(dgo.data())
                                .map(|(&a, &b)| a * b)
                                .sum();
                            dgo.scale(g.gates.data()[wi * heads + h])
                        }
                        None => dgo,
                    };
                    let qh = self.gather_head(&cache.q, rows, h);
                    let kh = self.gather_head(&cache.k, rows, h);
                    let vh = self.gather_head(&cache.v, rows, h);
                    grads.push(scaled_dot_attention_backward(
                        &qh,
                        &kh,
                        &vh,
                        &wc.attn[h],
                        &doh,
                    )?);
                }
                Ok((grads, dgates))
            });
        let n = dx1.shape()[0];
        let mut dq = Tensor::zeros(&[n, self.dim]);
        let mut dk = Tensor::zeros(&[n, self.dim]);
        let mut dv = Tensor::zeros(&[n, self.dim]);
        let mut dgates = Tensor::zeros(&[n_win, heads]);
        for (wi, res) in per_window.into_iter().enumerate() {
            let (grads, dg) = res?;
            for (h, (dqh, dkh, dvh)) in grads.iter().enumerate() {
                self.scatter_head(&mut dq, &cache.index_map[wi], h, dqh);
                self.scatter_head(&mut dk, &cache.index_map[wi], h, dkh);
                self.scatter_head(&mut dv, &cache.index_map[wi], h, dvh);
            }
            dgates.data_mut()[wi * heads..(wi + 1) * heads].copy_from_slice(&dg);
        }

        let (mut dln1_out, dwq, _) =
            linear_backward(&cache.ln1_out, store.value(self.wq), false, &dq)?;
        let (dln1_k, dwk, _) = linear_backward(&cache.ln1_out, store.value(self.wk), false, &dk)?;
        let (dln1_v, dwv, _) = linear_backward(&cache.ln1_out, store.value(self.wv), false, &dv)?;
        dln1_out.add_assign_scaled(&dln1_k, 1.0)?;
        dln1_out.add_assign_scaled(&dln1_v, 1.0)?;
        store.add_to_grad(self.wq, &dwq)?;
        store.add_to_grad(self.wk, &dwk)?;
        store.add_to_grad(self.wv, &dwv)?;

        if let Some(gc) = &cache.gate {
            let ids = self.gate.as_ref().expect("gate ids");
            let draw = sigmoid_backward(&gc.gates, &dgates)?;
            let (dhidden, dfc2w, dfc2b) =
                linear_backward(&gc.hidden, store.value(ids.fc2_w), true, &draw)?;
            let (dpooled, dfc1w, dfc1b) =
                linear_backward(&gc.pooled, store.value(ids.fc1_w), true, &dhidden)?;
            store.add_to_grad(ids.fc2_w, &dfc2w)?;
            store.add_to_grad(ids.fc2_b, &dfc2b.expect("gate fc2 bias"))?;
            store.add_to_grad(ids.fc1_w, &dfc1w)?;
            store.add_to_grad(ids.fc1_b, &dfc1b.expect("gate fc1 bias"))?;
            // Mean pooling distributes each window's gradient evenly.
            let c = self.dim;
            for (wi, rows) in cache.index_map.iter().enumerate() {
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    for (o, &g) in dln1_out.data_mut()[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&dpooled.data()[wi * c..(wi + 1) * c])
                    {
                        *o += g * inv;
                    }
                }
            }
        }

        let (dt0_ln, dg1, db1) =
            layer_norm_backward(&cache.ln1, store.value(self.ln1_g), &dln1_out)?;
        store.add_to_grad(self.ln1_g, &dg1)?;
        store.add_to_grad(self.ln1_b, &db1)?;
        let dt0 = dx1.add(&dt0_ln)?;
        from_token_matrix(&dt0, cache.extents)
    }
}

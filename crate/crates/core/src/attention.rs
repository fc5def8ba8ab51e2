//! Window partitioning and the three attention variants over patch grids
//! and coordinator sets.
//!
//! Shapes follow two conventions:
//! * patch grid `[B, h, w, C]` — channels last, spatial layout intact;
//! * window set `[B·nW, T, C]` with `T = m_side²` tokens per window.
//!
//! The three variants share one multi-head core:
//! * `wsa` — self-attention inside each window; windows never exchange
//!   information.
//! * `ggca` — coordinators query the concatenation of coordinator and patch
//!   keys/values and update themselves; patches pass through untouched.
//! * `gcwa` — window attention whose key/value set is augmented with the
//!   (updated) coordinators, which re-broadcast global context into every
//!   window; coordinators pass through untouched.
//!
//! `wsa_attention`/`ggca_attention`/`gcwa_attention` are the raw operators
//! (projections, scores, softmax, output projection). The `WsaOp`/`GgcaOp`/
//! `GcwaOp` wrappers add pre-normalization and the residual connection and
//! are what blocks compose. Scores scale by `1/sqrt(head_dim)`, reading the
//! published `1/sqrt(D)` as the per-head key width. A window-local relative
//! position bias applies to patch–patch pairs only; coordinator keys carry
//! zero bias.

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, ParamVisitor};
use crate::ops::KeyMask;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---- window geometry ----------------------------------------------------

/// `[B, h, w, C]` -> `[B·nW, T, C]`, non-overlapping `m_side × m_side`
/// tiles flattened row-major, windows ordered row-major per batch entry.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m_side: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::BadShape {
            op: "window_partition",
            shape,
            detail: "expects [B, h, w, C]".to_string(),
        });
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if m_side == 0 || h % m_side != 0 || w % m_side != 0 {
        return Err(Error::BadShape {
            op: "window_partition",
            shape,
            detail: format!("extents {h}x{w} not divisible by window side {m_side}"),
        });
    }
    let (nh, nw) = (h / m_side, w / m_side);
    x.reshape(&[b, nh, m_side, nw, m_side, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * nh * nw, m_side * m_side, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    m_side: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let shape = windows.shape();
    if shape.len() != 3 || m_side == 0 || h % m_side != 0 || w % m_side != 0 {
        return Err(Error::BadShape {
            op: "window_reverse",
            shape,
            detail: format!("inconsistent with target {h}x{w}, window side {m_side}"),
        });
    }
    let (nh, nw) = (h / m_side, w / m_side);
    let t = m_side * m_side;
    if shape[1] != t || shape[0] % (nh * nw) != 0 {
        return Err(Error::BadShape {
            op: "window_reverse",
            shape,
            detail: format!("window count/token count mismatch for {h}x{w}/{m_side}"),
        });
    }
    let b = shape[0] / (nh * nw);
    let c = shape[2];
    windows
        .reshape(&[b, nh, nw, m_side, m_side, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Right/bottom zero padding that makes a grid divisible by the window
/// side, plus the key-validity mask of the padded windows (`None` when no
/// padding was needed).
pub fn pad_for_windows<T: Scalar>(
    x: &Tensor<T>,
    m_side: usize,
) -> Result<(Tensor<T>, usize, usize, Option<KeyMask>)> {
    let shape = x.shape();
    let (h, w) = (shape[1], shape[2]);
    let pad_h = (m_side - h % m_side) % m_side;
    let pad_w = (m_side - w % m_side) % m_side;
    if pad_h == 0 && pad_w == 0 {
        return Ok((x.clone(), h, w, None));
    }
    let padded = x.pad_axis_end(1, pad_h)?.pad_axis_end(2, pad_w)?;
    let (hp, wp) = (h + pad_h, w + pad_w);
    let (nh, nw) = (hp / m_side, wp / m_side);
    let t = m_side * m_side;
    let mut valid = vec![false; nh * nw * t];
    for wy in 0..nh {
        for wx in 0..nw {
            let base = (wy * nw + wx) * t;
            for ty in 0..m_side {
                for tx in 0..m_side {
                    let (y, x_) = (wy * m_side + ty, wx * m_side + tx);
                    valid[base + ty * m_side + tx] = y < h && x_ < w;
                }
            }
        }
    }
    let mask = KeyMask::new(nh * nw, t, valid)?;
    Ok((padded, hp, wp, Some(mask)))
}

/// Relative-position index of a `m_side × m_side` window: entry `(i, j)`
/// maps the token pair to a row of the `(2·m_side − 1)²`-row bias table.
pub fn relative_position_index(m_side: usize) -> Vec<usize> {
    let t = m_side * m_side;
    let span = 2 * m_side - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m_side, i % m_side);
        for j in 0..t {
            let (yj, xj) = (j / m_side, j % m_side);
            let dy = yi + m_side - 1 - yj;
            let dx = xi + m_side - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

// ---- weights --------------------------------------------------------------

/// Window-local learnable relative position bias for patch–patch pairs.
pub struct RelPosBias<T: Scalar> {
    /// `[(2m−1)², heads]`
    pub table: Tensor<T>,
    pub window_side: usize,
    index: Vec<usize>,
}

impl<T: Scalar> RelPosBias<T> {
    pub fn init(rng: &mut Rng, m_side: usize, heads: usize) -> Self {
        let span = 2 * m_side - 1;
        let table = rng.trunc_normal::<T>(&[span * span, heads], crate::layers::INIT_STD);
        table.make_param();
        RelPosBias {
            table,
            window_side: m_side,
            index: relative_position_index(m_side),
        }
    }

    /// Bias laid out `[1, heads, T, T + extra_keys]`; the extra key columns
    /// (coordinators) are zero.
    fn build(&self, heads: usize, extra_keys: usize) -> Result<Tensor<T>> {
        let t = self.window_side * self.window_side;
        let gathered = self.table.gather_rows(&self.index)?; // [T·T, heads]
        let bias = gathered.reshape(&[t, t, heads])?.permute(&[2, 0, 1])?; // [heads, T, T]
        let bias = if extra_keys > 0 {
            let zeros = Tensor::zeros(&[heads, t, extra_keys]);
            Tensor::concat(&[&bias, &zeros], 2)?
        } else {
            bias
        };
        bias.reshape(&[1, heads, t, t + extra_keys])
    }
}

/// Projection set of one attention op. The same `wk`/`wv` apply to both
/// coordinator and patch inputs within the op.
pub struct AttentionWeights<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
    pub head_dim: usize,
    pub rel_bias: Option<RelPosBias<T>>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// `dim` must equal `heads · head_dim`. `bias_window` attaches a
    /// relative-position bias table for that window side.
    pub fn init(
        rng: &mut Rng,
        dim: usize,
        heads: usize,
        bias_window: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible into {heads} heads"
            )));
        }
        let proj = |rng: &mut Rng| {
            let w = rng.trunc_normal::<T>(&[dim, dim], crate::layers::INIT_STD);
            w.make_param();
            w
        };
        Ok(AttentionWeights {
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            wo: proj(rng),
            heads,
            head_dim: dim / heads,
            rel_bias: bias_window.map(|m| RelPosBias::init(rng, m, heads)),
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check_dim(&self, c: usize, op: &'static str) -> Result<()> {
        if c != self.dim() {
            return Err(Error::Config(format!(
                "{op}: channel dim {c} != heads*head_dim = {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        use crate::layers::join;
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "wo"), &self.wo);
        if let Some(rb) = &self.rel_bias {
            f(&join(prefix, "rel_bias"), &rb.table);
        }
    }
}

// ---- multi-head plumbing ----------------------------------------------------

/// `[B, S, C]` -> `[B, heads, S, head_dim]`.
fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    let (b, s, c) = (shape[0], shape[1], shape[2]);
    x.reshape(&[b, s, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// `[B, heads, S, head_dim]` -> `[B, S, C]`.
fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    let (b, heads, s, hd) = (shape[0], shape[1], shape[2], shape[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, s, heads * hd])
}

/// Scaled dot-product over pre-split heads. `bias` broadcasts over the
/// batch axis; `mask` marks invalid key columns.
fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    head_dim: usize,
    bias: Option<&Tensor<T>>,
    mask: Option<&KeyMask>,
) -> Result<Tensor<T>> {
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut scores = q.matmul(&k.transpose_last()?)?.scale(scale)?;
    if let Some(b) = bias {
        scores = scores.add(b)?;
    }
    let weights = match mask {
        Some(m) => scores.softmax_rows_masked(m)?,
        None => scores.softmax_rows()?,
    };
    weights.matmul(v)
}

/// Shared window-attention core. `windows` is `[B·nW, T, C]`; when
/// `coords` carries per-window coordinator keys/values
/// (`[B·nW, heads, K, head_dim]` each), the key/value space of every
/// window is augmented with them. With `coords = None` this is exactly
/// window self-attention.
fn window_attention_core<T: Scalar>(
    windows: &Tensor<T>,
    weights: &AttentionWeights<T>,
    mask: Option<&KeyMask>,
    coords: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<Tensor<T>> {
    let shape = windows.shape();
    let (t, c) = (shape[1], shape[2]);
    weights.check_dim(c, "window_attention")?;

    let q = split_heads(&windows.matmul(&weights.wq)?, weights.heads)?;
    let k = split_heads(&windows.matmul(&weights.wk)?, weights.heads)?;
    let v = split_heads(&windows.matmul(&weights.wv)?, weights.heads)?;

    let (k, v, extra) = match coords {
        Some((kg, vg)) => {
            let extra = kg.dim(2);
            (
                Tensor::concat(&[&k, kg], 2)?,
                Tensor::concat(&[&v, vg], 2)?,
                extra,
            )
        }
        None => (k, v, 0),
    };

    let bias = match &weights.rel_bias {
        Some(rb) => {
            if rb.window_side * rb.window_side != t {
                return Err(Error::Config(format!(
                    "relative bias window {} does not match {t} tokens",
                    rb.window_side
                )));
            }
            Some(rb.build(weights.heads, extra)?)
        }
        None => None,
    };
    let mask_ext = mask.map(|m| {
        if extra > 0 {
            m.extend_keys(extra)
        } else {
            m.clone()
        }
    });

    let out = attend(&q, &k, &v, weights.head_dim, bias.as_ref(), mask_ext.as_ref())?;
    merge_heads(&out)?.matmul(&weights.wo)
}

// ---- raw operators ----------------------------------------------------------

/// Per-window multi-head self-attention on a window set. Raw operator:
/// projections, scores with bias/mask, softmax, values, output projection.
pub fn wsa_attention<T: Scalar>(
    windows: &Tensor<T>,
    weights: &AttentionWeights<T>,
    mask: Option<&KeyMask>,
) -> Result<Tensor<T>> {
    window_attention_core(windows, weights, mask, None)
}

/// Coordinators query the concatenated coordinator+patch key/value space
/// and return their updated values; `patches` is flat `[B, N, C]` and is
/// only read. Raw operator.
pub fn ggca_attention<T: Scalar>(
    coords: &Tensor<T>,
    patches: &Tensor<T>,
    weights: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    let g_shape = coords.shape();
    let p_shape = patches.shape();
    if g_shape.len() != 3 || p_shape.len() != 3 || g_shape[2] != p_shape[2] {
        return Err(Error::Config(format!(
            "ggca: coordinator shape {g_shape:?} incompatible with patch shape {p_shape:?}"
        )));
    }
    weights.check_dim(g_shape[2], "ggca")?;
    if g_shape[0] != p_shape[0] {
        return Err(Error::Config(format!(
            "ggca: batch {} vs {}",
            g_shape[0], p_shape[0]
        )));
    }

    let q = split_heads(&coords.matmul(&weights.wq)?, weights.heads)?;
    let kg = coords.matmul(&weights.wk)?;
    let vg = coords.matmul(&weights.wv)?;
    let kp = patches.matmul(&weights.wk)?;
    let vp = patches.matmul(&weights.wv)?;
    let k = split_heads(&Tensor::concat(&[&kg, &kp], 1)?, weights.heads)?;
    let v = split_heads(&Tensor::concat(&[&vg, &vp], 1)?, weights.heads)?;

    let out = attend(&q, &k, &v, weights.head_dim, None, None)?;
    merge_heads(&out)?.matmul(&weights.wo)
}

/// Window attention over a patch grid with the key/value space of every
/// window augmented by the coordinators. Handles padding internally and
/// returns a grid of the input extents. Raw operator.
pub fn gcwa_attention<T: Scalar>(
    grid: &Tensor<T>,
    coords: Option<&Tensor<T>>,
    weights: &AttentionWeights<T>,
    m_side: usize,
) -> Result<Tensor<T>> {
    let shape = grid.shape();
    if shape.len() != 4 {
        return Err(Error::BadShape {
            op: "gcwa",
            shape,
            detail: "expects [B, h, w, C]".to_string(),
        });
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    weights.check_dim(c, "gcwa")?;

    let (padded, hp, wp, mask) = pad_for_windows(grid, m_side)?;
    let windows = window_partition(&padded, m_side)?;
    let n_windows = (hp / m_side) * (wp / m_side);

    let coords = match coords {
        Some(g) if g.dim(1) > 0 => Some(g),
        _ => None,
    };
    let out = match coords {
        None => window_attention_core(&windows, weights, mask.as_ref(), None)?,
        Some(g) => {
            if g.dim(2) != c || g.dim(0) != b {
                return Err(Error::Config(format!(
                    "gcwa: coordinator shape {:?} incompatible with grid {shape:?}",
                    g.shape()
                )));
            }
            let kg = split_heads(&g.matmul(&weights.wk)?, weights.heads)?;
            let vg = split_heads(&g.matmul(&weights.wv)?, weights.heads)?;
            let kq = broadcast_per_window(&kg, n_windows)?;
            let vq = broadcast_per_window(&vg, n_windows)?;
            window_attention_core(&windows, weights, mask.as_ref(), Some((&kq, &vq)))?
        }
    };

    let grid_out = window_reverse(&out, m_side, hp, wp)?;
    crop_grid(&grid_out, h, w)
}

/// `[B, heads, K, hd]` -> `[B·nW, heads, K, hd]`, repeating per window.
fn broadcast_per_window<T: Scalar>(x: &Tensor<T>, n_windows: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    let (b, heads, k, hd) = (shape[0], shape[1], shape[2], shape[3]);
    x.reshape(&[b, 1, heads, k, hd])?
        .broadcast_to(&[b, n_windows, heads, k, hd])?
        .reshape(&[b * n_windows, heads, k, hd])
}

fn crop_grid<T: Scalar>(grid: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let shape = grid.shape();
    let mut out = grid.clone();
    if shape[1] != h {
        out = out.narrow(1, 0, h)?;
    }
    if shape[2] != w {
        out = out.narrow(2, 0, w)?;
    }
    Ok(out)
}

// ---- wrapped block operators --------------------------------------------------

/// Pre-norm + window self-attention + residual, on a patch grid.
pub struct WsaOp<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub window: usize,
}

impl<T: Scalar> WsaOp<T> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(WsaOp {
            norm: LayerNorm::init(dim),
            attn: AttentionWeights::init(rng, dim, heads, Some(window))?,
            window,
        })
    }

    pub fn forward(&self, grid: &Tensor<T>) -> Result<Tensor<T>> {
        let normed = self.norm.forward(grid)?;
        // same code path as gcwa with no coordinators
        let out = gcwa_attention(&normed, None, &self.attn, self.window)?;
        grid.add(&out)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        use crate::layers::join;
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }
}

/// Pre-norm + coordinator-update cross-attention + residual.
/// Patches are returned exactly as given (pass-through).
pub struct GgcaOp<T: Scalar> {
    pub norm_g: LayerNorm<T>,
    pub norm_p: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
}

impl<T: Scalar> GgcaOp<T> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize) -> Result<Self> {
        Ok(GgcaOp {
            norm_g: LayerNorm::init(dim),
            norm_p: LayerNorm::init(dim),
            attn: AttentionWeights::init(rng, dim, heads, None)?,
        })
    }

    /// `grid` is `[B, h, w, C]`; returns updated coordinators `[B, K, C]`.
    pub fn forward(&self, coords: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = grid.shape();
        let patches = grid.reshape(&[shape[0], shape[1] * shape[2], shape[3]])?;
        let gn = self.norm_g.forward(coords)?;
        let pn = self.norm_p.forward(&patches)?;
        let out = ggca_attention(&gn, &pn, &self.attn)?;
        coords.add(&out)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        use crate::layers::join;
        self.norm_g.visit(&join(prefix, "norm_g"), f);
        self.norm_p.visit(&join(prefix, "norm_p"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }
}

/// How a `GcwaOp` treats the coordinator path; the non-default modes are
/// ablation probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordinatorMode {
    /// Keys/values augmented with coordinators.
    #[default]
    Active,
    /// Coordinators concatenated but fully masked out of the softmax:
    /// the information path is severed while the code path is kept.
    Masked,
    /// Coordinators not concatenated at all; plain window self-attention.
    Off,
}

/// Pre-norm + coordinator-augmented window attention + residual.
/// Coordinators are returned exactly as given (pass-through).
pub struct GcwaOp<T: Scalar> {
    pub norm_p: LayerNorm<T>,
    pub norm_g: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub window: usize,
}

impl<T: Scalar> GcwaOp<T> {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(GcwaOp {
            norm_p: LayerNorm::init(dim),
            norm_g: LayerNorm::init(dim),
            attn: AttentionWeights::init(rng, dim, heads, Some(window))?,
            window,
        })
    }

    pub fn forward(
        &self,
        grid: &Tensor<T>,
        coords: &Tensor<T>,
        mode: CoordinatorMode,
    ) -> Result<Tensor<T>> {
        let normed = self.norm_p.forward(grid)?;
        let out = match mode {
            CoordinatorMode::Off => gcwa_attention(&normed, None, &self.attn, self.window)?,
            CoordinatorMode::Active => {
                let gn = self.norm_g.forward(coords)?;
                gcwa_attention(&normed, Some(&gn), &self.attn, self.window)?
            }
            CoordinatorMode::Masked => {
                let gn = self.norm_g.forward(coords)?;
                gcwa_attention_masked_coords(&normed, &gn, &self.attn, self.window)?
            }
        };
        grid.add(&out)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        use crate::layers::join;
        self.norm_p.visit(&join(prefix, "norm_p"), f);
        self.norm_g.visit(&join(prefix, "norm_g"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }
}

/// GCWA with the coordinator key columns masked out of every window's
/// softmax: computes the augmented scores but gives coordinators zero
/// attention weight. Used by the information-flow probes.
fn gcwa_attention_masked_coords<T: Scalar>(
    grid: &Tensor<T>,
    coords: &Tensor<T>,
    weights: &AttentionWeights<T>,
    m_side: usize,
) -> Result<Tensor<T>> {
    let shape = grid.shape();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    weights.check_dim(c, "gcwa")?;
    let k_coord = coords.dim(1);
    if k_coord == 0 {
        return gcwa_attention(grid, None, weights, m_side);
    }
    if coords.dim(2) != c || coords.dim(0) != b {
        return Err(Error::Config(format!(
            "gcwa: coordinator shape {:?} incompatible with grid {shape:?}",
            coords.shape()
        )));
    }

    let (padded, hp, wp, mask) = pad_for_windows(grid, m_side)?;
    let windows = window_partition(&padded, m_side)?;
    let n_windows = (hp / m_side) * (wp / m_side);
    let t = m_side * m_side;

    let kg = broadcast_per_window(
        &split_heads(&coords.matmul(&weights.wk)?, weights.heads)?,
        n_windows,
    )?;
    let vg = broadcast_per_window(
        &split_heads(&coords.matmul(&weights.wv)?, weights.heads)?,
        n_windows,
    )?;

    // extend the patch mask (or an all-valid one) with K invalid columns
    let base = mask.unwrap_or_else(|| KeyMask::all_valid(n_windows, t));
    let mut valid = Vec::with_capacity(base.windows * (t + k_coord));
    for row in base.valid.chunks(t) {
        valid.extend_from_slice(row);
        valid.extend(std::iter::repeat(false).take(k_coord));
    }
    let mask_coords_off = KeyMask::new(base.windows, t + k_coord, valid)?;

    let q = split_heads(&windows.matmul(&weights.wq)?, weights.heads)?;
    let kw = split_heads(&windows.matmul(&weights.wk)?, weights.heads)?;
    let vw = split_heads(&windows.matmul(&weights.wv)?, weights.heads)?;
    let k = Tensor::concat(&[&kw, &kg], 2)?;
    let v = Tensor::concat(&[&vw, &vg], 2)?;
    let bias = match &weights.rel_bias {
        Some(rb) => Some(rb.build(weights.heads, k_coord)?),
        None => None,
    };
    let out = attend(
        &q,
        &k,
        &v,
        weights.head_dim,
        bias.as_ref(),
        Some(&mask_coords_off),
    )?;
    let out = merge_heads(&out)?.matmul(&weights.wo)?;
    let grid_out = window_reverse(&out, m_side, hp, wp)?;
    crop_grid(&grid_out, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn identity_weights(dim: usize, heads: usize) -> AttentionWeights<f64> {
        let eye = |d: usize| {
            let mut v = vec![0.0; d * d];
            for i in 0..d {
                v[i * d + i] = 1.0;
            }
            Tensor::from_vec(v, &[d, d]).unwrap()
        };
        AttentionWeights {
            wq: eye(dim),
            wk: eye(dim),
            wv: eye(dim),
            wo: eye(dim),
            heads,
            head_dim: dim / heads,
            rel_bias: None,
        }
    }

    #[test]
    fn partition_single_window_row_major() {
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 4, 4, 1]).unwrap();
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.shape(), vec![1, 16, 1]);
        assert_eq!(w.to_vec(), (0..16).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn partition_index_arithmetic() {
        // 4x4 grid, window side 2: token (0,3) -> window 1, position 1
        let mut data = vec![0.0; 16];
        data[3] = 7.0; // row 0, col 3
        let x = Tensor::from_vec(data, &[1, 4, 4, 1]).unwrap();
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(w.shape(), vec![4, 4, 1]);
        assert_eq!(w.data()[4 + 1], 7.0);
    }

    #[test]
    fn partition_reverse_roundtrip_bitwise() {
        let mut rng = Rng::new(31);
        let x: Tensor<f64> = rng.normal(&[2, 6, 4, 3], 1.0);
        let w = window_partition(&x, 2).unwrap();
        let back = window_reverse(&w, 2, 6, 4).unwrap();
        assert_eq!(x.to_vec(), back.to_vec());

        let zeros = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        let z = window_reverse(&window_partition(&zeros, 2).unwrap(), 2, 4, 4).unwrap();
        assert!(z.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reverse_maps_window_permutation_to_cells() {
        // permuting tokens inside one window must permute exactly those cells
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 4, 4, 1]).unwrap();
        let w = window_partition(&x, 2).unwrap();
        let mut data = w.to_vec();
        data.swap(0, 3); // window 0: swap token 0 (cell 0,0) and token 3 (cell 1,1)
        let back = window_reverse(&Tensor::from_vec(data, &[4, 4, 1]).unwrap(), 2, 4, 4).unwrap();
        let got = back.to_vec();
        assert_eq!(got[0], 5.0); // cell (0,0) now holds old (1,1)
        assert_eq!(got[5], 0.0); // cell (1,1) now holds old (0,0)
        assert_eq!(got[3], 3.0); // untouched cell in another window
    }

    #[test]
    fn wsa_single_token_window_degenerates_to_projections() {
        // softmax over one key is 1, so output = W_O(W_V(x))
        let mut rng = Rng::new(5);
        let w = AttentionWeights::<f64>::init(&mut rng, 6, 2, None).unwrap();
        let x: Tensor<f64> = rng.normal(&[4, 1, 6], 1.0);
        let y = wsa_attention(&x, &w, None).unwrap();
        let want = x.matmul(&w.wv).unwrap().matmul(&w.wo).unwrap();
        for (a, b) in y.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wsa_identical_tokens_give_uniform_attention() {
        let mut rng = Rng::new(6);
        let w = AttentionWeights::<f64>::init(&mut rng, 4, 2, None).unwrap();
        let token: Tensor<f64> = rng.normal(&[1, 1, 4], 1.0);
        let repeated = token.broadcast_to(&[1, 5, 4]).unwrap();
        let y = wsa_attention(&repeated, &w, None).unwrap();
        // uniform attention over identical values = the single-token output
        let single = wsa_attention(&token, &w, None).unwrap();
        for tok in 0..5 {
            for c in 0..4 {
                assert!((y.data()[tok * 4 + c] - single.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wsa_windows_do_not_leak() {
        let mut rng = Rng::new(7);
        let w = AttentionWeights::<f64>::init(&mut rng, 4, 2, None).unwrap();
        let x: Tensor<f64> = rng.normal(&[3, 4, 4], 1.0); // 3 windows
        let y = wsa_attention(&x, &w, None).unwrap();
        // zero window 2, windows 0 and 1 must be bitwise unchanged
        let mut data = x.to_vec();
        for v in &mut data[2 * 16..] {
            *v = 0.0;
        }
        let x2 = Tensor::from_vec(data, &[3, 4, 4]).unwrap();
        let y2 = wsa_attention(&x2, &w, None).unwrap();
        assert_eq!(y.data()[..2 * 16], y2.data()[..2 * 16]);
    }

    #[test]
    fn ggca_hand_evaluation_half_x() {
        // K=1, N=1, one head, identity projections: scores equal, weights
        // (1/2, 1/2), output = (0 + x)/2
        let w = identity_weights(1, 1);
        let g = Tensor::from_vec(vec![0.0], &[1, 1, 1]).unwrap();
        let p = Tensor::from_vec(vec![0.8], &[1, 1, 1]).unwrap();
        let out = ggca_attention(&g, &p, &w).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ggca_patch_permutation_invariance() {
        let mut rng = Rng::new(8);
        let w = AttentionWeights::<f64>::init(&mut rng, 6, 3, None).unwrap();
        let g: Tensor<f64> = rng.normal(&[2, 4, 6], 1.0);
        let p: Tensor<f64> = rng.normal(&[2, 9, 6], 1.0);
        let out = ggca_attention(&g, &p, &w).unwrap();

        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let mut data = vec![0.0; 2 * 9 * 6];
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let from = (b * 9 + src) * 6;
                let to = (b * 9 + dst) * 6;
                data[to..to + 6].copy_from_slice(&p.data()[from..from + 6]);
            }
        }
        let p2 = Tensor::from_vec(data, &[2, 9, 6]).unwrap();
        let out2 = ggca_attention(&g, &p2, &w).unwrap();
        for (a, b) in out.data().iter().zip(out2.data().iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn ggca_rows_stay_in_value_envelope() {
        // identity W_O/W_V, single head: each output row is a convex
        // combination of the rows of [V_G; V_P]
        let mut rng = Rng::new(9);
        let w = identity_weights(5, 1);
        let g: Tensor<f64> = rng.normal(&[1, 3, 5], 1.0);
        let p: Tensor<f64> = rng.normal(&[1, 7, 5], 1.0);
        let out = ggca_attention(&g, &p, &w).unwrap();
        for c in 0..5 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for row in 0..3 {
                lo = lo.min(g.data()[row * 5 + c]);
                hi = hi.max(g.data()[row * 5 + c]);
            }
            for row in 0..7 {
                lo = lo.min(p.data()[row * 5 + c]);
                hi = hi.max(p.data()[row * 5 + c]);
            }
            for row in 0..3 {
                let v = out.data()[row * 5 + c];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ggca_op_leaves_patches_untouched() {
        let mut rng = Rng::new(10);
        let op = GgcaOp::<f64>::init(&mut rng, 4, 2).unwrap();
        let g: Tensor<f64> = rng.normal(&[1, 2, 4], 1.0);
        let grid: Tensor<f64> = rng.normal(&[1, 2, 2, 4], 1.0);
        let before = grid.to_vec();
        let _ = op.forward(&g, &grid).unwrap();
        assert_eq!(grid.to_vec(), before); // bitwise pass-through
    }

    #[test]
    fn gcwa_k0_reduces_to_wsa_bitwise() {
        let mut rng = Rng::new(11);
        let w = AttentionWeights::<f64>::init(&mut rng, 4, 2, Some(2)).unwrap();
        let grid: Tensor<f64> = rng.normal(&[2, 4, 4, 4], 1.0);
        let empty = Tensor::<f64>::zeros(&[2, 0, 4]);
        let with_empty = gcwa_attention(&grid, Some(&empty), &w, 2).unwrap();
        let without = gcwa_attention(&grid, None, &w, 2).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&with_empty), bits(&without));
        // and equals wsa on the same windows with shared weights
        let wins = window_partition(&grid, 2).unwrap();
        let wsa_out = wsa_attention(&wins, &w, None).unwrap();
        let wsa_grid = window_reverse(&wsa_out, 2, 4, 4).unwrap();
        assert_eq!(bits(&without), bits(&wsa_grid));
    }

    #[test]
    fn gcwa_hand_evaluation_equal_scores() {
        // window of one patch, one coordinator, identity projections, both
        // values 1 and equal scores: output is 1
        let w = identity_weights(1, 1);
        let grid = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let g = Tensor::from_vec(vec![1.0], &[1, 1, 1]).unwrap();
        let out = gcwa_attention(&grid, Some(&g), &w, 1).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gcwa_masked_coordinators_equal_plain_wsa() {
        let mut rng = Rng::new(12);
        let w = AttentionWeights::<f64>::init(&mut rng, 6, 2, Some(2)).unwrap();
        let grid: Tensor<f64> = rng.normal(&[1, 4, 4, 6], 1.0);
        let g: Tensor<f64> = rng.normal(&[1, 3, 6], 1.0);
        let masked = gcwa_attention_masked_coords(&grid, &g, &w, 2).unwrap();
        let plain = gcwa_attention(&grid, None, &w, 2).unwrap();
        for (a, b) in masked.data().iter().zip(plain.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_grid_attention_runs_and_crops() {
        let mut rng = Rng::new(13);
        let w = AttentionWeights::<f64>::init(&mut rng, 4, 2, Some(4)).unwrap();
        let grid: Tensor<f64> = rng.normal(&[2, 2, 2, 4], 1.0); // needs padding to 4x4
        let g: Tensor<f64> = rng.normal(&[2, 2, 4], 1.0);
        let out = gcwa_attention(&grid, Some(&g), &w, 4).unwrap();
        assert_eq!(out.shape(), vec![2, 2, 2, 4]);
    }
}

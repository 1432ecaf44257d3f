//! Layer building blocks shared by the vision and language towers.
//!
//! Weights are stored `d_in × d_out` and activations are `tokens × dim`, so
//! a linear layer is `x · W + b`. Spatial feature maps are flattened to
//! `(height · width) × channels` in row-major pixel order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Matrix, Var, ZERO_INDEX};
use crate::error::Result;
use crate::params::{init, ParamGroup, ParamStore, Session};

pub const LN_EPS: f64 = 1e-5;

pub fn add_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    group: ParamGroup,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), group, init::fan_in(rng, d_in, d_out))?;
    store.insert(format!("{prefix}.b"), group, init::zeros(1, d_out))
}

pub fn add_layer_norm(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    group: ParamGroup,
) -> Result<()> {
    store.insert(format!("{prefix}.g"), group, init::ones(1, dim))?;
    store.insert(format!("{prefix}.b"), group, init::zeros(1, dim))
}

pub fn linear<'t>(s: &Session<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    Ok(x.matmul(w).add_row(b))
}

pub fn layer_norm<'t>(s: &Session<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = s.param(&format!("{prefix}.g"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    Ok(x.layer_norm_rows(LN_EPS).mul_row(g).add_row(b))
}

/// Row-major `rows × cols` mask that allows key `j` for query `i` iff
/// `j <= i` and neither position is padding.
pub fn causal_mask(len: usize, pad: Option<&[bool]>) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            let padded = pad.is_some_and(|p| p[j]);
            m[i * len + j] = !padded;
        }
    }
    m
}

/// Multi-head self-attention. `project` maps a site name (`q`, `k`, `v`,
/// `o`) and an input to the projected activations.
pub fn multi_head_attention<'t, F>(
    x: Var<'t>,
    heads: usize,
    allowed: Option<&[bool]>,
    project: F,
) -> Result<Var<'t>>
where
    F: Fn(&str, Var<'t>) -> Result<Var<'t>>,
{
    let dim = x.cols();
    let head_dim = dim / heads;
    let q = project("q", x)?;
    let k = project("k", x)?;
    let v = project("v", x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * head_dim, (h + 1) * head_dim);
        let scores = q.slice_cols(a, b).matmul_t(k.slice_cols(a, b)).scale(scale);
        let probs = match allowed {
            Some(m) => scores.masked_softmax_rows(m),
            None => scores.softmax_rows(),
        };
        outs.push(probs.matmul(v.slice_cols(a, b)));
    }
    let joined = x.tape().concat_cols(&outs);
    project("o", joined)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum IndexKind {
    Im2Col3,
    Upsample2,
    Patchify,
}

type IndexKey = (IndexKind, usize, usize, usize);

thread_local! {
    static INDEX_CACHE: RefCell<HashMap<IndexKey, Arc<Vec<usize>>>> =
        RefCell::new(HashMap::new());
}

fn cached(
    kind: IndexKind,
    h: usize,
    w: usize,
    c: usize,
    build: impl FnOnce() -> Vec<usize>,
) -> Arc<Vec<usize>> {
    INDEX_CACHE.with(|cache| {
        Arc::clone(
            cache
                .borrow_mut()
                .entry((kind, h, w, c))
                .or_insert_with(|| Arc::new(build())),
        )
    })
}

/// Gather index turning an `(h·w) × c` map into `(h·w) × (9·c)` 3×3
/// neighborhoods with zero padding.
pub fn im2col3_index(h: usize, w: usize, c: usize) -> Arc<Vec<usize>> {
    cached(IndexKind::Im2Col3, h, w, c, || {
        let mut idx = Vec::with_capacity(h * w * 9 * c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((yy as usize) * w + xx as usize) * c + ch
                            } else {
                                ZERO_INDEX
                            });
                        }
                    }
                }
            }
        }
        idx
    })
}

/// Nearest-neighbor 2× upsampling index for an `(h·w) × c` map.
pub fn upsample2_index(h: usize, w: usize, c: usize) -> Arc<Vec<usize>> {
    cached(IndexKind::Upsample2, h, w, c, || {
        let mut idx = Vec::with_capacity(4 * h * w * c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = (y / 2) * w + x / 2;
                idx.extend((0..c).map(|ch| src * c + ch));
            }
        }
        idx
    })
}

/// Gather index turning an `(size·size) × c` image into
/// `(size/patch)^2 × (patch·patch·c)` patch rows in raster order.
pub fn patchify_index(size: usize, patch: usize, c: usize) -> Arc<Vec<usize>> {
    cached(IndexKind::Patchify, size, patch, c, || {
        let g = size / patch;
        let mut idx = Vec::with_capacity(size * size * c);
        for py in 0..g {
            for px in 0..g {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let pixel = (py * patch + dy) * size + px * patch + dx;
                        idx.extend((0..c).map(|ch| pixel * c + ch));
                    }
                }
            }
        }
        idx
    })
}

pub fn add_conv3x3(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    group: ParamGroup,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(
        format!("{prefix}.w"),
        group,
        init::fan_in(rng, 9 * c_in, c_out),
    )?;
    store.insert(format!("{prefix}.b"), group, init::zeros(1, c_out))
}

/// 3×3 same-padding convolution over an `(h·w) × c_in` map.
pub fn conv3x3<'t>(
    s: &Session<'t>,
    prefix: &str,
    x: Var<'t>,
    h: usize,
    w: usize,
) -> Result<Var<'t>> {
    let c = x.cols();
    let cols = x.gather(h * w, 9 * c, im2col3_index(h, w, c));
    linear(s, prefix, cols)
}

pub fn upsample2<'t>(x: Var<'t>, h: usize, w: usize) -> Var<'t> {
    let c = x.cols();
    x.gather(4 * h * w, c, upsample2_index(h, w, c))
}

/// Averaging matrix mapping a `g × g` grid to a `(g/2) × (g/2)` grid.
pub fn avg_pool2_matrix(g: usize) -> Matrix {
    let half = g / 2;
    let mut m = Matrix::zeros((half * half, g * g));
    for y in 0..g {
        for x in 0..g {
            m[[(y / 2) * half + x / 2, y * g + x]] = 0.25;
        }
    }
    m
}

/// Averaging matrix mapping an `h × w` map to `bands` horizontal bands.
pub fn band_pool_matrix(h: usize, w: usize, bands: usize) -> Matrix {
    let mut m = Matrix::zeros((bands, h * w));
    for b in 0..bands {
        let (y0, y1) = (
            b * h / bands,
            ((b + 1) * h / bands).max(b * h / bands + 1).min(h),
        );
        let n = ((y1 - y0) * w) as f64;
        for y in y0..y1 {
            for x in 0..w {
                m[[b, y * w + x]] = 1.0 / n;
            }
        }
    }
    m
}

/// Parameters of a pre-norm transformer block under `prefix`:
/// `ln1`, `attn.{q,k,v,o}`, `ln2`, `mlp.{up,down}`.
pub fn add_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    group: ParamGroup,
    rng: &mut impl Rng,
) -> Result<()> {
    add_layer_norm(store, &format!("{prefix}.ln1"), dim, group)?;
    for site in ["q", "k", "v", "o"] {
        add_linear(
            store,
            &format!("{prefix}.attn.{site}"),
            dim,
            dim,
            group,
            rng,
        )?;
    }
    add_layer_norm(store, &format!("{prefix}.ln2"), dim, group)?;
    add_linear(store, &format!("{prefix}.mlp.up"), dim, hidden, group, rng)?;
    add_linear(
        store,
        &format!("{prefix}.mlp.down"),
        hidden,
        dim,
        group,
        rng,
    )
}

/// Linear map applied at a named site; receives the full parameter prefix.
pub type LinearFn<'a, 't> = &'a dyn Fn(&str, Var<'t>) -> Result<Var<'t>>;

/// `x + attn(ln1(x))`, then `+ mlp(ln2(x))`, with every projection routed
/// through `lin`.
pub fn block<'t>(
    s: &Session<'t>,
    prefix: &str,
    x: Var<'t>,
    heads: usize,
    allowed: Option<&[bool]>,
    lin: LinearFn<'_, 't>,
) -> Result<Var<'t>> {
    let h = layer_norm(s, &format!("{prefix}.ln1"), x)?;
    let attn = multi_head_attention(h, heads, allowed, |site, v| {
        lin(&format!("{prefix}.attn.{site}"), v)
    })?;
    let x = x + attn;
    let h = layer_norm(s, &format!("{prefix}.ln2"), x)?;
    let up = lin(&format!("{prefix}.mlp.up"), h)?.gelu();
    Ok(x + lin(&format!("{prefix}.mlp.down"), up)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn im2col_center_tap_is_identity() {
        let (h, w, c) = (3, 4, 2);
        let x = Matrix::from_shape_fn((h * w, c), |(i, j)| (i * c + j) as f64 + 1.0);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let cols = v.gather(h * w, 9 * c, im2col3_index(h, w, c)).value();
        for i in 0..h * w {
            for ch in 0..c {
                assert_eq!(cols[[i, 4 * c + ch]], x[[i, ch]]);
            }
        }
        // top-left pixel has zero padding above and to the left
        assert_eq!(cols[[0, 0]], 0.0);
    }

    #[test]
    fn patchify_groups_pixels_by_patch() {
        let idx = patchify_index(4, 2, 1);
        // first patch: pixels (0,0), (0,1), (1,0), (1,1)
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
        assert_eq!(&idx[4..8], &[2, 3, 6, 7]);
        let mut sorted = idx.to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let tape = Tape::new();
        let v = tape.constant(Matrix::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = upsample2(v, 2, 2).value();
        let col: Vec<f64> = up.column(0).to_vec();
        assert_eq!(
            col,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn pooling_matrices_are_row_stochastic() {
        for m in [
            avg_pool2_matrix(8),
            band_pool_matrix(32, 32, 4),
            band_pool_matrix(5, 3, 4),
        ] {
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_respects_padding() {
        let m = causal_mask(3, Some(&[true, false, false]));
        assert_eq!(
            m,
            vec![false, false, false, false, true, false, false, true, true]
        );
    }
}

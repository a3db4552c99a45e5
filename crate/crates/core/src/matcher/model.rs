//! Transformer over concatenated multi-view patch tokens.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{
    attention_scores, bce_loss, gelu, gelu_backward, layer_norm, layer_norm_backward, mse_loss,
    sigmoid, softmax_backward, softmax_rows, LnCache, RopeTable,
};
use super::{Fusion, MatcherConfig};
use crate::error::{Error, Result};
use crate::image::DrrImage;

/// Non-overlapping square patches of one image, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    /// One flattened patch (row-major within the patch) per token.
    pub data: Array2<f64>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .collect()
    }

    /// Inverse of [`extract_patches`].
    pub fn reassemble(&self) -> Vec<f64> {
        let (p, nu) = (self.patch, self.cols * self.patch);
        let mut out = vec![0.0; self.len() * p * p];
        for (t, row) in self.data.rows().into_iter().enumerate() {
            let (r, c) = (t / self.cols, t % self.cols);
            for (k, &v) in row.iter().enumerate() {
                out[(c * p + k % p) + nu * (r * p + k / p)] = v;
            }
        }
        out
    }
}

/// Splits an `nu`×`nv` image (u fastest) into `patch`×`patch` tiles. Grid
/// rows follow `v` and columns follow `u`, so token `c + cols * r` lines up
/// with coarse detector pixel `iu + nu * iv` when binning by `patch`.
pub fn extract_patches(pixels: &[f64], nu: usize, nv: usize, patch: usize) -> Result<Patches> {
    if patch == 0 || nu % patch != 0 || nv % patch != 0 {
        return Err(Error::invalid(format!(
            "image {nu}x{nv} is not divisible by patch size {patch}"
        )));
    }
    if pixels.len() != nu * nv {
        return Err(Error::Shape {
            expected: (nu, nv),
            got: (pixels.len(), 1),
        });
    }
    let (rows, cols) = (nv / patch, nu / patch);
    let data = Array2::from_shape_fn((rows * cols, patch * patch), |(t, k)| {
        let (r, c) = (t / cols, t % cols);
        pixels[(c * patch + k % patch) + nu * (r * patch + k / patch)]
    });
    Ok(Patches {
        rows,
        cols,
        patch,
        data,
    })
}

pub fn extract_image_patches(img: &DrrImage, patch: usize) -> Result<Patches> {
    extract_patches(&img.pixels, img.nu, img.nv, patch)
}

/// Pre-embedding token sequence: image tokens grouped by view, preceded by
/// an optional classification token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub patches: Array2<f64>,
    pub positions: Vec<(usize, usize)>,
    pub views: Vec<usize>,
    pub class_token: bool,
}

impl TokenSequence {
    /// Concatenates views in order; the i-th entry gets view id `ids[i]`.
    pub fn new(views: &[(&Patches, usize)], class_token: bool) -> Result<Self> {
        let Some((first, _)) = views.first() else {
            return Err(Error::invalid("token sequence needs at least one view"));
        };
        let dim = first.data.ncols();
        if views.iter().any(|(p, _)| p.data.ncols() != dim) {
            return Err(Error::invalid("views have different patch sizes"));
        }
        let n: usize = views.iter().map(|(p, _)| p.len()).sum();
        let mut patches = Array2::zeros((n, dim));
        let mut positions = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut at = 0;
        for (p, id) in views {
            patches.slice_mut(s![at..at + p.len(), ..]).assign(&p.data);
            positions.extend(p.positions());
            ids.extend(std::iter::repeat(*id).take(p.len()));
            at += p.len();
        }
        Ok(TokenSequence {
            patches,
            positions,
            views: ids,
            class_token,
        })
    }

    /// Total token count including the classification token.
    pub fn len(&self) -> usize {
        self.views.len() + self.offset()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self) -> usize {
        self.class_token as usize
    }

    /// Output rows belonging to view `id`, which must be contiguous.
    pub fn view_range(&self, id: usize) -> Range<usize> {
        let start = self.views.iter().position(|&v| v == id).unwrap_or(self.views.len());
        let end = start + self.views[start..].iter().take_while(|&&v| v == id).count();
        start + self.offset()..end + self.offset()
    }

    fn rope_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        if self.class_token {
            out.push((0, 0));
        }
        out.extend_from_slice(&self.positions);
        out
    }
}

/// Full-sequence bias with `c` (view-0 × view-1 tokens) in the view0→view1
/// block, its transpose in the view1→view0 block, and zeros elsewhere.
pub fn bias_matrix(seq: &TokenSequence, c: &Array2<f64>) -> Result<Array2<f64>> {
    let (r0, r1) = (seq.view_range(0), seq.view_range(1));
    if c.dim() != (r0.len(), r1.len()) {
        return Err(Error::Shape {
            expected: (r0.len(), r1.len()),
            got: c.dim(),
        });
    }
    let mut b = Array2::zeros((seq.len(), seq.len()));
    b.slice_mut(s![r0.clone(), r1.clone()]).assign(c);
    b.slice_mut(s![r1, r0]).assign(&c.t());
    Ok(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Scale of the attention bias, shared by all heads of the layer.
    pub alpha: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    pub config: MatcherConfig,
    pub embed_w: Array2<f64>,
    pub embed_b: Array1<f64>,
    pub view_emb: Array2<f64>,
    pub cls: Array1<f64>,
    pub layers: Vec<Layer>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head_w: Array1<f64>,
    pub head_b: Array1<f64>,
}

pub const MAX_VIEWS: usize = 2;

fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

fn uniform1(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.gen_range(-a..a))
}

impl Layer {
    fn init(d: usize, hidden: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        let a = (3.0 / d as f64).sqrt();
        let ah = (3.0 / hidden as f64).sqrt();
        Layer {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: uniform2(rng, d, d, a),
            wk: uniform2(rng, d, d, a),
            wv: uniform2(rng, d, d, a),
            wo: uniform2(rng, d, d, a),
            bo: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: uniform2(rng, d, hidden, a),
            b1: Array1::zeros(hidden),
            w2: uniform2(rng, hidden, d, ah),
            b2: Array1::zeros(d),
            alpha: Array1::from_elem(1, alpha),
        }
    }

    fn tensors(&self) -> [(&'static str, &[f64], Vec<usize>); 14] {
        macro_rules! t {
            ($n:literal, $f:ident) => {
                ($n, self.$f.as_slice().unwrap(), self.$f.shape().to_vec())
            };
        }
        [
            t!("ln1.g", ln1_g),
            t!("ln1.b", ln1_b),
            t!("wq", wq),
            t!("wk", wk),
            t!("wv", wv),
            t!("wo", wo),
            t!("bo", bo),
            t!("ln2.g", ln2_g),
            t!("ln2.b", ln2_b),
            t!("w1", w1),
            t!("b1", b1),
            t!("w2", w2),
            t!("b2", b2),
            t!("alpha", alpha),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 14] {
        [
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.bo.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.alpha.as_slice_mut().unwrap(),
        ]
    }
}

struct LayerCache {
    ln1: LnCache,
    h: Array2<f64>,
    qr: Array2<f64>,
    kr: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    rope: RopeTable,
    bias: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

impl ForwardCache {
    /// Post-softmax attention of every head in `layer`.
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        &self.layers[layer].probs
    }
}

/// Normalized features of the cosine head.
pub struct CosineCache {
    fhat: Array2<f64>,
    ghat: Array2<f64>,
    fnorm: Array1<f64>,
    gnorm: Array1<f64>,
}

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut xhat = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    let mut zero = 0;
    for (mut row, n) in xhat.rows_mut().into_iter().zip(norms.iter_mut()) {
        *n = row.dot(&row).sqrt();
        if *n > 0.0 {
            row /= *n;
        } else {
            zero += 1;
        }
    }
    if zero > 0 {
        log::debug!("{zero} zero-norm feature(s); their cosine is taken as 0");
    }
    (xhat, norms)
}

/// `(cos(f_i, g_j) + 1) / 2` for every pair of rows.
pub fn cosine_head(f: &Array2<f64>, g: &Array2<f64>) -> (Array2<f64>, CosineCache) {
    let (fhat, fnorm) = normalize_rows(f);
    let (ghat, gnorm) = normalize_rows(g);
    let pred = (fhat.dot(&ghat.t()) + 1.0) * 0.5;
    (
        pred,
        CosineCache {
            fhat,
            ghat,
            fnorm,
            gnorm,
        },
    )
}

fn unnormalize_grad(dhat: &mut Array2<f64>, hat: &Array2<f64>, norms: &Array1<f64>) {
    for ((mut d, h), &n) in dhat.rows_mut().into_iter().zip(hat.rows()).zip(norms) {
        if n > 0.0 {
            let dot = d.dot(&h);
            d.scaled_add(-dot, &h);
            d /= n;
        } else {
            d.fill(0.0);
        }
    }
}

/// Returns `(df, dg)` given the gradient of the predictions.
pub fn cosine_head_backward(dpred: &Array2<f64>, cache: &CosineCache) -> (Array2<f64>, Array2<f64>) {
    let dc = dpred * 0.5;
    let mut df = dc.dot(&cache.ghat);
    let mut dg = dc.t().dot(&cache.fhat);
    unnormalize_grad(&mut df, &cache.fhat, &cache.fnorm);
    unnormalize_grad(&mut dg, &cache.ghat, &cache.gnorm);
    (df, dg)
}

impl MatcherModel {
    pub fn new(config: &MatcherConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let pd = config.patch_size * config.patch_size;
        let hidden = config.ffn_mult * d;
        let embed_w = uniform2(&mut rng, pd, d, (3.0 / pd as f64).sqrt());
        let view_emb = uniform2(&mut rng, MAX_VIEWS, d, 0.5);
        let cls = uniform1(&mut rng, d, 0.5);
        let layers = (0..config.layers)
            .map(|_| Layer::init(d, hidden, config.alpha_init, &mut rng))
            .collect();
        let head_w = uniform1(&mut rng, d, (3.0 / d as f64).sqrt());
        Ok(MatcherModel {
            config: config.clone(),
            embed_w,
            embed_b: Array1::zeros(d),
            view_emb,
            cls,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head_w,
            head_b: Array1::zeros(1),
        })
    }

    /// All-zero model with the same shapes, used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        macro_rules! t {
            ($n:literal, $f:ident) => {
                ($n.to_string(), self.$f.shape().to_vec(), self.$f.as_slice().unwrap())
            };
        }
        let mut out = vec![
            t!("embed.w", embed_w),
            t!("embed.b", embed_b),
            t!("view_emb", view_emb),
            t!("cls", cls),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, data, shape) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), shape, data));
            }
        }
        out.extend([
            t!("lnf.g", lnf_g),
            t!("lnf.b", lnf_b),
            t!("head.w", head_w),
            t!("head.b", head_b),
        ]);
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.embed_w.as_slice_mut().unwrap(),
            self.embed_b.as_slice_mut().unwrap(),
            self.view_emb.as_slice_mut().unwrap(),
            self.cls.as_slice_mut().unwrap(),
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.head_w.as_slice_mut().unwrap(),
            self.head_b.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &MatcherModel) {
        for (a, (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// First tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.2.iter().any(|v| !v.is_finite()))
            .map(|t| t.0)
    }

    /// Runs the transformer; returns the final normalized token features.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        bias: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let cfg = &self.config;
        let (t, d) = (seq.len(), cfg.embed_dim);
        if seq.patches.ncols() != self.embed_w.nrows() {
            return Err(Error::Shape {
                expected: (seq.views.len(), self.embed_w.nrows()),
                got: seq.patches.dim(),
            });
        }
        if let Some(b) = bias {
            if b.dim() != (t, t) {
                return Err(Error::Shape {
                    expected: (t, t),
                    got: b.dim(),
                });
            }
        }
        if seq.views.iter().any(|&v| v >= MAX_VIEWS) {
            return Err(Error::invalid("view id out of range"));
        }
        let off = seq.offset();
        let mut x = Array2::zeros((t, d));
        x.slice_mut(s![off.., ..])
            .assign(&(seq.patches.dot(&self.embed_w) + &self.embed_b));
        for (i, &v) in seq.views.iter().enumerate() {
            let mut row = x.row_mut(off + i);
            row += &self.view_emb.row(v);
        }
        if seq.class_token {
            x.row_mut(0).assign(&self.cls);
        }

        let rope = RopeTable::new(&seq.rope_positions(), cfg.head_dim, cfg.rope_base)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = self.layer_forward(layer, &x, &rope, bias);
            x = next;
            caches.push(cache);
        }
        let (out, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        Ok((
            out,
            ForwardCache {
                rope,
                bias: bias.cloned(),
                layers: caches,
                lnf,
            },
        ))
    }

    fn layer_forward(
        &self,
        l: &Layer,
        x: &Array2<f64>,
        rope: &RopeTable,
        bias: Option<&Array2<f64>>,
    ) -> (Array2<f64>, LayerCache) {
        let (heads, hd) = (self.config.heads, self.config.head_dim);
        let (h, ln1) = layer_norm(x, &l.ln1_g, &l.ln1_b);
        let mut qr = h.dot(&l.wq);
        let mut kr = h.dot(&l.wk);
        let v = h.dot(&l.wv);
        rope.apply(&mut qr, heads, false);
        rope.apply(&mut kr, heads, false);
        let mut o = Array2::zeros(x.dim());
        let mut probs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let cols = s![.., hh * hd..(hh + 1) * hd];
            let mut sc = attention_scores(qr.slice(cols), kr.slice(cols));
            if let Some(c) = bias {
                sc.scaled_add(l.alpha[0], c);
            }
            softmax_rows(&mut sc);
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let x1 = x + &(o.dot(&l.wo) + &l.bo);
        let (h2, ln2) = layer_norm(&x1, &l.ln2_g, &l.ln2_b);
        let z = h2.dot(&l.w1) + &l.b1;
        let g = gelu(&z);
        let x2 = &x1 + &(g.dot(&l.w2) + &l.b2);
        (
            x2,
            LayerCache {
                ln1,
                h,
                qr,
                kr,
                v,
                probs,
                o,
                ln2,
                h2,
                z,
                g,
            },
        )
    }

    /// Gradients of every parameter given the gradient of the forward output.
    pub fn backward(&self, seq: &TokenSequence, cache: &ForwardCache, dout: &Array2<f64>) -> MatcherModel {
        let mut grads = self.zeros_like();
        let (mut dx, dg, db) = layer_norm_backward(dout, &self.lnf_g, &cache.lnf);
        grads.lnf_g = dg;
        grads.lnf_b = db;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, lg) = self.layer_backward(layer, &cache.layers[i], &cache.rope, cache.bias.as_ref(), &dx);
            dx = next;
            grads.layers[i] = lg;
        }
        let off = seq.offset();
        let dimg = dx.slice(s![off.., ..]);
        grads.embed_w = seq.patches.t().dot(&dimg);
        grads.embed_b = dimg.sum_axis(Axis(0));
        for (i, &v) in seq.views.iter().enumerate() {
            let mut row = grads.view_emb.row_mut(v);
            row += &dimg.row(i);
        }
        if seq.class_token {
            grads.cls = dx.row(0).to_owned();
        }
        grads
    }

    fn layer_backward(
        &self,
        l: &Layer,
        c: &LayerCache,
        rope: &RopeTable,
        bias: Option<&Array2<f64>>,
        dx2: &Array2<f64>,
    ) -> (Array2<f64>, Layer) {
        let (heads, hd) = (self.config.heads, self.config.head_dim);
        let w2 = c.g.t().dot(dx2);
        let b2 = dx2.sum_axis(Axis(0));
        let dz = gelu_backward(&c.z, &dx2.dot(&l.w2.t()));
        let w1 = c.h2.t().dot(&dz);
        let b1 = dz.sum_axis(Axis(0));
        let (dx1_ln, ln2_g, ln2_b) = layer_norm_backward(&dz.dot(&l.w1.t()), &l.ln2_g, &c.ln2);
        let dx1 = dx2 + &dx1_ln;

        let wo = c.o.t().dot(&dx1);
        let bo = dx1.sum_axis(Axis(0));
        let d_o = dx1.dot(&l.wo.t());
        let mut dqr = Array2::zeros(c.qr.dim());
        let mut dkr = Array2::zeros(c.kr.dim());
        let mut dv = Array2::zeros(c.v.dim());
        let mut dalpha = 0.0;
        let scale = 1.0 / (hd as f64).sqrt();
        for hh in 0..heads {
            let cols = s![.., hh * hd..(hh + 1) * hd];
            let p = &c.probs[hh];
            let doh = d_o.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = softmax_backward(p, &doh.dot(&c.v.slice(cols).t()));
            if let Some(b) = bias {
                dalpha += (&ds * b).sum();
            }
            ds *= scale;
            dqr.slice_mut(cols).assign(&ds.dot(&c.kr.slice(cols)));
            dkr.slice_mut(cols).assign(&ds.t().dot(&c.qr.slice(cols)));
        }
        rope.apply(&mut dqr, heads, true);
        rope.apply(&mut dkr, heads, true);
        let wq = c.h.t().dot(&dqr);
        let wk = c.h.t().dot(&dkr);
        let wv = c.h.t().dot(&dv);
        let dh = dqr.dot(&l.wq.t()) + dkr.dot(&l.wk.t()) + dv.dot(&l.wv.t());
        let (dx_ln, ln1_g, ln1_b) = layer_norm_backward(&dh, &l.ln1_g, &c.ln1);
        (
            dx1 + dx_ln,
            Layer {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
                alpha: Array1::from_elem(1, dalpha),
            },
        )
    }

    fn pair_sequence(&self, p1: &Patches, p2: &Patches, class_token: bool) -> Result<TokenSequence> {
        TokenSequence::new(&[(p1, 0), (p2, 1)], class_token)
    }

    /// Predicted correspondence in `[0, 1]`, view-1 tokens by view-2 tokens.
    pub fn predict_correspondence(&self, p1: &Patches, p2: &Patches) -> Result<Array2<f64>> {
        let seq = self.pair_sequence(p1, p2, false)?;
        let (out, _) = self.forward(&seq, None)?;
        let f = out.slice(s![seq.view_range(0), ..]).to_owned();
        let g = out.slice(s![seq.view_range(1), ..]).to_owned();
        Ok(cosine_head(&f, &g).0)
    }

    /// MSE between predicted and target correspondence, with gradients.
    pub fn correspondence_loss_grad(
        &self,
        p1: &Patches,
        p2: &Patches,
        target: &Array2<f64>,
    ) -> Result<(f64, MatcherModel)> {
        let seq = self.pair_sequence(p1, p2, false)?;
        let (out, cache) = self.forward(&seq, None)?;
        let (r0, r1) = (seq.view_range(0), seq.view_range(1));
        let f = out.slice(s![r0.clone(), ..]).to_owned();
        let g = out.slice(s![r1.clone(), ..]).to_owned();
        let (pred, cc) = cosine_head(&f, &g);
        if pred.dim() != target.dim() {
            return Err(Error::Shape {
                expected: pred.dim(),
                got: target.dim(),
            });
        }
        let loss = mse_loss(&pred, target);
        let dpred = (&pred - target) * (2.0 / pred.len() as f64);
        let (df, dg) = cosine_head_backward(&dpred, &cc);
        let mut dout = Array2::zeros(out.dim());
        dout.slice_mut(s![r0, ..]).assign(&df);
        dout.slice_mut(s![r1, ..]).assign(&dg);
        Ok((loss, self.backward(&seq, &cache, &dout)))
    }

    /// Sequences evaluated for a fusion mode, with the bias each receives.
    fn class_sequences(
        &self,
        p1: &Patches,
        p2: &Patches,
        fusion: Fusion,
        c_bias: Option<&Array2<f64>>,
    ) -> Result<Vec<(TokenSequence, Option<Array2<f64>>)>> {
        Ok(match fusion {
            Fusion::Single => vec![(TokenSequence::new(&[(p1, 0)], true)?, None)],
            Fusion::Late => vec![
                (TokenSequence::new(&[(p1, 0)], true)?, None),
                (TokenSequence::new(&[(p2, 1)], true)?, None),
            ],
            Fusion::Early => {
                let seq = self.pair_sequence(p1, p2, true)?;
                let b = c_bias.map(|c| bias_matrix(&seq, c)).transpose()?;
                vec![(seq, b)]
            }
        })
    }

    fn logit(&self, out: &Array2<f64>) -> f64 {
        out.row(0).dot(&self.head_w) + self.head_b[0]
    }

    /// Logits of the classification head: one for single and early fusion,
    /// one per view for late fusion.
    pub fn class_logits(
        &self,
        p1: &Patches,
        p2: &Patches,
        fusion: Fusion,
        c_bias: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>> {
        self.class_sequences(p1, p2, fusion, c_bias)?
            .iter()
            .map(|(seq, b)| Ok(self.logit(&self.forward(seq, b.as_ref())?.0)))
            .collect()
    }

    /// Anomaly probability; late fusion averages per-view probabilities.
    pub fn classify(
        &self,
        p1: &Patches,
        p2: &Patches,
        fusion: Fusion,
        c_bias: Option<&Array2<f64>>,
    ) -> Result<f64> {
        let logits = self.class_logits(p1, p2, fusion, c_bias)?;
        Ok(logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len() as f64)
    }

    /// Binary cross-entropy (averaged over per-view heads for late fusion)
    /// with gradients.
    pub fn class_loss_grad(
        &self,
        p1: &Patches,
        p2: &Patches,
        label: bool,
        fusion: Fusion,
        c_bias: Option<&Array2<f64>>,
    ) -> Result<(f64, MatcherModel)> {
        let seqs = self.class_sequences(p1, p2, fusion, c_bias)?;
        let n = seqs.len() as f64;
        let y = if label { 1.0 } else { 0.0 };
        let mut loss = 0.0;
        let mut grads = self.zeros_like();
        for (seq, b) in &seqs {
            let (out, cache) = self.forward(seq, b.as_ref())?;
            let z = self.logit(&out);
            loss += bce_loss(z, label) / n;
            let dz = (sigmoid(z) - y) / n;
            let mut dout = Array2::zeros(out.dim());
            dout.row_mut(0).assign(&(&self.head_w * dz));
            let mut g = self.backward(seq, &cache, &dout);
            g.head_w = out.row(0).to_owned() * dz;
            g.head_b[0] = dz;
            grads.accumulate(&g);
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> MatcherConfig {
        MatcherConfig {
            patch_size: 2,
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            layers: 2,
            ..MatcherConfig::default()
        }
    }

    fn ramp(n: usize, offset: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + offset) * 0.37).sin().abs()).collect()
    }

    #[test]
    fn patch_examples() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let p = extract_patches(&img, 4, 4, 2).unwrap();
        assert_eq!(p.data.dim(), (4, 4));
        assert_eq!(p.data.row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.positions()[1], (0, 1));
        assert_eq!(p.reassemble(), img);

        let whole = extract_patches(&img, 4, 4, 4).unwrap();
        assert_eq!(whole.data.dim(), (1, 16));
        assert_eq!(whole.data.row(0).to_vec(), img);

        let rect: Vec<f64> = (0..24).map(f64::from).collect();
        assert_eq!(extract_patches(&rect, 6, 4, 2).unwrap().reassemble(), rect);
        assert!(extract_patches(&img, 4, 4, 3).is_err());
    }

    #[test]
    fn bias_blocks() {
        let a = extract_patches(&ramp(8, 0.0), 4, 2, 2).unwrap();
        let b = extract_patches(&ramp(8, 1.0), 4, 2, 2).unwrap();
        let seq = TokenSequence::new(&[(&a, 0), (&b, 1)], true).unwrap();
        let c = ndarray::array![[0.1, 0.2], [0.3, 0.4]];
        let m = bias_matrix(&seq, &c).unwrap();
        assert_eq!(m.dim(), (5, 5));
        assert_eq!(m[[1, 4]], 0.2);
        assert_eq!(m[[4, 1]], 0.2);
        assert_eq!(m[[3, 2]], 0.3);
        assert_eq!(m.row(0).sum() + m.column(0).sum(), 0.0);
        assert_eq!(m[[1, 2]], 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let m = MatcherModel::new(&tiny_config()).unwrap();
        let mut z = m.zeros_like();
        z.assign_flat(&m.flatten());
        assert_eq!(z, m);
        assert_eq!(m.tensors().len(), m.clone().tensors_mut().len());
    }

    #[test]
    fn cosine_head_examples() {
        let f = ndarray::array![[1.0, 2.0], [0.0, 1.0], [0.0, 0.0]];
        let g = ndarray::array![[2.0, 4.0], [0.0, -3.0], [5.0, 0.0]];
        let (p, _) = cosine_head(&f, &g);
        assert!((p[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(p[[1, 1]], 0.0);
        assert_eq!(p[[1, 2]], 0.5);
        assert_eq!(p.row(2).to_vec(), vec![0.5; 3]);
    }

    #[test]
    fn identical_views_predict_one_on_matching_tokens() {
        // No view embedding and no layers: equal patches give equal features.
        let mut cfg = tiny_config();
        cfg.layers = 0;
        let mut m = MatcherModel::new(&cfg).unwrap();
        m.view_emb.fill(0.0);
        let a = extract_patches(&ramp(8, 0.0), 4, 2, 2).unwrap();
        let p = m.predict_correspondence(&a, &a).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-12 && (p[[1, 1]] - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn alpha_zero_matches_unbiased() {
        let mut m = MatcherModel::new(&tiny_config()).unwrap();
        for l in &mut m.layers {
            l.alpha[0] = 0.0;
        }
        let a = extract_patches(&ramp(16, 0.0), 4, 4, 2).unwrap();
        let b = extract_patches(&ramp(16, 3.0), 4, 4, 2).unwrap();
        let c = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64 * 0.1).fract());
        let biased = m.class_logits(&a, &b, Fusion::Early, Some(&c)).unwrap();
        let plain = m.class_logits(&a, &b, Fusion::Early, None).unwrap();
        assert_eq!(biased[0].to_bits(), plain[0].to_bits());
    }

    #[test]
    fn late_fusion_of_identical_views() {
        let mut m = MatcherModel::new(&tiny_config()).unwrap();
        m.view_emb.fill(0.0);
        let a = extract_patches(&ramp(16, 0.0), 4, 4, 2).unwrap();
        let single = m.classify(&a, &a, Fusion::Single, None).unwrap();
        let late = m.classify(&a, &a, Fusion::Late, None).unwrap();
        assert!((single - late).abs() < 1e-15);
    }

    #[test]
    fn zero_bias_gives_zero_alpha_gradient() {
        let m = MatcherModel::new(&tiny_config()).unwrap();
        let a = extract_patches(&ramp(8, 0.0), 4, 2, 2).unwrap();
        let b = extract_patches(&ramp(8, 2.0), 4, 2, 2).unwrap();
        let (_, g) = m
            .class_loss_grad(&a, &b, true, Fusion::Early, Some(&Array2::zeros((2, 2))))
            .unwrap();
        assert!(g.layers.iter().all(|l| l.alpha[0] == 0.0));
        let (_, g) = m.class_loss_grad(&a, &b, true, Fusion::Early, None).unwrap();
        assert!(g.layers.iter().all(|l| l.alpha[0] == 0.0));
    }

    #[test]
    fn mse_gradient_vanishes_at_target() {
        let m = MatcherModel::new(&tiny_config()).unwrap();
        let a = extract_patches(&ramp(8, 0.0), 4, 2, 2).unwrap();
        let b = extract_patches(&ramp(8, 2.0), 4, 2, 2).unwrap();
        let target = m.predict_correspondence(&a, &b).unwrap();
        let (loss, g) = m.correspondence_loss_grad(&a, &b, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_tokens_permutes_predictions() {
        let m = MatcherModel::new(&tiny_config()).unwrap();
        let a = extract_patches(&ramp(16, 0.0), 4, 4, 2).unwrap();
        let b = extract_patches(&ramp(16, 5.0), 4, 4, 2).unwrap();
        let seq = TokenSequence::new(&[(&a, 0), (&b, 1)], false).unwrap();
        let (out, _) = m.forward(&seq, None).unwrap();

        // Reverse view-1 tokens together with their positions.
        let perm = [3usize, 2, 1, 0];
        let mut p = seq.clone();
        for (dst, &src) in perm.iter().enumerate() {
            p.patches.row_mut(dst).assign(&seq.patches.row(src));
            p.positions[dst] = seq.positions[src];
        }
        let (pout, _) = m.forward(&p, None).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let d = &pout.row(dst) - &out.row(src);
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
        for i in 4..8 {
            let d = &pout.row(i) - &out.row(i);
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
    }
}

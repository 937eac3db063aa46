//! Frame-interaction attention variants.
//!
//! All variants share one scaled dot-product core over `[N, d]` token
//! matrices with row-vector projections (`Q = X Wq`). Heads split the
//! channel axis; scores are scaled by `1/sqrt(d / heads)`.
//!
//! * spatial: per-frame self-attention
//! * temporal: per token location, attention across the two frames
//! * cross-frame: target queries over `[source; target]` keys
//! * matching: target queries over source keys; its head-averaged map is
//!   returned for supervision and visualisation
//!
//! Token `i` of a grid sits at cell `(i / width, i % width)`.

use rand::Rng;

use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Row-major grid of `d`-dimensional tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T: Scalar = f32> {
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor<T>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(height: usize, width: usize, tokens: Tensor<T>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != height * width {
            return Err(Error::Shape(format!("token grid {height}x{width} cannot hold tokens of shape {s:?}")));
        }
        Ok(Self { height, width, tokens })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if (self.height, self.width, self.dim()) != (other.height, other.width, other.dim()) {
            return Err(Error::Shape(format!(
                "token grids differ: {}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.dim(),
                other.height,
                other.width,
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wout: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide dim {dim}")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            wq: store.add_normal(format!("{prefix}.wq"), &[dim, dim], std, rng)?,
            wk: store.add_normal(format!("{prefix}.wk"), &[dim, dim], std, rng)?,
            wv: store.add_normal(format!("{prefix}.wv"), &[dim, dim], std, rng)?,
            wout: store.add_normal(format!("{prefix}.wout"), &[dim, dim], std, rng)?,
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wout]
    }
}

/// Value-equal copy of `spatial` under `prefix`, with its own storage.
pub fn init_matching_from_spatial<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, spatial: &AttentionWeights) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: store.add_copy_of(format!("{prefix}.wq"), spatial.wq)?,
        wk: store.add_copy_of(format!("{prefix}.wk"), spatial.wk)?,
        wv: store.add_copy_of(format!("{prefix}.wv"), spatial.wv)?,
        wout: store.add_copy_of(format!("{prefix}.wout"), spatial.wout)?,
        dim: spatial.dim,
        heads: spatial.heads,
    })
}

/// Head-averaged matching-attention map of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T: Scalar = f32> {
    pub layer_id: String,
    /// `[N, N]`, rows are target tokens, columns source tokens.
    pub a_match: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.tokens();
        &self.a_match.data()[i * n..(i + 1) * n]
    }
}

/// Graph-level building blocks used by the backbone.
pub mod ops {
    use super::*;

    fn check_tokens<T: Scalar>(g: &Graph<T>, w: &AttentionWeights, x: Var, what: &str) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != w.dim {
            return Err(Error::Shape(format!("{what}: tokens {s:?} do not match attention dim {}", w.dim)));
        }
        Ok(s[0])
    }

    /// `[N, d] -> [heads, N, d_head]`
    pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        let r = g.reshape(x, &[n, heads, d / heads])?;
        Ok(g.permute(r, &[1, 0, 2])?)
    }

    /// `[heads, N, d_head] -> [N, d]`
    pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let p = g.permute(x, &[1, 0, 2])?;
        Ok(g.reshape(p, &[s[1], s[0] * s[2]])?)
    }

    /// Scaled dot-product attention on head-split tensors. Returns the
    /// attended values `[h, Nq, dh]` and probabilities `[h, Nq, Nk]`.
    pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let dh = *g.shape(q).last().unwrap();
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = g.softmax(scores)?;
        let out = g.bmm(probs, v, false)?;
        Ok((out, probs))
    }

    fn project<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: ParamId) -> Result<Var> {
        let wv = g.param(store, w);
        Ok(g.matmul(x, wv, false, false)?)
    }

    fn attention<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, w: &AttentionWeights, query_src: Var, kv_src: Var) -> Result<(Var, Var)> {
        let q = project(g, store, query_src, w.wq)?;
        let k = project(g, store, kv_src, w.wk)?;
        let v = project(g, store, kv_src, w.wv)?;
        let (q, k, v) = (split_heads(g, q, w.heads)?, split_heads(g, k, w.heads)?, split_heads(g, v, w.heads)?);
        let (o, probs) = attend(g, q, k, v)?;
        let o = merge_heads(g, o)?;
        let out = project(g, store, o, w.wout)?;
        Ok((out, probs))
    }

    pub fn spatial<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, w: &AttentionWeights, x: Var) -> Result<Var> {
        check_tokens(g, w, x, "spatial attention")?;
        Ok(attention(g, store, w, x, x)?.0)
    }

    /// Returns the output and the head-averaged map `[N, N]`.
    pub fn matching<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, w: &AttentionWeights, target: Var, source: Var) -> Result<(Var, Var)> {
        let nt = check_tokens(g, w, target, "matching attention")?;
        let ns = check_tokens(g, w, source, "matching attention")?;
        if nt != ns {
            return Err(Error::Shape(format!("matching attention: {nt} target vs {ns} source tokens")));
        }
        let (out, probs) = attention(g, store, w, target, source)?;
        let avg = g.mean0(probs)?;
        Ok((out, avg))
    }

    pub fn cross_frame<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, w: &AttentionWeights, target: Var, source: Var) -> Result<Var> {
        let nt = check_tokens(g, w, target, "cross-frame attention")?;
        let ns = check_tokens(g, w, source, "cross-frame attention")?;
        if nt != ns {
            return Err(Error::Shape(format!("cross-frame attention: {nt} target vs {ns} source tokens")));
        }
        let keys = g.concat0(&[source, target])?;
        Ok(attention(g, store, w, target, keys)?.0)
    }

    /// Per-location attention over the two-frame axis.
    pub fn temporal<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, w: &AttentionWeights, source: Var, target: Var) -> Result<(Var, Var)> {
        let n = check_tokens(g, w, source, "temporal attention")?;
        if check_tokens(g, w, target, "temporal attention")? != n {
            return Err(Error::Shape("temporal attention: frames differ in token count".into()));
        }
        let (h, d) = (w.heads, w.dim);
        let dh = d / h;
        let both = g.concat0(&[source, target])?;
        // [2N, d] -> [2, N, h, dh] -> [N, h, 2, dh] -> [N*h, 2, dh]
        let to_seq = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let r = g.reshape(x, &[2, n, h, dh])?;
            let p = g.permute(r, &[1, 2, 0, 3])?;
            Ok(g.reshape(p, &[n * h, 2, dh])?)
        };
        let q = project(g, store, both, w.wq)?;
        let k = project(g, store, both, w.wk)?;
        let v = project(g, store, both, w.wv)?;
        let (q, k, v) = (to_seq(g, q)?, to_seq(g, k)?, to_seq(g, v)?);
        let (o, _) = attend(g, q, k, v)?;
        let o = g.reshape(o, &[n, h, 2, dh])?;
        let o = g.permute(o, &[2, 0, 1, 3])?;
        let o = g.reshape(o, &[2 * n, d])?;
        let out = project(g, store, o, w.wout)?;
        Ok((g.slice0(out, 0, n)?, g.slice0(out, n, 2 * n)?))
    }

    /// Zero-padded additive fusion: the source output passes through
    /// untouched, the target output gains the branch output.
    pub fn fuse<T: Scalar>(g: &mut Graph<T>, spatial_pair: (Var, Var), branch: Var) -> Result<(Var, Var)> {
        let target = g.add(spatial_pair.1, branch)?;
        Ok((spatial_pair.0, target))
    }
}

fn grid_var<T: Scalar>(g: &mut Graph<T>, grid: &TokenGrid<T>) -> Result<Var> {
    Ok(g.input(grid.tokens.clone())?)
}

fn to_grid<T: Scalar>(g: &Graph<T>, v: Var, like: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    TokenGrid::new(like.height, like.width, g.value(v).clone())
}

fn check_dim<T: Scalar>(grid: &TokenGrid<T>, w: &AttentionWeights) -> Result<()> {
    if grid.dim() != w.dim {
        return Err(Error::Shape(format!("token dim {} vs attention dim {}", grid.dim(), w.dim)));
    }
    Ok(())
}

pub fn spatial_attention<T: Scalar>(frame: &TokenGrid<T>, w: &AttentionWeights, store: &ParamStore<T>) -> Result<TokenGrid<T>> {
    check_dim(frame, w)?;
    let mut g = Graph::new();
    let x = grid_var(&mut g, frame)?;
    let o = ops::spatial(&mut g, store, w, x)?;
    to_grid(&g, o, frame)
}

pub fn temporal_attention<T: Scalar>(
    frames: (&TokenGrid<T>, &TokenGrid<T>),
    w: &AttentionWeights,
    store: &ParamStore<T>,
) -> Result<(TokenGrid<T>, TokenGrid<T>)> {
    frames.0.same_layout(frames.1)?;
    check_dim(frames.0, w)?;
    let mut g = Graph::new();
    let s = grid_var(&mut g, frames.0)?;
    let t = grid_var(&mut g, frames.1)?;
    let (os, ot) = ops::temporal(&mut g, store, w, s, t)?;
    Ok((to_grid(&g, os, frames.0)?, to_grid(&g, ot, frames.1)?))
}

pub fn cross_frame_attention<T: Scalar>(target: &TokenGrid<T>, source: &TokenGrid<T>, w: &AttentionWeights, store: &ParamStore<T>) -> Result<TokenGrid<T>> {
    target.same_layout(source)?;
    check_dim(target, w)?;
    let mut g = Graph::new();
    let t = grid_var(&mut g, target)?;
    let s = grid_var(&mut g, source)?;
    let o = ops::cross_frame(&mut g, store, w, t, s)?;
    to_grid(&g, o, target)
}

pub fn matching_attention<T: Scalar>(
    target: &TokenGrid<T>,
    source: &TokenGrid<T>,
    w: &AttentionWeights,
    store: &ParamStore<T>,
    layer_id: &str,
) -> Result<(TokenGrid<T>, AttentionRecord<T>)> {
    target.same_layout(source)?;
    check_dim(target, w)?;
    let mut g = Graph::new();
    let t = grid_var(&mut g, target)?;
    let s = grid_var(&mut g, source)?;
    let (o, a) = ops::matching(&mut g, store, w, t, s)?;
    let record = AttentionRecord { layer_id: layer_id.to_string(), a_match: g.value(a).clone(), height: target.height, width: target.width };
    Ok((to_grid(&g, o, target)?, record))
}

pub fn fuse_outputs<T: Scalar>(spatial_pair: (&TokenGrid<T>, &TokenGrid<T>), matched: &TokenGrid<T>) -> Result<(TokenGrid<T>, TokenGrid<T>)> {
    spatial_pair.1.same_layout(matched)?;
    spatial_pair.0.same_layout(spatial_pair.1)?;
    let data = spatial_pair.1.tokens.data().iter().zip(matched.tokens.data()).map(|(&a, &b)| a + b).collect();
    let target = Tensor::new(spatial_pair.1.tokens.shape().to_vec(), data)?;
    Ok((spatial_pair.0.clone(), TokenGrid::new(matched.height, matched.width, target)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn grid(h: usize, w: usize, d: usize, r: &mut ChaCha8Rng) -> TokenGrid<f64> {
        let data = (0..h * w * d).map(|_| StandardNormal.sample(r)).collect();
        TokenGrid::new(h, w, Tensor::new(vec![h * w, d], data).unwrap()).unwrap()
    }

    fn identity_weights(store: &mut ParamStore<f64>, d: usize) -> AttentionWeights {
        let w = AttentionWeights::new(store, "a", d, 1, &mut rng(0)).unwrap();
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        for name in ["a.wq", "a.wk", "a.wv", "a.wout"] {
            store.set_value(name, eye.clone()).unwrap();
        }
        w
    }

    fn one_d(values: &[f64]) -> TokenGrid<f64> {
        TokenGrid::new(1, values.len(), Tensor::from_f64(&[values.len(), 1], values).unwrap()).unwrap()
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut s = ParamStore::<f32>::new();
        assert!(AttentionWeights::new(&mut s, "x", 6, 4, &mut rng(1)).is_err());
    }

    #[test]
    fn single_token_is_projected_value() {
        let mut s = ParamStore::<f64>::new();
        let w = AttentionWeights::new(&mut s, "a", 4, 2, &mut rng(2)).unwrap();
        let x = grid(1, 1, 4, &mut rng(3));
        let out = spatial_attention(&x, &w, &s).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.tokens.clone()).unwrap();
        let wv = g.param(&s, w.wv);
        let v = g.matmul(xv, wv, false, false).unwrap();
        let wo = g.param(&s, w.wout);
        let expect = g.matmul(v, wo, false, false).unwrap();
        assert!(out.tokens.max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn zero_query_key_gives_column_mean() {
        let mut s = ParamStore::<f64>::new();
        let w = identity_weights(&mut s, 3);
        s.set_value("a.wq", Tensor::zeros(&[3, 3])).unwrap();
        s.set_value("a.wk", Tensor::zeros(&[3, 3])).unwrap();
        let x = grid(2, 3, 3, &mut rng(4));
        let out = spatial_attention(&x, &w, &s).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..6).map(|i| x.tokens.data()[i * 3 + j]).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.tokens.data()[i * 3 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_hand_values() {
        let mut s = ParamStore::<f64>::new();
        let w = identity_weights(&mut s, 1);
        let (_, rec) = matching_attention(&one_d(&[1.0, 0.0]), &one_d(&[1.0, 0.0]), &w, &s, "l").unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (a, b) in rec.a_match.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expect[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn temporal_hand_values() {
        let mut s = ParamStore::<f64>::new();
        let w = identity_weights(&mut s, 1);
        let (o0, o1) = temporal_attention((&one_d(&[1.0]), &one_d(&[0.0])), &w, &s).unwrap();
        let e = std::f64::consts::E;
        assert!((o0.tokens.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        // frame-1 query is zero: uniform weights
        assert!((o1.tokens.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn temporal_identical_frames_and_zero_inputs() {
        let mut s = ParamStore::<f64>::new();
        let w = identity_weights(&mut s, 4);
        s.set_value("a.wq", Tensor::from_f64(&[4, 4], &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap()).unwrap();
        let x = grid(2, 2, 4, &mut rng(5));
        let (a, b) = temporal_attention((&x, &x), &w, &s).unwrap();
        assert!(a.tokens.max_abs_diff(&x.tokens) < 1e-12);
        assert!(b.tokens.max_abs_diff(&x.tokens) < 1e-12);
        let z = TokenGrid::new(2, 2, Tensor::zeros(&[4, 4])).unwrap();
        let (a, b) = temporal_attention((&z, &z), &w, &s).unwrap();
        assert_eq!(a.tokens, Tensor::zeros(&[4, 4]));
        assert_eq!(b.tokens, Tensor::zeros(&[4, 4]));
    }

    #[test]
    fn cross_frame_with_equal_frames_matches_spatial() {
        let mut s = ParamStore::<f64>::new();
        let w = AttentionWeights::new(&mut s, "a", 8, 2, &mut rng(6)).unwrap();
        let x = grid(3, 3, 8, &mut rng(7));
        let cf = cross_frame_attention(&x, &x, &w, &s).unwrap();
        let sp = spatial_attention(&x, &w, &s).unwrap();
        assert!(cf.tokens.max_abs_diff(&sp.tokens) < 1e-12);
    }

    #[test]
    fn cross_frame_uniform_mean() {
        let mut s = ParamStore::<f64>::new();
        let w = identity_weights(&mut s, 1);
        s.set_value("a.wq", Tensor::zeros(&[1, 1])).unwrap();
        let out = cross_frame_attention(&one_d(&[0.0]), &one_d(&[2.0]), &w, &s).unwrap();
        assert!((out.tokens.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn copied_weights_reproduce_spatial_when_frames_match() {
        let mut s = ParamStore::<f64>::new();
        let sw = AttentionWeights::new(&mut s, "spatial", 8, 4, &mut rng(8)).unwrap();
        let mw = init_matching_from_spatial(&mut s, "match", &sw).unwrap();
        assert_eq!(s.value(mw.wq), s.value(sw.wq));
        let x = grid(4, 4, 8, &mut rng(9));
        let (m, rec) = matching_attention(&x, &x, &mw, &s, "l").unwrap();
        let sp = spatial_attention(&x, &sw, &s).unwrap();
        assert!(m.tokens.max_abs_diff(&sp.tokens) < 1e-6);
        for i in 0..16 {
            assert!((rec.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fuse_keeps_source_and_adds_target() {
        let src = one_d(&[3.0, 4.0]);
        let tgt = one_d(&[1.0, 2.0]);
        let m = one_d(&[0.5, -1.0]);
        let (a, b) = fuse_outputs((&src, &tgt), &m).unwrap();
        assert_eq!(a, src);
        assert_eq!(b.tokens.data(), &[1.5, 1.0]);
        let zero = one_d(&[0.0, 0.0]);
        let (a, b) = fuse_outputs((&src, &tgt), &zero).unwrap();
        assert_eq!((a, b), (src, tgt));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        let w = AttentionWeights::new(&mut s, "a", 4, 1, &mut rng(10)).unwrap();
        let a = grid(2, 2, 4, &mut rng(11));
        let b = grid(1, 4, 4, &mut rng(12));
        assert!(temporal_attention((&a, &b), &w, &s).is_err());
        assert!(matching_attention(&a, &b, &w, &s, "l").is_err());
        assert!(cross_frame_attention(&a, &b, &w, &s).is_err());
    }
}

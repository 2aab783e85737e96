//! Multi-head self-attention over atoms.
//!
//! Attention maps are held in pair layout: an `(N*N x h)` matrix whose row
//! `i*N + j` carries the logit of atom `i` (query) attending to atom `j` (key)
//! for every head. Head `m` owns the contiguous column block
//! `m*d_head..(m+1)*d_head` of `Q`, `K`, `V` and of the kernel tensor.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Re-insert a row softmax over the logits (standard attention baseline).
    pub use_softmax_baseline: bool,
    pub use_attn_scale: bool,
    /// Scale logits by `1/sqrt(d_model/heads)` instead of `1/sqrt(d_model)`.
    pub scale_per_head: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn logit_scale(&self) -> f64 {
        let d = if self.scale_per_head {
            self.head_dim()
        } else {
            self.d_model
        };
        1.0 / (d as f64).sqrt()
    }
}

/// Attention maps of one head in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    /// Unnormalized logits `A` (`N x N`).
    pub logits: Tensor,
    /// The map actually multiplied with `V` (after AttnScale / softmax).
    pub scaled: Tensor,
}

/// Row `i*N+j` of `q_i ⊙ k_j ⊙ Λ_ij`, summed per head and scaled:
/// `A_ij = Σ_c Q_ic K_jc Λ_ij,c * scale`, result `(N*N x heads)`.
pub fn geo_attention_logits<'t>(
    q: Var<'t>,
    k: Var<'t>,
    kernel: Var<'t>,
    heads: usize,
    scale: f64,
) -> Result<Var<'t>> {
    let width = q.shape().1;
    if heads == 0 || width % heads != 0 {
        return Err(Error::config(format!("{width} channels cannot split into {heads} heads")));
    }
    q.pair_expand_i()?
        .mul(k.pair_expand_j()?)?
        .mul(kernel)?
        .group_sum(width / heads)?
        .scale(scale)
}

/// Plain scaled dot-product logits `Q K^T * scale` for one head (`N x N`).
pub fn dot_product_logits<'t>(q: Var<'t>, k: Var<'t>, scale: f64) -> Result<Var<'t>> {
    q.matmul_nt(k)?.scale(scale)
}

/// AttnScale on pair-layout logits: each row's mean over `j` is the DC
/// part, the remainder is amplified by `1 + w`.
pub fn attn_scale<'t>(a: Var<'t>, w: Var<'t>, n_atoms: usize) -> Result<Var<'t>> {
    let dc = a
        .pair_reduce_i()?
        .scale(1.0 / n_atoms as f64)?
        .pair_expand_i()?;
    let hf = a.sub(dc)?;
    dc.add(hf.mul_scalar(w.add_scalar(1.0)?)?)
}

/// AttnScale on a single `N x N` map.
pub fn attn_scale_matrix<'t>(a: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::Shape {
            op: "attn_scale",
            lhs: (n, m),
            rhs: (m, n),
        });
    }
    attn_scale(a.reshape(n * n, 1)?, w, n)?.reshape(n, n)
}

/// Softmax over `j` of pair-layout logits, per head.
pub fn softmax_pairs<'t>(a: Var<'t>) -> Result<Var<'t>> {
    let v = a.value();
    let n = (v.rows() as f64).sqrt().round() as usize;
    let heads = v.cols();
    let maxes = Tensor::from_fn(n, heads, |i, h| {
        (0..n).map(|j| v.get(i * n + j, h)).fold(f64::NEG_INFINITY, f64::max)
    });
    let shift = a.tape().constant(maxes)?.pair_expand_i()?;
    let e = a.sub(shift)?.exp()?;
    let inv = e.pair_reduce_i()?.unary(crate::autodiff::Unary::Pow {
        coef: 1.0,
        exp: -1.0,
    })?;
    e.mul(inv.pair_expand_i()?)
}

/// `out_i = Σ_j A_ij V_j` per head, for pair-layout `A` (`N*N x heads`) and
/// `V` (`N x d`).
pub fn apply_attention<'t>(a: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let heads = a.shape().1;
    let width = v.shape().1;
    if heads == 0 || width % heads != 0 {
        return Err(Error::config(format!("{width} channels cannot split into {heads} heads")));
    }
    a.group_expand(width / heads)?
        .mul(v.pair_expand_j()?)?
        .pair_reduce_i()
}

/// Reference softmax attention for one head: `softmax(Q K^T * scale) V`.
pub fn standard_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<Var<'t>> {
    dot_product_logits(q, k, scale)?.softmax_rows()?.matmul(v)
}

/// Projection weights and the AttnScale factor of one layer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    cfg: AttentionConfig,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    w_scale: Option<ParamId>,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let wq = store.add(format!("{prefix}.wq"), glorot_uniform(rng, d, d));
        let wk = store.add(format!("{prefix}.wk"), glorot_uniform(rng, d, d));
        let wv = store.add(format!("{prefix}.wv"), glorot_uniform(rng, d, d));
        let w_scale = cfg
            .use_attn_scale
            .then(|| store.add(format!("{prefix}.attn_scale"), Tensor::zeros(1, 1)));
        Ok(Self {
            cfg,
            wq,
            wk,
            wv,
            w_scale,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn query_weight(&self) -> ParamId {
        self.wq
    }

    pub fn key_weight(&self) -> ParamId {
        self.wk
    }

    pub fn value_weight(&self) -> ParamId {
        self.wv
    }

    pub fn scale_weight(&self) -> Option<ParamId> {
        self.w_scale
    }

    /// Full-width `Q`, `K`, `V` (`N x d_model`); head `m` is column block `m`.
    pub fn qkv<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        Ok((
            x.matmul(bound[self.wq])?,
            x.matmul(bound[self.wk])?,
            x.matmul(bound[self.wv])?,
        ))
    }

    /// Per-head slice of a full-width projection.
    pub fn head<'t>(&self, full: Var<'t>, head: usize) -> Result<Var<'t>> {
        let hd = self.cfg.head_dim();
        full.slice_cols(head * hd, hd)
    }

    /// Multi-head geometry-aware attention of `x` (`N x d_model`) under the
    /// expanded kernel (`N*N x d_model`). When `trace` is given, one record
    /// per head is appended to it.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        kernel: Var<'t>,
        layer: usize,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var<'t>> {
        let n = x.shape().0;
        let (q, k, v) = self.qkv(bound, x)?;
        let logits = geo_attention_logits(q, k, kernel, self.cfg.heads, self.cfg.logit_scale())?;
        let mut a = logits;
        if self.cfg.use_softmax_baseline {
            a = softmax_pairs(a)?;
        }
        if let Some(w) = self.w_scale {
            a = attn_scale(a, bound[w], n)?;
        }
        if let Some(records) = trace {
            let raw = logits.value();
            let fin = a.value();
            for head in 0..self.cfg.heads {
                records.push(AttentionRecord {
                    layer,
                    head,
                    logits: Tensor::from_fn(n, n, |i, j| raw.get(i * n + j, head)),
                    scaled: Tensor::from_fn(n, n, |i, j| fin.get(i * n + j, head)),
                });
            }
        }
        apply_attention(a, v)
    }
}

/// Per layer, the head average of `|A'_ij|`.
pub fn dump_attention_norms(records: &[AttentionRecord]) -> Result<Vec<(usize, Tensor)>> {
    if records.is_empty() {
        return Err(Error::Usage(
            "no attention trace was collected for this forward pass".into(),
        ));
    }
    let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|layer| {
            let heads: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer == layer).collect();
            let (n, m) = heads[0].scaled.shape();
            if heads.iter().any(|r| r.scaled.shape() != (n, m)) {
                return Err(Error::data(format!("layer {layer} has maps of differing size")));
            }
            let inv = 1.0 / heads.len() as f64;
            let map = Tensor::from_fn(n, m, |i, j| {
                heads.iter().map(|r| r.scaled.get(i, j).abs()).sum::<f64>() * inv
            });
            Ok((layer, map))
        })
        .collect()
}

pub const ATTENTION_CSV_HEADER: &str = "layer,head_avg,i,j,value";

/// One row per `(layer, i, j)`; `head_avg` is the number of heads averaged.
pub fn write_attention_csv(maps: &[(usize, Tensor)], heads: usize) -> String {
    let mut out = String::from(ATTENTION_CSV_HEADER);
    out.push('\n');
    for (layer, map) in maps {
        for i in 0..map.rows() {
            for j in 0..map.cols() {
                let _ = writeln!(out, "{layer},{heads},{i},{j},{}", fmt_f64(map.get(i, j)));
            }
        }
    }
    out
}

/// Inverse of [`write_attention_csv`]; returns the maps and the head count.
pub fn parse_attention_csv(text: &str) -> Result<(Vec<(usize, Tensor)>, usize)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ATTENTION_CSV_HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{ATTENTION_CSV_HEADER}`"))),
    }
    let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut heads = None;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(lineno, "expected 5 comma-separated fields"));
        }
        let int = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(lineno, format!("bad integer `{s}`")))
        };
        let h = int(fields[1])?;
        if *heads.get_or_insert(h) != h {
            return Err(Error::parse(lineno, "inconsistent head count"));
        }
        let value = fields[4]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(lineno, format!("bad number `{}`", fields[4])))?;
        entries.push((int(fields[0])?, int(fields[2])?, int(fields[3])?, value));
    }
    let mut layers: Vec<usize> = entries.iter().map(|e| e.0).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut maps = Vec::new();
    for layer in layers {
        let rows: Vec<_> = entries.iter().filter(|e| e.0 == layer).collect();
        let n = rows.iter().map(|e| e.1.max(e.2) + 1).max().unwrap_or(0);
        if rows.len() != n * n {
            return Err(Error::data(format!("layer {layer}: incomplete {n}x{n} map")));
        }
        let mut map = Tensor::zeros(n, n);
        for e in rows {
            map.set(e.1, e.2, e.3);
        }
        maps.push((layer, map));
    }
    Ok((maps, heads.unwrap_or(0)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn cfg(d_model: usize, heads: usize) -> AttentionConfig {
        AttentionConfig {
            d_model,
            heads,
            use_softmax_baseline: false,
            use_attn_scale: false,
            scale_per_head: true,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(6, 4).validate().is_err());
        assert!(cfg(8, 0).validate().is_err());
        assert!(cfg(8, 4).validate().is_ok());
        assert_eq!(cfg(16, 4).logit_scale(), 0.5);
        let global = AttentionConfig {
            scale_per_head: false,
            ..cfg(16, 4)
        };
        assert_eq!(global.logit_scale(), 0.25);
    }

    #[test]
    fn identity_projection_single_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg(3, 1)).unwrap();
        for id in [layer.wq, layer.wk, layer.wv] {
            store.set(id, Tensor::identity(3));
        }
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x0 = random(&mut rng, 4, 3);
        let x = tape.constant(x0.clone()).unwrap();
        let (q, k, v) = layer.qkv(&bound, x).unwrap();
        for t in [q, k, v] {
            assert_eq!(*t.value(), x0);
        }
    }

    #[test]
    fn head_slices_reconstruct_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg(4, 2)).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.constant(random(&mut rng, 3, 4)).unwrap();
        let (q, _, _) = layer.qkv(&bound, x).unwrap();
        let parts = [layer.head(q, 0).unwrap(), layer.head(q, 1).unwrap()];
        assert_eq!(parts[0].shape(), (3, 2));
        let joined = Var::concat_cols(&parts).unwrap();
        assert_eq!(*joined.value(), *q.value());
    }

    #[test]
    fn query_weight_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg(4, 2)).unwrap();
        let x0 = random(&mut rng, 3, 4);
        let lam0 = random(&mut rng, 9, 4);
        let eval = |store: &ParamStore| -> f64 {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let x = tape.constant(x0.clone()).unwrap();
            let lam = tape.constant(lam0.clone()).unwrap();
            layer.forward(&bound, x, lam, 0, None).unwrap().square().unwrap().sum_all().unwrap().item()
        };
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.constant(x0.clone()).unwrap();
        let lam = tape.constant(lam0.clone()).unwrap();
        let out = layer.forward(&bound, x, lam, 0, None).unwrap().square().unwrap().sum_all().unwrap();
        let g = tape.grad(out, &[bound[layer.wq]]).unwrap()[0].value();
        let h = 1e-5;
        let mut max_diff = 0.0f64;
        let mut max_ref = 0.0f64;
        for e in 0..16 {
            let mut plus = store.clone();
            plus.get_mut(layer.wq).data_mut()[e] += h;
            let mut minus = store.clone();
            minus.get_mut(layer.wq).data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            max_diff = max_diff.max((fd - g.data()[e]).abs());
            max_ref = max_ref.max(fd.abs());
        }
        assert!(max_diff / max_ref < 1e-5, "{}", max_diff / max_ref);
    }

    #[test]
    fn standard_attention_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v1 = random(&mut rng, 1, 3);
        let q = tape.constant(random(&mut rng, 1, 3)).unwrap();
        let k = tape.constant(random(&mut rng, 1, 3)).unwrap();
        let v = tape.constant(v1.clone()).unwrap();
        assert_eq!(*standard_attention(q, k, v, 0.5).unwrap().value(), v1);

        let vv = random(&mut rng, 4, 2);
        let q = tape.constant(Tensor::zeros(4, 2)).unwrap();
        let k = tape.constant(random(&mut rng, 4, 2)).unwrap();
        let v = tape.constant(vv.clone()).unwrap();
        let out = standard_attention(q, k, v, 0.7).unwrap().value();
        for c in 0..2 {
            let mean = (0..4).map(|r| vv.get(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((out.get(r, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn standard_attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q0, k0, v0) = (random(&mut rng, 3, 2), random(&mut rng, 3, 2), random(&mut rng, 3, 2));
        let scale = 1.0 / 2f64.sqrt();
        let tape = Tape::new();
        let out = standard_attention(
            tape.constant(q0.clone()).unwrap(),
            tape.constant(k0.clone()).unwrap(),
            tape.constant(v0.clone()).unwrap(),
            scale,
        )
        .unwrap()
        .value();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| q0.get(i, c) * k0.get(j, c)).sum::<f64>() * scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for c in 0..2 {
                let expected: f64 = (0..3).map(|j| w[j] * v0.get(j, c)).sum();
                assert!((out.get(i, c) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn geo_logits_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q0 = random(&mut rng, 3, 4);
        let k0 = random(&mut rng, 3, 4);
        let q = tape.constant(q0.clone()).unwrap();
        let k = tape.constant(k0).unwrap();
        let ones = tape.constant(Tensor::full(9, 4, 1.0)).unwrap();
        let a = geo_attention_logits(q, k, ones, 1, 0.5).unwrap().reshape(3, 3).unwrap();
        let plain = dot_product_logits(q, k, 0.5).unwrap();
        assert!(a.value().max_abs_diff(&plain.value()) < 1e-15);

        let zeros = tape.constant(Tensor::zeros(9, 4)).unwrap();
        let a = geo_attention_logits(q, k, zeros, 2, 0.5).unwrap();
        assert!(a.value().data().iter().all(|&v| v == 0.0));
        let v = tape.constant(random(&mut rng, 3, 4)).unwrap();
        assert!(apply_attention(a, v).unwrap().value().data().iter().all(|&x| x == 0.0));

        // hand contraction: Q=I, K=ones, Λ_ij=[1,2] -> A = [[1,1],[2,2]]/sqrt(2)
        let q = tape.constant(Tensor::identity(2)).unwrap();
        let k = tape.constant(Tensor::full(2, 2, 1.0)).unwrap();
        let lam = tape
            .constant(Tensor::from_fn(4, 2, |_, c| (c + 1) as f64))
            .unwrap();
        let s = 1.0 / 2f64.sqrt();
        let a = geo_attention_logits(q, k, lam, 1, s).unwrap().reshape(2, 2).unwrap().value();
        assert_eq!(a.data(), &[s, s, 2.0 * s, 2.0 * s]);
    }

    #[test]
    fn attn_scale_examples() {
        let tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 2.0]]).unwrap())
            .unwrap();
        let one = tape.scalar(1.0).unwrap();
        let out = attn_scale_matrix(a, one).unwrap().value();
        assert_eq!(out.data(), &[0.0, 4.0, 2.0, 2.0]);

        let zero = tape.scalar(0.0).unwrap();
        let same = attn_scale_matrix(a, zero).unwrap().value();
        assert_eq!(*same, *a.value());

        let constant_rows = tape
            .constant(Tensor::from_rows(&[vec![5.0, 5.0, 5.0], vec![-1.0, -1.0, -1.0], vec![0.5, 0.5, 0.5]]).unwrap())
            .unwrap();
        let w = tape.scalar(1.7).unwrap();
        let out = attn_scale_matrix(constant_rows, w).unwrap().value();
        assert_eq!(*out, *constant_rows.value());
    }

    #[test]
    fn geo_msa_is_linear_in_values_and_kernel() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = AttentionConfig {
            use_attn_scale: true,
            ..cfg(4, 2)
        };
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", c).unwrap();
        store.set(layer.w_scale.unwrap(), Tensor::scalar(0.6));
        let x0 = random(&mut rng, 3, 4);
        let lam0 = random(&mut rng, 9, 4);
        let run = |store: &ParamStore, lam: &Tensor| {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let x = tape.constant(x0.clone()).unwrap();
            let l = tape.constant(lam.clone()).unwrap();
            (*layer.forward(&bound, x, l, 0, None).unwrap().value()).clone()
        };
        let base = run(&store, &lam0);
        let mut doubled = store.clone();
        let wv = doubled.get(layer.wv).map(|v| 2.0 * v);
        doubled.set(layer.wv, wv);
        let out = run(&doubled, &lam0);
        for (a, b) in out.data().iter().zip(base.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        let out = run(&store, &lam0.map(|v| 3.0 * v));
        for (a, b) in out.data().iter().zip(base.data()) {
            assert!((a - 3.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_head_matches_dense_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg(3, 1)).unwrap();
        let x0 = random(&mut rng, 4, 3);
        let lam0 = random(&mut rng, 16, 3);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let out = layer
            .forward(&bound, tape.constant(x0.clone()).unwrap(), tape.constant(lam0.clone()).unwrap(), 0, None)
            .unwrap()
            .value();

        let proj = |w: &Tensor| Tensor::from_fn(4, 3, |r, c| (0..3).map(|k| x0.get(r, k) * w.get(k, c)).sum());
        let (q, k, v) = (
            proj(store.get(layer.wq)),
            proj(store.get(layer.wk)),
            proj(store.get(layer.wv)),
        );
        let s = 1.0 / 3f64.sqrt();
        for i in 0..4 {
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    let a: f64 = (0..3).map(|m| q.get(i, m) * k.get(j, m) * lam0.get(i * 4 + j, m)).sum::<f64>() * s;
                    acc += a * v.get(j, c);
                }
                assert!((out.get(i, c) - acc).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn softmax_bridge_reproduces_standard_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = AttentionConfig {
            use_softmax_baseline: true,
            ..cfg(4, 2)
        };
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", c).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.constant(random(&mut rng, 3, 4)).unwrap();
        let ones = tape.constant(Tensor::full(9, 4, 1.0)).unwrap();
        let out = layer.forward(&bound, x, ones, 0, None).unwrap().value();
        let (q, k, v) = layer.qkv(&bound, x).unwrap();
        let heads: Vec<Var> = (0..2)
            .map(|h| {
                standard_attention(
                    layer.head(q, h).unwrap(),
                    layer.head(k, h).unwrap(),
                    layer.head(v, h).unwrap(),
                    c.logit_scale(),
                )
                .unwrap()
            })
            .collect();
        let reference = Var::concat_cols(&heads).unwrap().value();
        assert!(out.max_abs_diff(&reference) < 1e-14);
    }

    #[test]
    fn dump_examples_and_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0]]).unwrap();
        let rec = |head, t: Tensor| AttentionRecord {
            layer: 0,
            head,
            logits: t.clone(),
            scaled: t,
        };
        let maps = dump_attention_norms(&[rec(0, a.clone())]).unwrap();
        assert_eq!(maps[0].1, a.map(f64::abs));
        let maps = dump_attention_norms(&[rec(0, a.clone()), rec(1, a.map(|v| -v))]).unwrap();
        assert_eq!(maps[0].1, a.map(f64::abs));
        assert!(matches!(dump_attention_norms(&[]), Err(Error::Usage(_))));

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg(4, 2)).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.constant(random(&mut rng, 3, 4)).unwrap();
        let lam = tape.constant(random(&mut rng, 9, 4)).unwrap();
        let mut records = Vec::new();
        layer.forward(&bound, x, lam, 0, Some(&mut records)).unwrap();
        layer.forward(&bound, x, lam, 1, Some(&mut records)).unwrap();
        assert_eq!(records.len(), 4);
        let maps = dump_attention_norms(&records).unwrap();
        let csv = write_attention_csv(&maps, 2);
        assert_eq!(csv.lines().count(), 1 + 2 * 9);
        let (parsed, heads) = parse_attention_csv(&csv).unwrap();
        assert_eq!(heads, 2);
        assert_eq!(parsed, maps);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn attn_scale_preserves_row_sums(
                vals in proptest::collection::vec(-3.0f64..3.0, 16),
                w in -0.5f64..2.0,
            ) {
                let tape = Tape::new();
                let a = tape.constant(Tensor::new(4, 4, vals).unwrap()).unwrap();
                let wv = tape.scalar(w).unwrap();
                let out = attn_scale_matrix(a, wv).unwrap().value();
                let a = a.value();
                for i in 0..4 {
                    let before: f64 = a.row(i).iter().sum();
                    let after: f64 = out.row(i).iter().sum();
                    prop_assert!((before - after).abs() < 1e-10);
                }
            }

            #[test]
            fn geo_msa_permutation_equivariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
                use rand::seq::SliceRandom;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let c = AttentionConfig { use_attn_scale: true, ..cfg(4, 2) };
                let layer = AttentionLayer::new(&mut store, &mut rng, "att", c).unwrap();
                store.set(layer.w_scale.unwrap(), Tensor::scalar(0.8));
                let n = 4;
                let x0 = random(&mut rng, n, 4);
                let lam0 = random(&mut rng, n * n, 4);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
                let xp = Tensor::from_fn(n, 4, |r, c| x0.get(perm[r], c));
                let lp = Tensor::from_fn(n * n, 4, |p, c| lam0.get(perm[p / n] * n + perm[p % n], c));
                let run = |x: &Tensor, l: &Tensor| {
                    let tape = Tape::new();
                    let bound = store.bind(&tape).unwrap();
                    let out = layer.forward(&bound, tape.constant(x.clone()).unwrap(), tape.constant(l.clone()).unwrap(), 0, None).unwrap();
                    (*out.value()).clone()
                };
                let base = run(&x0, &lam0);
                let permuted = run(&xp, &lp);
                let expected = Tensor::from_fn(n, 4, |r, c| base.get(perm[r], c));
                prop_assert!(permuted.max_abs_diff(&expected) < 1e-9);
            }
        }
    }
}

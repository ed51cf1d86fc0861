//! Semantic context module.
//!
//! Each relation's predicted predicate distribution and its subject/object
//! label distributions are mapped to expected word embeddings, concatenated
//! and projected to width `D`. The mean of those rows is appended as a global
//! token and the set goes through one post-norm attention block without
//! positional encoding, so the map is permutation-equivariant over relations. A linear
//! classifier on the contextual relation rows yields corrective logits, and
//! the contextual global token is compared with the one obtained from the
//! ground-truth triplets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{
    dot, linear_backward, linear_backward_params, linear_forward, relu, softmax_backward,
    softmax_unchecked, xavier_uniform, GradStore, ParamStore, Tensor,
};

/// Word-embedding width.
pub const EMBED_DIM: usize = 200;
/// Width of the published configuration.
pub const PUBLISHED_SCM_DIM: usize = 512;

pub const PROJ_W: &str = "scm.proj.w";
pub const Q_W: &str = "scm.attn.q.w";
pub const Q_B: &str = "scm.attn.q.b";
pub const K_W: &str = "scm.attn.k.w";
pub const K_B: &str = "scm.attn.k.b";
pub const V_W: &str = "scm.attn.v.w";
pub const V_B: &str = "scm.attn.v.b";
pub const O_W: &str = "scm.attn.o.w";
pub const O_B: &str = "scm.attn.o.b";
pub const FF1_W: &str = "scm.ff1.w";
pub const FF1_B: &str = "scm.ff1.b";
pub const FF2_W: &str = "scm.ff2.w";
pub const FF2_B: &str = "scm.ff2.b";
pub const CLS_W: &str = "scm.cls.w";
pub const CLS_B: &str = "scm.cls.b";

/// Frozen unit-norm embedding rows for predicates and object classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub predicate_emb: Tensor,
    pub object_emb: Tensor,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, EMBED_DIM]);
    for r in 0..rows {
        let row = t.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

impl EmbeddingTable {
    pub fn random(seed: u64, num_classes: usize, object_slots: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let predicate_emb = unit_rows(&mut rng, num_classes);
        let object_emb = unit_rows(&mut rng, object_slots);
        Self {
            predicate_emb,
            object_emb,
        }
    }
}

/// Registers the module's trainable parameters under the `scm.` prefix.
pub fn init_scm_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    dim: usize,
    num_classes: usize,
) -> Result<()> {
    store.insert(PROJ_W, xavier_uniform(rng, dim, 3 * EMBED_DIM))?;
    for (w, b) in [(Q_W, Q_B), (K_W, K_B), (V_W, V_B), (O_W, O_B)] {
        store.insert(w, xavier_uniform(rng, dim, dim))?;
        store.insert(b, Tensor::zeros(&[dim]))?;
    }
    store.insert(FF1_W, xavier_uniform(rng, 2 * dim, dim))?;
    store.insert(FF1_B, Tensor::zeros(&[2 * dim]))?;
    store.insert(FF2_W, xavier_uniform(rng, dim, 2 * dim))?;
    store.insert(FF2_B, Tensor::zeros(&[dim]))?;
    store.insert(CLS_W, xavier_uniform(rng, num_classes, dim))?;
    store.insert(CLS_B, Tensor::zeros(&[num_classes]))?;
    Ok(())
}

pub fn scm_dim(params: &ParamStore) -> usize {
    params.value(PROJ_W).rows()
}

fn check_distribution(d: &[f64], width: usize, what: &str) -> Result<()> {
    if d.len() != width {
        return Err(Error::invalid(format!(
            "{what} has width {}, expected {width}",
            d.len()
        )));
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > 1e-6 || d.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid(format!(
            "{what} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// `sum_j dist[j] * table[j]`.
pub fn expected_embedding(dist: &[f64], table: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; table.cols()];
    for (j, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, e) in out.iter_mut().zip(table.row(j)) {
            *o += p * e;
        }
    }
    out
}

fn concat_semantics(p: &[f64], subj: &[f64], obj: &[f64], emb: &EmbeddingTable) -> Vec<f64> {
    let mut x = expected_embedding(subj, &emb.object_emb);
    x.extend(expected_embedding(p, &emb.predicate_emb));
    x.extend(expected_embedding(obj, &emb.object_emb));
    x
}

/// Projected triplet semantic vector `[s_subj; s_pred; s_obj] W`.
pub fn triplet_semantics(
    p: &[f64],
    subj_dist: &[f64],
    obj_dist: &[f64],
    emb: &EmbeddingTable,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    check_distribution(p, emb.predicate_emb.rows(), "predicate distribution")?;
    check_distribution(subj_dist, emb.object_emb.rows(), "subject distribution")?;
    check_distribution(obj_dist, emb.object_emb.rows(), "object distribution")?;
    let x = concat_semantics(p, subj_dist, obj_dist, emb);
    Ok(linear_forward(params.value(PROJ_W), None, &x))
}

/// Row mean.
pub fn global_token(rows: &Tensor) -> Result<Vec<f64>> {
    let n = rows.rows();
    if n == 0 {
        return Err(Error::invalid("global token of an empty set"));
    }
    let mut column = vec![0.0; n];
    let g = (0..rows.cols())
        .map(|c| {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = rows.row(r)[c];
            }
            set_sum(&mut column) / n as f64
        })
        .collect();
    Ok(g)
}

/// Sum over relations that depends only on the multiset of terms, so
/// reordering relations leaves every bit of the result unchanged.
fn set_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Intermediate activations of one attention block, kept for backward.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Row-stochastic attention weights `[rows, rows]`.
    pub attention: Tensor,
    h: Tensor,
    n1: Tensor,
    inv_std1: Vec<f64>,
    /// Feed-forward pre-activations `[rows, D]`.
    pub u: Tensor,
    r: Tensor,
    out: Tensor,
    inv_std2: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

/// Row-wise normalization to zero mean and unit variance, no affine terms.
/// Returns the normalized rows and each row's `1/sqrt(var + eps)`.
fn layer_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv.push(s);
    }
    (out, inv)
}

/// `dx = s * (dy - mean(dy) - xhat * mean(dy * xhat))` per row.
fn layer_norm_backward(xhat: &Tensor, inv_std: &[f64], dy: &Tensor) -> Tensor {
    let d = xhat.cols() as f64;
    let mut dx = Tensor::zeros(&[xhat.rows(), xhat.cols()]);
    for (i, &s) in inv_std.iter().enumerate() {
        let (xr, gr) = (xhat.row(i), dy.row(i));
        let mean_g = gr.iter().sum::<f64>() / d;
        let mean_gx = dot(gr, xr) / d;
        for ((o, g), x) in dx.row_mut(i).iter_mut().zip(gr).zip(xr) {
            *o = s * (g - mean_g - x * mean_gx);
        }
    }
    dx
}

fn rowwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, w.rows()]);
    for i in 0..n {
        out.row_mut(i)
            .copy_from_slice(&linear_forward(w, Some(b), x.row(i)));
    }
    out
}

/// Self-attention + residual + norm, then feed-forward (ReLU) + residual + norm.
pub fn encode_context(x: &Tensor, params: &ParamStore) -> (Tensor, EncoderCache) {
    let n = x.rows();
    let d = x.cols();
    let q = rowwise(x, params.value(Q_W), params.value(Q_B));
    let k = rowwise(x, params.value(K_W), params.value(K_B));
    let v = rowwise(x, params.value(V_W), params.value(V_B));
    let scale = 1.0 / (d as f64).sqrt();

    let mut attention = Tensor::zeros(&[n, n]);
    let mut h = Tensor::zeros(&[n, d]);
    let mut terms = vec![0.0; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total = set_sum(&mut e.clone());
        let a: Vec<f64> = e.iter().map(|v| v / total).collect();
        for (c, hv) in h.row_mut(i).iter_mut().enumerate() {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = a[j] * v.row(j)[c];
            }
            *hv = set_sum(&mut terms);
        }
        attention.row_mut(i).copy_from_slice(&a);
    }
    let mut y1 = rowwise(&h, params.value(O_W), params.value(O_B));
    y1.add_assign(x);
    let (n1, inv_std1) = layer_norm(&y1);
    let u = rowwise(&n1, params.value(FF1_W), params.value(FF1_B));
    let mut r = u.clone();
    relu(r.data_mut());
    let mut y2 = rowwise(&r, params.value(FF2_W), params.value(FF2_B));
    y2.add_assign(&n1);
    let (y, inv_std2) = layer_norm(&y2);

    let cache = EncoderCache {
        x: x.clone(),
        q,
        k,
        v,
        attention,
        h,
        n1,
        inv_std1,
        u,
        r,
        out: y.clone(),
        inv_std2,
    };
    (y, cache)
}

/// Backpropagates `dy` through the block; accumulates parameter gradients
/// and returns the gradient with respect to the block input.
pub fn encoder_backward(
    cache: &EncoderCache,
    dy: &Tensor,
    params: &ParamStore,
    grads: &mut GradStore,
) -> Tensor {
    let n = cache.x.rows();
    let d = cache.x.cols();
    let scale = 1.0 / (d as f64).sqrt();

    // Feed-forward branch.
    let dy2 = layer_norm_backward(&cache.out, &cache.inv_std2, dy);
    let mut dn1 = dy2.clone();
    for i in 0..n {
        let (gw, gb) = grads.pair_mut(FF2_W, FF2_B);
        let mut dr = linear_backward(params.value(FF2_W), cache.r.row(i), dy2.row(i), gw, Some(gb));
        for (g, u) in dr.iter_mut().zip(cache.u.row(i)) {
            if *u <= 0.0 {
                *g = 0.0;
            }
        }
        let (gw, gb) = grads.pair_mut(FF1_W, FF1_B);
        let dx = linear_backward(params.value(FF1_W), cache.n1.row(i), &dr, gw, Some(gb));
        for (a, b) in dn1.row_mut(i).iter_mut().zip(&dx) {
            *a += b;
        }
    }
    let dy1 = layer_norm_backward(&cache.n1, &cache.inv_std1, &dn1);

    // Attention branch.
    let mut dx = dy1.clone();
    let mut dh = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let (gw, gb) = grads.pair_mut(O_W, O_B);
        let g = linear_backward(params.value(O_W), cache.h.row(i), dy1.row(i), gw, Some(gb));
        dh.row_mut(i).copy_from_slice(&g);
    }
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let a = cache.attention.row(i);
        let da: Vec<f64> = (0..n).map(|j| dot(dh.row(i), cache.v.row(j))).collect();
        for (j, &aij) in a.iter().enumerate() {
            for (g, h) in dv.row_mut(j).iter_mut().zip(dh.row(i)) {
                *g += aij * h;
            }
        }
        let ds = softmax_backward(a, &da);
        for (j, &dsij) in ds.iter().enumerate() {
            let c = dsij * scale;
            for (g, kv) in dq.row_mut(i).iter_mut().zip(cache.k.row(j)) {
                *g += c * kv;
            }
            for (g, qv) in dk.row_mut(j).iter_mut().zip(cache.q.row(i)) {
                *g += c * qv;
            }
        }
    }
    for (w, b, dm) in [(Q_W, Q_B, &dq), (K_W, K_B, &dk), (V_W, V_B, &dv)] {
        for i in 0..n {
            let (gw, gb) = grads.pair_mut(w, b);
            let g = linear_backward(params.value(w), cache.x.row(i), dm.row(i), gw, Some(gb));
            for (a, b) in dx.row_mut(i).iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    dx
}

/// `(1/D) * ||s - t||^2` and its gradient with respect to `s`.
pub fn semantic_gap_loss(s_global: &[f64], t_global: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s_global.len() != t_global.len() || s_global.is_empty() {
        return Err(Error::invalid("semantic gap operands differ in width"));
    }
    let d = s_global.len() as f64;
    let diff: Vec<f64> = s_global.iter().zip(t_global).map(|(a, b)| a - b).collect();
    let loss = dot(&diff, &diff) / d;
    let grad = diff.iter().map(|v| 2.0 * v / d).collect();
    Ok((loss, grad))
}

/// Ground-truth triplets of one image.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub predicates: &'a [usize],
    pub subjects: &'a [usize],
    pub objects: &'a [usize],
}

/// Per-image input of the module.
#[derive(Debug, Clone, Copy)]
pub struct ScmInput<'a> {
    /// Fine-branch logits `[N, C]`.
    pub z_f: &'a Tensor,
    pub subject_dists: &'a [&'a [f64]],
    pub object_dists: &'a [&'a [f64]],
    /// Present during training only.
    pub ground_truth: Option<GroundTruth<'a>>,
}

#[derive(Debug, Clone)]
pub struct ScmCache {
    probs: Vec<Vec<f64>>,
    concat: Vec<Vec<f64>>,
    encoder: EncoderCache,
    contextual: Tensor,
    gap_grad: Option<Vec<f64>>,
}

impl ScmCache {
    pub fn attention(&self) -> &Tensor {
        &self.encoder.attention
    }

    pub fn encoder(&self) -> &EncoderCache {
        &self.encoder
    }
}

#[derive(Debug, Clone)]
pub struct ScmOutput {
    /// Corrective logits `[N, C]`.
    pub z_tilde: Tensor,
    pub l_sc: f64,
    /// Contextual global token of the predicted scene graph.
    pub s_global: Vec<f64>,
    /// Contextual global token of the ground-truth graph, when available.
    pub t_global: Option<Vec<f64>>,
    pub cache: Option<ScmCache>,
}

fn one_hot(width: usize, idx: usize) -> Result<Vec<f64>> {
    if idx >= width {
        return Err(Error::invalid(format!("class index {idx} outside 0..{width}")));
    }
    let mut v = vec![0.0; width];
    v[idx] = 1.0;
    Ok(v)
}

/// Stacks `rows` and appends their mean as the last row.
fn with_global_row(rows: &[Vec<f64>], dim: usize) -> Tensor {
    let n = rows.len();
    let mut x = Tensor::zeros(&[n + 1, dim]);
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).copy_from_slice(r);
    }
    let mean = global_token(&Tensor::from_vec(&[n, dim], rows.concat()).expect("shape")).expect("n >= 1");
    x.row_mut(n).copy_from_slice(&mean);
    x
}

fn contextual_rows(concat: &[Vec<f64>], params: &ParamStore) -> (Tensor, EncoderCache) {
    let proj = params.value(PROJ_W);
    let rows: Vec<Vec<f64>> = concat
        .iter()
        .map(|x| linear_forward(proj, None, x))
        .collect();
    let x = with_global_row(&rows, proj.rows());
    encode_context(&x, params)
}

pub fn scm_forward(
    input: &ScmInput<'_>,
    emb: &EmbeddingTable,
    params: &ParamStore,
    keep_cache: bool,
) -> Result<ScmOutput> {
    let n = input.z_f.rows();
    let classes = emb.predicate_emb.rows();
    if n == 0 {
        return Ok(ScmOutput {
            z_tilde: Tensor::zeros(&[0, classes]),
            l_sc: 0.0,
            s_global: Vec::new(),
            t_global: None,
            cache: None,
        });
    }
    if input.z_f.cols() != classes
        || input.subject_dists.len() != n
        || input.object_dists.len() != n
    {
        return Err(Error::invalid("SCM inputs disagree in relation count or width"));
    }
    let slots = emb.object_emb.rows();
    for i in 0..n {
        check_distribution(input.subject_dists[i], slots, "subject distribution")?;
        check_distribution(input.object_dists[i], slots, "object distribution")?;
    }

    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| softmax_unchecked(input.z_f.row(i)))
        .collect();
    let concat: Vec<Vec<f64>> = (0..n)
        .map(|i| concat_semantics(&probs[i], input.subject_dists[i], input.object_dists[i], emb))
        .collect();
    let (contextual, encoder) = contextual_rows(&concat, params);

    let mut z_tilde = Tensor::zeros(&[n, classes]);
    let (cw, cb) = (params.value(CLS_W), params.value(CLS_B));
    for i in 0..n {
        z_tilde
            .row_mut(i)
            .copy_from_slice(&linear_forward(cw, Some(cb), contextual.row(i)));
    }
    let s_global = contextual.row(n).to_vec();

    let (l_sc, t_global, gap_grad) = match input.ground_truth {
        Some(gt) => {
            if gt.predicates.len() != n || gt.subjects.len() != n || gt.objects.len() != n {
                return Err(Error::invalid("ground truth length differs from relation count"));
            }
            let gt_concat = (0..n)
                .map(|i| {
                    Ok(concat_semantics(
                        &one_hot(classes, gt.predicates[i])?,
                        &one_hot(slots, gt.subjects[i])?,
                        &one_hot(slots, gt.objects[i])?,
                        emb,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let (gt_ctx, _) = contextual_rows(&gt_concat, params);
            let t = gt_ctx.row(n).to_vec();
            let (l, g) = semantic_gap_loss(&s_global, &t)?;
            (l, Some(t), Some(g))
        }
        None => (0.0, None, None),
    };

    let cache = keep_cache.then_some(ScmCache {
        probs,
        concat,
        encoder,
        contextual,
        gap_grad,
    });
    Ok(ScmOutput {
        z_tilde,
        l_sc,
        s_global,
        t_global,
        cache,
    })
}

/// Backward pass given `dL/dZ~` and the weight of `l_sc` in the objective.
/// Accumulates parameter gradients and returns `dL/dZ_f`.
pub fn scm_backward(
    cache: &ScmCache,
    d_z_tilde: &Tensor,
    d_l_sc: f64,
    emb: &EmbeddingTable,
    params: &ParamStore,
    grads: &mut GradStore,
) -> Tensor {
    let n = cache.probs.len();
    let dim = cache.contextual.cols();
    let classes = cache.probs[0].len();

    let mut d_ctx = Tensor::zeros(&[n + 1, dim]);
    for i in 0..n {
        let (gw, gb) = grads.pair_mut(CLS_W, CLS_B);
        let g = linear_backward(
            params.value(CLS_W),
            cache.contextual.row(i),
            d_z_tilde.row(i),
            gw,
            Some(gb),
        );
        d_ctx.row_mut(i).copy_from_slice(&g);
    }
    if let Some(gap) = &cache.gap_grad {
        for (a, g) in d_ctx.row_mut(n).iter_mut().zip(gap) {
            *a += d_l_sc * g;
        }
    }

    let d_x = encoder_backward(&cache.encoder, &d_ctx, params, grads);
    // The appended mean row feeds back equally into every relation row.
    let d_global = d_x.row(n).to_vec();
    let proj = params.value(PROJ_W);
    let cols = proj.cols();
    let pd = proj.data();
    let mut d_z_f = Tensor::zeros(&[n, classes]);
    for i in 0..n {
        let d_row: Vec<f64> = d_x
            .row(i)
            .iter()
            .zip(&d_global)
            .map(|(a, g)| a + g / n as f64)
            .collect();
        linear_backward_params(&cache.concat[i], &d_row, grads.get_mut(PROJ_W), None);
        // Only the predicate block of the concatenation depends on Z_f.
        let mut d_sp = vec![0.0; EMBED_DIM];
        for (r, &g) in d_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wrow = &pd[r * cols + EMBED_DIM..r * cols + 2 * EMBED_DIM];
            for (a, w) in d_sp.iter_mut().zip(wrow) {
                *a += g * w;
            }
        }
        let d_p: Vec<f64> = (0..classes)
            .map(|j| dot(emb.predicate_emb.row(j), &d_sp))
            .collect();
        d_z_f
            .row_mut(i)
            .copy_from_slice(&softmax_backward(&cache.probs[i], &d_p));
    }
    d_z_f
}

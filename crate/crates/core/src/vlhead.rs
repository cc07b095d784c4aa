//! The vision-language parallel head: projection of detector features into
//! the shared embedding space, learnable per-class text embeddings, per-class
//! temperatures, scaled-dot-product similarity, softmax probabilities, and
//! late score fusion.

use crate::error::{Error, Result};
use crate::numerics::{
    affine, affine_backward, l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward,
    softmax_rows, Matrix, ParamTensor,
};
use crate::seed::rng_from_seed;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Dimensions and temperature settings of the parallel head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlHeadConfig {
    /// Dimension of the shared detector feature f_i.
    pub feature_dim: usize,
    /// Hidden width of the two-layer projection MLP.
    pub hidden_dim: usize,
    /// Embedding-space dimension shared by visual and text embeddings.
    pub embed_dim: usize,
    /// Initial value for every per-class temperature.
    pub tau_init: f64,
    /// Lower clamp applied to temperatures after every update.
    pub tau_min: f64,
    /// Upper clamp. Without it, randomly initialized runs escape the
    /// contrastive objective by inflating temperatures until every softmax
    /// is uniform.
    pub tau_max: f64,
}

impl Default for VlHeadConfig {
    fn default() -> Self {
        VlHeadConfig {
            feature_dim: 64,
            hidden_dim: 256,
            embed_dim: 512,
            tau_init: 0.07,
            tau_min: 1e-3,
            tau_max: 1.0,
        }
    }
}

impl VlHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("vlhead dimensions must be positive".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return Err(Error::Config(format!("tau_min {} must be positive", self.tau_min)));
        }
        if !(self.tau_init >= self.tau_min && self.tau_init.is_finite()) {
            return Err(Error::Config(format!(
                "tau_init {} must be >= tau_min {}",
                self.tau_init, self.tau_min
            )));
        }
        if !(self.tau_max >= self.tau_init && self.tau_max.is_finite()) {
            return Err(Error::Config(format!(
                "tau_max {} must be >= tau_init {}",
                self.tau_max, self.tau_init
            )));
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

// ---------------------------------------------------------------------------
// Projection head
// ---------------------------------------------------------------------------

/// Two-layer MLP mapping detector features into the embedding space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionHeadParams {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

impl ProjectionHeadParams {
    /// He-style init for the ReLU layer, smaller scale for the output layer,
    /// zero biases.
    pub fn init(feature_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let w1 = gaussian_matrix(&mut rng, feature_dim, hidden_dim, (2.0 / feature_dim as f64).sqrt());
        let w2 = gaussian_matrix(&mut rng, hidden_dim, embed_dim, (1.0 / hidden_dim as f64).sqrt());
        ProjectionHeadParams {
            w1: ParamTensor::new("proj.w1", w1),
            b1: ParamTensor::new("proj.b1", Matrix::zeros(1, hidden_dim)),
            w2: ParamTensor::new("proj.w2", w2),
            b2: ParamTensor::new("proj.b2", Matrix::zeros(1, embed_dim)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.value.cols()
    }
}

/// Intermediates retained for the backward pass of [`visual_embed`].
#[derive(Debug, Clone)]
pub struct VisualEmbedCache {
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub embed_pre: Matrix,
}

/// Project feature rows into unit-norm visual embeddings:
/// `l2_normalize_rows(affine(relu(affine(f, w1, b1)), w2, b2))`.
pub fn visual_embed_with_cache(
    f: &Matrix,
    params: &ProjectionHeadParams,
) -> Result<(Matrix, VisualEmbedCache)> {
    if f.cols() != params.feature_dim() {
        return Err(Error::Dimension(format!(
            "visual_embed features have dim {} but projection expects {}",
            f.cols(),
            params.feature_dim()
        )));
    }
    let hidden_pre = affine(f, &params.w1.value, params.b1.value.row(0))?;
    let hidden = relu(&hidden_pre)?;
    let embed_pre = affine(&hidden, &params.w2.value, params.b2.value.row(0))?;
    let vhat = l2_normalize_rows(&embed_pre)?;
    Ok((vhat, VisualEmbedCache { hidden_pre, hidden, embed_pre }))
}

/// Project feature rows into unit-norm visual embeddings.
pub fn visual_embed(f: &Matrix, params: &ProjectionHeadParams) -> Result<Matrix> {
    visual_embed_with_cache(f, params).map(|(v, _)| v)
}

/// Backward pass of [`visual_embed`]: accumulates parameter gradients and
/// returns the gradient with respect to the input features.
pub fn visual_embed_backward(
    f: &Matrix,
    cache: &VisualEmbedCache,
    vhat: &Matrix,
    params: &mut ProjectionHeadParams,
    d_vhat: &Matrix,
) -> Result<Matrix> {
    let d_embed_pre = l2_normalize_rows_backward(&cache.embed_pre, vhat, d_vhat);
    let (d_hidden, dw2, db2) = affine_backward(&cache.hidden, &params.w2.value, &d_embed_pre)?;
    params.w2.grad.add_scaled(&dw2, 1.0)?;
    params
        .b2
        .grad
        .add_scaled(&Matrix::from_vec(1, db2.len(), db2)?, 1.0)?;
    let d_hidden_pre = relu_backward(&cache.hidden_pre, &d_hidden)?;
    let (d_f, dw1, db1) = affine_backward(f, &params.w1.value, &d_hidden_pre)?;
    params.w1.grad.add_scaled(&dw1, 1.0)?;
    params
        .b1
        .grad
        .add_scaled(&Matrix::from_vec(1, db1.len(), db1)?, 1.0)?;
    Ok(d_f)
}

// ---------------------------------------------------------------------------
// Text embeddings
// ---------------------------------------------------------------------------

/// One learnable embedding row per class. Rows are unit-norm right after
/// construction and are free to drift during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEmbeddingTable {
    pub embeddings: ParamTensor,
    pub class_names: Vec<String>,
}

pub fn default_class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class_{i}")).collect()
}

impl TextEmbeddingTable {
    /// Seeded i.i.d. standard-normal rows, L2-normalized. Identical seeds
    /// give bitwise-identical tables.
    pub fn seeded(class_names: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let c = class_names.len();
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {c}")));
        }
        let mut rng = rng_from_seed(seed);
        let raw = gaussian_matrix(&mut rng, c, dim, 1.0);
        let normalized = l2_normalize_rows(&raw)?;
        Ok(TextEmbeddingTable {
            embeddings: ParamTensor::new("text_embeddings", normalized),
            class_names,
        })
    }

    /// Build from imported vectors. Counts and dimensions must match the
    /// declaration exactly; values must be finite. Rows are L2-normalized,
    /// so pre-normalized imports pass through unchanged (up to rounding).
    pub fn from_vectors(
        class_names: Vec<String>,
        dim: usize,
        vectors: &[Vec<f64>],
    ) -> Result<Self> {
        let c = class_names.len();
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {c}")));
        }
        if vectors.len() != c {
            return Err(Error::Format(format!(
                "declared {c} classes but got {} vectors",
                vectors.len()
            )));
        }
        let mut rows = Matrix::zeros(c, dim);
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "class {} ({}) vector has length {} but dim is {dim}",
                    i, class_names[i], v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Format(format!(
                    "class {} ({}) vector contains a non-finite value",
                    i, class_names[i]
                )));
            }
            rows.row_mut(i).copy_from_slice(v);
        }
        let normalized = l2_normalize_rows(&rows).map_err(|e| match e {
            Error::DegenerateVector { norm, limit } => Error::Format(format!(
                "imported vector has degenerate norm {norm:.3e} (limit {limit:.3e})"
            )),
            other => other,
        })?;
        Ok(TextEmbeddingTable {
            embeddings: ParamTensor::new("text_embeddings", normalized),
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.value.cols()
    }
}

// ---------------------------------------------------------------------------
// Temperatures
// ---------------------------------------------------------------------------

/// One learnable positive temperature per class, kept in
/// `[tau_min, tau_max]` by clamping after every update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperatureVector {
    pub tau: ParamTensor,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl TemperatureVector {
    pub fn new(num_classes: usize, init: f64, tau_min: f64) -> Result<Self> {
        Self::bounded(num_classes, init, tau_min, f64::INFINITY)
    }

    pub fn bounded(num_classes: usize, init: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        let ordered = tau_min > 0.0 && tau_min <= init && init <= tau_max;
        if !ordered {
            return Err(Error::Config(format!(
                "temperature init {init} outside [{tau_min}, {tau_max}]"
            )));
        }
        let values = Matrix::from_vec(1, num_classes, vec![init; num_classes])?;
        Ok(TemperatureVector { tau: ParamTensor::new("temperatures", values), tau_min, tau_max })
    }

    pub fn values(&self) -> &[f64] {
        self.tau.value.row(0)
    }

    pub fn len(&self) -> usize {
        self.tau.value.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Re-establish the bound invariants after an in-place update.
    pub fn clamp(&mut self) {
        let (lo, hi) = (self.tau_min, self.tau_max);
        for v in self.tau.value.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}

// ---------------------------------------------------------------------------
// Similarity and fusion
// ---------------------------------------------------------------------------

/// Temperature-scaled similarities: `s[i][c] = (vhat_i . t_c) / tau_c`.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub s: Matrix,
}

/// Compute the similarity matrix. Temperatures below the clamp are treated
/// as `tau_min` (logged) so the division is always well-defined.
pub fn similarity(
    vhat: &Matrix,
    table: &TextEmbeddingTable,
    temps: &TemperatureVector,
) -> Result<SimilarityMatrix> {
    if vhat.cols() != table.dim() {
        return Err(Error::Dimension(format!(
            "similarity: embeddings dim {} vs table dim {}",
            vhat.cols(),
            table.dim()
        )));
    }
    if temps.len() != table.num_classes() {
        return Err(Error::Dimension(format!(
            "similarity: {} temperatures for {} classes",
            temps.len(),
            table.num_classes()
        )));
    }
    let mut s = vhat.matmul_transpose_other(&table.embeddings.value)?;
    let taus = effective_taus(temps);
    for r in 0..s.rows() {
        for (v, &tau) in s.row_mut(r).iter_mut().zip(taus.iter()) {
            *v /= tau;
        }
    }
    Ok(SimilarityMatrix { s })
}

fn effective_taus(temps: &TemperatureVector) -> Vec<f64> {
    temps
        .values()
        .iter()
        .map(|&t| {
            if t < temps.tau_min {
                log::warn!("temperature {t} below clamp {}; clamping", temps.tau_min);
                temps.tau_min
            } else {
                t
            }
        })
        .collect()
}

/// Backward pass of [`similarity`]: accumulates gradients into the text
/// table and temperatures and returns the gradient w.r.t. `vhat`.
pub fn similarity_backward(
    vhat: &Matrix,
    table: &mut TextEmbeddingTable,
    temps: &mut TemperatureVector,
    sim: &SimilarityMatrix,
    d_sim: &Matrix,
) -> Result<Matrix> {
    let taus = effective_taus(temps);
    // g_scaled[i][c] = d_sim[i][c] / tau_c
    let mut g_scaled = d_sim.clone();
    for r in 0..g_scaled.rows() {
        for (v, &tau) in g_scaled.row_mut(r).iter_mut().zip(taus.iter()) {
            *v /= tau;
        }
    }
    let d_vhat = g_scaled.matmul(&table.embeddings.value)?;
    let d_text = g_scaled.matmul_transpose_self(vhat)?;
    table.embeddings.grad.add_scaled(&d_text, 1.0)?;
    // d tau_c = -sum_i d_sim[i][c] * s[i][c] / tau_c
    let mut d_tau = vec![0.0; taus.len()];
    for r in 0..d_sim.rows() {
        for (c, (&g, &s)) in d_sim.row(r).iter().zip(sim.s.row(r).iter()).enumerate() {
            d_tau[c] -= g * s / taus[c];
        }
    }
    temps
        .tau
        .grad
        .add_scaled(&Matrix::from_vec(1, d_tau.len(), d_tau)?, 1.0)?;
    Ok(d_vhat)
}

/// Softmax over similarities: the parallel branch's class probabilities.
pub fn clip_probs(sim: &SimilarityMatrix) -> Result<Matrix> {
    softmax_rows(&sim.s)
}

fn check_row_stochastic(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let sum: f64 = m.row(r).iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "{what} row {r} sums to {sum}, expected 1 within 1e-6"
            )));
        }
    }
    Ok(())
}

/// Convex combination `alpha * p_ce + (1 - alpha) * p_clip`, rows remain
/// stochastic by linearity. `alpha` outside [0, 1] is a config error.
pub fn fuse_scores(p_ce: &Matrix, p_clip: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weight alpha {alpha} outside [0, 1]")));
    }
    if p_ce.shape() != p_clip.shape() {
        return Err(Error::Dimension(format!(
            "fuse_scores shapes {:?} vs {:?}",
            p_ce.shape(),
            p_clip.shape()
        )));
    }
    check_row_stochastic(p_ce, "p_ce")?;
    check_row_stochastic(p_clip, "p_clip")?;
    if alpha == 1.0 {
        return Ok(p_ce.clone());
    }
    if alpha == 0.0 {
        return Ok(p_clip.clone());
    }
    let mut out = Matrix::zeros(p_ce.rows(), p_ce.cols());
    for ((o, &a), &b) in out
        .data_mut()
        .iter_mut()
        .zip(p_ce.data().iter())
        .zip(p_clip.data().iter())
    {
        *o = alpha * a + (1.0 - alpha) * b;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_check, l2_norm};
    use rand::Rng;

    fn small_params() -> ProjectionHeadParams {
        ProjectionHeadParams::init(4, 5, 6, 7)
    }

    #[test]
    fn seeded_tables_are_bitwise_identical() {
        let a = TextEmbeddingTable::seeded(default_class_names(5), 16, 3).unwrap();
        let b = TextEmbeddingTable::seeded(default_class_names(5), 16, 3).unwrap();
        assert_eq!(a.embeddings.value, b.embeddings.value);
        let c = TextEmbeddingTable::seeded(default_class_names(5), 16, 4).unwrap();
        assert_ne!(a.embeddings.value, c.embeddings.value);
        for r in 0..a.num_classes() {
            assert!((l2_norm(a.embeddings.value.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn import_prenormalized_rows_unchanged() {
        let vectors = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]];
        let t = TextEmbeddingTable::from_vectors(default_class_names(2), 3, &vectors).unwrap();
        for (r, v) in vectors.iter().enumerate() {
            for (a, b) in t.embeddings.value.row(r).iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn import_mismatches_are_format_errors() {
        // 20 declared classes, 19 vectors
        let vectors: Vec<Vec<f64>> = (0..19).map(|_| vec![1.0, 0.0]).collect();
        assert!(matches!(
            TextEmbeddingTable::from_vectors(default_class_names(20), 2, &vectors),
            Err(Error::Format(_))
        ));
        // wrong dim
        let vectors = vec![vec![1.0, 0.0], vec![1.0]];
        assert!(matches!(
            TextEmbeddingTable::from_vectors(default_class_names(2), 2, &vectors),
            Err(Error::Format(_))
        ));
        // non-finite
        let vectors = vec![vec![1.0, 0.0], vec![f64::NAN, 1.0]];
        assert!(matches!(
            TextEmbeddingTable::from_vectors(default_class_names(2), 2, &vectors),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn visual_embed_identity_padded_fixture() {
        // w1, w2 identity-padded, zero biases, nonnegative input -> plain
        // normalized copy of the input in the leading coordinates
        let mut p = small_params();
        p.w1.value = Matrix::identity_padded(4, 5);
        p.w2.value = Matrix::identity_padded(5, 6);
        let f = Matrix::from_vec(1, 4, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let v = visual_embed(&f, &p).unwrap();
        let expect = [0.6, 0.8, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in v.row(0).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn visual_embed_rows_are_unit_norm() {
        let mut p = small_params();
        // nonzero output bias so no row can be exactly zero pre-normalization
        p.b2.value.fill(0.05);
        let mut rng = rng_from_seed(5);
        let f = Matrix::from_vec(
            6,
            4,
            (0..24).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let v = visual_embed(&f, &p).unwrap();
        for r in 0..v.rows() {
            assert!((l2_norm(v.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn visual_embed_zero_input_zero_bias_is_degenerate() {
        let p = small_params(); // biases are zero at init
        let f = Matrix::zeros(1, 4);
        assert!(matches!(
            visual_embed(&f, &p),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn similarity_fixtures() {
        // vhat . t = 0.5, tau = 0.07 -> 7.142857...
        let table = TextEmbeddingTable::from_vectors(
            default_class_names(2),
            2,
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let temps = TemperatureVector::new(2, 0.07, 1e-3).unwrap();
        let vhat = Matrix::from_vec(1, 2, vec![0.5, 0.8660254037844386]).unwrap();
        let sim = similarity(&vhat, &table, &temps).unwrap();
        assert!((sim.s.get(0, 0) - 0.5 / 0.07).abs() < 1e-9);
        assert!((sim.s.get(0, 0) - 7.142857142857143).abs() < 1e-9);

        // orthogonal -> 0 for any tau
        let v = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let sim = similarity(&v, &table, &temps).unwrap();
        assert_eq!(sim.s.get(0, 0), 0.0);

        // vhat == t_c -> 1/0.07 = 14.285714...
        let v = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let sim = similarity(&v, &table, &temps).unwrap();
        assert!((sim.s.get(0, 0) - 14.285714285714286).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_identity_and_argmax_invariance() {
        let mut rng = rng_from_seed(12);
        let table = TextEmbeddingTable::seeded(default_class_names(6), 8, 2).unwrap();
        let mut temps = TemperatureVector::new(6, 0.07, 1e-3).unwrap();
        for (i, v) in temps.tau.value.data_mut().iter_mut().enumerate() {
            *v = 0.05 + 0.01 * i as f64;
        }
        let vhat = l2_normalize_rows(
            &Matrix::from_vec(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        )
        .unwrap();
        let sim = similarity(&vhat, &table, &temps).unwrap();
        for i in 0..4 {
            for c in 0..6 {
                let raw = dot(vhat.row(i), table.embeddings.value.row(c));
                assert!((sim.s.get(i, c) * temps.values()[c] - raw).abs() < 1e-9);
            }
        }

        // uniform temperatures: argmax of scaled == argmax of raw
        let uniform = TemperatureVector::new(6, 0.07, 1e-3).unwrap();
        let sim = similarity(&vhat, &table, &uniform).unwrap();
        for i in 0..4 {
            let argmax_s = (0..6)
                .max_by(|&a, &b| sim.s.get(i, a).partial_cmp(&sim.s.get(i, b)).unwrap())
                .unwrap();
            let argmax_raw = (0..6)
                .max_by(|&a, &b| {
                    dot(vhat.row(i), table.embeddings.value.row(a))
                        .partial_cmp(&dot(vhat.row(i), table.embeddings.value.row(b)))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(argmax_s, argmax_raw);
        }
    }

    #[test]
    fn clip_probs_fixtures() {
        let sim = SimilarityMatrix { s: Matrix::from_vec(1, 4, vec![3.0; 4]).unwrap() };
        let p = clip_probs(&sim).unwrap();
        for &v in p.row(0) {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let sim = SimilarityMatrix {
            s: Matrix::from_vec(1, 2, vec![2.0_f64.ln(), 0.0]).unwrap(),
        };
        let p = clip_probs(&sim).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);

        // one similarity far above the rest -> probability ~ 1
        let sim = SimilarityMatrix {
            s: Matrix::from_vec(1, 3, vec![30.0, 0.0, 0.0]).unwrap(),
        };
        let p = clip_probs(&sim).unwrap();
        assert!(p.get(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn fuse_fixtures() {
        let p_ce = Matrix::from_vec(1, 2, vec![0.8, 0.2]).unwrap();
        let p_clip = Matrix::from_vec(1, 2, vec![0.6, 0.4]).unwrap();
        let fused = fuse_scores(&p_ce, &p_clip, 0.7).unwrap();
        assert!((fused.get(0, 0) - 0.74).abs() < 1e-12);

        assert_eq!(fuse_scores(&p_ce, &p_clip, 1.0).unwrap(), p_ce);
        assert_eq!(fuse_scores(&p_ce, &p_clip, 0.0).unwrap(), p_clip);

        let sum: f64 = fused.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        assert!(matches!(
            fuse_scores(&p_ce, &p_clip, 1.5),
            Err(Error::Config(_))
        ));
        let not_stochastic = Matrix::from_vec(1, 2, vec![0.8, 0.8]).unwrap();
        assert!(fuse_scores(&not_stochastic, &p_clip, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fuse_is_monotone_in_both_arguments(a in 0.0..1.0f64, p1 in 0.0..1.0f64, p2 in 0.0..1.0f64, q1 in 0.0..1.0f64, q2 in 0.0..1.0f64) {
            let lo = p1.min(p2);
            let hi = p1.max(p2);
            let ce_lo = Matrix::from_vec(1, 2, vec![lo, 1.0 - lo]).unwrap();
            let ce_hi = Matrix::from_vec(1, 2, vec![hi, 1.0 - hi]).unwrap();
            let clip_lo = Matrix::from_vec(1, 2, vec![q1.min(q2), 1.0 - q1.min(q2)]).unwrap();
            let clip_hi = Matrix::from_vec(1, 2, vec![q1.max(q2), 1.0 - q1.max(q2)]).unwrap();
            let f_lo = fuse_scores(&ce_lo, &clip_lo, a).unwrap();
            let f_hi = fuse_scores(&ce_hi, &clip_hi, a).unwrap();
            proptest::prop_assert!(f_hi.get(0, 0) >= f_lo.get(0, 0) - 1e-12);
        }
    }

    /// Gradients of a scalar readout of the similarity matrix with respect to
    /// every parameter group pass the finite-difference contract.
    #[test]
    fn similarity_chain_gradients_pass_finite_diff() {
        let mut rng = rng_from_seed(31);
        let feature_dim = 4;
        let hidden = 5;
        let embed = 6;
        let classes = 3;
        let n = 3;

        let proj = ProjectionHeadParams::init(feature_dim, hidden, embed, 8);
        let table = TextEmbeddingTable::seeded(default_class_names(classes), embed, 9).unwrap();
        let mut temps = TemperatureVector::new(classes, 0.07, 1e-3).unwrap();
        for (i, v) in temps.tau.value.data_mut().iter_mut().enumerate() {
            *v = 0.05 + 0.02 * i as f64;
        }
        let f = Matrix::from_vec(
            n,
            feature_dim,
            (0..n * feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let readout = Matrix::from_vec(
            n,
            classes,
            (0..n * classes).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        // forward + analytic gradients
        let mut proj_m = proj.clone();
        let mut table_m = table.clone();
        let mut temps_m = temps.clone();
        let (vhat, cache) = visual_embed_with_cache(&f, &proj_m).unwrap();
        let sim = similarity(&vhat, &table_m, &temps_m).unwrap();
        let d_vhat =
            similarity_backward(&vhat, &mut table_m, &mut temps_m, &sim, &readout).unwrap();
        visual_embed_backward(&f, &cache, &vhat, &mut proj_m, &d_vhat).unwrap();

        let mut tensors = vec![
            proj_m.w1.clone(),
            proj_m.b1.clone(),
            proj_m.w2.clone(),
            proj_m.b2.clone(),
            table_m.embeddings.clone(),
            temps_m.tau.clone(),
        ];
        let class_names = table.class_names.clone();
        let report = finite_diff_check(&mut tensors, 1e-6, |ts| {
            let p = ProjectionHeadParams {
                w1: ts[0].clone(),
                b1: ts[1].clone(),
                w2: ts[2].clone(),
                b2: ts[3].clone(),
            };
            let tb = TextEmbeddingTable {
                embeddings: ts[4].clone(),
                class_names: class_names.clone(),
            };
            let tv = TemperatureVector { tau: ts[5].clone(), tau_min: 1e-3, tau_max: f64::INFINITY };
            let vhat = visual_embed(&f, &p)?;
            let sim = similarity(&vhat, &tb, &tv)?;
            Ok(dot(sim.s.data(), readout.data()))
        })
        .unwrap();
        for p in &report.params {
            assert!(
                p.max_rel_error < 1e-4,
                "group {} rel error {:e}",
                p.name,
                p.max_rel_error
            );
        }
    }

    #[test]
    fn temperature_clamp_restores_invariant() {
        let mut temps = TemperatureVector::bounded(3, 0.07, 1e-3, 1.0).unwrap();
        temps.tau.value.data_mut()[1] = -0.5;
        temps.tau.value.data_mut()[2] = 40.0;
        temps.clamp();
        assert_eq!(temps.values()[1], 1e-3);
        assert_eq!(temps.values()[2], 1.0);
        assert_eq!(temps.values()[0], 0.07);
    }
}

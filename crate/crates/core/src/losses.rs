//! Objective terms: source cross-entropy, the inter-class and intra-class
//! discriminative structure losses, and the Grassmannian alignment loss.
//!
//! Every tape-building function here takes features already on a [`Tape`] and
//! returns a scalar node. Anchors arrive as plain matrices and are recorded as
//! constants, so no gradient ever reaches them.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

/// Per-batch (or per-epoch mean) objective values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Inter-class loss per manifold layer.
    pub inter: Vec<f64>,
    /// Intra-class loss per manifold layer (zero while the warm-up is active).
    pub intra: Vec<f64>,
    /// Alignment loss per manifold layer.
    pub align: Vec<f64>,
    pub ds: f64,
    pub al: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn inter_sum(&self) -> f64 {
        self.inter.iter().sum()
    }

    pub fn intra_sum(&self) -> f64 {
        self.intra.iter().sum()
    }

    pub fn align_sum(&self) -> f64 {
        self.align.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.ds, self.al, self.total].iter().all(|v| v.is_finite())
    }
}

/// Assembles `total = ce + λ1·ds + λ2·al` with `ds = Σ_l (inter_l + intra_l)`
/// and `al = Σ_l align_l`.
pub fn total_objective(
    ce: f64,
    inter: Vec<f64>,
    intra: Vec<f64>,
    align: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
) -> LossBreakdown {
    let ds = inter.iter().sum::<f64>() + intra.iter().sum::<f64>();
    let al = align.iter().sum::<f64>();
    LossBreakdown {
        ce,
        inter,
        intra,
        align,
        ds,
        al,
        total: ce + lambda1 * ds + lambda2 * al,
    }
}

/// Top-k indicator over soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationMask {
    /// `c x n` matrix of zeros and ones; column `j` has exactly `k` ones.
    pub mask: Matrix,
    pub k: usize,
}

/// Marks the `k` largest entries of each column of `p`; ties go to the
/// smaller class index.
pub fn topk_mask(p: &Matrix, k: usize) -> Result<TruncationMask> {
    let c = p.rows();
    if k == 0 || k > c {
        return Err(Error::Usage(format!("top-k with k={k} for {c} classes")));
    }
    let mut mask = Matrix::zeros(c, p.cols());
    let mut order: Vec<usize> = (0..c).collect();
    for j in 0..p.cols() {
        let col = p.col(j);
        // Stable sort keeps the smaller index first among equal values.
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]));
        for &i in &order[..k] {
            mask[(i, j)] = 1.0;
        }
        order.sort_unstable();
    }
    Ok(TruncationMask { mask, k })
}

pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    tape.cross_entropy_from_logits(logits, labels)
}

/// `n x c` matrix whose column `i` averages the samples labelled `i`.
pub fn class_mean_operator(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass {
            class,
            context: "batch".into(),
        });
    }
    let mut op = Matrix::zeros(labels.len(), classes);
    for (j, &y) in labels.iter().enumerate() {
        op[(j, y)] = 1.0 / counts[y] as f64;
    }
    Ok(op)
}

/// Source inter-class similarity of one layer.
///
/// Batch class means are centred on the anchor total mean, normalised, and
/// the loss is the mean pairwise cosine `2/(c(c-1)) Σ_{i<j} ĥ_iᵀĥ_j`.
pub fn inter_class_loss(
    tape: &mut Tape,
    h_s: NodeId,
    labels: &[usize],
    classes: usize,
    anchor_total_mean: &[f64],
    eps: f64,
) -> Result<NodeId> {
    if classes < 2 {
        return Err(Error::Usage("inter-class loss needs at least 2 classes".into()));
    }
    let (d, n) = tape.value(h_s).shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if anchor_total_mean.len() != d {
        return Err(Error::Shape(format!(
            "anchor mean of length {} for {d}-dimensional features",
            anchor_total_mean.len()
        )));
    }
    let averaging = tape.constant(class_mean_operator(labels, classes)?);
    let means = tape.matmul(h_s, averaging)?;
    let neg_anchor: Vec<f64> = anchor_total_mean.iter().map(|v| -v).collect();
    let neg_anchor = tape.constant(Matrix::column_vector(&neg_anchor)?);
    let centered = tape.add_bias(means, neg_anchor)?;
    let unit = tape.normalize_columns(centered, eps);
    let unit_t = tape.transpose(unit);
    let sim = tape.matmul(unit_t, unit)?;
    let upper = tape.constant(Matrix::from_fn(classes, classes, |i, j| if i < j { 1.0 } else { 0.0 }));
    let pairs = tape.elementwise_mul(sim, upper)?;
    let total = tape.sum(pairs);
    let c = classes as f64;
    Ok(tape.scale(total, 2.0 / (c * (c - 1.0))))
}

/// Truncated intra-class similarity of one target layer:
/// `-(1/(n_t k)) Σ_{i,j} χ(i,j) P(i,j) S(i,j)` with `S = Āᵀ Ĥ_t` between
/// normalised anchor class means and normalised target features.
///
/// With `detach_probs` the soft labels enter as constants; otherwise the
/// gradient also flows into `probs` (the mask is always constant).
pub fn intra_class_loss(
    tape: &mut Tape,
    h_t: NodeId,
    probs: NodeId,
    anchor_class_means: &Matrix,
    k: usize,
    eps: f64,
    detach_probs: bool,
) -> Result<NodeId> {
    let mask = topk_mask(tape.value(probs), k)?;
    intra_weighted(tape, h_t, probs, anchor_class_means, &mask.mask, k, eps, detach_probs)
}

/// Untruncated probabilistic intra-class loss, prefactor `1/(n_t c)`.
pub fn intra_class_loss_prob(
    tape: &mut Tape,
    h_t: NodeId,
    probs: NodeId,
    anchor_class_means: &Matrix,
    eps: f64,
    detach_probs: bool,
) -> Result<NodeId> {
    let (c, n) = tape.value(probs).shape();
    let ones = Matrix::filled(c, n, 1.0);
    intra_weighted(tape, h_t, probs, anchor_class_means, &ones, c, eps, detach_probs)
}

#[allow(clippy::too_many_arguments)]
fn intra_weighted(
    tape: &mut Tape,
    h_t: NodeId,
    probs: NodeId,
    anchor_class_means: &Matrix,
    mask: &Matrix,
    k: usize,
    eps: f64,
    detach_probs: bool,
) -> Result<NodeId> {
    let (d, n) = tape.value(h_t).shape();
    let p = tape.value(probs);
    let c = p.rows();
    if p.cols() != n || anchor_class_means.shape() != (d, c) {
        return Err(Error::Usage(format!(
            "intra-class shapes: features {d}x{n}, probs {}x{}, anchors {}x{}",
            c,
            p.cols(),
            anchor_class_means.rows(),
            anchor_class_means.cols()
        )));
    }
    for j in 0..n {
        let s: f64 = p.col(j).iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Usage(format!("soft-label column {j} sums to {s}")));
        }
    }
    let weights = if detach_probs {
        let w = p.hadamard(mask)?;
        tape.constant(w)
    } else {
        let m = tape.constant(mask.clone());
        tape.elementwise_mul(probs, m)?
    };
    let anchors_t = tape.constant(numerics::normalize_columns(anchor_class_means, eps).transpose());
    let unit = tape.normalize_columns(h_t, eps);
    let sim = tape.matmul(anchors_t, unit)?;
    let weighted = tape.elementwise_mul(weights, sim)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / (n * k) as f64))
}

/// `(1/d²) ‖U_s U_sᵀ - U_t U_tᵀ‖²_F` for the leading `d'` eigenvectors of two
/// covariance matrices.
pub fn grassmann_distance(c_s: &Matrix, c_t: &Matrix, d_prime: usize, gap_tol: f64) -> Result<f64> {
    if c_s.shape() != c_t.shape() || c_s.rows() != c_s.cols() {
        return Err(Error::Shape(format!(
            "grassmann distance of {}x{} and {}x{}",
            c_s.rows(),
            c_s.cols(),
            c_t.rows(),
            c_t.cols()
        )));
    }
    let d = c_s.rows();
    if d_prime == 0 || d_prime > d {
        return Err(Error::Usage(format!("d'={d_prime} outside 1..={d}")));
    }
    let proj = |c: &Matrix| -> Result<Matrix> {
        let eig = numerics::sym_eig(c)?;
        let gap = eig.gap(d_prime);
        if !(gap >= gap_tol) {
            return Err(Error::DegenerateSpectrum {
                gap,
                d_prime,
                tol: gap_tol,
            });
        }
        Ok(eig.projector(d_prime))
    };
    let diff = proj(c_s)?.sub(&proj(c_t)?)?;
    Ok(diff.frobenius_sq() / (d * d) as f64)
}

/// Grassmannian alignment between source and target features of one layer,
/// from batch covariances.
pub fn alignment_loss(tape: &mut Tape, h_s: NodeId, h_t: NodeId, d_prime: usize, gap_tol: f64) -> Result<NodeId> {
    let d = tape.value(h_s).rows();
    if tape.value(h_t).rows() != d {
        return Err(Error::Shape("source and target feature dimensions differ".into()));
    }
    let p_s = tape.subspace_projector(h_s, d_prime, gap_tol)?;
    let p_t = tape.subspace_projector(h_t, d_prime, gap_tol)?;
    let diff = tape.sub(p_s, p_t)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, 1.0 / (d * d) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn softmax(rows: usize, cols: usize, seed: u64) -> Matrix {
        crate::autodiff::softmax_columns(&random(rows, cols, seed).scale(2.0))
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<NodeId>) -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape)?;
        Ok(tape.scalar(root))
    }

    fn inter_value(means: &Matrix, anchor: &[f64]) -> f64 {
        // One sample per class, so batch class means are the columns.
        let labels: Vec<usize> = (0..means.cols()).collect();
        eval(|t| {
            let h = t.leaf(means.clone());
            inter_class_loss(t, h, &labels, means.cols(), anchor, 1e-12)
        })
        .unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::zeros(4, 3);
        let v = eval(|t| {
            let z = t.leaf(uniform);
            cross_entropy(t, z, &[0, 1, 3])
        })
        .unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);

        let mut peaked = Matrix::zeros(3, 2);
        peaked[(1, 0)] = 20.0;
        peaked[(2, 1)] = 20.0;
        let v = eval(|t| {
            let z = t.leaf(peaked);
            cross_entropy(t, z, &[1, 2])
        })
        .unwrap();
        assert!(v <= 1e-8);
    }

    #[test]
    fn cross_entropy_matches_loop_oracle() {
        let z = random(3, 5, 1).scale(3.0);
        let labels = [2, 0, 1, 1, 2];
        let mut oracle = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let denom: f64 = (0..3).map(|i| z[(i, j)].exp()).sum();
            oracle -= (z[(y, j)].exp() / denom).ln();
        }
        oracle /= 5.0;
        let v = eval(|t| {
            let n = t.leaf(z.clone());
            cross_entropy(t, n, &labels)
        })
        .unwrap();
        assert!((v - oracle).abs() < 1e-14);
    }

    #[test]
    fn inter_class_at_120_degrees() {
        let angles = [0.0f64, 2.0, 4.0].map(|k| k * std::f64::consts::PI / 3.0);
        let means = Matrix::from_columns(&angles.map(|a| vec![a.cos(), a.sin()])).unwrap();
        assert!((inter_value(&means, &[0.0, 0.0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn inter_class_antipodal_pair() {
        let means = Matrix::from_rows(&[&[1.0, -1.0], &[0.0, 0.0]]).unwrap();
        assert!((inter_value(&means, &[0.0, 0.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn inter_class_three_axes() {
        let means = Matrix::from_rows(&[&[1.0, 0.0, -1.0], &[0.0, 1.0, 0.0]]).unwrap();
        assert!((inter_value(&means, &[0.0, 0.0]) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inter_class_centres_on_anchor() {
        // Shifting all means and the anchor by the same vector changes nothing.
        let means = Matrix::from_rows(&[&[1.0, 0.0, -1.0], &[0.0, 1.0, 0.0]]).unwrap();
        let shifted = means.add_column(&Matrix::column_vector(&[5.0, -2.0]).unwrap()).unwrap();
        assert!((inter_value(&shifted, &[5.0, -2.0]) + 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn inter_class_uses_batch_class_means() {
        let h = random(3, 6, 2);
        let labels = [0, 1, 0, 1, 2, 2];
        let anchor = [0.1, -0.2, 0.05];
        let mut cols = vec![vec![0.0; 3]; 3];
        for (j, &y) in labels.iter().enumerate() {
            for i in 0..3 {
                cols[y][i] += h[(i, j)] / 2.0;
            }
        }
        let means = Matrix::from_columns(&cols).unwrap();
        let v = eval(|t| {
            let x = t.leaf(h.clone());
            inter_class_loss(t, x, &labels, 3, &anchor, 1e-12)
        })
        .unwrap();
        assert!((v - inter_value(&means, &anchor)).abs() < 1e-14);
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn inter_class_missing_class() {
        let err = eval(|t| {
            let x = t.leaf(random(2, 4, 3));
            inter_class_loss(t, x, &[0, 0, 2, 2], 3, &[0.0, 0.0], 1e-12)
        })
        .unwrap_err();
        assert!(matches!(err, Error::MissingClass { class: 1, .. }));
    }

    #[test]
    fn topk_examples() {
        let p = Matrix::column_vector(&[0.75, 0.15, 0.1]).unwrap();
        assert_eq!(topk_mask(&p, 2).unwrap().mask.as_slice(), &[1.0, 1.0, 0.0]);
        assert_eq!(topk_mask(&p, 3).unwrap().mask.as_slice(), &[1.0, 1.0, 1.0]);
        let tie = Matrix::column_vector(&[0.5, 0.5, 0.0]).unwrap();
        assert_eq!(topk_mask(&tie, 1).unwrap().mask.as_slice(), &[1.0, 0.0, 0.0]);
        assert!(topk_mask(&p, 0).is_err());
        assert!(topk_mask(&p, 4).is_err());
    }

    #[test]
    fn topk_columns_have_exactly_k_ones() {
        let p = softmax(5, 30, 4);
        for k in 1..=5 {
            let m = topk_mask(&p, k).unwrap();
            for j in 0..30 {
                assert_eq!(m.mask.col(j).iter().sum::<f64>(), k as f64);
            }
        }
    }

    fn intra_value(h: &Matrix, p: &Matrix, anchors: &Matrix, k: Option<usize>) -> f64 {
        eval(|t| {
            let x = t.leaf(h.clone());
            let pn = t.constant(p.clone());
            match k {
                Some(k) => intra_class_loss(t, x, pn, anchors, k, 1e-12, true),
                None => intra_class_loss_prob(t, x, pn, anchors, 1e-12, true),
            }
        })
        .unwrap()
    }

    #[test]
    fn intra_class_top2_arithmetic() {
        // h = e1 against anchors e1, e2, 0.9 e1 + √0.19 e2 gives S = [1, 0, 0.9].
        let anchors = Matrix::from_rows(&[&[1.0, 0.0, 0.9], &[0.0, 1.0, 0.19f64.sqrt()]]).unwrap();
        let h = Matrix::column_vector(&[1.0, 0.0]).unwrap();
        let p = Matrix::column_vector(&[0.75, 0.15, 0.1]).unwrap();
        let v = intra_value(&h, &p, &anchors, Some(2));
        assert!((v + 0.375).abs() < 1e-15, "{v}");
    }

    #[test]
    fn intra_class_maximal_agreement() {
        let anchors = random(4, 3, 5);
        let h = anchors.select_columns(&[1]).unwrap().scale(3.0);
        let p = Matrix::column_vector(&[0.0, 1.0, 0.0]).unwrap();
        assert!((intra_value(&h, &p, &anchors, Some(1)) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn intra_class_uniform_probabilistic() {
        // All similarities 1: every anchor equals the sample direction.
        let anchors = Matrix::from_rows(&[&[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5]]).unwrap();
        let h = Matrix::column_vector(&[3.0, 3.0]).unwrap();
        let p = Matrix::column_vector(&[1.0 / 3.0; 3]).unwrap();
        assert!((intra_value(&h, &p, &anchors, None) + 1.0 / 3.0).abs() < 1e-15);
    }

    fn intra_loop_oracle(h: &Matrix, p: &Matrix, anchors: &Matrix, mask: &Matrix, prefactor: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..p.rows() {
            let a = anchors.col(i);
            let an = numerics::norm(a);
            for j in 0..p.cols() {
                let x = h.col(j);
                let s = numerics::dot(a, x) / (an * numerics::norm(x));
                total += mask[(i, j)] * p[(i, j)] * s;
            }
        }
        -prefactor * total
    }

    #[test]
    fn intra_class_matches_loop_oracle() {
        let (d, c, n) = (5, 4, 7);
        let h = random(d, n, 6);
        let anchors = random(d, c, 7);
        let p = softmax(c, n, 8);
        let ones = Matrix::filled(c, n, 1.0);
        let prob = intra_value(&h, &p, &anchors, None);
        assert!((prob - intra_loop_oracle(&h, &p, &anchors, &ones, 1.0 / (n * c) as f64)).abs() < 1e-14);
        let full = intra_value(&h, &p, &anchors, Some(c));
        assert_eq!(full, prob);
        let k = 2;
        let mask = topk_mask(&p, k).unwrap().mask;
        let trunc = intra_value(&h, &p, &anchors, Some(k));
        assert!((trunc - intra_loop_oracle(&h, &p, &anchors, &mask, 1.0 / (n * k) as f64)).abs() < 1e-14);
        assert!((-1.0..=1.0).contains(&trunc));
    }

    #[test]
    fn intra_class_rejects_bad_shapes_and_probs() {
        let anchors = random(3, 2, 9);
        let h = random(3, 4, 10);
        let p = softmax(3, 4, 11);
        let bad = eval(|t| {
            let x = t.leaf(h.clone());
            let pn = t.constant(p.clone());
            intra_class_loss(t, x, pn, &anchors, 1, 1e-12, true)
        });
        assert!(matches!(bad, Err(Error::Usage(_))));
        let unnormalised = Matrix::filled(2, 4, 0.7);
        let bad = eval(|t| {
            let x = t.leaf(h.clone());
            let pn = t.constant(unnormalised);
            intra_class_loss(t, x, pn, &anchors, 1, 1e-12, true)
        });
        assert!(matches!(bad, Err(Error::Usage(_))));
    }

    #[test]
    fn intra_class_gradient_skips_detached_probs() {
        let anchors = random(3, 3, 12);
        let mut tape = Tape::new();
        let h = tape.leaf(random(3, 5, 13));
        let logits = tape.leaf(random(3, 5, 14));
        let p = tape.softmax_columns(logits);
        let loss = intra_class_loss(&mut tape, h, p, &anchors, 1, 1e-12, true).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains(h));
        assert!(!grads.contains(logits));

        let mut tape = Tape::new();
        let h = tape.leaf(random(3, 5, 13));
        let logits = tape.leaf(random(3, 5, 14));
        let p = tape.softmax_columns(logits);
        let loss = intra_class_loss(&mut tape, h, p, &anchors, 1, 1e-12, false).unwrap();
        assert!(tape.backward(loss).unwrap().contains(logits));
    }

    #[test]
    fn grassmann_examples() {
        let a = Matrix::diag(&[1.0, 0.0]);
        let b = Matrix::diag(&[0.0, 1.0]);
        assert!((grassmann_distance(&a, &b, 1, 1e-6).unwrap() - 0.5).abs() < 1e-15);
        let c = random(4, 4, 15);
        let c = c.matmul_t(&c).unwrap();
        assert!(grassmann_distance(&c, &c, 2, 1e-9).unwrap().abs() < 1e-15);
        let iso = Matrix::identity(3);
        assert!(matches!(
            grassmann_distance(&Matrix::diag(&[2.0, 1.0, 0.0]), &iso, 1, 1e-6),
            Err(Error::DegenerateSpectrum { .. })
        ));
    }

    #[test]
    fn alignment_loss_equals_distance_of_batch_covariances() {
        let hs = random(4, 9, 16);
        let ht = random(4, 9, 17).scale(1.5);
        let v = eval(|t| {
            let s = t.leaf(hs.clone());
            let tt = t.leaf(ht.clone());
            alignment_loss(t, s, tt, 2, 1e-6)
        })
        .unwrap();
        let cs = numerics::covariance(&hs).unwrap();
        let ct = numerics::covariance(&ht).unwrap();
        let expected = grassmann_distance(&cs, &ct, 2, 1e-6).unwrap();
        assert!((v - expected).abs() < 1e-14);
        assert!(v >= 0.0 && v <= 2.0 * 2.0 / 16.0);
    }

    #[test]
    fn alignment_of_identical_features_is_zero_with_finite_gradient() {
        let hs = random(4, 9, 18);
        let mut tape = Tape::new();
        let s = tape.leaf(hs.clone());
        let t = tape.leaf(hs);
        let loss = alignment_loss(&mut tape, s, t, 2, 1e-6).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(t).unwrap().all_finite());
    }

    #[test]
    fn alignment_grad_check() {
        let hs = random(5, 8, 19);
        let ht = Matrix::from_fn(5, 8, |i, j| random(5, 8, 20)[(i, j)] * (1.0 + i as f64));
        let err = grad_check(
            |t, x| {
                let s = t.constant(hs.clone());
                alignment_loss(t, s, x, 2, 1e-6)
            },
            &ht,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn alignment_ignores_rotations_of_the_complement() {
        let base = random(4, 12, 21);
        let ht = Matrix::from_fn(4, 12, |i, j| base[(i, j)] * if i < 2 { 5.0 } else { 0.5 });
        let hs = random(4, 12, 22);
        // Rotate inside the span of the trailing eigenvectors of cov(ht).
        let eig = numerics::sym_eig(&numerics::covariance(&ht).unwrap()).unwrap();
        let (u3, u4) = (
            eig.vectors.select_columns(&[2]).unwrap(),
            eig.vectors.select_columns(&[3]).unwrap(),
        );
        let outer = |a: &Matrix, b: &Matrix| a.matmul_t(b).unwrap();
        let theta: f64 = 0.7;
        let rot = Matrix::identity(4)
            .add(&outer(&u3, &u3).add(&outer(&u4, &u4)).unwrap().scale(theta.cos() - 1.0))
            .unwrap()
            .add(&outer(&u4, &u3).sub(&outer(&u3, &u4)).unwrap().scale(theta.sin()))
            .unwrap();
        let ht_rot = rot.matmul(&ht).unwrap();
        let loss = |target: &Matrix| {
            eval(|t| {
                let s = t.leaf(hs.clone());
                let x = t.leaf(target.clone());
                alignment_loss(t, s, x, 2, 1e-6)
            })
            .unwrap()
        };
        let before = loss(&ht);
        assert!(before > 1e-3);
        assert!((before - loss(&ht_rot)).abs() < 1e-8);
    }

    #[test]
    fn total_objective_examples() {
        let b = total_objective(1.0, vec![-0.5], vec![0.0], vec![0.01], 10.0, 5000.0);
        assert!((b.total - 46.0).abs() < 1e-12);
        assert_eq!(b.ds, -0.5);
        let b = total_objective(0.7, vec![-0.2, 0.1], vec![-0.3, -0.1], vec![0.2, 0.4], 0.0, 0.0);
        assert_eq!(b.total, 0.7);
        assert!((b.ds + 0.5).abs() < 1e-15 && (b.al - 0.6).abs() < 1e-15);
    }

    #[test]
    fn total_objective_is_linear_in_each_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let ce = rng.random_range(0.0..3.0);
            let parts: Vec<Vec<f64>> = (0..3)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let at = |l1: f64, l2: f64| {
                total_objective(ce, parts[0].clone(), parts[1].clone(), parts[2].clone(), l1, l2).total
            };
            let (l1a, l1b, l2) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), 3.0);
            let slope = (at(l1b, l2) - at(l1a, l2)) / (l1b - l1a);
            let ds = at(1.0, 0.0) - at(0.0, 0.0);
            assert!((slope - ds).abs() < 1e-9);
            let mid = at(0.5 * (l1a + l1b), l2);
            assert!((mid - 0.5 * (at(l1a, l2) + at(l1b, l2))).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn inter_class_invariant_under_rotation(seed in 0u64..10_000, angle in 0.0f64..6.28) {
                let h = random(2, 6, seed);
                let labels = [0, 1, 2, 0, 1, 2];
                let anchor = [0.05, -0.1];
                let rot = Matrix::from_rows(&[&[angle.cos(), -angle.sin()], &[angle.sin(), angle.cos()]]).unwrap();
                let rotated = rot.matmul(&h).unwrap();
                let ra = rot.matmul(&Matrix::column_vector(&anchor).unwrap()).unwrap();
                let v1 = eval(|t| { let x = t.leaf(h.clone()); inter_class_loss(t, x, &labels, 3, &anchor, 1e-12) }).unwrap();
                let v2 = eval(|t| { let x = t.leaf(rotated.clone()); inter_class_loss(t, x, &labels, 3, ra.as_slice(), 1e-12) }).unwrap();
                prop_assert!((v1 - v2).abs() < 1e-12);
            }

            #[test]
            fn intra_is_monotone_in_masked_similarity(seed in 0u64..10_000, target in 0usize..3) {
                // Only the target row carries weight; stretching the sample
                // toward that anchor raises its similarity.
                let anchors = Matrix::identity(3);
                let h = random(3, 1, seed).map(|v| v.abs() + 0.1);
                let mut closer = h.clone();
                closer[(target, 0)] *= 1.5;
                let mut p = Matrix::zeros(3, 1);
                p[(target, 0)] = 1.0;
                let before = intra_value(&h, &p, &anchors, Some(1));
                let after = intra_value(&closer, &p, &anchors, Some(1));
                prop_assert!(after < before);
            }

            #[test]
            fn grassmann_is_symmetric(seed in 0u64..10_000) {
                let a = random(5, 5, seed);
                let b = random(5, 5, seed + 7);
                let ca = a.matmul_t(&a).unwrap();
                let cb = b.matmul_t(&b).unwrap();
                let x = grassmann_distance(&ca, &cb, 2, 1e-9);
                let y = grassmann_distance(&cb, &ca, 2, 1e-9);
                if let (Ok(x), Ok(y)) = (x, y) {
                    prop_assert!((x - y).abs() < 1e-14);
                    prop_assert!(x >= 0.0 && x <= 2.0 * 2.0 / 25.0 + 1e-15);
                }
            }
        }
    }
}

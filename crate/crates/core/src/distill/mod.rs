//! SVD-based weight distillation.
//!
//! Every 4-D convolution weight `(w, h, n_i, n_o)` is unfolded to an
//! `n_o x (w*h*n_i)` matrix; the unfolded matrices of all input models are
//! stacked row-block-wise, factored with a full SVD, and truncated to the
//! leading `n_o` singular values and the leading `n_o x n_o` block of `U`.
//! The reconstruction is folded back to 4-D. 2-D linear weights go through the
//! same SVD step directly, and 1-D parameters are averaged.

pub mod linalg;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{assert_compatible, is_head, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::init::kaiming_uniform;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use linalg::{full_svd, Matrix, Svd};

/// A 4-D convolution weight flattened to `n_o x (w*h*n_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedWeight<T> {
    pub matrix: Matrix<T>,
    /// Original `(w, h, n_i, n_o)`.
    pub src_dims: [usize; 4],
}

/// Row `r` holds `W[x, y, c, r]` at column `(x*h + y)*n_i + c`.
pub fn unfold<T: Scalar>(w: &Tensor<T>) -> Result<UnfoldedWeight<T>> {
    let dims: [usize; 4] = w
        .dims()
        .try_into()
        .map_err(|_| Error::Shape(format!("unfold needs a 4-D tensor, got {:?}", w.dims())))?;
    let n_o = dims[3];
    let k = dims[0] * dims[1] * dims[2];
    // Row-major (w,h,n_i,n_o) is a k x n_o matrix; unfolding is its transpose.
    let src = w.data();
    let mut out = vec![T::zero(); k * n_o];
    for col in 0..k {
        for r in 0..n_o {
            out[r * k + col] = src[col * n_o + r];
        }
    }
    Ok(UnfoldedWeight {
        matrix: Matrix::new(n_o, k, out)?,
        src_dims: dims,
    })
}

pub fn fold<T: Scalar>(m: &UnfoldedWeight<T>) -> Result<Tensor<T>> {
    let [w, h, n_i, n_o] = m.src_dims;
    let k = w * h * n_i;
    if m.matrix.shape() != (n_o, k) {
        return Err(Error::Shape(format!(
            "unfolded matrix {:?} does not match src dims {:?}",
            m.matrix.shape(),
            m.src_dims
        )));
    }
    let src = m.matrix.data();
    let mut out = vec![T::zero(); k * n_o];
    for r in 0..n_o {
        for col in 0..k {
            out[col * n_o + r] = src[r * k + col];
        }
    }
    Tensor::new(m.src_dims.to_vec(), out)
}

/// Outcome of one [`svd_merge`] call beyond the merged matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdMergeStats {
    pub top_singular_value: f64,
    /// Relative Frobenius energy of the stacked matrix dropped by truncation.
    pub residual: f64,
}

/// Merges `m` equally shaped `n_o x k` matrices into one `n_o x k` matrix.
///
/// The stack `C = [A_0; A_1; ...]` (caller order) is factored as `U Λ Vᵀ` and
/// the result is `U[:n_o, :n_o] Λ[:n_o, :] Vᵀ`. The first matrix is therefore
/// the anchor: its row block of `U` defines the output.
pub fn svd_merge<T: Scalar>(mats: &[Matrix<T>]) -> Result<Matrix<T>> {
    svd_merge_with_stats(mats).map(|(m, _)| m)
}

pub fn svd_merge_with_stats<T: Scalar>(mats: &[Matrix<T>]) -> Result<(Matrix<T>, SvdMergeStats)> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("svd_merge needs at least one matrix".into()))?;
    let (n_o, k) = first.shape();
    for (i, m) in mats.iter().enumerate() {
        if m.shape() != (n_o, k) {
            return Err(Error::Shape(format!(
                "svd_merge input {i} is {:?}, expected {:?}",
                m.shape(),
                (n_o, k)
            )));
        }
        if !m.is_finite() {
            return Err(Error::InvalidArgument(format!("svd_merge input {i} is not finite")));
        }
    }
    let stacked: Vec<Matrix<f64>> = mats.iter().map(Matrix::cast::<f64>).collect();
    let stacked = Matrix::vstack(&stacked)?;
    let svd = full_svd(&stacked)?;

    let u_prime = svd.u.block(0, n_o, 0, n_o);
    // Λ[:n_o, :] is n_o x k with the leading singular values on its diagonal.
    let mut lambda_prime = Matrix::<f64>::zeros(n_o, svd.v.cols());
    for (i, &s) in svd.singular_values.iter().take(n_o).enumerate() {
        lambda_prime[(i, i)] = s;
    }
    let merged = u_prime
        .matmul(&lambda_prime)?
        .matmul(&svd.v.transpose())?;

    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let dropped: f64 = svd.singular_values.iter().skip(n_o).map(|s| s * s).sum();
    let stats = SvdMergeStats {
        top_singular_value: svd.singular_values.first().copied().unwrap_or(0.0),
        residual: if total > 0.0 { (dropped / total).sqrt() } else { 0.0 },
    };
    Ok((merged.cast::<T>(), stats))
}

/// Element-wise mean of equally long vectors, accumulated in `f64`.
pub fn mean_merge<T: Scalar>(vecs: &[&[T]]) -> Result<Vec<T>> {
    let first = vecs
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean_merge needs at least one vector".into()))?;
    let n = first.len();
    if let Some(bad) = vecs.iter().position(|v| v.len() != n) {
        return Err(Error::Shape(format!(
            "mean_merge input {bad} has length {}, expected {n}",
            vecs[bad].len()
        )));
    }
    let m = vecs.len() as f64;
    Ok((0..n)
        .map(|i| {
            let sum: f64 = vecs.iter().map(|v| v[i].to_f64_lossless()).sum();
            T::from_f64_lossy(sum / m)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Svd,
    Mean,
    /// Head re-initialized because the inputs disagree on class count.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMerge {
    pub layer: String,
    pub method: MergeMethod,
    pub inputs: usize,
    /// Shape of each merged matrix (`[n]` for averaged vectors).
    pub shape: Vec<usize>,
    pub top_singular_value: Option<f64>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub sources: Vec<String>,
    pub layers: Vec<LayerMerge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DistillOptions {
    /// Seed for the fresh head used when input class counts differ.
    pub head_seed: u64,
}

/// Merges two or more architecture-compatible checkpoints layer by layer.
///
/// The merged checkpoint keeps the first input's layer order and arch id.
pub fn distill_checkpoints(
    ckpts: &[Checkpoint],
    opts: DistillOptions,
) -> Result<(Checkpoint, MergeReport)> {
    if ckpts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "distillation needs at least 2 checkpoints, got {}",
            ckpts.len()
        )));
    }
    let anchor = &ckpts[0];
    for other in &ckpts[1..] {
        assert_compatible(anchor, other, true)?;
    }
    let heads_differ = ckpts.iter().any(|c| c.class_count != anchor.class_count);

    let sources: Vec<String> = ckpts
        .iter()
        .enumerate()
        .map(|(i, c)| c.meta.get("source").cloned().unwrap_or_else(|| format!("#{i}")))
        .collect();

    let mut merged = Checkpoint::new(anchor.arch_id.clone(), anchor.class_count);
    let mut report = MergeReport {
        sources: sources.clone(),
        layers: Vec::with_capacity(anchor.params.len()),
    };
    let mut head_rng = Stream::new(opts.head_seed, &[Stream::tag("distill-head")]);

    for (name, t0) in &anchor.params {
        let inputs: Vec<&Tensor<f32>> = ckpts.iter().map(|c| &c.params[name]).collect();
        let (tensor, entry) = if heads_differ && is_head(name) {
            let fresh = fresh_head_tensor(t0, &mut head_rng)?;
            let entry = LayerMerge {
                layer: name.clone(),
                method: MergeMethod::Fresh,
                inputs: inputs.len(),
                shape: t0.dims().to_vec(),
                top_singular_value: None,
                residual: None,
            };
            (fresh, entry)
        } else {
            merge_layer(name, &inputs)?
        };
        merged.params.insert(name.clone(), tensor);
        report.layers.push(entry);
    }

    merged.meta.insert("distill.sources".into(), sources.join(","));
    merged.meta.insert("distill.count".into(), ckpts.len().to_string());
    merged.meta.insert("source".into(), format!("distill({})", sources.join("+")));
    Ok((merged, report))
}

fn fresh_head_tensor(template: &Tensor<f32>, rng: &mut Stream) -> Result<Tensor<f32>> {
    match template.dims() {
        [rows, fan_in] => kaiming_uniform(vec![*rows, *fan_in], *fan_in, rng),
        _ => Tensor::zeros(template.dims().to_vec()),
    }
}

fn merge_layer(name: &str, inputs: &[&Tensor<f32>]) -> Result<(Tensor<f32>, LayerMerge)> {
    let dims = inputs[0].dims().to_vec();
    let m = inputs.len();
    match dims.len() {
        4 => {
            let unfolded = inputs
                .iter()
                .map(|t| unfold(t).map(|u| u.matrix))
                .collect::<Result<Vec<_>>>()?;
            let (merged, stats) = svd_merge_with_stats(&unfolded)?;
            let src_dims = [dims[0], dims[1], dims[2], dims[3]];
            let shape = vec![merged.rows(), merged.cols()];
            let tensor = fold(&UnfoldedWeight {
                matrix: merged,
                src_dims,
            })?;
            Ok((tensor, svd_entry(name, m, shape, stats)))
        }
        2 => {
            let mats = inputs
                .iter()
                .map(|t| Matrix::new(dims[0], dims[1], t.data().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let (merged, stats) = svd_merge_with_stats(&mats)?;
            let shape = vec![dims[0], dims[1]];
            let tensor = Tensor::new(dims, merged.into_data())?;
            Ok((tensor, svd_entry(name, m, shape, stats)))
        }
        1 => {
            let slices: Vec<&[f32]> = inputs.iter().map(|t| t.data()).collect();
            let tensor = Tensor::new(dims.clone(), mean_merge(&slices)?)?;
            let entry = LayerMerge {
                layer: name.to_string(),
                method: MergeMethod::Mean,
                inputs: m,
                shape: dims,
                top_singular_value: None,
                residual: None,
            };
            Ok((tensor, entry))
        }
        r => Err(Error::Shape(format!("cannot merge rank-{r} parameter `{name}`"))),
    }
}

fn svd_entry(name: &str, m: usize, shape: Vec<usize>, stats: SvdMergeStats) -> LayerMerge {
    LayerMerge {
        layer: name.to_string(),
        method: MergeMethod::Svd,
        inputs: m,
        shape,
        top_singular_value: Some(stats.top_singular_value),
        residual: Some(stats.residual),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(dims: Vec<usize>, seed: u64) -> Tensor<f32> {
        let mut s = Stream::new(seed, &[]);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| s.normal() as f32).collect()).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = Stream::new(seed, &[99]);
        Matrix::from_fn(rows, cols, |_, _| s.normal())
    }

    #[test]
    fn unfold_shape_and_index_map() {
        let w = random_tensor(vec![3, 3, 16, 32], 1);
        let u = unfold(&w).unwrap();
        assert_eq!(u.matrix.shape(), (32, 144));
        let (h, n_i) = (3, 16);
        for &(x, y, c, r) in &[(0, 0, 0, 0), (2, 1, 5, 31), (1, 2, 15, 7)] {
            assert_eq!(u.matrix[(r, (x * h + y) * n_i + c)], w.get(&[x, y, c, r]));
        }
    }

    #[test]
    fn unfold_singleton_and_fold_zero() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.5f32]).unwrap();
        let u = unfold(&w).unwrap();
        assert_eq!(u.matrix.data(), &[2.5]);
        assert_eq!(fold(&u).unwrap(), w);

        let z = UnfoldedWeight {
            matrix: Matrix::<f32>::zeros(5, 18),
            src_dims: [3, 3, 2, 5],
        };
        let t = fold(&z).unwrap();
        assert_eq!(t.dims(), &[3, 3, 2, 5]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfold_rejects_wrong_rank_and_fold_rejects_mismatch() {
        assert!(unfold(&random_tensor(vec![3, 3, 4], 0)).is_err());
        let bad = UnfoldedWeight {
            matrix: Matrix::<f32>::zeros(4, 4),
            src_dims: [3, 3, 2, 5],
        };
        assert!(fold(&bad).is_err());
    }

    #[test]
    fn fold_inverts_unfold() {
        let w = random_tensor(vec![2, 2, 3, 4], 5);
        assert!(fold(&unfold(&w).unwrap()).unwrap().bit_eq(&w));
    }

    #[test]
    fn single_matrix_is_reproduced() {
        let w = random_matrix(4, 6, 2);
        assert!(svd_merge(std::slice::from_ref(&w)).unwrap().relative_error(&w) < 1e-12);
        let tall = random_matrix(6, 3, 3);
        assert!(svd_merge(std::slice::from_ref(&tall)).unwrap().relative_error(&tall) < 1e-12);
    }

    #[test]
    fn duplicate_and_zero_blocks() {
        let w = random_matrix(5, 7, 4);
        let z = Matrix::zeros(5, 7);
        assert!(svd_merge(&[w.clone(), w.clone()]).unwrap().relative_error(&w) < 1e-12);
        assert!(svd_merge(&[w.clone(), z.clone()]).unwrap().relative_error(&w) < 1e-12);
        assert!(svd_merge(&[w.clone(), z.clone(), z]).unwrap().relative_error(&w) < 1e-12);
    }

    #[test]
    fn wide_truncation_when_k_below_stack_height() {
        // k = 3 < m*n_o = 8: full U is 8x8, only 3 singular values exist.
        let a = random_matrix(4, 3, 7);
        let b = random_matrix(4, 3, 8);
        let merged = svd_merge(&[a.clone(), b]).unwrap();
        assert_eq!(merged.shape(), (4, 3));
        // Rank(stack) = 3 <= n_o, so nothing is truncated: result is block 0.
        assert!(merged.relative_error(&a) < 1e-12);
    }

    #[test]
    fn merge_errors() {
        let a = random_matrix(2, 3, 1);
        let b = random_matrix(3, 3, 1);
        assert!(svd_merge::<f64>(&[]).is_err());
        assert!(svd_merge(&[a.clone(), b]).is_err());
        let mut nan = a.clone();
        nan[(0, 0)] = f64::NAN;
        assert!(svd_merge(&[a, nan]).is_err());
    }

    #[test]
    fn mean_merge_cases() {
        let v = [1.5f32, -2.0];
        assert_eq!(mean_merge(&[&v[..]]).unwrap(), v.to_vec());
        assert_eq!(mean_merge(&[&v[..], &v[..]]).unwrap(), v.to_vec());
        assert_eq!(mean_merge(&[&[0.0f32, 2.0][..], &[4.0, 0.0][..]]).unwrap(), vec![2.0, 1.0]);
        assert!(mean_merge(&[&[0.0f32][..], &[1.0, 2.0][..]]).is_err());
    }
}

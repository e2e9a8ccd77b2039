//! Activation subspaces: streaming Gram accumulation, spectral-energy basis
//! selection, and the projectors built from those bases.
//!
//! The basis for a layer's input (or output) subspace is read off the
//! eigendecomposition of the accumulated Gram `XᵀX`: its eigenvectors are the
//! right singular vectors of `X` and its eigenvalues the squared singular
//! values, so the Gram never needs the activations themselves.


use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-12;

/// Running sum of `XᵀX` over activation batches.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    dim: usize,
    sum: Matrix,
    samples: usize,
}

impl GramAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, sum: Matrix::zeros(dim, dim), samples: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn gram(&self) -> &Matrix {
        &self.sum
    }

    pub fn into_gram(self) -> Matrix {
        self.sum
    }

    /// Adds `batchᵀ batch` to the running sum.
    pub fn accumulate(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "batch has {} columns, accumulator expects {}",
                batch.cols(),
                self.dim
            )));
        }
        self.sum = self.sum.add(&batch.gram())?;
        self.samples += batch.rows();
        Ok(())
    }

    /// Folds in a partial sum accumulated elsewhere.
    pub fn merge(&mut self, other: &GramAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension(format!(
                "cannot merge accumulators of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        self.sum = self.sum.add(&other.sum)?;
        self.samples += other.samples;
        Ok(())
    }
}

/// Gram of the bias-free output `Y = X Wᵀ`, computed as `W (XᵀX) Wᵀ`.
pub fn output_gram(gram_x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if !gram_x.is_square() || gram_x.rows() != w.cols() {
        return Err(Error::Dimension(format!(
            "gram is {}x{} but weight is {}x{}",
            gram_x.rows(),
            gram_x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let wg = w.matmul(gram_x)?;
    Ok(wg.matmul_t(w)?.symmetrized())
}

/// An orthonormal basis for the dominant `k` directions of a Gram matrix.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// `k x d`; rows are the basis vectors.
    pub vectors: Matrix,
    /// Full descending eigenvalue ladder (σᵢ²), with numerical zeros clamped to 0.
    pub energies: Vec<f64>,
    pub k: usize,
    pub achieved_energy: f64,
    /// Set when the basis was selected by energy rather than by dimension.
    pub target_energy: Option<f64>,
}

impl SpectralBasis {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// The eigendecomposition of a Gram matrix, reusable for any number of
/// basis selections.
#[derive(Debug, Clone)]
pub struct Spectrum {
    energies: Vec<f64>,
    vectors: Matrix,
    total: f64,
}

impl Spectrum {
    pub fn of_gram(gram: &Matrix) -> Result<Self> {
        let eig = linalg::sym_eig(gram)?;
        let largest = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
        let energies: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| if l <= ZERO_EIGENVALUE_TOL * largest { 0.0 } else { l })
            .collect();
        let total = energies.iter().sum();
        Ok(Self { energies, vectors: eig.eigenvectors, total })
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Number of eigenvalues above the zero cutoff.
    pub fn rank(&self) -> usize {
        self.energies.iter().filter(|&&e| e > 0.0).count()
    }

    /// Fraction of the total energy in the top `k` directions.
    pub fn energy_at(&self, k: usize) -> f64 {
        let head: f64 = self.energies[..k.min(self.energies.len())].iter().sum();
        if k >= self.energies.len() {
            // Same summation order as `total`, so the full ladder is exactly 1.
            return 1.0;
        }
        head / self.total
    }

    /// Smallest `k` whose cumulative energy fraction reaches `target`.
    pub fn dim_for_energy(&self, target: f64) -> usize {
        let mut acc = 0.0;
        for (i, &e) in self.energies.iter().enumerate() {
            acc += e;
            if acc / self.total >= target {
                return i + 1;
            }
        }
        self.energies.len()
    }

    fn ensure_nonzero(&self) -> Result<()> {
        if self.total > 0.0 {
            Ok(())
        } else {
            Err(Error::Degenerate("gram matrix is zero; no subspace is defined".into()))
        }
    }

    pub fn basis_for_energy(&self, target_energy: f64) -> Result<SpectralBasis> {
        if !(target_energy > 0.0 && target_energy <= 1.0) {
            return Err(Error::Range(format!("target energy {target_energy} not in (0, 1]")));
        }
        self.ensure_nonzero()?;
        let k = self.dim_for_energy(target_energy);
        Ok(self.basis(k, Some(target_energy)))
    }

    pub fn basis_for_dim(&self, k: usize) -> Result<SpectralBasis> {
        if k == 0 || k > self.dim() {
            return Err(Error::Range(format!("dimension {k} not in [1, {}]", self.dim())));
        }
        self.ensure_nonzero()?;
        Ok(self.basis(k, None))
    }

    fn basis(&self, k: usize, target_energy: Option<f64>) -> SpectralBasis {
        SpectralBasis {
            vectors: self.vectors.top_rows(k),
            energies: self.energies.clone(),
            k,
            achieved_energy: self.energy_at(k),
            target_energy,
        }
    }
}

/// Smallest-dimension basis capturing at least `target_energy` of the spectrum.
pub fn basis_for_energy(gram: &Matrix, target_energy: f64) -> Result<SpectralBasis> {
    Spectrum::of_gram(gram)?.basis_for_energy(target_energy)
}

/// Top-`k` eigenvector basis.
pub fn basis_for_dim(gram: &Matrix, k: usize) -> Result<SpectralBasis> {
    Spectrum::of_gram(gram)?.basis_for_dim(k)
}

/// Orthogonal projector `P = VᵀV` onto the span of a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub p: Matrix,
    pub rank: usize,
}

impl Projector {
    pub fn from_rows(vectors: &Matrix) -> Self {
        let p = vectors.transpose().matmul(vectors).expect("VᵀV is always defined").symmetrized();
        Self { p, rank: vectors.rows() }
    }

    pub fn identity(dim: usize) -> Self {
        Self { p: Matrix::identity(dim), rank: dim }
    }

    pub fn zero(dim: usize) -> Self {
        Self { p: Matrix::zeros(dim, dim), rank: 0 }
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    /// `I - P`.
    pub fn complement(&self) -> Projector {
        let d = self.dim();
        Projector { p: Matrix::identity(d).sub(&self.p).expect("same shape"), rank: d - self.rank }
    }
}

pub fn projector(basis: &SpectralBasis) -> Projector {
    Projector::from_rows(&basis.vectors)
}

/// Shares of `‖M‖²` inside and outside the projector's range, measured on the
/// row space of `M` (`‖MP‖² / ‖M‖²`).
pub fn energy_split(m: &Matrix, p: &Projector) -> Result<(f64, f64)> {
    if m.cols() != p.dim() {
        return Err(Error::Dimension(format!(
            "matrix has {} columns, projector acts on {}",
            m.cols(),
            p.dim()
        )));
    }
    let total = m.frobenius_sq();
    if total == 0.0 {
        return Err(Error::Degenerate("energy split of a zero matrix".into()));
    }
    let inside = (m.matmul(&p.p)?.frobenius_sq() / total).clamp(0.0, 1.0);
    Ok((inside, 1.0 - inside))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius().max(f64::MIN_POSITIVE)
    }

    fn rank3_data() -> Matrix {
        let z = gaussian(200, 3, 17);
        let a = Matrix::from_fn(3, 16, |i, j| ((i * 16 + j) as f64 * 0.37).sin() + if j == i { 2.0 } else { 0.0 });
        z.matmul(&a).unwrap()
    }

    /// Random orthonormal `k x d` rows.
    fn orthonormal_rows(k: usize, d: usize, seed: u64) -> Matrix {
        let mut rows = gaussian(k, d, seed).to_rows();
        linalg::orthonormalize(&mut rows);
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let mut acc = GramAccumulator::new(2);
        let batch = Matrix::identity(2);
        acc.accumulate(&batch).unwrap();
        assert_eq!(acc.gram(), &Matrix::identity(2));
        assert_eq!(acc.samples(), 2);
        acc.accumulate(&batch).unwrap();
        assert_eq!(acc.gram(), &Matrix::identity(2).scale(2.0));
        assert!(matches!(acc.accumulate(&Matrix::zeros(1, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn accumulate_matches_concatenation() {
        let mut acc = GramAccumulator::new(8);
        let mut all = Matrix::zeros(0, 8);
        for seed in 0..10 {
            let b = gaussian(32, 8, seed);
            acc.accumulate(&b).unwrap();
            all = all.vstack(&b).unwrap();
        }
        assert_eq!(acc.samples(), 320);
        let direct = all.transpose().matmul(&all).unwrap();
        assert!(rel_diff(acc.gram(), &direct) < 1e-9);
    }

    #[test]
    fn merge_of_partial_sums() {
        let (mut a, mut b, mut whole) =
            (GramAccumulator::new(4), GramAccumulator::new(4), GramAccumulator::new(4));
        for seed in 0..6 {
            let batch = gaussian(5, 4, seed);
            if seed % 2 == 0 { a.accumulate(&batch).unwrap() } else { b.accumulate(&batch).unwrap() }
            whole.accumulate(&batch).unwrap();
        }
        a.merge(&b).unwrap();
        assert_eq!(a.samples(), whole.samples());
        assert!(rel_diff(a.gram(), whole.gram()) < 1e-9);
    }

    #[test]
    fn output_gram_examples() {
        let g = gaussian(10, 4, 1).gram();
        assert!(rel_diff(&output_gram(&g, &Matrix::identity(4)).unwrap(), &g) < 1e-15);
        assert!(output_gram(&g, &Matrix::zeros(3, 4)).unwrap().is_zero());
        assert!(matches!(output_gram(&g, &Matrix::zeros(3, 5)), Err(Error::Dimension(_))));

        let x = gaussian(64, 8, 2);
        let w = gaussian(5, 8, 3);
        let y = x.matmul_t(&w).unwrap();
        assert!(rel_diff(&output_gram(&x.gram(), &w).unwrap(), &y.gram()) < 1e-8);
    }

    #[test]
    fn basis_for_energy_examples() {
        let g = Matrix::diag(&[4.0, 1.0, 0.0]);
        let b = basis_for_energy(&g, 0.75).unwrap();
        assert_eq!(b.k, 1);
        assert!((b.achieved_energy - 0.8).abs() < 1e-15);
        assert_eq!(basis_for_energy(&g, 1.0).unwrap().k, 2);
        assert_eq!(basis_for_energy(&g, 0.8).unwrap().k, 1, "ties resolve to the smaller k");

        let b = basis_for_energy(&rank3_data().gram(), 0.9999).unwrap();
        assert_eq!(b.k, 3);
        assert!(b.achieved_energy >= 0.9999);

        assert!(matches!(basis_for_energy(&Matrix::zeros(3, 3), 0.5), Err(Error::Degenerate(_))));
        assert!(matches!(basis_for_energy(&g, 0.0), Err(Error::Range(_))));
        assert!(matches!(basis_for_energy(&g, 1.5), Err(Error::Range(_))));
    }

    #[test]
    fn basis_for_dim_examples() {
        let g = Matrix::diag(&[4.0, 1.0, 0.0]);
        assert_eq!(basis_for_dim(&g, 3).unwrap().achieved_energy, 1.0);
        assert!((basis_for_dim(&g, 1).unwrap().achieved_energy - 0.8).abs() < 1e-15);
        assert!(matches!(basis_for_dim(&g, 0), Err(Error::Range(_))));
        assert!(matches!(basis_for_dim(&g, 4), Err(Error::Range(_))));

        // Oracle: eigenvalues from an independent solver.
        let x = rank3_data();
        let na = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let mut ev: Vec<f64> =
            na.singular_values().iter().map(|s| s * s).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let expected = (ev[0] + ev[1]) / ev.iter().sum::<f64>();
        let b = basis_for_dim(&x.gram(), 2).unwrap();
        assert!((b.achieved_energy - expected).abs() < 1e-10);
    }

    #[test]
    fn projector_examples() {
        let full = basis_for_dim(&Matrix::diag(&[3.0, 2.0, 1.0]), 3).unwrap();
        assert!(rel_diff(&projector(&full).p, &Matrix::identity(3)) < 1e-15);

        let e1 = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = Projector::from_rows(&e1);
        let mut expected = Matrix::zeros(4, 4);
        expected[(0, 0)] = 1.0;
        assert_eq!(p.p, expected);
        assert_eq!(p.rank, 1);

        let v = orthonormal_rows(3, 8, 5);
        let p = Projector::from_rows(&v);
        let p2 = p.p.matmul(&p.p).unwrap();
        assert!(p2.sub(&p.p).unwrap().frobenius() < 1e-10);
        assert!(p.p.sub(&p.p.transpose()).unwrap().frobenius() < 1e-10);
        assert!((p.p.trace() - 3.0).abs() < 1e-8);
        let q = p.complement();
        assert_eq!(q.rank, 5);
        assert!(p.p.matmul(&q.p).unwrap().frobenius() < 1e-10);
    }

    #[test]
    fn energy_split_examples() {
        let m = gaussian(6, 5, 4);
        assert_eq!(energy_split(&m, &Projector::identity(5)).unwrap(), (1.0, 0.0));
        assert_eq!(energy_split(&m, &Projector::zero(5)).unwrap(), (0.0, 1.0));
        assert!(matches!(energy_split(&Matrix::zeros(2, 5), &Projector::identity(5)), Err(Error::Degenerate(_))));
        assert!(matches!(energy_split(&m, &Projector::identity(4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn energy_split_matches_dimension_ratio() {
        // Statistical oracle: for i.i.d. Gaussian M the in-subspace share
        // concentrates at k/d.
        let (d, k) = (512, 62);
        let expected = k as f64 / d as f64;
        let mut mean = 0.0;
        for seed in 0..20 {
            let m = gaussian(d, d, 1000 + seed);
            let p = Projector::from_rows(&orthonormal_rows(k, d, 2000 + seed));
            let (inside, outside) = energy_split(&m, &p).unwrap();
            assert!((inside - expected).abs() < 0.02, "seed {seed}: {inside}");
            assert!((inside + outside - 1.0).abs() < 1e-12);
            mean += inside / 20.0;
        }
        assert!((mean - expected).abs() < 0.02);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn pythagorean_split_and_energy_floor(
                rows in 2usize..40, d in 2usize..24, target in 0.3f64..1.0, seed in any::<u64>()
            ) {
                let x = gaussian(rows, d, seed);
                let b = basis_for_energy(&x.gram(), target).unwrap();
                prop_assert!(b.achieved_energy >= target);
                let p = projector(&b);
                let q = p.complement();
                let total = x.frobenius_sq();
                let inside = x.matmul(&p.p).unwrap().frobenius_sq();
                let outside = x.matmul(&q.p).unwrap().frobenius_sq();
                prop_assert!(((inside + outside) - total).abs() <= 1e-9 * total);
                prop_assert!(inside / total >= target - 1e-9);
                prop_assert!((inside / total - b.achieved_energy).abs() < 1e-9);
                prop_assert!(p.p.matmul(&q.p).unwrap().frobenius() < 1e-10);
                let rows_gram = b.vectors.matmul_t(&b.vectors).unwrap();
                prop_assert!(rows_gram.sub(&Matrix::identity(b.k)).unwrap().frobenius() < 1e-9);
            }

            #[test]
            fn output_gram_equals_direct(
                rows in 1usize..64, d in 1usize..16, m in 1usize..16, seed in any::<u64>()
            ) {
                let x = gaussian(rows, d, seed);
                let w = gaussian(m, d, seed ^ 0x5555);
                let direct = x.matmul_t(&w).unwrap().gram();
                let via = output_gram(&x.gram(), &w).unwrap();
                prop_assert!(rel_diff(&via, &direct) < 1e-8);
            }
        }
    }
}

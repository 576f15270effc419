//! The group action channel `Y = P G x + σ Z` and its observation batches.
//!
//! The noise level σ is treated as known to every estimator.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::group::{FiniteGroup, GroupDistribution, Signal};
use crate::rng::{categorical, sample_stream, BoxMuller};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Identity,
    CoordinateSelection,
    General,
}

/// Known linear map `P ∈ ℝ^{K×L}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    matrix: DMatrix<f64>,
    kind: ProjectionKind,
}

impl Projection {
    pub fn identity(len: usize) -> Self {
        Self {
            matrix: DMatrix::identity(len, len),
            kind: ProjectionKind::Identity,
        }
    }

    /// Keeps coordinates `coords` (in that order) of a length-`len` signal.
    pub fn select(len: usize, coords: &[usize]) -> Result<Self> {
        if coords.is_empty() || coords.len() > len {
            return Err(Error::InvalidArgument(format!(
                "coordinate selection needs 1..={len} coordinates, got {}",
                coords.len()
            )));
        }
        let mut matrix = DMatrix::zeros(coords.len(), len);
        for (row, &c) in coords.iter().enumerate() {
            if c >= len {
                return Err(Error::InvalidArgument(format!("coordinate {c} out of range for L = {len}")));
            }
            if coords[..row].contains(&c) {
                return Err(Error::InvalidArgument(format!("coordinate {c} selected twice")));
            }
            matrix[(row, c)] = 1.0;
        }
        Ok(Self {
            matrix,
            kind: ProjectionKind::CoordinateSelection,
        })
    }

    pub fn general(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidArgument("projection matrix must be nonempty".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("projection matrix has non-finite entries".into()));
        }
        Ok(Self {
            matrix,
            kind: ProjectionKind::General,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    /// Output dimension K.
    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Input dimension L.
    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, v: &Signal) -> DVector<f64> {
        &self.matrix * v
    }
}

/// Everything that defines the law of one observation.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    x: Signal,
    theta: GroupDistribution,
    projection: Projection,
    sigma: f64,
}

impl ChannelModel {
    pub fn new(x: Signal, theta: GroupDistribution, projection: Projection, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be positive and finite, got {sigma}")));
        }
        let len = theta.group().dim();
        check_dim("signal length", len, x.len())?;
        check_dim("projection columns", len, projection.input_dim())?;
        Ok(Self {
            x,
            theta,
            projection,
            sigma,
        })
    }

    pub fn x(&self) -> &Signal {
        &self.x
    }

    pub fn theta(&self) -> &GroupDistribution {
        &self.theta
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        self.theta.group()
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn output_dim(&self) -> usize {
        self.projection.output_dim()
    }

    /// Same signal and group law at a different noise level.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.x.clone(), self.theta.clone(), self.projection.clone(), sigma)
    }

    /// Noise-free component means `P g x`, one per group element.
    pub fn component_means(&self) -> Vec<DVector<f64>> {
        self.group()
            .elements()
            .iter()
            .map(|g| self.projection.apply(&g.act(&self.x)))
            .collect()
    }

    /// Short hex identifier of every parameter of the model.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |vals: &mut dyn Iterator<Item = f64>| {
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(b"|");
        };
        put(&mut self.x.iter().copied());
        put(&mut self.theta.weights().iter().copied());
        for g in self.group().elements() {
            put(&mut g.matrix.iter().copied());
        }
        put(&mut self.projection.matrix.iter().copied());
        put(&mut std::iter::once(self.sigma));
        hex::encode(&h.finalize()[..8])
    }

    /// Draws one observation from the given stream. Returns the element
    /// index and fills `out` with `P g x + σ z`.
    pub(crate) fn draw_into<R: rand::Rng>(&self, rng: &mut R, means: &[DVector<f64>], out: &mut [f64]) -> usize {
        let g = categorical(rng, self.theta.weights());
        let mut bm = BoxMuller::new();
        bm.fill(rng, out);
        for (o, m) in out.iter_mut().zip(means[g].iter()) {
            *o = m + self.sigma * *o;
        }
        g
    }
}

/// N observations stored row-major, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    data: Vec<f64>,
    n_samples: usize,
    dim: usize,
    // ground truth, for diagnostics only
    assignments: Option<Vec<usize>>,
    pub seed: u64,
    pub replicate: u64,
    pub model_digest: String,
    pub normalized: bool,
}

impl ObservationBatch {
    pub fn from_rows(data: Vec<f64>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "cannot shape {} values into rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self {
            n_samples: data.len() / dim,
            data,
            dim,
            assignments: None,
            seed,
            replicate: 0,
            model_digest: String::new(),
            normalized: false,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Ground-truth element indices. Not for use by estimators.
    pub fn diagnostic_assignments(&self) -> Option<&[usize]> {
        self.assignments.as_deref()
    }

    const MAGIC: &'static [u8; 4] = b"GACB";
    const VERSION: u32 = 1;

    /// Little-endian binary layout: magic `GACB`, u32 version, u64 N,
    /// u64 K, u64 seed, then N·K row-major f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.n_samples as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = next_u64(&mut r)? as usize;
        let k = next_u64(&mut r)? as usize;
        let seed = next_u64(&mut r)?;
        let count = n
            .checked_mul(k)
            .filter(|c| *c > 0)
            .ok_or_else(|| Error::Format(format!("bad shape {n}x{k}")))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Self::from_rows(data, k, seed)
    }

    /// CSV with header `y0,…,y{K-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record((0..self.dim).map(|i| format!("y{i}")))?;
        for row in self.rows() {
            out.write_record(row.iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, seed: u64) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let dim = reader.headers()?.len();
        let mut data = Vec::new();
        for record in reader.records() {
            let record = record?;
            for field in record.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("not a number: {field:?}")))?;
                data.push(v);
            }
        }
        Self::from_rows(data, dim, seed)
    }
}

/// Replicate 0 of [`simulate_replicate`].
pub fn simulate(model: &ChannelModel, n_samples: usize, seed: u64) -> Result<ObservationBatch> {
    simulate_replicate(model, n_samples, seed, 0)
}

/// Draws `n_samples` rows `P G_j x + σ Z_j`. Row `j` depends only on
/// `(seed, replicate, j)`, so the result is independent of scheduling.
pub fn simulate_replicate(
    model: &ChannelModel,
    n_samples: usize,
    seed: u64,
    replicate: u64,
) -> Result<ObservationBatch> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let dim = model.output_dim();
    let means = model.component_means();
    let mut data = vec![0.0; n_samples * dim];
    let mut assignments = vec![0usize; n_samples];
    data.par_chunks_mut(dim)
        .zip(assignments.par_iter_mut())
        .enumerate()
        .for_each(|(j, (row, g))| {
            let mut rng = sample_stream(seed, replicate, j as u64);
            *g = model.draw_into(&mut rng, &means, row);
        });
    Ok(ObservationBatch {
        data,
        n_samples,
        dim,
        assignments: Some(assignments),
        seed,
        replicate,
        model_digest: model.digest(),
        normalized: false,
    })
}

/// `Ỹ = Y / σ`.
pub fn normalized_batch(batch: &ObservationBatch, sigma: f64) -> Result<ObservationBatch> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut out = batch.clone();
    out.data.iter_mut().for_each(|v| *v /= sigma);
    out.normalized = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::cyclic_shift_group;

    fn example2(sigma: f64) -> ChannelModel {
        let g = Arc::new(cyclic_shift_group(2).unwrap());
        ChannelModel::new(
            DVector::from_row_slice(&[1.0, 2.0]),
            GroupDistribution::uniform(g),
            Projection::select(2, &[0]).unwrap(),
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn projection_constructors() {
        let p = Projection::select(3, &[0, 1]).unwrap();
        assert_eq!(p.apply(&DVector::from_row_slice(&[5., 6., 7.])).as_slice(), &[5., 6.]);
        assert!(Projection::select(3, &[0, 0]).is_err());
        assert!(Projection::select(3, &[3]).is_err());
        assert!(Projection::select(2, &[0, 1, 0]).is_err());
        assert_eq!(Projection::identity(2).kind(), ProjectionKind::Identity);
    }

    #[test]
    fn model_validation() {
        let g = Arc::new(cyclic_shift_group(2).unwrap());
        let th = GroupDistribution::uniform(g);
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        assert!(ChannelModel::new(x.clone(), th.clone(), Projection::identity(2), 0.0).is_err());
        assert!(ChannelModel::new(x.clone(), th.clone(), Projection::identity(3), 1.0).is_err());
        assert!(ChannelModel::new(DVector::zeros(3), th, Projection::identity(2), 1.0).is_err());
    }

    #[test]
    fn rejects_empty_simulation() {
        assert!(simulate(&example2(1.0), 0, 1).is_err());
    }

    #[test]
    fn noiseless_rows_sit_on_the_orbit() {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        let m = ChannelModel::new(
            DVector::from_row_slice(&[0.0, 1.0, 2.0]),
            GroupDistribution::uniform(g),
            Projection::select(3, &[0, 1]).unwrap(),
            1e-12,
        )
        .unwrap();
        let means = m.component_means();
        let b = simulate(&m, 500, 3).unwrap();
        for row in b.rows() {
            let near = means
                .iter()
                .any(|mu| mu.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-9));
            assert!(near);
        }
    }

    #[test]
    fn point_mass_mean_converges() {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        let x = DVector::from_row_slice(&[0.5, -1.0, 2.0]);
        let sigma = 2.0;
        let m = ChannelModel::new(
            x.clone(),
            GroupDistribution::point_mass(g, 0).unwrap(),
            Projection::identity(3),
            sigma,
        )
        .unwrap();
        for &n in &[100usize, 10_000, 200_000] {
            let b = simulate(&m, n, 17).unwrap();
            for k in 0..3 {
                let mean = b.rows().map(|r| r[k]).sum::<f64>() / n as f64;
                assert!((mean - x[k]).abs() < 4.0 * sigma / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn example2_mean() {
        let n = 1_000_000;
        let b = simulate(&example2(1.0), n, 99).unwrap();
        let mean = b.as_slice().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn determinism_and_thread_independence() {
        let m = example2(0.7);
        let a = simulate(&m, 3000, 5).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate(&m, 3000, 5).unwrap());
        let c = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| simulate(&m, 3000, 5).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, c);
        let other = simulate_replicate(&m, 3000, 5, 1).unwrap();
        assert_ne!(a.as_slice(), other.as_slice());
        // a prefix is a prefix
        let short = simulate(&m, 10, 5).unwrap();
        assert_eq!(short.as_slice(), &a.as_slice()[..10]);
    }

    #[test]
    fn assignment_frequencies_match_theta() {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        let m = ChannelModel::new(
            DVector::from_row_slice(&[0.0, 1.0, 2.0]),
            GroupDistribution::uniform(g),
            Projection::identity(3),
            1.0,
        )
        .unwrap();
        let n = 100_000;
        let b = simulate(&m, n, 8).unwrap();
        let mut counts = [0usize; 3];
        for &g in b.diagnostic_assignments().unwrap() {
            counts[g] += 1;
        }
        let expected = n as f64 / 3.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // χ²(2) upper 0.1% point
        assert!(stat < 13.816, "chi2 stat {stat}");
    }

    #[test]
    fn residual_covariance_is_isotropic() {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        let sigma = 1.5;
        let m = ChannelModel::new(
            DVector::from_row_slice(&[0.0, 1.0, 2.0]),
            GroupDistribution::uniform(g),
            Projection::select(3, &[0, 2]).unwrap(),
            sigma,
        )
        .unwrap();
        let means = m.component_means();
        let n = 200_000;
        let b = simulate(&m, n, 4).unwrap();
        let mut cov = [[0.0; 2]; 2];
        for (row, &g) in b.rows().zip(b.diagnostic_assignments().unwrap()) {
            let r = [row[0] - means[g][0], row[1] - means[g][1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += r[i] * r[j] / n as f64;
                }
            }
        }
        let s2 = sigma * sigma;
        let tol = 5.0 * s2 * (2.0 / n as f64).sqrt();
        assert!((cov[0][0] - s2).abs() < tol);
        assert!((cov[1][1] - s2).abs() < tol);
        assert!(cov[0][1].abs() < tol);
    }

    #[test]
    fn normalization() {
        let b = ObservationBatch::from_rows(vec![2.0, 4.0, -1.0, 3.0], 2, 0).unwrap();
        assert_eq!(normalized_batch(&b, 1.0).unwrap().as_slice(), b.as_slice());
        let half = normalized_batch(&b, 2.0).unwrap();
        assert_eq!(half.row(0), &[1.0, 2.0]);
        assert!(half.normalized);
        let sigma = 0.37;
        let batch = simulate(&example2(0.9), 1000, 1).unwrap();
        let back = normalized_batch(&batch, sigma).unwrap();
        for (orig, v) in batch.as_slice().iter().zip(back.as_slice()) {
            let restored = v * sigma;
            let ulp = f64::EPSILON * orig.abs();
            assert!((restored - orig).abs() <= ulp, "{orig} vs {restored}");
        }
        assert!(normalized_batch(&b, 0.0).is_err());
    }

    #[test]
    fn binary_and_csv_files() {
        let batch = simulate(&example2(1.0), 37, 12).unwrap();
        let mut buf = Vec::new();
        batch.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GACB");
        assert_eq!(buf.len(), 4 + 4 + 24 + 37 * 8);
        let back = ObservationBatch::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.as_slice(), batch.as_slice());
        assert_eq!(back.seed, 12);

        let mut text = Vec::new();
        batch.write_csv(&mut text).unwrap();
        let back = ObservationBatch::read_csv(text.as_slice(), 12).unwrap();
        assert_eq!(back.as_slice(), batch.as_slice());

        buf[0] = b'X';
        assert!(matches!(ObservationBatch::read_binary(buf.as_slice()), Err(Error::Format(_))));
    }
}

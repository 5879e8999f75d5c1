//! Sensor graph construction, normalized Laplacian and the graph Fourier basis.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{eigh_symmetric, Tensor};
use crate::scalar::Scalar;

/// How pairwise distances are measured between node coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// Great-circle distance in kilometres; coordinates are (lat, lon) in degrees.
    Haversine,
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Undirected weighted sensor graph together with its spectral basis.
#[derive(Clone, Debug)]
pub struct SensorGraph<T> {
    adjacency: Tensor<T>,
    laplacian: Tensor<T>,
    degrees: Vec<T>,
    eigenvalues: Tensor<T>,
    eigenvectors: Tensor<T>,
}

pub fn pairwise_distances<T: Scalar>(coords: &[(f64, f64)], metric: DistanceMetric) -> Tensor<T> {
    let n = coords.len();
    Tensor::from_fn(&[n, n], |ix| {
        let (a, b) = (coords[ix[0]], coords[ix[1]]);
        if ix[0] == ix[1] {
            return T::zero();
        }
        let d = match metric {
            DistanceMetric::Euclidean => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
            DistanceMetric::Haversine => {
                let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
                let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
                let h = ((lat2 - lat1) / 2.0).sin().powi(2)
                    + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
                2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
            }
        };
        T::lit(d)
    })
}

/// Gaussian-kernel adjacency `w_ij = exp(-d_ij² / σ²)` with entries below
/// `threshold` pruned. `σ` defaults to the population standard deviation of
/// the off-diagonal distances.
pub fn adjacency_from_distances<T: Scalar>(
    distances: &Tensor<T>,
    kernel_width: Option<T>,
    threshold: T,
) -> Result<Tensor<T>> {
    let s = distances.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::contract(format!(
            "distance matrix must be square, got {s:?}"
        )));
    }
    if !(threshold >= T::zero() && threshold < T::one()) {
        return Err(Error::contract("threshold must lie in [0, 1)"));
    }
    let n = s[0];
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    for i in 0..n {
        if distances.get(&[i, i]).abs() > tol {
            return Err(Error::contract("distance matrix needs a zero diagonal"));
        }
        for j in 0..n {
            let d = distances.get(&[i, j]);
            if !(d >= T::zero()) {
                return Err(Error::contract(format!(
                    "negative or NaN distance at ({i},{j})"
                )));
            }
            if (d - distances.get(&[j, i])).abs() > tol {
                return Err(Error::contract(format!(
                    "distance matrix asymmetric at ({i},{j})"
                )));
            }
        }
    }
    let sigma = match kernel_width {
        Some(w) if w > T::zero() => w,
        Some(_) => return Err(Error::contract("kernel width must be positive")),
        None => {
            let off: Vec<T> = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| distances.get(&[i, j]))
                .collect();
            if off.is_empty() {
                T::one()
            } else {
                let cnt = T::from_usize_lossy(off.len());
                let mean = off.iter().copied().sum::<T>() / cnt;
                let var = off.iter().map(|&d| (d - mean) * (d - mean)).sum::<T>() / cnt;
                var.sqrt()
            }
        }
    };
    if n > 1 && distances.max_abs() == T::zero() {
        return Err(Error::Degenerate("all pairwise distances are zero".into()));
    }
    if !(sigma > T::zero()) {
        return Err(Error::Degenerate(
            "off-diagonal distances have zero spread; pass an explicit kernel width".into(),
        ));
    }
    Ok(Tensor::from_fn(&[n, n], |ix| {
        if ix[0] == ix[1] {
            return T::zero();
        }
        let d = distances.get(ix);
        let w = (-(d * d) / (sigma * sigma)).exp();
        if w < threshold {
            T::zero()
        } else {
            w
        }
    }))
}

fn check_adjacency<T: Scalar>(adj: &Tensor<T>) -> Result<usize> {
    let s = adj.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::contract(format!(
            "adjacency must be square, got {s:?}"
        )));
    }
    let n = s[0];
    for i in 0..n {
        for j in 0..n {
            let a = adj.get(&[i, j]);
            if !a.is_finite() || a < T::zero() {
                return Err(Error::contract(format!(
                    "adjacency entry ({i},{j}) is negative or non-finite"
                )));
            }
            if (a - adj.get(&[j, i])).abs() > T::lit(1e-10).max(T::epsilon() * T::lit(64.0)) {
                return Err(Error::contract(format!(
                    "adjacency asymmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(n)
}

/// `L = I − D^{-1/2}·A·D^{-1/2}`; rows and columns of isolated nodes are zero.
pub fn normalized_laplacian<T: Scalar>(adj: &Tensor<T>) -> Result<Tensor<T>> {
    let n = check_adjacency(adj)?;
    let deg = degrees(adj);
    let inv_sqrt: Vec<T> = deg
        .iter()
        .map(|&d| {
            if d > T::zero() {
                T::one() / d.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, n], |ix| {
        let (i, j) = (ix[0], ix[1]);
        let off = adj.get(ix) * (inv_sqrt[i] * inv_sqrt[j]);
        if i == j {
            if deg[i] > T::zero() {
                T::one() - off
            } else {
                T::zero()
            }
        } else {
            -off
        }
    }))
}

fn degrees<T: Scalar>(adj: &Tensor<T>) -> Vec<T> {
    let n = adj.shape()[0];
    (0..n)
        .map(|i| (0..n).map(|j| adj.get(&[i, j])).sum())
        .collect()
}

impl<T: Scalar> SensorGraph<T> {
    pub fn from_adjacency(adjacency: Tensor<T>) -> Result<Self> {
        let mut adjacency = adjacency;
        let n = check_adjacency(&adjacency)?;
        for i in 0..n {
            adjacency.set(&[i, i], T::zero());
        }
        let laplacian = normalized_laplacian(&adjacency)?;
        let eig = eigh_symmetric(&laplacian)?;
        let degrees = degrees(&adjacency);
        Ok(SensorGraph {
            adjacency,
            laplacian,
            degrees,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn from_coords(
        coords: &[(f64, f64)],
        metric: DistanceMetric,
        kernel_width: Option<T>,
        threshold: T,
    ) -> Result<Self> {
        let d = pairwise_distances(coords, metric);
        Self::from_adjacency(adjacency_from_distances(&d, kernel_width, threshold)?)
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn adjacency(&self) -> &Tensor<T> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &Tensor<T> {
        &self.laplacian
    }

    pub fn degrees(&self) -> &[T] {
        &self.degrees
    }

    /// Ascending Laplacian eigenvalues.
    pub fn eigenvalues(&self) -> &Tensor<T> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns (`U`).
    pub fn eigenvectors(&self) -> &Tensor<T> {
        &self.eigenvectors
    }

    /// Content hash of the adjacency, used to pair checkpoints with graphs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_nodes() as u64).to_le_bytes());
        for v in self.adjacency.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn project(&self, signal: &Tensor<T>, node_axis: usize, transpose: bool) -> Result<Tensor<T>> {
        let n = self.n_nodes();
        if node_axis >= signal.ndim() || signal.shape()[node_axis] != n {
            return Err(Error::Shape {
                expected: vec![n],
                actual: signal.shape().to_vec(),
            });
        }
        let rank = signal.ndim();
        let mut perm: Vec<usize> = vec![node_axis];
        perm.extend((0..rank).filter(|&a| a != node_axis));
        let moved = signal.permute(&perm);
        let moved_shape = moved.shape().to_vec();
        let flat = moved.reshape(&[n, signal.len() / n.max(1)])?;
        let basis = if transpose {
            self.eigenvectors.transpose2()
        } else {
            self.eigenvectors.clone()
        };
        let out = basis.matmul(&flat)?.reshape(&moved_shape)?;
        let mut inv = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(out.permute(&inv))
    }

    /// Graph Fourier transform `Uᵀ·h` along `node_axis`.
    pub fn gft(&self, signal: &Tensor<T>, node_axis: usize) -> Result<Tensor<T>> {
        self.project(signal, node_axis, true)
    }

    /// Inverse transform `U·h̃` along `node_axis`.
    pub fn igft(&self, spectral: &Tensor<T>, node_axis: usize) -> Result<Tensor<T>> {
        self.project(spectral, node_axis, false)
    }
}

/// Node coordinates read from `node_id,x,y` or `node_id,lat,lon` CSV.
#[derive(Clone, Debug)]
pub struct NodeCoords {
    pub ids: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    /// True when the header names latitude/longitude columns.
    pub geographic: bool,
}

pub fn read_coords_csv(path: &Path) -> Result<NodeCoords> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 {
        return Err(Error::Parse(format!(
            "{}: expected columns node_id,x,y or node_id,lat,lon",
            path.display()
        )));
    }
    let geographic = headers
        .get(1)
        .is_some_and(|h| h.trim().eq_ignore_ascii_case("lat"));
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        };
        ids.push(rec.get(0).unwrap_or("").trim().to_string());
        coords.push((parse(1)?, parse(2)?));
    }
    Ok(NodeCoords {
        ids,
        coords,
        geographic,
    })
}

/// Reads a headerless numeric matrix.
pub fn read_matrix_csv<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn write_matrix_csv<T: Scalar>(path: &Path, m: &Tensor<T>) -> Result<()> {
    if m.ndim() != 2 {
        return Err(Error::contract("write_matrix_csv expects a matrix"));
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for i in 0..m.shape()[0] {
        w.write_record((0..m.shape()[1]).map(|j| format!("{}", m.get(&[i, j]))))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_graph(n: usize, seed: u64) -> SensorGraph<f64> {
        let mut rng = RngStream::new(seed, 0);
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.uniform_f64(), rng.uniform_f64()))
            .collect();
        SensorGraph::from_coords(&coords, DistanceMetric::Euclidean, None, 0.1).unwrap()
    }

    #[test]
    fn zero_distance_gives_unit_weight() {
        let d = Tensor::from_rows(&[
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let a = adjacency_from_distances(&d, Some(1.0), 0.0).unwrap();
        assert_eq!(a.get(&[0, 1]), 1.0);
        assert_eq!(a.get(&[0, 0]), 0.0);
    }

    #[test]
    fn far_nodes_are_pruned() {
        let d = Tensor::from_rows(&[vec![0.0, 1e6], vec![1e6, 0.0]]).unwrap();
        let a = adjacency_from_distances(&d, Some(1.0), 1e-3).unwrap();
        assert_eq!(a.get(&[0, 1]), 0.0);
    }

    #[test]
    fn three_nodes_on_a_line() {
        let coords = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)];
        let d = pairwise_distances::<f64>(&coords, DistanceMetric::Euclidean);
        let a = adjacency_from_distances(&d, Some(1.0), 0.05).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((a.get(&[0, 1]) - e1).abs() < 1e-15);
        assert!((a.get(&[1, 2]) - e1).abs() < 1e-15);
        assert_eq!(a.get(&[0, 2]), 0.0);
        // unpruned value for the reference
        let raw = adjacency_from_distances(&d, Some(1.0), 0.0).unwrap();
        assert!((raw.get(&[0, 2]) - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn all_zero_distances_are_degenerate() {
        let d = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(
            adjacency_from_distances(&d, None, 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn two_node_laplacian() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let l = normalized_laplacian(&a).unwrap();
        assert_eq!(
            l,
            Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap()
        );
    }

    #[test]
    fn edgeless_graph_has_zero_laplacian() {
        let l = normalized_laplacian(&Tensor::<f64>::zeros(&[4, 4])).unwrap();
        assert_eq!(l, Tensor::zeros(&[4, 4]));
    }

    #[test]
    fn negative_adjacency_rejected() {
        let a = Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(matches!(normalized_laplacian(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn sqrt_degree_vector_is_in_the_kernel() {
        for seed in 0..20 {
            let g = random_graph(10, seed);
            let x =
                Tensor::new(vec![10, 1], g.degrees().iter().map(|d| d.sqrt()).collect()).unwrap();
            let lx = g.laplacian().matmul(&x).unwrap();
            assert!(lx.max_abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_is_psd_and_bounded() {
        for seed in 0..100 {
            let g = random_graph(3 + (seed as usize % 20), 500 + seed);
            let w = g.eigenvalues().data();
            assert!(w[0] >= -1e-10, "min eigenvalue {}", w[0]);
            assert!(*w.last().unwrap() <= 2.0 + 1e-10);
        }
    }

    #[test]
    fn spectral_basis_reconstructs_laplacian() {
        let g = random_graph(12, 3);
        let u = g.eigenvectors();
        let d = Tensor::from_fn(&[12, 12], |ix| {
            if ix[0] == ix[1] {
                g.eigenvalues().data()[ix[0]]
            } else {
                0.0
            }
        });
        let rec = u.matmul(&d).unwrap().matmul(&u.transpose2()).unwrap();
        assert!(rec.sub(g.laplacian()).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = RngStream::new(11, 0);
        let coords: Vec<(f64, f64)> = (0..9)
            .map(|_| (rng.uniform_f64(), rng.uniform_f64()))
            .collect();
        let perm = [3, 7, 0, 8, 1, 5, 2, 6, 4];
        let permuted: Vec<(f64, f64)> = perm.iter().map(|&p| coords[p]).collect();
        let g =
            SensorGraph::<f64>::from_coords(&coords, DistanceMetric::Euclidean, None, 0.1).unwrap();
        let gp = SensorGraph::<f64>::from_coords(&permuted, DistanceMetric::Euclidean, None, 0.1)
            .unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let (pi, pj) = (perm[i], perm[j]);
                assert!((gp.adjacency().get(&[i, j]) - g.adjacency().get(&[pi, pj])).abs() < 1e-14);
                assert!((gp.laplacian().get(&[i, j]) - g.laplacian().get(&[pi, pj])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gft_round_trip_and_parseval() {
        let g = random_graph(16, 9);
        let x: Tensor<f64> = RngStream::new(1, 1).gaussian(&[5, 16, 3]);
        let xt = g.gft(&x, 1).unwrap();
        assert!((xt.norm() - x.norm()).abs() < 1e-10);
        let back = g.igft(&xt, 1).unwrap();
        assert!(back.sub(&x).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn gft_of_basis_column_is_unit_vector() {
        let g = random_graph(8, 4);
        for k in 0..8 {
            let col = Tensor::from_fn(&[8], |ix| g.eigenvectors().get(&[ix[0], k]));
            let spec = g.gft(&col, 0).unwrap();
            for j in 0..8 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((spec.data()[j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_signal_on_regular_graph_lives_at_zero_frequency() {
        // ring of 6 nodes, unit weights: every node has degree 2
        let a: Tensor<f64> = Tensor::from_fn(&[6, 6], |ix| {
            let d = (ix[0] as i64 - ix[1] as i64).rem_euclid(6);
            if d == 1 || d == 5 {
                1.0
            } else {
                0.0
            }
        });
        let g = SensorGraph::from_adjacency(a).unwrap();
        let spec = g.gft(&Tensor::full(&[6], 2.0), 0).unwrap();
        assert!(g.eigenvalues().data()[0].abs() < 1e-12);
        assert!((spec.data()[0].abs() - spec.norm()).abs() < 1e-10);
        assert!(spec.data()[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn node_axis_mismatch_errors() {
        let g = random_graph(5, 2);
        assert!(g.gft(&Tensor::zeros(&[4, 2]), 0).is_err());
    }
}

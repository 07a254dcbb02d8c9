//! Sensor-network topologies and Laplacian spectra.
//!
//! A [`NetworkGraph`] is a simple undirected graph on `n` sensors. Its
//! Laplacian `L = D - A` is eigendecomposed once into a
//! [`LaplacianSpectrum`], which carries the algebraic connectivity
//! `lambda_2`, the largest eigenvalue `lambda_N`, and the orthonormal
//! eigenvector matrix used by the moment recursions and every bound.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used to decide whether a Laplacian eigenvalue is zero.
pub const ZERO_EIGEN_RTOL: f64 = 1e-9;

const ER_MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("a network needs at least 2 sensors, got n = {0}")]
    TooFewNodes(usize),
    #[error("self-loop at vertex {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) references a vertex outside 0..{2}")]
    VertexOutOfRange(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("cycle graphs need n >= 3, got n = {0}")]
    CycleTooSmall(usize),
    #[error("no connected Erdos-Renyi sample after {0} attempts")]
    NotConnectedAfterRetries(usize),
    #[error("edge-list parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("symmetric eigensolver did not converge for n = {0}")]
    EigenNoConvergence(usize),
}

/// Declarative description of a topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    Path {
        n: usize,
    },
    Cycle {
        n: usize,
    },
    Complete {
        n: usize,
    },
    Star {
        n: usize,
    },
    ErdosRenyi {
        n: usize,
        p: f64,
        seed: u64,
        #[serde(default)]
        require_connected: bool,
    },
    Edges {
        n: usize,
        edges: Vec<(usize, usize)>,
    },
    EdgeFile {
        path: String,
    },
}

/// Simple undirected graph together with its Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
    laplacian: DMatrix<f64>,
}

impl NetworkGraph {
    /// Builds a graph from an explicit edge list. Edges are stored normalized
    /// as `(min, max)` and sorted.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewNodes(n));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphError::VertexOutOfRange(i, j, n));
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            let e = (i.min(j), i.max(j));
            if !set.insert(e) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();

        // Integer Laplacian first so that row and column sums are exactly zero.
        let mut lap = vec![0i64; n * n];
        let mut degrees = vec![0usize; n];
        for &(i, j) in &edges {
            degrees[i] += 1;
            degrees[j] += 1;
            lap[i * n + j] -= 1;
            lap[j * n + i] -= 1;
        }
        for (i, d) in degrees.iter().enumerate() {
            lap[i * n + i] = *d as i64;
        }
        let laplacian = DMatrix::from_fn(n, n, |i, j| lap[i * n + j] as f64);
        Ok(Self {
            n,
            edges,
            degrees,
            laplacian,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == i {
                Some(b)
            } else if b == i {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Number of connected components, by breadth-first search.
    pub fn component_count(&self) -> usize {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n];
        let mut count = 0;
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    /// Serializes to the plain-text edge-list format.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n={}\n", self.n);
        for (i, j) in &self.edges {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }
}

impl fmt::Display for NetworkGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "graph(n={}, |E|={})", self.n, self.edges.len())
    }
}

impl FromStr for NetworkGraph {
    type Err = GraphError;

    /// Parses `n=<int>` followed by `<i> <j>` lines; `#` starts a comment.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut n: Option<usize> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| GraphError::Parse { line: line_no, msg };
            match n {
                None => {
                    let rest = line
                        .strip_prefix("n=")
                        .or_else(|| line.strip_prefix("n ="))
                        .ok_or_else(|| parse_err(format!("expected `n=<int>`, got `{line}`")))?;
                    n = Some(
                        rest.trim()
                            .parse()
                            .map_err(|e| parse_err(format!("bad node count: {e}")))?,
                    );
                }
                Some(_) => {
                    let mut it = line.split_whitespace();
                    let (a, b) = match (it.next(), it.next(), it.next()) {
                        (Some(a), Some(b), None) => (a, b),
                        _ => return Err(parse_err(format!("expected `<i> <j>`, got `{line}`"))),
                    };
                    let i = a.parse().map_err(|e| parse_err(format!("bad vertex: {e}")))?;
                    let j = b.parse().map_err(|e| parse_err(format!("bad vertex: {e}")))?;
                    edges.push((i, j));
                }
            }
        }
        let n = n.ok_or(GraphError::Parse {
            line: 0,
            msg: "missing `n=<int>` header".into(),
        })?;
        NetworkGraph::from_edges(n, &edges)
    }
}

/// Reads an edge-list file.
pub fn read_edge_file(path: impl AsRef<Path>) -> Result<NetworkGraph, GraphError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| GraphError::Io(e.to_string()))?;
    text.parse()
}

/// Instantiates a topology from its spec. Deterministic in the spec, including the seed.
pub fn build_graph(spec: &GraphSpec) -> Result<NetworkGraph, GraphError> {
    match *spec {
        GraphSpec::Path { n } => {
            let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
            NetworkGraph::from_edges(n, &edges)
        }
        GraphSpec::Cycle { n } => {
            if n < 3 {
                return Err(if n < 2 {
                    GraphError::TooFewNodes(n)
                } else {
                    GraphError::CycleTooSmall(n)
                });
            }
            let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
            NetworkGraph::from_edges(n, &edges)
        }
        GraphSpec::Complete { n } => {
            let edges: Vec<_> = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .collect();
            NetworkGraph::from_edges(n, &edges)
        }
        GraphSpec::Star { n } => {
            let edges: Vec<_> = (1..n).map(|j| (0, j)).collect();
            NetworkGraph::from_edges(n, &edges)
        }
        GraphSpec::ErdosRenyi {
            n,
            p,
            seed,
            require_connected,
        } => erdos_renyi(n, p, seed, require_connected),
        GraphSpec::Edges { n, ref edges } => NetworkGraph::from_edges(n, edges),
        GraphSpec::EdgeFile { ref path } => read_edge_file(path),
    }
}

fn erdos_renyi(n: usize, p: f64, seed: u64, require_connected: bool) -> Result<NetworkGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::BadProbability(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ER_MAX_ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let g = NetworkGraph::from_edges(n, &edges)?;
        if !require_connected || g.component_count() == 1 {
            return Ok(g);
        }
    }
    Err(GraphError::NotConnectedAfterRetries(ER_MAX_ATTEMPTS))
}

/// Eigenpairs of a Laplacian, eigenvalues ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSpectrum {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl LaplacianSpectrum {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Column `i` pairs with `eigenvalues()[i]`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Algebraic connectivity.
    pub fn lambda2(&self) -> f64 {
        self.eigenvalues[1]
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.n() - 1]
    }

    /// Absolute threshold below which an eigenvalue counts as zero.
    pub fn zero_tolerance(&self) -> f64 {
        ZERO_EIGEN_RTOL * self.lambda_max().max(1.0)
    }

    pub fn is_connected(&self) -> bool {
        self.lambda2() > self.zero_tolerance()
    }

    /// Number of (numerically) zero eigenvalues, which equals the component count.
    pub fn zero_multiplicity(&self) -> usize {
        let tol = self.zero_tolerance();
        self.eigenvalues.iter().filter(|&&l| l <= tol).count()
    }

    /// `Q diag(lambda) Q^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        q * DMatrix::from_diagonal(&self.eigenvalues) * q.transpose()
    }

    /// Applies `f(lambda_i)` spectrally: `Q diag(f(lambda)) Q^T`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let d = self.eigenvalues.map(f);
        q * DMatrix::from_diagonal(&d) * q.transpose()
    }
}

/// Eigendecomposition of the graph Laplacian.
///
/// The zero eigenspace is re-based so that its first vector is exactly
/// `1/sqrt(N)`, also for disconnected graphs.
pub fn spectrum(g: &NetworkGraph) -> Result<LaplacianSpectrum, GraphError> {
    let n = g.n();
    let eig = SymmetricEigen::try_new(g.laplacian().clone(), f64::EPSILON, 10_000 * n)
        .ok_or(GraphError::EigenNoConvergence(n))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);

    let tol = ZERO_EIGEN_RTOL * values[n - 1].max(1.0);
    let nullity = values.iter().take_while(|&&l| l <= tol).count().max(1);

    // Gram-Schmidt over [1/sqrt(N), null vectors...], keeping `nullity` vectors.
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut basis: Vec<DVector<f64>> = vec![ones];
    let mut candidates: Vec<DVector<f64>> = (0..nullity)
        .map(|c| vectors.column(c).into_owned())
        .collect();
    while basis.len() < nullity {
        // Pick the candidate with the largest residual after projection.
        let residuals: Vec<DVector<f64>> = candidates
            .iter()
            .map(|v| {
                let mut r = v.clone();
                for b in &basis {
                    let proj = b.dot(&r);
                    r -= b * proj;
                }
                r
            })
            .collect();
        let (best, _) = residuals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .expect("nullity > basis.len() implies candidates remain");
        let r = residuals[best].clone();
        basis.push(r.normalize());
        candidates.remove(best);
    }
    for (c, b) in basis.iter().enumerate() {
        vectors.set_column(c, b);
        values[c] = 0.0;
    }

    Ok(LaplacianSpectrum {
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

pub fn is_connected(s: &LaplacianSpectrum) -> bool {
    s.is_connected()
}

/// `W = I - alpha * L`.
pub fn averaging_matrix(laplacian: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = laplacian.nrows();
    DMatrix::identity(n, n) - laplacian * alpha
}

/// Ideal averaging matrix `J = (1/N) 1 1^T`.
pub fn ideal_averaging(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lap_rows(g: &NetworkGraph) -> Vec<Vec<f64>> {
        (0..g.n())
            .map(|i| g.laplacian().row(i).iter().copied().collect())
            .collect()
    }

    #[test]
    fn path2_laplacian() {
        let g = build_graph(&GraphSpec::Path { n: 2 }).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(lap_rows(&g), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
    }

    #[test]
    fn complete3_laplacian() {
        let g = build_graph(&GraphSpec::Complete { n: 3 }).unwrap();
        assert_eq!(g.degrees(), &[2, 2, 2]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { -1.0 };
                assert_eq!(g.laplacian()[(i, j)], want);
            }
        }
    }

    #[test]
    fn isolated_vertex_edge_list() {
        let g = NetworkGraph::from_edges(3, &[(0, 2)]).unwrap();
        assert_eq!(g.degrees(), &[1, 0, 1]);
        assert_eq!(g.component_count(), 2);
        let s = spectrum(&g).unwrap();
        assert!(!s.is_connected());
        assert!(s.lambda2().abs() < 1e-12);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(NetworkGraph::from_edges(1, &[]), Err(GraphError::TooFewNodes(1)));
        assert_eq!(NetworkGraph::from_edges(3, &[(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            NetworkGraph::from_edges(3, &[(0, 3)]),
            Err(GraphError::VertexOutOfRange(0, 3, 3))
        );
        assert_eq!(
            NetworkGraph::from_edges(3, &[(0, 1), (1, 0)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert!(build_graph(&GraphSpec::Cycle { n: 2 }).is_err());
    }

    #[test]
    fn small_spectra() {
        let cases: [(GraphSpec, [f64; 3]); 2] = [
            (GraphSpec::Complete { n: 3 }, [0.0, 3.0, 3.0]),
            // det(L - x I) = -x (x - 1) (x - 3) for the 3-path
            (GraphSpec::Path { n: 3 }, [0.0, 1.0, 3.0]),
        ];
        for (spec, want) in cases {
            let s = spectrum(&build_graph(&spec).unwrap()).unwrap();
            for (got, want) in s.eigenvalues().iter().zip(want) {
                assert!((got - want).abs() < 1e-12, "{spec:?}: {got} vs {want}");
            }
        }
        let s = spectrum(&build_graph(&GraphSpec::Path { n: 2 }).unwrap()).unwrap();
        assert!((s.lambda2() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn connectivity_examples() {
        let conn = |spec| spectrum(&build_graph(&spec).unwrap()).unwrap().is_connected();
        assert!(conn(GraphSpec::Path { n: 3 }));
        assert!(conn(GraphSpec::Complete { n: 4 }));
        assert!(!conn(GraphSpec::Edges {
            n: 3,
            edges: vec![(0, 2)]
        }));
    }

    #[test]
    fn averaging_matrix_examples() {
        let l2 = build_graph(&GraphSpec::Path { n: 2 }).unwrap();
        assert_eq!(averaging_matrix(l2.laplacian(), 0.0), DMatrix::identity(2, 2));
        assert_eq!(averaging_matrix(l2.laplacian(), 0.5), ideal_averaging(2));

        let l3 = build_graph(&GraphSpec::Path { n: 3 }).unwrap();
        let w = averaging_matrix(l3.laplacian(), 0.25);
        assert_eq!(w[(0, 0)], 0.75);
        for i in 0..3 {
            assert!((w.row(i).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_list_format() {
        let text = "# a comment\nn=4\n0 1\n1 2  # trailing\n\n2 3\n";
        let g: NetworkGraph = text.parse().unwrap();
        assert_eq!(g, build_graph(&GraphSpec::Path { n: 4 }).unwrap());
        let back: NetworkGraph = g.to_edge_list().parse().unwrap();
        assert_eq!(back, g);
        assert!(matches!("0 1\n".parse::<NetworkGraph>(), Err(GraphError::Parse { .. })));
        assert!(matches!("n=3\n0 1 2\n".parse::<NetworkGraph>(), Err(GraphError::Parse { line: 2, .. })));
        assert_eq!("n=3\n0 5\n".parse::<NetworkGraph>(), Err(GraphError::VertexOutOfRange(0, 5, 3)));
    }

    #[test]
    fn erdos_renyi_is_seeded() {
        let spec = GraphSpec::ErdosRenyi {
            n: 12,
            p: 0.3,
            seed: 7,
            require_connected: true,
        };
        let a = build_graph(&spec).unwrap();
        let b = build_graph(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.component_count(), 1);
        let sparse = GraphSpec::ErdosRenyi {
            n: 12,
            p: 0.0,
            seed: 7,
            require_connected: false,
        };
        assert_eq!(build_graph(&sparse).unwrap().edges().len(), 0);
    }

    #[test]
    fn null_space_is_rebased_for_disconnected_graphs() {
        // two disjoint 3-paths
        let g = NetworkGraph::from_edges(6, &[(0, 1), (1, 2), (3, 4), (4, 5)]).unwrap();
        let s = spectrum(&g).unwrap();
        assert_eq!(s.zero_multiplicity(), 2);
        let q = s.eigenvectors();
        let c = 1.0 / 6f64.sqrt();
        for r in 0..6 {
            assert!((q[(r, 0)] - c).abs() < 1e-12);
        }
        let qtq = q.transpose() * q;
        assert!((qtq - DMatrix::identity(6, 6)).amax() < 1e-10);
        assert!((s.reconstruct() - g.laplacian()).amax() < 1e-9 * s.lambda_max().max(1.0));
    }

    #[test]
    fn neighbors_of_star_center() {
        let g = build_graph(&GraphSpec::Star { n: 4 }).unwrap();
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(g.neighbors(2).collect::<Vec<_>>(), vec![0]);
    }
}

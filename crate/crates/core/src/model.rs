//! Coupled LTI networks: subsystems, interconnection graph, Laplacians and
//! global assembly.

use std::collections::BTreeMap;
use std::ops::Deref;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{all_finite, block_diag, kron_identity};
use crate::{Error, Result};

/// `x⁺ = A x + B u + F v`, `y = C x` (or the continuous-time analogue).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    #[serde(with = "crate::linalg::serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub f: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub c: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, f: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let ss = Self { a, b, f, c };
        ss.validate()?;
        Ok(ss)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.c.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {:?}",
                self.a.shape()
            )));
        }
        for (name, mat, want) in [
            ("B", &self.b, (n, m)),
            ("F", &self.f, (n, m)),
            ("C", &self.c, (m, n)),
        ] {
            if mat.shape() != want {
                return Err(Error::Dimension(format!(
                    "{name} is {:?}, expected {want:?}",
                    mat.shape()
                )));
            }
        }
        for (name, mat) in [("A", &self.a), ("B", &self.b), ("F", &self.f), ("C", &self.c)] {
            if !all_finite(mat) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input / output dimension.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }
}

macro_rules! subsystem_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "StateSpace", into = "StateSpace")]
        pub struct $name(StateSpace);

        impl $name {
            pub fn new(
                a: DMatrix<f64>,
                b: DMatrix<f64>,
                f: DMatrix<f64>,
                c: DMatrix<f64>,
            ) -> Result<Self> {
                StateSpace::new(a, b, f, c).map(Self)
            }

            pub fn into_inner(self) -> StateSpace {
                self.0
            }
        }

        impl Deref for $name {
            type Target = StateSpace;
            fn deref(&self) -> &StateSpace {
                &self.0
            }
        }

        impl AsRef<StateSpace> for $name {
            fn as_ref(&self) -> &StateSpace {
                &self.0
            }
        }

        impl TryFrom<StateSpace> for $name {
            type Error = Error;
            fn try_from(ss: StateSpace) -> Result<Self> {
                ss.validate()?;
                Ok(Self(ss))
            }
        }

        impl From<$name> for StateSpace {
            fn from(s: $name) -> StateSpace {
                s.0
            }
        }
    };
}

subsystem_newtype!(
    /// Continuous-time subsystem `ẋ = A_c x + B_c u + F_c v`.
    ContinuousSubsystem
);
subsystem_newtype!(
    /// Discrete-time subsystem `x⁺ = A x + B u + F v`.
    DiscreteSubsystem
);

/// A directed edge: the output of `from` drives the dynamics of `to` with
/// strength `weight` (that is, `weight = l_{to,from}`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Weighted directed interconnection graph. Node ids are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGraph {
    node_count: usize,
    weights: BTreeMap<(usize, usize), f64>,
}

impl CouplingGraph {
    pub fn new(node_count: usize, edges: &[Edge]) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for e in edges {
            if e.from >= node_count || e.to >= node_count {
                return Err(Error::Graph(format!(
                    "edge {}→{} references a node outside 0..{node_count}",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::Graph(format!("self-loop at node {}", e.from)));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(Error::Graph(format!(
                    "edge {}→{} has invalid weight {}",
                    e.from, e.to, e.weight
                )));
            }
            if weights.insert((e.from, e.to), e.weight).is_some() {
                return Err(Error::Graph(format!(
                    "duplicate edge {}→{}",
                    e.from, e.to
                )));
            }
        }
        Ok(Self {
            node_count,
            weights,
        })
    }

    /// Graph with both directions of every `(i, j, w)` pair.
    pub fn undirected(node_count: usize, pairs: &[(usize, usize, f64)]) -> Result<Self> {
        let edges: Vec<Edge> = pairs
            .iter()
            .flat_map(|&(i, j, w)| {
                [
                    Edge { from: i, to: j, weight: w },
                    Edge { from: j, to: i, weight: w },
                ]
            })
            .collect();
        Self::new(node_count, &edges)
    }

    pub fn empty(node_count: usize) -> Self {
        Self {
            node_count,
            weights: BTreeMap::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.weights
            .iter()
            .map(|(&(from, to), &weight)| Edge { from, to, weight })
            .collect()
    }

    pub fn edge_weight(&self, from: usize, to: usize) -> Option<f64> {
        self.weights.get(&(from, to)).copied()
    }

    /// `N_i⁻`: nodes whose output affects node `i`.
    pub fn in_neighbours(&self, i: usize) -> Vec<usize> {
        self.weights
            .keys()
            .filter(|&&(_, to)| to == i)
            .map(|&(from, _)| from)
            .collect()
    }

    /// `N_i⁺`: nodes affected by the output of node `i`.
    pub fn out_neighbours(&self, i: usize) -> Vec<usize> {
        self.weights
            .keys()
            .filter(|&&(from, _)| from == i)
            .map(|&(_, to)| to)
            .collect()
    }

    /// `N_i = N_i⁺ ∪ N_i⁻`, sorted.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        let mut all = self.in_neighbours(i);
        all.extend(self.out_neighbours(i));
        all.sort_unstable();
        all.dedup();
        all
    }

    /// `l_ij`: weight of the edge `j → i`, or of `i → j` when only that
    /// direction exists.
    pub fn coupling_weight(&self, i: usize, j: usize) -> f64 {
        self.edge_weight(j, i)
            .or_else(|| self.edge_weight(i, j))
            .unwrap_or(0.0)
    }

    /// True when every edge has a reverse edge of equal weight.
    pub fn is_symmetric(&self) -> bool {
        self.weights.iter().all(|(&(from, to), &w)| {
            self.edge_weight(to, from)
                .is_some_and(|r| (r - w).abs() <= 1e-12 * w.abs().max(r.abs()))
        })
    }
}

/// Graph Laplacian with `L_ii = Σ_{j∈N_i} l_ij` and `L_ij = −l_ij` for
/// `j ∈ N_i⁻`.
pub fn build_laplacian(graph: &CouplingGraph) -> DMatrix<f64> {
    let m = graph.node_count();
    let mut l = DMatrix::zeros(m, m);
    for i in 0..m {
        l[(i, i)] = graph
            .neighbours(i)
            .into_iter()
            .map(|j| graph.coupling_weight(i, j))
            .sum();
        for j in graph.in_neighbours(i) {
            l[(i, j)] = -graph.coupling_weight(i, j);
        }
    }
    l
}

/// `L̃` with block `(i, j)` equal to `L_ij · I_m`.
pub fn expand_laplacian(laplacian: &DMatrix<f64>, output_dims: &[usize]) -> Result<DMatrix<f64>> {
    let big_m = laplacian.nrows();
    if laplacian.ncols() != big_m {
        return Err(Error::Dimension("Laplacian must be square".into()));
    }
    if output_dims.len() != big_m {
        return Err(Error::Dimension(format!(
            "{} output dimensions for a {big_m}-node Laplacian",
            output_dims.len()
        )));
    }
    let m = output_dims.first().copied().unwrap_or(0);
    if output_dims.iter().any(|&d| d != m) {
        return Err(Error::Dimension(format!(
            "all subsystems must share one output dimension, got {output_dims:?}"
        )));
    }
    Ok(kron_identity(laplacian, m))
}

/// Global matrices of an assembled network.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `A + B·blkdiag(K_i)` when gains were supplied.
    pub a_closed: Option<DMatrix<f64>>,
}

/// `U = L̃C`, `W = CᵀL̃ᵀ` and their per-subsystem row slices.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrices {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub u_blocks: Vec<DMatrix<f64>>,
    pub w_blocks: Vec<DMatrix<f64>>,
}

/// A network of subsystems of one kind (continuous or discrete).
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    subsystems: Vec<S>,
    graph: CouplingGraph,
    laplacian: DMatrix<f64>,
    expanded_laplacian: DMatrix<f64>,
    symmetric: bool,
}

pub type NetworkModel = Network<DiscreteSubsystem>;
pub type ContinuousNetwork = Network<ContinuousSubsystem>;

impl<S: AsRef<StateSpace>> Network<S> {
    pub fn new(subsystems: Vec<S>, graph: CouplingGraph) -> Result<Self> {
        if subsystems.is_empty() {
            return Err(Error::Dimension("network has no subsystems".into()));
        }
        if graph.node_count() != subsystems.len() {
            return Err(Error::Dimension(format!(
                "graph has {} nodes but there are {} subsystems",
                graph.node_count(),
                subsystems.len()
            )));
        }
        let dims: Vec<usize> = subsystems.iter().map(|s| s.as_ref().m()).collect();
        let laplacian = build_laplacian(&graph);
        let expanded_laplacian = expand_laplacian(&laplacian, &dims)?;
        let symmetric = graph.is_symmetric();
        Ok(Self {
            subsystems,
            graph,
            laplacian,
            expanded_laplacian,
            symmetric,
        })
    }

    pub fn subsystems(&self) -> &[S] {
        &self.subsystems
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn graph(&self) -> &CouplingGraph {
        &self.graph
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn expanded_laplacian(&self) -> &DMatrix<f64> {
        &self.expanded_laplacian
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Global state dimension `Σ n_i`.
    pub fn n(&self) -> usize {
        self.subsystems.iter().map(|s| s.as_ref().n()).sum()
    }

    /// Global output dimension `Σ m_i`.
    pub fn m(&self) -> usize {
        self.subsystems.iter().map(|s| s.as_ref().m()).sum()
    }

    /// Shared per-subsystem output dimension.
    pub fn output_dim(&self) -> usize {
        self.subsystems[0].as_ref().m()
    }

    /// First global state index of each subsystem.
    pub fn state_offsets(&self) -> Vec<usize> {
        offsets(self.subsystems.iter().map(|s| s.as_ref().n()))
    }

    pub fn input_offsets(&self) -> Vec<usize> {
        offsets(self.subsystems.iter().map(|s| s.as_ref().m()))
    }

    fn stacked(&self, pick: impl Fn(&StateSpace) -> &DMatrix<f64>) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = self
            .subsystems
            .iter()
            .map(|s| pick(s.as_ref()).clone())
            .collect();
        block_diag(&blocks)
    }

    pub fn a_blocks(&self) -> DMatrix<f64> {
        self.stacked(|s| &s.a)
    }

    pub fn b_global(&self) -> DMatrix<f64> {
        self.stacked(|s| &s.b)
    }

    pub fn f_global(&self) -> DMatrix<f64> {
        self.stacked(|s| &s.f)
    }

    pub fn c_global(&self) -> DMatrix<f64> {
        self.stacked(|s| &s.c)
    }

    /// `A = blkdiag(A_i) − blkdiag(F_i)·L̃·C`, `B = blkdiag(B_i)`,
    /// `C = blkdiag(C_i)` and, if gains are given, `A + B·blkdiag(K_i)`.
    pub fn assemble(&self, gains: Option<&[DMatrix<f64>]>) -> Result<GlobalSystem> {
        let c = self.c_global();
        let a = self.a_blocks() - self.f_global() * &self.expanded_laplacian * &c;
        let b = self.b_global();
        let a_closed = match gains {
            None => None,
            Some(k) => Some(&a + &b * self.gain_matrix(k)?),
        };
        Ok(GlobalSystem { a, b, c, a_closed })
    }

    /// `blkdiag(K_i)` after checking each `K_i` is `m_i × n_i`.
    pub fn gain_matrix(&self, gains: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        if gains.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} gains for {} subsystems",
                gains.len(),
                self.len()
            )));
        }
        for (i, (k, s)) in gains.iter().zip(&self.subsystems).enumerate() {
            let want = (s.as_ref().m(), s.as_ref().n());
            if k.shape() != want {
                return Err(Error::Dimension(format!(
                    "gain {i} is {:?}, expected {want:?}",
                    k.shape()
                )));
            }
        }
        Ok(block_diag(gains))
    }

    pub fn coupling_matrices(&self) -> CouplingMatrices {
        let c = self.c_global();
        let u = &self.expanded_laplacian * &c;
        let w = c.transpose() * self.expanded_laplacian.transpose();
        let mut u_blocks = Vec::with_capacity(self.len());
        let mut w_blocks = Vec::with_capacity(self.len());
        let (mut r_u, mut r_w) = (0, 0);
        for s in &self.subsystems {
            let (n_i, m_i) = (s.as_ref().n(), s.as_ref().m());
            u_blocks.push(u.rows(r_u, m_i).into_owned());
            w_blocks.push(w.rows(r_w, n_i).into_owned());
            r_u += m_i;
            r_w += n_i;
        }
        CouplingMatrices {
            u,
            w,
            u_blocks,
            w_blocks,
        }
    }

    /// Applies `map` to every subsystem, keeping the graph.
    pub fn map_subsystems<T: AsRef<StateSpace>>(
        &self,
        map: impl FnMut(&S) -> Result<T>,
    ) -> Result<Network<T>> {
        let subs = self.subsystems.iter().map(map).collect::<Result<Vec<T>>>()?;
        Network::new(subs, self.graph.clone())
    }
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    dims.map(|d| {
        let o = acc;
        acc += d;
        o
    })
    .collect()
}

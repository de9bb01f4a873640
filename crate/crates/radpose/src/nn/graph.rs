//! Skeleton-graph layers: Chebyshev spectral convolution, graph attention,
//! and the residual block that combines them.
//!
//! Node features for a batch of B skeletons are stacked as a `(B·n, C)`
//! matrix, n rows per skeleton in joint order; every operator here mixes
//! rows within one skeleton only.

use super::layers::{TransformerSpec, RESIDUAL_BRANCH_GAIN};
use super::params::{xavier_uniform, zeros, ParameterStore, TapeSession};
use super::tape::TensorId;
use super::NnError;
use crate::skeleton::SkeletonTopology;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Highest Chebyshev polynomial degree used by [`ChebConvSpec`].
pub const CHEB_ORDER: usize = 2;
/// Dropout probability inside [`GcnBlockSpec`].
pub const GCN_BLOCK_DROPOUT: f64 = 0.25;

/// An undirected graph together with its scaled Laplacian
/// `−D^{−1/2} A D^{−1/2}` (eigenvalues in `[−1, 1]`; rows of isolated
/// nodes are all zero).
#[derive(Debug, Clone)]
pub struct GraphSpec {
    node_count: usize,
    scaled_laplacian: Array2<f64>,
}

impl GraphSpec {
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, NnError> {
        if node_count == 0 {
            return Err(NnError::BadGraph("graph needs at least one node".into()));
        }
        let mut adjacency = Array2::<f64>::zeros((node_count, node_count));
        for &(a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(NnError::BadGraph(format!(
                    "edge ({a}, {b}) references a node outside 0..{node_count}"
                )));
            }
            if a == b {
                return Err(NnError::BadGraph(format!("self-loop on node {a}")));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        let inv_sqrt_degree: Vec<f64> = (0..node_count)
            .map(|i| {
                let degree = adjacency.row(i).sum();
                if degree > 0.0 {
                    1.0 / degree.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let scaled_laplacian = Array2::from_shape_fn((node_count, node_count), |(i, j)| {
            -inv_sqrt_degree[i] * adjacency[(i, j)] * inv_sqrt_degree[j]
        });
        Ok(Self { node_count, scaled_laplacian })
    }

    /// Graph over the 17-joint skeleton's bone edges.
    pub fn human17() -> Self {
        let topology = SkeletonTopology::human17();
        Self::new(topology.joint_count(), topology.edges())
            .expect("built-in skeleton topology is a valid graph")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn scaled_laplacian(&self) -> &Array2<f64> {
        &self.scaled_laplacian
    }
}

/// Chebyshev graph convolution `y = Σ_j T_j(L̃)·x·W_j + b` with
/// `T_0 = I`, `T_1 = L̃`, `T_j = 2·L̃·T_{j−1} − T_{j−2}`, up to
/// [`CHEB_ORDER`].
#[derive(Debug, Clone)]
pub struct ChebConvSpec {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl ChebConvSpec {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { prefix: prefix.into(), d_in, d_out }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        let p = &self.prefix;
        // Xavier's variance argument assumes a single weight matrix per
        // output; this layer sums `CHEB_ORDER + 1` independent terms, so
        // each is shrunk to keep the summed output at unit gain.
        let gain = 1.0 / ((CHEB_ORDER + 1) as f64).sqrt();
        for j in 0..=CHEB_ORDER {
            let w = xavier_uniform(self.d_in, self.d_out, rng).mapv(|v| v * gain);
            store.insert(&format!("{p}.w{j}"), w)?;
        }
        store.insert(&format!("{p}.b"), zeros(1, self.d_out))?;
        Ok(())
    }

    pub fn forward(
        &self,
        sess: &mut TapeSession,
        graph: &GraphSpec,
        x: TensorId,
    ) -> Result<TensorId, NnError> {
        let (rows, cols) = (sess.tape.value(x).nrows(), sess.tape.value(x).ncols());
        if cols != self.d_in {
            return Err(NnError::Shape {
                op: "cheb_conv_forward",
                detail: format!("'{}' expects {} input features, got {cols}", self.prefix, self.d_in),
            });
        }
        let n = graph.node_count();
        if rows == 0 || rows % n != 0 {
            return Err(NnError::Shape {
                op: "cheb_conv_forward",
                detail: format!("{rows} rows do not form skeletons of {n} joints"),
            });
        }

        let p = &self.prefix;
        let laplacian = graph.scaled_laplacian().clone();
        let mut basis = Vec::with_capacity(CHEB_ORDER + 1);
        basis.push(x);
        if CHEB_ORDER >= 1 {
            basis.push(sess.tape.left_mul_blocks(laplacian.clone(), x));
        }
        for j in 2..=CHEB_ORDER {
            let lt = sess.tape.left_mul_blocks(laplacian.clone(), basis[j - 1]);
            let lt2 = sess.tape.scale(lt, 2.0);
            basis.push(sess.tape.sub(lt2, basis[j - 2]));
        }

        let mut out = None;
        for (j, &t) in basis.iter().enumerate() {
            let w = sess.param(&format!("{p}.w{j}"))?;
            let term = sess.tape.matmul(t, w);
            out = Some(match out {
                None => term,
                Some(acc) => sess.tape.add(acc, term),
            });
        }
        let bias = sess.param(&format!("{p}.b"))?;
        Ok(sess.tape.add_row_broadcast(out.expect("at least the order-0 term"), bias))
    }
}

/// Self-attention across the joints of each skeleton: a transformer layer
/// whose tokens are the graph's nodes.
#[derive(Debug, Clone)]
pub struct GraphAttentionSpec {
    pub node_count: usize,
    pub layer: TransformerSpec,
}

impl GraphAttentionSpec {
    pub fn new(
        prefix: impl Into<String>,
        node_count: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        dropout_p: f64,
    ) -> Result<Self, NnError> {
        Ok(Self { node_count, layer: TransformerSpec::new(prefix, dim, heads, ffn_hidden, dropout_p)? })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.layer.init(store, rng)
    }

    pub fn forward(&self, sess: &mut TapeSession, x: TensorId) -> Result<TensorId, NnError> {
        self.layer.forward(sess, x, self.node_count, None)
    }
}

/// Residual skeleton block: `graph_attention(x + dropout(cheb_conv(x)))`.
#[derive(Debug, Clone)]
pub struct GcnBlockSpec {
    pub conv: ChebConvSpec,
    pub attention: GraphAttentionSpec,
}

impl GcnBlockSpec {
    pub fn new(
        prefix: impl Into<String>,
        node_count: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        attention_dropout: f64,
    ) -> Result<Self, NnError> {
        let prefix = prefix.into();
        Ok(Self {
            conv: ChebConvSpec::new(format!("{prefix}.cheb"), dim, dim),
            attention: GraphAttentionSpec::new(
                format!("{prefix}.attn"),
                node_count,
                dim,
                heads,
                ffn_hidden,
                attention_dropout,
            )?,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.conv.init(store, rng)?;
        // The conv feeds a residual add, so its init is damped like the
        // transformer's branch projections to keep the stream near unit
        // scale at depth (see RESIDUAL_BRANCH_GAIN).
        for j in 0..=CHEB_ORDER {
            let name = format!("{}.w{j}", self.conv.prefix);
            let damped = store.get(&name)?.mapv(|v| v * RESIDUAL_BRANCH_GAIN);
            store.set(&name, damped)?;
        }
        self.attention.init(store, rng)
    }

    pub fn forward(
        &self,
        sess: &mut TapeSession,
        graph: &GraphSpec,
        x: TensorId,
    ) -> Result<TensorId, NnError> {
        let conv = self.conv.forward(sess, graph, x)?;
        let dropped = sess.dropout(conv, GCN_BLOCK_DROPOUT);
        let mixed = sess.tape.add(x, dropped);
        self.attention.forward(sess, mixed)
    }
}

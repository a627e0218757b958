use rand::Rng;

use super::{maybe_dropout, Linear};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Adjacency, Parameter, Tensor};

/// Stacked `ReLU(A_hat H W + b)` layers with dropout in between.
#[derive(Debug, Clone)]
pub struct GcnStack {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl GcnStack {
    pub(crate) fn new(d: usize, n_layers: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        GcnStack {
            layers: (0..n_layers)
                .map(|i| Linear::new(&format!("gcn.layer{i}"), d, d, rng))
                .collect(),
            dropout,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn forward(&self, adj: &Adjacency, x: &Tensor, mut rng: Option<&mut StreamRng>) -> Result<Tensor> {
        if x.rows() != adj.n_nodes() {
            return Err(Error::Shape(format!(
                "gnn: {} feature rows for an adjacency over {} nodes",
                x.rows(),
                adj.n_nodes()
            )));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = maybe_dropout(h, self.dropout, rng.as_deref_mut())?;
            }
            h = layer.forward(&h.csr_matmul(adj)?)?.relu();
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::store::Csr;
    use crate::tensor::gradcheck::random_tensor;
    use rand::seq::SliceRandom;

    #[test]
    fn self_loops_only_with_identity_weights_is_relu() {
        let mut r = rng::stream(0, &[]);
        let stack = GcnStack::new(3, 1, 0.0, &mut r);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        *stack.layers[0].weight.tensor.data_mut() = eye;
        let x = random_tensor(&[4, 3], &mut r);
        let h = stack.forward(&Adjacency::gcn_normalized(&Csr::empty(4)), &x, None).unwrap();
        let expect: Vec<f64> = x.to_vec().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(h.to_vec(), expect);
    }

    #[test]
    fn symmetric_pair_with_equal_inputs() {
        let mut r = rng::stream(1, &[]);
        let stack = GcnStack::new(4, 3, 0.0, &mut r);
        let x = Tensor::from_vec(&[2, 4], vec![0.3, -0.2, 0.9, 0.1, 0.3, -0.2, 0.9, 0.1]).unwrap();
        let adj = Adjacency::gcn_normalized(&Csr::from_edges(2, &[(0, 1)], true).unwrap());
        let h = stack.forward(&adj, &x, None).unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    #[test]
    fn permutation_equivariance() {
        let mut r = rng::stream(2, &[]);
        let stack = GcnStack::new(5, 3, 0.0, &mut r);
        for trial in 0..10 {
            let n = 12;
            let edges: Vec<(usize, usize)> = (0..30)
                .map(|_| (rand::Rng::gen_range(&mut r, 0..n), rand::Rng::gen_range(&mut r, 0..n)))
                .collect();
            let csr = Csr::from_edges(n, &edges, true).unwrap();
            let x = random_tensor(&[n, 5], &mut r);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            // node v becomes perm[v]
            let pedges: Vec<_> = csr.arcs().map(|(u, v)| (perm[u], perm[v])).collect();
            let pcsr = Csr::from_edges(n, &pedges, true).unwrap();
            let mut inv = vec![0; n];
            for (v, &p) in perm.iter().enumerate() {
                inv[p] = v;
            }
            let px = x.gather_rows(&inv).unwrap();
            let h = stack.forward(&Adjacency::gcn_normalized(&csr), &x, None).unwrap();
            let ph = stack.forward(&Adjacency::gcn_normalized(&pcsr), &px, None).unwrap();
            for v in 0..n {
                for (a, b) in h.row(v).iter().zip(ph.row(perm[v])) {
                    assert!((a - b).abs() < 1e-10, "trial {trial}");
                }
            }
        }
    }

    #[test]
    fn row_mismatch_is_a_shape_error() {
        let mut r = rng::stream(3, &[]);
        let stack = GcnStack::new(2, 1, 0.0, &mut r);
        let adj = Adjacency::gcn_normalized(&Csr::empty(3));
        assert!(matches!(
            stack.forward(&adj, &Tensor::zeros(&[2, 2]), None),
            Err(Error::Shape(_))
        ));
    }
}

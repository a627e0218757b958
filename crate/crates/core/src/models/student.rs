use rand::Rng;

use super::{maybe_dropout, uniform_param, Linear, Similarity};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Parameter, Tensor};

/// `[E_cls | p] -> d -> ... -> d` with gelu and dropout between layers.
/// No message passing anywhere.
#[derive(Debug, Clone)]
pub struct StructureAwareMlp {
    pub layers: Vec<Linear>,
    pub ppr_width: usize,
    pub dropout: f64,
}

impl StructureAwareMlp {
    pub(crate) fn new(d: usize, ppr_width: usize, n_layers: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let d_in = if i == 0 { d + ppr_width } else { d };
                Linear::new(&format!("student.layer{i}"), d_in, d, rng)
            })
            .collect();
        StructureAwareMlp {
            layers,
            ppr_width,
            dropout,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn forward(&self, e_cls: &Tensor, ppr: &Tensor, mut rng: Option<&mut StreamRng>) -> Result<Tensor> {
        if ppr.cols() != self.ppr_width || ppr.rows() != e_cls.rows() {
            return Err(Error::Shape(format!(
                "student: text rows {:?} with PPR block {:?}, configured width {}",
                e_cls.shape(),
                ppr.shape(),
                self.ppr_width
            )));
        }
        let mut h = Tensor::concat(&[e_cls, ppr], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = maybe_dropout(h.gelu(), self.dropout, rng.as_deref_mut())?;
            }
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

/// Trainable prototype vectors; inputs are rebuilt as softmax-weighted
/// combinations of them.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub anchors: Parameter,
    pub similarity: Similarity,
}

#[derive(Debug, Clone)]
pub struct MemoryOutput {
    pub scores: Tensor,
    /// Row-wise softmax of `scores`.
    pub weights: Tensor,
    pub reconstruction: Tensor,
}

impl MemoryBank {
    pub(crate) fn new(d: usize, n_anchors: usize, similarity: Similarity, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        MemoryBank {
            anchors: uniform_param("memory.anchors", &[n_anchors, d], bound, rng),
            similarity,
        }
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.tensor.rows()
    }

    /// Raw similarity scores `|V| x L`.
    pub fn activate(&self, h: &Tensor) -> Result<Tensor> {
        let a = &self.anchors.tensor;
        if h.cols() != a.cols() {
            return Err(Error::Shape(format!(
                "memory: input {:?} against anchors {:?}",
                h.shape(),
                a.shape()
            )));
        }
        match self.similarity {
            Similarity::Dot => Ok(h.matmul(&a.transpose()?)?.scale(1.0 / (a.cols() as f64).sqrt())),
            Similarity::Cosine => h.normalize_rows()?.matmul(&a.normalize_rows()?.transpose()?),
        }
    }

    pub fn reconstruct(&self, scores: &Tensor) -> Result<MemoryOutput> {
        let weights = scores.softmax_rows()?;
        let reconstruction = weights.matmul(&self.anchors.tensor)?;
        Ok(MemoryOutput {
            scores: scores.clone(),
            weights,
            reconstruction,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<MemoryOutput> {
        self.reconstruct(&self.activate(h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck::{check_gradients, random_tensor};
    use crate::tensor::{record_ops, OpKind};

    fn bank(anchors: Vec<f64>, l: usize, d: usize) -> MemoryBank {
        MemoryBank {
            anchors: Parameter::new("a", &[l, d], anchors).unwrap(),
            similarity: Similarity::Dot,
        }
    }

    #[test]
    fn zero_ppr_block_means_text_only() {
        let mut r = rng::stream(0, &[]);
        let mlp = StructureAwareMlp::new(4, 3, 3, 0.2, &mut r);
        let e = random_tensor(&[2, 4], &mut r);
        let zeros = Tensor::zeros(&[2, 3]);
        let a = mlp.forward(&e, &zeros, None).unwrap();
        // with a zero PPR block, the first layer's PPR weights are irrelevant
        let w = &mlp.layers[0].weight.tensor;
        for x in w.data_mut()[4 * 4..].iter_mut() {
            *x = 123.0;
        }
        assert_eq!(mlp.forward(&e, &zeros, None).unwrap().to_vec(), a.to_vec());
        assert_eq!(a.shape(), &[2, 4]);
    }

    #[test]
    fn identical_inputs_identical_outputs_and_no_adjacency() {
        let mut r = rng::stream(1, &[]);
        let mlp = StructureAwareMlp::new(4, 2, 3, 0.0, &mut r);
        let e = Tensor::from_vec(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = Tensor::from_vec(&[2, 2], vec![0.5, 0.1, 0.5, 0.1]).unwrap();
        let (out, ops) = record_ops(|| mlp.forward(&e, &p, None).unwrap());
        assert_eq!(out.row(0), out.row(1));
        assert!(!ops.contains(&OpKind::CsrMatMul));
        assert!(mlp.forward(&e, &Tensor::zeros(&[2, 3]), None).is_err());
    }

    #[test]
    fn student_gradient_check() {
        let mut r = rng::stream(2, &[]);
        let mlp = StructureAwareMlp::new(4, 2, 3, 0.0, &mut r);
        let e = random_tensor(&[3, 4], &mut r);
        let p = random_tensor(&[3, 2], &mut r);
        let mut params: Vec<&Tensor> = mlp.parameters().iter().map(|p| &p.tensor).collect();
        params.extend([&e, &p]);
        let worst = check_gradients(&params, 1e-5, || Ok(mlp.forward(&e, &p, None)?.gelu().sum())).unwrap();
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn orthogonal_anchors_give_zero_scores() {
        let b = bank(vec![0.0, 1.0, 0.0, -2.0], 2, 2);
        let h = Tensor::from_vec(&[1, 2], vec![3.0, 0.0]).unwrap();
        assert_eq!(b.activate(&h).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn duplicated_anchor_duplicates_column() {
        let b = bank(vec![0.3, -0.1, 0.3, -0.1, 0.7, 0.2], 3, 2);
        let h = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -0.5, 0.4]).unwrap();
        let s = b.activate(&h).unwrap();
        for i in 0..2 {
            assert_eq!(s.row(i)[0], s.row(i)[1]);
        }
    }

    #[test]
    fn single_anchor_and_uniform_scores() {
        let b = bank(vec![0.2, -0.4, 0.6], 1, 3);
        let h = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let out = b.forward(&h).unwrap();
        assert_eq!(out.weights.to_vec(), vec![1.0, 1.0]);
        assert_eq!(out.reconstruction.row(1), vec![0.2, -0.4, 0.6]);

        let b = bank(vec![1.0, 0.0, 0.0, 3.0], 2, 2);
        let out = b.reconstruct(&Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(out.reconstruction.to_vec(), vec![0.5, 1.5]);
    }

    #[test]
    fn anchors_receive_gradient() {
        let mut r = rng::stream(3, &[]);
        let b = MemoryBank::new(4, 5, Similarity::Dot, &mut r);
        let h = random_tensor(&[3, 4], &mut r);
        let loss = b.forward(&h).unwrap().reconstruction.mse(&h).unwrap();
        loss.backward().unwrap();
        assert!(b.anchors.tensor.grad().unwrap().iter().any(|&g| g != 0.0));
        let worst = check_gradients(&[&b.anchors.tensor, &h], 1e-5, || {
            b.forward(&h)?.reconstruction.mse(&h)
        })
        .unwrap();
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn cosine_similarity_variant_is_bounded() {
        let mut r = rng::stream(4, &[]);
        let mut b = MemoryBank::new(4, 6, Similarity::Cosine, &mut r);
        b.anchors.tensor.data_mut()[0] = 5.0;
        let h = random_tensor(&[3, 4], &mut r);
        let s = b.activate(&h).unwrap();
        assert!(s.to_vec().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        b.similarity = Similarity::Dot;
        assert_ne!(b.activate(&h).unwrap().to_vec(), s.to_vec());
    }
}

//! A small embedding network: one or two affine maps with `tanh` between
//! them, followed by L2 normalization of the output.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::memory::{dot, norm, FeatureVector, ZERO_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    layers: Vec<Dense>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `tanh` output of the hidden layer, if there is one.
    pub hidden: Option<Array1<f64>>,
    pub pre_norm: Array1<f64>,
    pub output: FeatureVector,
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ModelGrad {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|x| x.is_finite()))
    }
}

impl EmbeddingModel {
    /// Gaussian-initialized model; `hidden = None` gives a single affine map.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: Option<usize>,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden == Some(0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        let layers = match hidden {
            Some(h) => vec![Dense::random(input_dim, h, rng), Dense::random(h, output_dim, rng)],
            None => vec![Dense::random(input_dim, output_dim, rng)],
        };
        Ok(Self { layers })
    }

    /// Single layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_layers(vec![Dense {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }])
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::config("model must have one or two layers"));
        }
        for l in &layers {
            if l.weight.nrows() != l.bias.len() {
                return Err(Error::config("bias length does not match weight rows"));
            }
        }
        if layers.len() == 2 && layers[1].weight.ncols() != layers[0].weight.nrows() {
            return Err(Error::config("layer shapes do not chain"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn trace(&self, x: ArrayView1<f64>) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let (hidden, pre_norm) = match self.layers.as_slice() {
            [only] => (None, only.apply(x)),
            [first, second] => {
                let h = first.apply(x).mapv(f64::tanh);
                let z = second.apply(h.view());
                (Some(h), z)
            }
            _ => unreachable!("layer count validated on construction"),
        };
        let n = norm(pre_norm.view());
        if !n.is_finite() {
            return Err(Error::Numeric("non-finite activation".into()));
        }
        if n <= ZERO_NORM {
            return Err(Error::Numeric("zero activation before normalization".into()));
        }
        let output = FeatureVector::normalize(pre_norm.clone())?;
        Ok(Trace {
            hidden,
            pre_norm,
            output,
        })
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<FeatureVector> {
        Ok(self.trace(x)?.output)
    }

    /// Embeds every row of `xs`.
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((xs.nrows(), self.output_dim()));
        for (x, mut o) in xs.rows().into_iter().zip(out.rows_mut()) {
            o.assign(&self.forward(x)?.view());
        }
        Ok(out)
    }

    /// Parameter gradients given `upstream = ∂L/∂f` for input `x`.
    pub fn backward(&self, x: ArrayView1<f64>, upstream: ArrayView1<f64>) -> Result<ModelGrad> {
        let trace = self.trace(x)?;
        self.backward_from(x, &trace, upstream)
    }

    /// Like [`backward`](Self::backward) but reuses a forward trace.
    pub fn backward_from(
        &self,
        x: ArrayView1<f64>,
        trace: &Trace,
        upstream: ArrayView1<f64>,
    ) -> Result<ModelGrad> {
        if upstream.len() != self.output_dim() {
            return Err(Error::config("upstream gradient has the wrong dimension"));
        }
        let f = trace.output.view();
        // Jacobian of z / ‖z‖ is (I - f fᵀ) / ‖z‖.
        let radial = dot(f, upstream);
        let dz = (&upstream - &(&f * radial)) / norm(trace.pre_norm.view());
        let outer = |g: &Array1<f64>, v: ArrayView1<f64>| {
            g.view()
                .insert_axis(Axis(1))
                .dot(&v.insert_axis(Axis(0)))
        };
        let layers = match (self.layers.as_slice(), &trace.hidden) {
            ([_], None) => vec![(outer(&dz, x), dz)],
            ([_, second], Some(h)) => {
                let dh = second.weight.t().dot(&dz);
                let da = &dh * &h.mapv(|v| 1.0 - v * v);
                let top = (outer(&dz, h.view()), dz);
                vec![(outer(&da, x), da), top]
            }
            _ => unreachable!("trace matches model"),
        };
        Ok(ModelGrad { layers })
    }

    pub fn sgd_step(&mut self, grad: &ModelGrad, lr: f64) {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(&grad.layers) {
            l.weight.scaled_add(-lr, gw);
            l.bias.scaled_add(-lr, gb);
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Numeric(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let m: EmbeddingModel = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_layers(m.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_passes_unit_input() {
        let m = EmbeddingModel::identity(3).unwrap();
        let x = array![0.6, 0.0, 0.8];
        assert_eq!(m.forward(x.view()).unwrap().view(), x.view());
    }

    #[test]
    fn output_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = EmbeddingModel::random(5, Some(7), 3, &mut rng).unwrap();
        for k in 0..20 {
            let x = Array1::from_shape_fn(5, |j| ((k * 5 + j) as f64).sin() * 3.0);
            let f = m.forward(x.view()).unwrap();
            assert!((norm(f.view()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = EmbeddingModel::random(4, Some(3), 2, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0];
        let (l1, l2) = (&m.layers()[0], &m.layers()[1]);
        let mut h = [0.0; 3];
        for r in 0..3 {
            let mut a = l1.bias[r];
            for c in 0..4 {
                a += l1.weight[[r, c]] * x[c];
            }
            h[r] = a.tanh();
        }
        let mut z = [0.0; 2];
        for r in 0..2 {
            z[r] = l2.bias[r];
            for c in 0..3 {
                z[r] += l2.weight[[r, c]] * h[c];
            }
        }
        let nz = (z[0] * z[0] + z[1] * z[1]).sqrt();
        let f = m.forward(Array1::from(x.to_vec()).view()).unwrap();
        assert!((f.view()[0] - z[0] / nz).abs() < 1e-14);
        assert!((f.view()[1] - z[1] / nz).abs() < 1e-14);
    }

    #[test]
    fn zero_activation_is_an_error() {
        let m = EmbeddingModel::identity(2).unwrap();
        assert!(matches!(m.forward(array![0.0, 0.0].view()), Err(Error::Numeric(_))));
        assert!(m.forward(array![1.0].view()).is_err());
    }

    #[test]
    fn backward_zero_and_radial_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = EmbeddingModel::random(4, Some(5), 3, &mut rng).unwrap();
        let x = array![0.1, 0.2, -0.3, 0.4];
        let g = m.backward(x.view(), Array1::zeros(3).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        let f = m.forward(x.view()).unwrap();
        let g = m.backward(x.view(), (f.view().to_owned() * 2.5).view()).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for hidden in [None, Some(4)] {
            let m = EmbeddingModel::random(3, hidden, 2, &mut rng).unwrap();
            let x = array![0.7, -0.4, 1.1];
            let up = array![0.3, -1.7];
            // L(θ) = up · f(x; θ)
            let loss = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_flat_params(p).unwrap();
                dot(up.view(), mm.forward(x.view()).unwrap().view())
            };
            let analytic = m.backward(x.view(), up.view()).unwrap().flatten();
            let p0 = m.flat_params();
            let h = 1e-6;
            for k in 0..p0.len() {
                let mut p = p0.clone();
                p[k] += h;
                let plus = loss(&p);
                p[k] -= 2.0 * h;
                let minus = loss(&p);
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-8, "param {k}: {fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = EmbeddingModel::random(4, Some(3), 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        m.save_json(&p).unwrap();
        assert_eq!(EmbeddingModel::load_json(&p).unwrap(), m);
    }
}

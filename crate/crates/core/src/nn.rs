//! Small layer building blocks over [`Graph`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot-uniform `rows x cols` matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(rows, cols, values).expect("finite init")
}

/// Affine map `x · W + b` on row vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(input, output, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![1, output])));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    /// Linear map without a bias term.
    pub fn unbiased(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(input, output, rng));
        Linear {
            weight,
            bias: None,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let xw = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(xw, b)
            }
            None => Ok(xw),
        }
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    /// Same shape as [`Mlp::new`] but the output layer has no bias, for
    /// scorers whose outputs only ever feed a softmax or a ranking.
    pub fn scorer(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            out: Linear::unbiased(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, store, h)
    }
}

//! Linear layers, `LayerNorm + ELU` blocks, and multi-head MLPs.

use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;
use super::params::{ParamId, ParamSet};
use super::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};

/// How a layer's weight matrix is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal (cut at two standard deviations) scaled by `1/sqrt(fan_in)`.
    TruncNormal,
    /// All zeros; used for policy logit heads so initial policies are uniform.
    Zeros,
}

pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

pub fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Matrix {
    match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::TruncNormal => {
            let scale = 1.0 / (rows as f64).sqrt();
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| trunc_normal(rng) * scale).collect(),
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = set.add(format!("{name}.w"), init_weight(fan_in, fan_out, init, rng));
        let bias = set.add(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Var {
        let w = tape.param(set, self.weight);
        let b = tape.param(set, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// `Linear -> LayerNorm (affine) -> ELU`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub linear: Linear,
    pub gain: ParamId,
    pub shift: ParamId,
}

impl DenseBlock {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(set, name, fan_in, fan_out, Init::TruncNormal, rng);
        let gain = set.add(format!("{name}.ln_gain"), Matrix::filled(1, fan_out, 1.0));
        let shift = set.add(format!("{name}.ln_shift"), Matrix::zeros(1, fan_out));
        DenseBlock {
            linear,
            gain,
            shift,
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Var {
        let h = self.linear.forward(tape, set, x);
        let n = tape.layer_norm(h);
        let g = tape.param(set, self.gain);
        let s = tape.param(set, self.shift);
        let a = tape.mul_row(n, g);
        let a = tape.add_row(a, s);
        tape.elu(a)
    }
}

/// Input width, hidden layout, and named output heads of an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<HeadSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    pub dim: usize,
    pub init: Init,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, dim: usize, init: Init) -> Self {
        HeadSpec {
            name: name.into(),
            dim,
            init,
        }
    }
}

impl MlpSpec {
    pub fn new(input: usize, layers: usize, units: usize) -> Self {
        MlpSpec {
            input,
            hidden: vec![units; layers],
            heads: Vec::new(),
        }
    }

    pub fn head(mut self, name: impl Into<String>, dim: usize, init: Init) -> Self {
        self.heads.push(HeadSpec::new(name, dim, init));
        self
    }
}

/// An MLP whose parameters live in a caller-owned [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub name: String,
    blocks: Vec<DenseBlock>,
    heads: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, spec: MlpSpec, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        let mut width = spec.input;
        for (i, &units) in spec.hidden.iter().enumerate() {
            blocks.push(DenseBlock::new(set, &format!("{name}.h{i}"), width, units, rng));
            width = units;
        }
        let heads = spec
            .heads
            .iter()
            .map(|h| Linear::new(set, &format!("{name}.{}", h.name), width, h.dim, h.init, rng))
            .collect();
        Mlp {
            spec,
            name: name.to_string(),
            blocks,
            heads,
        }
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    /// Runs the network on the tape, one output per head.
    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Vec<Var>> {
        let (_, cols) = tape.value(x).shape();
        if cols != self.spec.input {
            return Err(Error::Shape(format!(
                "{}: input has {} features, expected {}",
                self.name, cols, self.spec.input
            )));
        }
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, set, h);
            if !tape.value(h).is_finite() {
                return Err(Error::NonFinite(format!("{} hidden layer {i}", self.name)));
            }
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for (head, hs) in self.heads.iter().zip(&self.spec.heads) {
            let o = head.forward(tape, set, h);
            if !tape.value(o).is_finite() {
                return Err(Error::NonFinite(format!("{} head {}", self.name, hs.name)));
            }
            outs.push(o);
        }
        Ok(outs)
    }

    /// Forward pass plus a closure that, given one cotangent per head,
    /// accumulates the exact parameter gradients into `set`.
    pub fn forward_backward<'a>(
        &self,
        set: &ParamSet,
        input: &Matrix,
    ) -> Result<(Vec<Matrix>, impl FnOnce(&[Matrix], &mut ParamSet) + 'a)> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let outs = self.forward(&mut tape, set, x)?;
        let values = outs.iter().map(|&o| tape.value(o).clone()).collect();
        let backward = move |cotangents: &[Matrix], set: &mut ParamSet| {
            assert_eq!(cotangents.len(), outs.len(), "one cotangent per head");
            let seeds: Vec<(Var, Matrix)> = outs.iter().copied().zip(cotangents.iter().cloned()).collect();
            let grads: Grads = tape.gradients(&seeds);
            tape.accumulate_into(&grads, set);
        };
        Ok((values, backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_output_final_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = ParamSet::new();
        let spec = MlpSpec::new(3, 2, 5).head("out", 2, Init::TruncNormal);
        let mlp = Mlp::new(&mut set, "net", spec, &mut rng);
        for t in set.tensors_mut() {
            t.value.fill(0.0);
        }
        let bias = mlp.heads()[0].bias;
        *set.value_mut(bias) = Matrix::row_vector(vec![0.5, -1.25]);
        let (outs, _) = mlp
            .forward_backward(&set, &Matrix::row_vector(vec![3.0, -2.0, 7.0]))
            .unwrap();
        assert_eq!(outs[0].data(), &[0.5, -1.25]);
    }

    #[test]
    fn identity_linear_head_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = ParamSet::new();
        let spec = MlpSpec {
            input: 3,
            hidden: vec![],
            heads: vec![HeadSpec::new("out", 3, Init::Zeros)],
        };
        let mlp = Mlp::new(&mut set, "id", spec, &mut rng);
        *set.value_mut(mlp.heads()[0].weight) = Matrix::identity(3);
        let x = Matrix::row_vector(vec![0.25, -4.0, 9.5]);
        let (outs, _) = mlp.forward_backward(&set, &x).unwrap();
        assert_eq!(outs[0], x);
    }

    #[test]
    fn input_width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = ParamSet::new();
        let mlp = Mlp::new(&mut set, "n", MlpSpec::new(4, 1, 3).head("o", 1, Init::Zeros), &mut rng);
        let err = mlp.forward_backward(&set, &Matrix::zeros(2, 3)).err().unwrap();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = ParamSet::new();
        let mlp = Mlp::new(&mut set, "n", MlpSpec::new(2, 1, 3).head("o", 1, Init::Zeros), &mut rng);
        let err = mlp
            .forward_backward(&set, &Matrix::row_vector(vec![f64::NAN, 1.0]))
            .err()
            .unwrap();
        match err {
            Error::NonFinite(what) => assert!(what.contains("hidden layer 0"), "{what}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_init_head_starts_at_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParamSet::new();
        let mlp = Mlp::new(&mut set, "pi", MlpSpec::new(4, 2, 8).head("logits", 6, Init::Zeros), &mut rng);
        let (outs, _) = mlp
            .forward_backward(&set, &Matrix::row_vector(vec![1.0, 2.0, -1.0, 0.5]))
            .unwrap();
        assert!(outs[0].data().iter().all(|&v| v == 0.0));
    }
}

use rand::Rng;

use super::params::{glorot_uniform, ParamRef, ParamStore};
use super::tape::{ConvSpec, NodeId, Tape};
use super::tensor::{Real, Tensor};

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Dense {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        partition: &str,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_tensor(partition, &format!("{name}.w"), glorot_uniform(fan_in, fan_out, rng));
        let bias = store.add_tensor(partition, &format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Self { weight, bias }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, partition: &str, name: &str) -> Option<Self> {
        Some(Self {
            weight: store.lookup(partition, &format!("{name}.w"))?,
            bias: store.lookup(partition, &format!("{name}.b"))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w);
        tape.add(xw, b)
    }
}

/// Recurrent state of one LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(size: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[1, size]),
            cell: Tensor::zeros(&[1, size]),
        }
    }

    pub fn size(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.is_finite() && self.cell.is_finite()
    }
}

/// LSTM state as tape nodes, for unrolling through time.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub hidden: NodeId,
    pub cell: NodeId,
}

impl LstmNodes {
    pub fn input<T: Real>(tape: &mut Tape<'_, T>, state: &LstmState<T>) -> Self {
        Self {
            hidden: tape.input(state.hidden.clone()),
            cell: tape.input(state.cell.clone()),
        }
    }

    pub fn read<T: Real>(&self, tape: &Tape<'_, T>) -> LstmState<T> {
        LstmState {
            hidden: tape.value(self.hidden).clone(),
            cell: tape.value(self.cell).clone(),
        }
    }
}

/// Standard LSTM cell with gates ordered (input, forget, candidate, output).
///
/// Weights are one `[in + hidden, 4 * hidden]` matrix over `concat(x, h)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        partition: &str,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_tensor(
            partition,
            &format!("{name}.w"),
            glorot_uniform(input_size + hidden_size, 4 * hidden_size, rng),
        );
        let mut b = Tensor::zeros(&[1, 4 * hidden_size]);
        // forget-gate bias
        for v in &mut b.data_mut()[hidden_size..2 * hidden_size] {
            *v = T::one();
        }
        let bias = store.add_tensor(partition, &format!("{name}.b"), b);
        Self {
            weight,
            bias,
            input_size,
            hidden_size,
        }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, partition: &str, name: &str) -> Option<Self> {
        let weight = store.lookup(partition, &format!("{name}.w"))?;
        let bias = store.lookup(partition, &format!("{name}.b"))?;
        let shape = store.get(weight).shape();
        let hidden_size = shape[1] / 4;
        Some(Self {
            weight,
            bias,
            input_size: shape[0] - hidden_size,
            hidden_size,
        })
    }

    /// One recurrence step; returns the new state (its hidden node is the output).
    pub fn step<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId, state: LstmNodes) -> LstmNodes {
        let h = self.hidden_size;
        assert_eq!(
            tape.value(x).matrix_dims().1,
            self.input_size,
            "lstm input width mismatch"
        );
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xh = tape.concat(&[x, state.hidden]);
        let z = tape.matmul(xh, w);
        let z = tape.add(z, b);
        let i = tape.slice(z, 0, h);
        let i = tape.sigmoid(i);
        let f = tape.slice(z, h, h);
        let f = tape.sigmoid(f);
        let g = tape.slice(z, 2 * h, h);
        let g = tape.tanh(g);
        let o = tape.slice(z, 3 * h, h);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, state.cell);
        let ig = tape.mul(i, g);
        let cell = tape.add(fc, ig);
        let tc = tape.tanh(cell);
        let hidden = tape.mul(o, tc);
        LstmNodes { hidden, cell }
    }
}

/// Valid convolution layer with ReLU left to the caller.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub kernel: ParamRef,
    pub bias: ParamRef,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        partition: &str,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let flat = glorot_uniform::<T, R>(fan_in, fan_out, rng).into_data();
        let data = flat[..out_channels * fan_in].to_vec();
        let k = store.add_tensor(
            partition,
            &format!("{name}.k"),
            Tensor::new(&[out_channels, in_channels, kernel, kernel], data),
        );
        let b = store.add_tensor(partition, &format!("{name}.b"), Tensor::zeros(&[out_channels]));
        Self {
            kernel: k,
            bias: b,
            spec: ConvSpec { stride },
        }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, partition: &str, name: &str, stride: usize) -> Option<Self> {
        Some(Self {
            kernel: store.lookup(partition, &format!("{name}.k"))?,
            bias: store.lookup(partition, &format!("{name}.b"))?,
            spec: ConvSpec { stride },
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        tape.conv2d(x, k, b, self.spec)
    }

    pub fn output_hw(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> (usize, usize) {
        ((in_h - kernel) / stride + 1, (in_w - kernel) / stride + 1)
    }
}

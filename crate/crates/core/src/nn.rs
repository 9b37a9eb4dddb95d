//! Recurrent building blocks: the coupled-gate LSTM, its stacked and
//! bidirectional forms, tied output scoring, variational dropout and Adam.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};

/// Glorot-uniform matrix of shape `[rows, cols]`.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dimensions")
}

/// Glorot-uniform vector, treating it as a `[1, n]` matrix.
pub fn glorot_vector(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::vector(glorot(rng, 1, n).into_data())
}

/// Hidden and cell vectors of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

/// Gate activations of one cell application, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct Gates {
    pub input: Var,
    pub forget: Var,
    pub candidate: Var,
    pub output: Var,
}

/// One layer. Rows of `w_x`, `w_h` and `bias` are laid out as
/// `[input gate; candidate; output gate]`, each `hidden_dim` long.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmLayer {
    pub fn params(&self) -> [ParamId; 3] {
        [self.w_x, self.w_h, self.bias]
    }
}

/// Stacked LSTM whose forget gate is tied to `1 - input gate`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_layers == 0 {
            return Err(Error::Config(format!(
                "{name}: LSTM dimensions and layer count must be positive"
            )));
        }
        let layers = (0..num_layers)
            .map(|k| {
                let in_dim = if k == 0 { input_dim } else { hidden_dim };
                LstmLayer {
                    w_x: store.add(format!("{name}.{k}.w_x"), glorot(rng, 3 * hidden_dim, in_dim)),
                    w_h: store.add(format!("{name}.{k}.w_h"), glorot(rng, 3 * hidden_dim, hidden_dim)),
                    bias: store.add(format!("{name}.{k}.bias"), Tensor::zeros(vec![3 * hidden_dim])),
                    input_dim: in_dim,
                    hidden_dim,
                }
            })
            .collect();
        Ok(LstmParams {
            layers,
            input_dim,
            hidden_dim,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_state(&self, g: &mut Graph<'_>) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|_| LayerState {
                h: g.zeros(self.hidden_dim),
                c: g.zeros(self.hidden_dim),
            })
            .collect()
    }

    /// Advances every layer by one input; layer `k` consumes the new hidden
    /// vector of layer `k - 1`.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: &[LayerState],
        input: Var,
        masks: Option<&DropoutMasks>,
    ) -> Result<Vec<LayerState>> {
        Ok(self
            .step_with_gates(g, state, input, masks)?
            .into_iter()
            .map(|(s, _)| s)
            .collect())
    }

    pub fn step_with_gates(
        &self,
        g: &mut Graph<'_>,
        state: &[LayerState],
        input: Var,
        masks: Option<&DropoutMasks>,
    ) -> Result<Vec<(LayerState, Gates)>> {
        if state.len() != self.layers.len() {
            return Err(Error::Dimension {
                what: "LSTM state layers",
                expected: self.layers.len(),
                got: state.len(),
            });
        }
        let mut x = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (k, (layer, st)) in self.layers.iter().zip(state).enumerate() {
            if let Some(mask) = masks.and_then(|m| m.inputs.get(k).copied().flatten()) {
                x = g.mul(x, mask)?;
            }
            let (next, gates) = cell_step(g, layer, *st, x)?;
            x = next.h;
            out.push((next, gates));
        }
        Ok(out)
    }
}

fn cell_step(g: &mut Graph<'_>, layer: &LstmLayer, state: LayerState, x: Var) -> Result<(LayerState, Gates)> {
    let hd = layer.hidden_dim;
    if g.value(x).len() != layer.input_dim {
        return Err(Error::Dimension {
            what: "LSTM input",
            expected: layer.input_dim,
            got: g.value(x).len(),
        });
    }
    if g.value(state.h).len() != hd || g.value(state.c).len() != hd {
        return Err(Error::Dimension {
            what: "LSTM state",
            expected: hd,
            got: g.value(state.h).len(),
        });
    }
    let w_x = g.param(layer.w_x);
    let w_h = g.param(layer.w_h);
    let b = g.param(layer.bias);
    let zx = g.matvec(w_x, x)?;
    let zh = g.matvec(w_h, state.h)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, b)?;
    let zi = g.slice(z, 0, hd)?;
    let zg = g.slice(z, hd, hd)?;
    let zo = g.slice(z, 2 * hd, hd)?;
    let input = g.sigmoid(zi)?;
    let forget = g.one_minus(input)?;
    let candidate = g.tanh(zg)?;
    let output = g.sigmoid(zo)?;
    let kept = g.mul(forget, state.c)?;
    let written = g.mul(input, candidate)?;
    let c = g.add(kept, written)?;
    let tc = g.tanh(c)?;
    let h = g.mul(output, tc)?;
    Ok((
        LayerState { h, c },
        Gates {
            input,
            forget,
            candidate,
            output,
        },
    ))
}

/// Per-sequence dropout masks: one for each layer input and one for the
/// top-layer output.
#[derive(Debug, Clone, Default)]
pub struct DropoutMasks {
    pub inputs: Vec<Option<Var>>,
    pub output: Option<Var>,
}

impl DropoutMasks {
    /// Samples fresh masks for `lstm`. A zero rate yields no masks at all.
    pub fn sample(g: &mut Graph<'_>, lstm: &LstmParams, rate: f64, rng: &mut impl Rng) -> Result<Self> {
        if rate == 0.0 {
            return Ok(DropoutMasks::default());
        }
        let mut inputs = Vec::with_capacity(lstm.layers.len());
        for layer in &lstm.layers {
            let mask = dropout_mask_with(rng, layer.input_dim, rate)?;
            inputs.push(Some(g.constant(Tensor::vector(mask))?));
        }
        let mask = dropout_mask_with(rng, lstm.hidden_dim, rate)?;
        let output = Some(g.constant(Tensor::vector(mask))?);
        Ok(DropoutMasks { inputs, output })
    }

    pub fn apply_output(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        match self.output {
            Some(m) => Ok(g.mul(h, m)?),
            None => Ok(h),
        }
    }
}

/// Bernoulli keep-mask scaled by `1 / (1 - rate)`.
pub fn variational_dropout_mask(dim: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    dropout_mask_with(&mut StdRng::seed_from_u64(seed), dim, rate)
}

pub fn dropout_mask_with(rng: &mut impl Rng, dim: usize, rate: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..dim)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Two single-layer LSTMs read a sequence in opposite directions; their final
/// hidden vectors are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(BiLstm {
            forward: LstmParams::new(store, rng, &format!("{name}.fwd"), input_dim, hidden_dim, 1)?,
            backward: LstmParams::new(store, rng, &format!("{name}.bwd"), input_dim, hidden_dim, 1)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden_dim + self.backward.hidden_dim
    }

    pub fn compose(&self, g: &mut Graph<'_>, sequence: &[Var]) -> Result<Var> {
        if sequence.is_empty() {
            return Err(Error::Empty("composer input sequence"));
        }
        let mut fwd = self.forward.zero_state(g);
        for &x in sequence {
            fwd = self.forward.step(g, &fwd, x, None)?;
        }
        let mut bwd = self.backward.zero_state(g);
        for &x in sequence.iter().rev() {
            bwd = self.backward.step(g, &bwd, x, None)?;
        }
        Ok(g.concat(&[fwd[0].h, bwd[0].h])?)
    }
}

/// `table[v] · (projection · hidden) + bias[v]` over the first `rows` rows of
/// `table`.
pub fn tied_output_logits(
    g: &mut Graph<'_>,
    hidden: Var,
    table: Var,
    bias: Var,
    projection: Var,
    rows: usize,
) -> Result<Var> {
    let projected = g.matvec(projection, hidden)?;
    let scores = g.matvec_rows(table, projected, rows)?;
    Ok(g.add(scores, bias)?)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Dimension {
                what: "Adam parameter count",
                expected: self.m.len(),
                got: store.len(),
            });
        }
        for id in store.ids() {
            let (n, gn) = (store.get(id).len(), grads.get(id).len());
            if n != gn || self.m[id.0].len() != n {
                return Err(Error::Dimension {
                    what: "Adam gradient",
                    expected: n,
                    got: gn,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

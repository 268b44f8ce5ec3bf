//! LSTM cells and the two-layer stacked encoder.
//!
//! A sample's 20 channel rows are fed as a 20-step sequence of 24-band
//! feature vectors; the encoded vector is the final hidden state of the top
//! layer. Encoder state starts at zero for every sample.

use rand::Rng;

use crate::array::Array;
use crate::autodiff::{Feeds, Graph, NamedArrays, NodeId};
use crate::error::{Error, Result};
use crate::{BANDS, CHANNELS};

/// LSTM gates in their column-block order within the fused weight matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

/// Parameters of one LSTM layer.
///
/// Per-gate matrices are stored side by side as column blocks
/// `[input | forget | output | candidate]`, so `w_input` is
/// `input_dim × 4·hidden`, `w_recurrent` is `hidden × 4·hidden` and `bias`
/// is `1 × 4·hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_input: Array,
    pub w_recurrent: Array,
    pub bias: Array,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            input_dim,
            hidden,
            w_input: Array::zeros(&[input_dim, 4 * hidden]),
            w_recurrent: Array::zeros(&[hidden, 4 * hidden]),
            bias: Array::zeros(&[1, 4 * hidden]),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except forget-gate `+1`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = LstmParams {
            input_dim,
            hidden,
            w_input: Array::uniform(&[input_dim, 4 * hidden], 1.0 / (input_dim as f64).sqrt(), rng),
            w_recurrent: Array::uniform(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng),
            bias: Array::zeros(&[1, 4 * hidden]),
        };
        p.gate_bias_mut(Gate::Forget).fill(1.0);
        p
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let h = self.hidden;
        let start = gate as usize * h;
        &mut self.bias.data_mut()[start..start + h]
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden);
        for (name, arr, want) in [
            ("w_input", &self.w_input, (i, 4 * h)),
            ("w_recurrent", &self.w_recurrent, (h, 4 * h)),
            ("bias", &self.bias, (1, 4 * h)),
        ] {
            if arr.dims2() != want {
                return Err(Error::shape(
                    format!("lstm {name}"),
                    format!("expected {}x{}, got {:?}", want.0, want.1, arr.shape()),
                ));
            }
            if !arr.is_finite() {
                return Err(Error::NonFinite(format!("lstm {name}")));
            }
        }
        Ok(())
    }

    pub fn param_names(prefix: &str) -> [String; 3] {
        [
            format!("{prefix}.w_input"),
            format!("{prefix}.w_recurrent"),
            format!("{prefix}.bias"),
        ]
    }

    pub fn insert_into(&self, prefix: &str, params: &mut NamedArrays) {
        let [wi, wr, b] = Self::param_names(prefix);
        params.insert(wi, self.w_input.clone());
        params.insert(wr, self.w_recurrent.clone());
        params.insert(b, self.bias.clone());
    }

    pub fn from_named(prefix: &str, params: &NamedArrays) -> Result<Self> {
        let [wi, wr, b] = Self::param_names(prefix);
        let get = |n: &str| params.get(n).cloned().ok_or_else(|| Error::MissingInput(n.to_string()));
        let w_input = get(&wi)?;
        let (input_dim, four_h) = w_input.dims2();
        let p = LstmParams {
            input_dim,
            hidden: four_h / 4,
            w_input,
            w_recurrent: get(&wr)?,
            bias: get(&b)?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Hidden and cell activations of one LSTM layer (`rows × hidden`).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Array,
    pub c: Array,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Array::zeros(&[1, hidden]),
            c: Array::zeros(&[1, hidden]),
        }
    }
}

/// Graph handles for one layer's parameter leaves.
#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    pub w_input: NodeId,
    pub w_recurrent: NodeId,
    pub bias: NodeId,
    pub hidden: usize,
}

impl LstmNodes {
    pub fn declare(g: &mut Graph, prefix: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let [wi, wr, b] = LstmParams::param_names(prefix);
        Ok(LstmNodes {
            w_input: g.param(&wi, &[input_dim, 4 * hidden])?,
            w_recurrent: g.param(&wr, &[hidden, 4 * hidden])?,
            bias: g.param(&b, &[1, 4 * hidden])?,
            hidden,
        })
    }

    /// One step from an already projected input `x · W_input` (`rows × 4h`).
    /// `state` of `None` is the zero state.
    pub fn step_projected(
        &self,
        g: &mut Graph,
        x_proj: NodeId,
        state: Option<(NodeId, NodeId)>,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.hidden;
        let pre = match state {
            Some((h_prev, _)) => {
                let rec = g.matmul(h_prev, self.w_recurrent)?;
                g.add(x_proj, rec)?
            }
            None => x_proj,
        };
        let pre = g.add_row(pre, self.bias)?;
        let block = |g: &mut Graph, gate: Gate| g.slice_cols(pre, gate as usize * h, h);
        let i = block(g, Gate::Input)?;
        let f = block(g, Gate::Forget)?;
        let o = block(g, Gate::Output)?;
        let cand = block(g, Gate::Candidate)?;
        let i = g.sigmoid(i);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let written = g.mul(i, cand)?;
        let c_next = match state {
            Some((_, c_prev)) => {
                let f = g.sigmoid(f);
                let kept = g.mul(f, c_prev)?;
                g.add(kept, written)?
            }
            None => written,
        };
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    pub fn step(
        &self,
        g: &mut Graph,
        x: NodeId,
        state: Option<(NodeId, NodeId)>,
    ) -> Result<(NodeId, NodeId)> {
        let proj = g.matmul(x, self.w_input)?;
        self.step_projected(g, proj, state)
    }
}

/// One LSTM step: `c' = f∘c + i∘g`, `h' = o∘tanh(c')`.
pub fn lstm_cell_step(params: &LstmParams, state: &LstmState, input: &Array) -> Result<LstmState> {
    params.validate()?;
    let (rows, width) = input.dims2();
    if width != params.input_dim {
        return Err(Error::shape(
            "lstm_cell_step input",
            format!("expected width {}, got {:?}", params.input_dim, input.shape()),
        ));
    }
    for (name, arr) in [("h", &state.h), ("c", &state.c)] {
        if arr.dims2() != (rows, params.hidden) {
            return Err(Error::shape(
                format!("lstm_cell_step state {name}"),
                format!("expected {rows}x{}, got {:?}", params.hidden, arr.shape()),
            ));
        }
    }
    let mut g = Graph::new();
    let nodes = LstmNodes::declare(&mut g, "lstm", params.input_dim, params.hidden)?;
    let x = g.input("x", &[rows, params.input_dim])?;
    let h = g.input("h", &[rows, params.hidden])?;
    let c = g.input("c", &[rows, params.hidden])?;
    let (h2, c2) = nodes.step(&mut g, x, Some((h, c)))?;
    g.mark_output("h", h2);
    g.mark_output("c", c2);

    let mut named = NamedArrays::new();
    params.insert_into("lstm", &mut named);
    let mut feeds = Feeds::new();
    feeds.extend(&named).insert("x", input).insert("h", &state.h).insert("c", &state.c);
    let mut out = g.forward(&feeds)?;
    Ok(LstmState {
        h: out.remove("h").expect("marked output"),
        c: out.remove("c").expect("marked output"),
    })
}

/// Packs samples (`steps × features` each) step-major: row `s·B + b` holds
/// step `s` of sample `b`.
pub fn pack_steps(samples: &[&Array]) -> Result<Array> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot pack an empty batch"))?;
    let (steps, width) = first.dims2();
    let batch = samples.len();
    let mut data = vec![0.0; steps * batch * width];
    for (b, s) in samples.iter().enumerate() {
        if s.dims2() != (steps, width) {
            return Err(Error::shape(
                "pack_steps",
                format!("sample {b} has shape {:?}, expected {steps}x{width}", s.shape()),
            ));
        }
        for step in 0..steps {
            let dst = (step * batch + b) * width;
            data[dst..dst + width].copy_from_slice(s.row_slice(step));
        }
    }
    Array::matrix(steps * batch, width, data)
}

/// Records the stacked encoder over a step-major packed batch
/// (`steps·batch × input_dim`, see [`pack_steps`]) and returns the top
/// layer's final hidden state (`batch × hidden`).
pub fn encode_batch(
    g: &mut Graph,
    layers: &[LstmNodes],
    packed: NodeId,
    steps: usize,
    batch: usize,
) -> Result<NodeId> {
    let mut layer_input = packed;
    let mut last = None;
    for (li, layer) in layers.iter().enumerate() {
        // one GEMM for the input projection of every step
        let proj = g.matmul(layer_input, layer.w_input)?;
        let mut state = None;
        let mut hs = Vec::with_capacity(steps);
        for s in 0..steps {
            let xp = g.slice_rows(proj, s * batch, batch)?;
            let next = layer.step_projected(g, xp, state)?;
            hs.push(next.0);
            state = Some(next);
        }
        last = state.map(|(h, _)| h);
        if li + 1 < layers.len() {
            layer_input = g.concat_rows(&hs)?;
        }
    }
    last.ok_or_else(|| Error::invalid("encoder needs at least one layer and one step"))
}

/// Two stacked LSTM layers mapping a `20 × 24` sample to a `k`-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedEncoder {
    pub layers: Vec<LstmParams>,
}

impl StackedEncoder {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        StackedEncoder {
            layers: vec![LstmParams::init(BANDS, hidden, rng), LstmParams::init(hidden, hidden, rng)],
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        StackedEncoder {
            layers: vec![LstmParams::zeros(BANDS, hidden), LstmParams::zeros(hidden, hidden)],
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn layer_prefix(i: usize) -> String {
        format!("encoder.{i}")
    }

    pub fn insert_into(&self, params: &mut NamedArrays) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.insert_into(&Self::layer_prefix(i), params);
        }
    }

    pub fn declare(&self, g: &mut Graph) -> Result<Vec<LstmNodes>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| LstmNodes::declare(g, &Self::layer_prefix(i), l.input_dim, l.hidden))
            .collect()
    }

    /// Encodes one `channels × bands` sample to its top-layer hidden state.
    pub fn encode_sample(&self, sample: &Array) -> Result<Array> {
        if sample.shape() != [CHANNELS, BANDS] {
            return Err(Error::shape(
                "encode_sample",
                format!("expected [{CHANNELS}, {BANDS}], got {:?}", sample.shape()),
            ));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        let mut g = Graph::new();
        let nodes = self.declare(&mut g)?;
        let x = g.input("x", &[CHANNELS, BANDS])?;
        let top = encode_batch(&mut g, &nodes, x, CHANNELS, 1)?;
        g.mark_output("encoded", top);
        let mut named = NamedArrays::new();
        self.insert_into(&mut named);
        let mut feeds = Feeds::new();
        feeds.extend(&named).insert("x", sample);
        let out = g.forward(&feeds)?;
        out["encoded"].clone().reshape(vec![self.hidden()])
    }
}

//! External memory stack with attention read/write and plastic controllers.
//!
//! One memory step, given the encoded sample `x`:
//!
//! ```text
//! q  = input_controller(x)            query
//! z  = softmax(M_prev · q)            attention over the l slots
//! c  = z · M_prev                     read (convex combination of slots)
//! m  = output_controller(c)           memory output / classification feature
//! m' = update_controller(m)           write vector
//! M  = M_prev - M_prev∘(z⊗e_k) + z⊗m' slot-wise convex write
//! ```
//!
//! In plastic mode each controller is `y = tanh(x · (w + alpha∘hebb))` and
//! its trace is updated afterwards from `(pre = x, post = y)`. Traces are
//! state: they are never differentiated. In fixed mode each controller is
//! an LSTM cell whose state persists alongside the memory.

use rand::Rng;

use crate::array::Array;
use crate::autodiff::{Feeds, Graph, NamedArrays, NodeId};
use crate::encoder::{LstmNodes, LstmParams, LstmState};
use crate::error::{Error, Result};

/// The three memory controllers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Controller {
    Input = 0,
    Output = 1,
    Update = 2,
}

impl Controller {
    pub const ALL: [Controller; 3] = [Controller::Input, Controller::Output, Controller::Update];

    pub fn name(self) -> &'static str {
        match self {
            Controller::Input => "input",
            Controller::Output => "output",
            Controller::Update => "update",
        }
    }
}

const TRACE_NAMES: [&str; 3] = ["state.hebb_input", "state.hebb_output", "state.hebb_update"];
const LSTM_STATE_NAMES: [(&str, &str); 3] = [
    ("state.input.h", "state.input.c"),
    ("state.output.h", "state.output.c"),
    ("state.update.h", "state.update.c"),
];
const MEMORY_NAME: &str = "state.memory";

/// Fixed weights plus plasticity coefficients of one plastic controller,
/// both `k × k` and indexed `[pre, post]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlasticProjection {
    pub w: Array,
    pub alpha: Array,
}

impl PlasticProjection {
    pub fn zeros(k: usize) -> Self {
        PlasticProjection {
            w: Array::zeros(&[k, k]),
            alpha: Array::zeros(&[k, k]),
        }
    }
}

/// Controller parameters: exactly one mode per model.
#[derive(Clone, Debug, PartialEq)]
pub enum ControllerParams {
    Plastic {
        projections: [PlasticProjection; 3],
        eta: f64,
    },
    Lstm {
        cells: [LstmParams; 3],
        /// `k × 4k` projections of the encoded input into the output and
        /// update cells.
        skips: [Array; 2],
    },
}

impl ControllerParams {
    pub fn plastic_zeros(k: usize, eta: f64) -> Self {
        ControllerParams::Plastic {
            projections: [PlasticProjection::zeros(k), PlasticProjection::zeros(k), PlasticProjection::zeros(k)],
            eta,
        }
    }

    /// Plastic controllers with `w` and `alpha` uniform in `±1/√k`.
    pub fn plastic_init<R: Rng + ?Sized>(k: usize, eta: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        let mut proj = || PlasticProjection {
            w: Array::uniform(&[k, k], bound, rng),
            alpha: Array::uniform(&[k, k], bound, rng),
        };
        ControllerParams::Plastic {
            projections: [proj(), proj(), proj()],
            eta,
        }
    }

    /// LSTM controllers; skip projections uniform in `±1/√k`.
    pub fn lstm_init<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let cells = [LstmParams::init(k, k, rng), LstmParams::init(k, k, rng), LstmParams::init(k, k, rng)];
        let bound = 1.0 / (k as f64).sqrt();
        let skips = [Array::uniform(&[k, 4 * k], bound, rng), Array::uniform(&[k, 4 * k], bound, rng)];
        ControllerParams::Lstm { cells, skips }
    }

    pub fn is_plastic(&self) -> bool {
        matches!(self, ControllerParams::Plastic { .. })
    }

    /// Embedding width `k`.
    pub fn width(&self) -> usize {
        match self {
            ControllerParams::Plastic { projections, .. } => projections[0].w.rows(),
            ControllerParams::Lstm { cells, .. } => cells[0].hidden,
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            ControllerParams::Plastic { eta, .. } => *eta,
            ControllerParams::Lstm { .. } => 0.0,
        }
    }

    fn prefix(c: Controller) -> String {
        format!("memory.{}", c.name())
    }

    fn skip_name(c: Controller) -> String {
        format!("memory.{}.w_skip", c.name())
    }

    const SKIPPED: [Controller; 2] = [Controller::Output, Controller::Update];

    pub fn validate(&self) -> Result<()> {
        let k = self.width();
        match self {
            ControllerParams::Plastic { projections, eta } => {
                if !(0.0..=1.0).contains(eta) {
                    return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
                }
                for (c, p) in Controller::ALL.iter().zip(projections) {
                    for (what, arr) in [("w", &p.w), ("alpha", &p.alpha)] {
                        if arr.dims2() != (k, k) {
                            return Err(Error::shape(
                                format!("{} controller {what}", c.name()),
                                format!("expected {k}x{k}, got {:?}", arr.shape()),
                            ));
                        }
                    }
                }
                Ok(())
            }
            ControllerParams::Lstm { cells, skips } => {
                for cell in cells {
                    cell.validate()?;
                    if cell.input_dim != k || cell.hidden != k {
                        return Err(Error::shape("controller lstm", "controllers must be k -> k"));
                    }
                }
                for (c, s) in Self::SKIPPED.iter().zip(skips) {
                    if s.dims2() != (k, 4 * k) {
                        return Err(Error::shape(
                            Self::skip_name(*c),
                            format!("expected {k}x{}, got {:?}", 4 * k, s.shape()),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn insert_into(&self, params: &mut NamedArrays) {
        match self {
            ControllerParams::Plastic { projections, .. } => {
                for (c, p) in Controller::ALL.iter().zip(projections) {
                    let prefix = Self::prefix(*c);
                    params.insert(format!("{prefix}.w"), p.w.clone());
                    params.insert(format!("{prefix}.alpha"), p.alpha.clone());
                }
            }
            ControllerParams::Lstm { cells, skips } => {
                for (c, cell) in Controller::ALL.iter().zip(cells) {
                    cell.insert_into(&Self::prefix(*c), params);
                }
                for (c, s) in Self::SKIPPED.iter().zip(skips) {
                    params.insert(Self::skip_name(*c), s.clone());
                }
            }
        }
    }

    pub fn from_named(plastic: bool, eta: f64, params: &NamedArrays) -> Result<Self> {
        let get = |n: String| params.get(&n).cloned().ok_or(Error::MissingInput(n));
        let out = if plastic {
            let proj = |c: Controller| -> Result<PlasticProjection> {
                let prefix = Self::prefix(c);
                Ok(PlasticProjection {
                    w: get(format!("{prefix}.w"))?,
                    alpha: get(format!("{prefix}.alpha"))?,
                })
            };
            ControllerParams::Plastic {
                projections: [proj(Controller::Input)?, proj(Controller::Output)?, proj(Controller::Update)?],
                eta,
            }
        } else {
            let cell = |c: Controller| LstmParams::from_named(&Self::prefix(c), params);
            ControllerParams::Lstm {
                cells: [cell(Controller::Input)?, cell(Controller::Output)?, cell(Controller::Update)?],
                skips: [get(Self::skip_name(Controller::Output))?, get(Self::skip_name(Controller::Update))?],
            }
        };
        out.validate()?;
        Ok(out)
    }

    pub fn declare(&self, g: &mut Graph) -> Result<ControllerNodes> {
        let k = self.width();
        Ok(match self {
            ControllerParams::Plastic { eta, .. } => {
                let mut declare = |c: Controller| -> Result<(NodeId, NodeId)> {
                    let prefix = Self::prefix(c);
                    Ok((
                        g.param(&format!("{prefix}.w"), &[k, k])?,
                        g.param(&format!("{prefix}.alpha"), &[k, k])?,
                    ))
                };
                let proj = [
                    declare(Controller::Input)?,
                    declare(Controller::Output)?,
                    declare(Controller::Update)?,
                ];
                ControllerNodes::Plastic { proj, eta: *eta }
            }
            ControllerParams::Lstm { .. } => ControllerNodes::Lstm {
                cells: [
                    LstmNodes::declare(g, &Self::prefix(Controller::Input), k, k)?,
                    LstmNodes::declare(g, &Self::prefix(Controller::Output), k, k)?,
                    LstmNodes::declare(g, &Self::prefix(Controller::Update), k, k)?,
                ],
                skips: [
                    g.param(&Self::skip_name(Controller::Output), &[k, 4 * k])?,
                    g.param(&Self::skip_name(Controller::Update), &[k, 4 * k])?,
                ],
            },
        })
    }
}

/// Graph handles for controller parameters.
#[derive(Clone, Debug)]
pub enum ControllerNodes {
    Plastic { proj: [(NodeId, NodeId); 3], eta: f64 },
    Lstm { cells: [LstmNodes; 3], skips: [NodeId; 2] },
}

/// Memory matrix plus per-controller Hebbian traces (and, in fixed mode,
/// the controller LSTM states).
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    /// `l × k` memory matrix.
    pub memory: Array,
    pub hebb_input: Array,
    pub hebb_output: Array,
    pub hebb_update: Array,
    /// Controller LSTM states in fixed mode, empty in plastic mode.
    pub controllers: Vec<LstmState>,
}

impl MemoryState {
    /// Given memory matrix with zero traces (and zero controller states when
    /// `lstm_controllers`).
    pub fn new(memory: Array, lstm_controllers: bool) -> Self {
        let k = memory.cols();
        MemoryState {
            hebb_input: Array::zeros(&[k, k]),
            hebb_output: Array::zeros(&[k, k]),
            hebb_update: Array::zeros(&[k, k]),
            controllers: if lstm_controllers {
                vec![LstmState::zeros(k); 3]
            } else {
                Vec::new()
            },
            memory,
        }
    }

    /// Memory uniform in `±bound` with zero traces.
    pub fn random<R: Rng + ?Sized>(slots: usize, k: usize, bound: f64, lstm_controllers: bool, rng: &mut R) -> Self {
        Self::new(Array::uniform(&[slots, k], bound, rng), lstm_controllers)
    }

    pub fn slots(&self) -> usize {
        self.memory.rows()
    }

    pub fn width(&self) -> usize {
        self.memory.cols()
    }

    pub fn traces(&self) -> [&Array; 3] {
        [&self.hebb_input, &self.hebb_output, &self.hebb_update]
    }

    pub fn is_finite(&self) -> bool {
        self.memory.is_finite()
            && self.traces().iter().all(|t| t.is_finite())
            && self.controllers.iter().all(|s| s.h.is_finite() && s.c.is_finite())
    }

    /// Binds this state to the leaves declared by [`StateNodes::declare`].
    pub fn feed<'a>(&'a self, feeds: &mut Feeds<'a>) {
        feeds.insert(MEMORY_NAME, &self.memory);
        for (name, t) in TRACE_NAMES.iter().zip(self.traces()) {
            feeds.insert(name, t);
        }
        for ((h, c), s) in LSTM_STATE_NAMES.iter().zip(&self.controllers) {
            feeds.insert(h, &s.h);
            feeds.insert(c, &s.c);
        }
    }

    /// Reads the propagated state out of an evaluated graph.
    pub fn from_graph(g: &Graph, nodes: &StateNodes) -> Self {
        let v = |id: NodeId| g.value(id).clone();
        MemoryState {
            memory: v(nodes.memory),
            hebb_input: v(nodes.traces[0]),
            hebb_output: v(nodes.traces[1]),
            hebb_update: v(nodes.traces[2]),
            controllers: nodes
                .lstm
                .iter()
                .flatten()
                .map(|&(h, c)| LstmState { h: v(h), c: v(c) })
                .collect(),
        }
    }

    /// Inserts every state array under its graph leaf name.
    pub fn insert_into(&self, named: &mut NamedArrays) {
        named.insert(MEMORY_NAME.into(), self.memory.clone());
        for (name, t) in TRACE_NAMES.iter().zip(self.traces()) {
            named.insert((*name).into(), t.clone());
        }
        for ((h, c), s) in LSTM_STATE_NAMES.iter().zip(&self.controllers) {
            named.insert((*h).into(), s.h.clone());
            named.insert((*c).into(), s.c.clone());
        }
    }

    /// Inverse of [`MemoryState::insert_into`].
    pub fn from_named(named: &NamedArrays, lstm_controllers: bool) -> Result<Self> {
        let get = |n: &str| named.get(n).cloned().ok_or_else(|| Error::MissingInput(n.into()));
        let controllers = if lstm_controllers {
            LSTM_STATE_NAMES
                .iter()
                .map(|(h, c)| Ok(LstmState { h: get(h)?, c: get(c)? }))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(MemoryState {
            memory: get(MEMORY_NAME)?,
            hebb_input: get(TRACE_NAMES[0])?,
            hebb_output: get(TRACE_NAMES[1])?,
            hebb_update: get(TRACE_NAMES[2])?,
            controllers,
        })
    }

    /// Rounds the state through `f32`.
    pub fn project_f32(&mut self) {
        self.memory.project_f32();
        self.hebb_input.project_f32();
        self.hebb_output.project_f32();
        self.hebb_update.project_f32();
        for s in &mut self.controllers {
            s.h.project_f32();
            s.c.project_f32();
        }
    }
}

/// Graph handles for a memory state.
#[derive(Clone, Debug)]
pub struct StateNodes {
    pub memory: NodeId,
    pub traces: [NodeId; 3],
    pub lstm: Option<[(NodeId, NodeId); 3]>,
}

impl StateNodes {
    /// Declares input leaves for an `slots × k` memory state.
    pub fn declare(g: &mut Graph, slots: usize, k: usize, lstm_controllers: bool) -> Result<Self> {
        let memory = g.input(MEMORY_NAME, &[slots, k])?;
        let traces = [
            g.input(TRACE_NAMES[0], &[k, k])?,
            g.input(TRACE_NAMES[1], &[k, k])?,
            g.input(TRACE_NAMES[2], &[k, k])?,
        ];
        let lstm = if lstm_controllers {
            let mut pairs = [(memory, memory); 3];
            for (pair, (h, c)) in pairs.iter_mut().zip(LSTM_STATE_NAMES) {
                *pair = (g.input(h, &[1, k])?, g.input(c, &[1, k])?);
            }
            Some(pairs)
        } else {
            None
        };
        Ok(StateNodes { memory, traces, lstm })
    }
}

/// Intermediate nodes of one recorded memory step.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    pub query: NodeId,
    pub attention: NodeId,
    pub read: NodeId,
    pub output: NodeId,
    pub update: NodeId,
}

/// Records one controller. The fixed weights act on the encoded input `x`
/// and the plastic part (or the LSTM input weights) on `input`, the
/// controller's own `1 × k` input; for the input controller both are `x`.
/// Returns the controller output and its next trace (plastic) or LSTM
/// state (fixed).
pub fn record_controller(
    g: &mut Graph,
    ctrl: &ControllerNodes,
    which: Controller,
    x: NodeId,
    input: NodeId,
    state: &StateNodes,
) -> Result<(NodeId, ControllerNext)> {
    let idx = which as usize;
    match ctrl {
        ControllerNodes::Plastic { proj, eta } => {
            let (w, alpha) = proj[idx];
            let trace = state.traces[idx];
            let plastic = g.mul(alpha, trace)?;
            let pre_act = if which == Controller::Input {
                let effective = g.add(w, plastic)?;
                g.matmul(input, effective)?
            } else {
                let fixed = g.matmul(x, w)?;
                let varying = g.matmul(input, plastic)?;
                g.add(fixed, varying)?
            };
            let out = g.tanh(pre_act);
            let next = g.hebb_update(trace, input, out, *eta)?;
            Ok((out, ControllerNext::Trace(next)))
        }
        ControllerNodes::Lstm { cells, skips } => {
            let prev = state
                .lstm
                .ok_or_else(|| Error::invalid("fixed-mode controllers need LSTM state inputs"))?[idx];
            let cell = &cells[idx];
            let proj = g.matmul(input, cell.w_input)?;
            let proj = if which == Controller::Input {
                proj
            } else {
                let skip = g.matmul(x, skips[idx - 1])?;
                g.add(proj, skip)?
            };
            let (h, c) = cell.step_projected(g, proj, Some(prev))?;
            Ok((h, ControllerNext::Lstm(h, c)))
        }
    }
}

/// Next controller state produced by [`record_controller`].
#[derive(Clone, Copy, Debug)]
pub enum ControllerNext {
    Trace(NodeId),
    Lstm(NodeId, NodeId),
}

/// `z = softmax(q · M_prevᵀ)` as a `1 × l` row.
pub fn record_attend(g: &mut Graph, query: NodeId, memory: NodeId) -> Result<NodeId> {
    let mem_t = g.transpose(memory);
    let scores = g.matmul(query, mem_t)?;
    Ok(g.softmax(scores))
}

/// `c = z · M_prev` as a `1 × k` row.
pub fn record_read(g: &mut Graph, attention: NodeId, memory: NodeId) -> Result<NodeId> {
    g.matmul(attention, memory)
}

/// `M = M_prev - M_prev∘(z⊗e_k) + z⊗m'`: slot `i` moves a fraction `z[i]`
/// of the way towards `m'`.
pub fn record_write(g: &mut Graph, memory: NodeId, attention: NodeId, update: NodeId) -> Result<NodeId> {
    let k = g.dims_of(update).1;
    let z_col = g.transpose(attention);
    let gate = g.repeat_cols(z_col, k)?;
    let erased = g.mul(memory, gate)?;
    let kept = g.sub(memory, erased)?;
    let written = g.matmul(z_col, update)?;
    g.add(kept, written)
}

/// Records a full memory step on a `1 × k` encoded input.
pub fn record_memory_step(
    g: &mut Graph,
    ctrl: &ControllerNodes,
    x: NodeId,
    state: &StateNodes,
) -> Result<(StepNodes, StateNodes)> {
    let (query, next_in) = record_controller(g, ctrl, Controller::Input, x, x, state)?;
    let attention = record_attend(g, query, state.memory)?;
    let read = record_read(g, attention, state.memory)?;
    let (output, next_out) = record_controller(g, ctrl, Controller::Output, x, read, state)?;
    let (update, next_upd) = record_controller(g, ctrl, Controller::Update, x, output, state)?;
    let memory = record_write(g, state.memory, attention, update)?;

    let mut next = StateNodes {
        memory,
        traces: state.traces,
        lstm: state.lstm,
    };
    for (i, n) in [next_in, next_out, next_upd].into_iter().enumerate() {
        match n {
            ControllerNext::Trace(t) => next.traces[i] = t,
            ControllerNext::Lstm(h, c) => {
                if let Some(l) = next.lstm.as_mut() {
                    l[i] = (h, c);
                }
            }
        }
    }
    Ok((
        StepNodes {
            query,
            attention,
            read,
            output,
            update,
        },
        next,
    ))
}

fn check_width(what: &str, arr: &Array, k: usize) -> Result<()> {
    if arr.dims2() != (1, k) {
        return Err(Error::shape(what, format!("expected length {k}, got {:?}", arr.shape())));
    }
    Ok(())
}

fn check_state(params: &ControllerParams, state: &MemoryState) -> Result<()> {
    params.validate()?;
    let k = params.width();
    if state.width() != k {
        return Err(Error::shape("memory state", format!("memory width {} vs controller width {k}", state.width())));
    }
    for t in state.traces() {
        if t.dims2() != (k, k) {
            return Err(Error::shape("hebbian trace", format!("expected {k}x{k}, got {:?}", t.shape())));
        }
    }
    let need = if params.is_plastic() { 0 } else { 3 };
    if state.controllers.len() != need {
        return Err(Error::invalid(format!(
            "state carries {} controller LSTM states, mode needs {need}",
            state.controllers.len()
        )));
    }
    Ok(())
}

fn controller_graph(params: &ControllerParams, state: &MemoryState) -> Result<(Graph, ControllerNodes, StateNodes)> {
    check_state(params, state)?;
    let mut g = Graph::new();
    let ctrl = params.declare(&mut g)?;
    let nodes = StateNodes::declare(&mut g, state.slots(), state.width(), !params.is_plastic())?;
    Ok((g, ctrl, nodes))
}

fn run_controller(
    params: &ControllerParams,
    which: Controller,
    x: &Array,
    input: &Array,
    state: &MemoryState,
) -> Result<Array> {
    let k = params.width();
    check_width("encoded input", x, k)?;
    check_width(&format!("{} controller input", which.name()), input, k)?;
    let (mut g, ctrl, nodes) = controller_graph(params, state)?;
    let xn = g.input("x", &[1, k])?;
    let inp = g.input("in", &[1, k])?;
    let (out, _) = record_controller(&mut g, &ctrl, which, xn, inp, &nodes)?;
    g.mark_output("y", out);
    let mut named = NamedArrays::new();
    params.insert_into(&mut named);
    let mut feeds = Feeds::new();
    feeds.extend(&named).insert("x", x).insert("in", input);
    state.feed(&mut feeds);
    Ok(g.forward(&feeds)?.remove("y").expect("marked output"))
}

/// Query `q_t` from the encoded input `x_t`.
pub fn input_controller(params: &ControllerParams, x: &Array, state: &MemoryState) -> Result<Array> {
    run_controller(params, Controller::Input, x, x, state)
}

/// Memory output `m_t` from the encoded input and the read vector `c_t`.
pub fn output_controller(params: &ControllerParams, x: &Array, read: &Array, state: &MemoryState) -> Result<Array> {
    run_controller(params, Controller::Output, x, read, state)
}

/// Write vector `m'_t` from the encoded input and the memory output `m_t`.
pub fn update_controller(params: &ControllerParams, x: &Array, output: &Array, state: &MemoryState) -> Result<Array> {
    run_controller(params, Controller::Update, x, output, state)
}

/// Attention over slots: `softmax(M_prev · q)`.
pub fn attend(query: &Array, memory: &Array) -> Result<Array> {
    let (l, k) = memory.dims2();
    check_width("attend query", query, k)?;
    let mut g = Graph::new();
    let q = g.input("q", &[1, k])?;
    let m = g.input("m", &[l, k])?;
    let z = record_attend(&mut g, q, m)?;
    g.mark_output("z", z);
    let mut feeds = Feeds::new();
    feeds.insert("q", query).insert("m", memory);
    Ok(g.forward(&feeds)?.remove("z").expect("marked output"))
}

/// Convex read `Σ_i z[i]·M_prev[i,:]`.
pub fn read(attention: &Array, memory: &Array) -> Result<Array> {
    let (l, k) = memory.dims2();
    check_width("read attention", attention, l)?;
    let mut g = Graph::new();
    let z = g.input("z", &[1, l])?;
    let m = g.input("m", &[l, k])?;
    let c = record_read(&mut g, z, m)?;
    g.mark_output("c", c);
    let mut feeds = Feeds::new();
    feeds.insert("z", attention).insert("m", memory);
    Ok(g.forward(&feeds)?.remove("c").expect("marked output"))
}

/// Checks that `z` is a probability vector within `tol`.
pub fn check_simplex(z: &Array, tol: f64) -> Result<()> {
    let total: f64 = z.data().iter().sum();
    if (total - 1.0).abs() > tol || z.data().iter().any(|&v| v < -tol || !v.is_finite()) {
        return Err(Error::invalid(format!("attention not on the simplex (sum {total})")));
    }
    Ok(())
}

/// Slot-wise convex write `M[i,:] = (1 - z[i])·M_prev[i,:] + z[i]·m'`.
pub fn memory_write(memory: &Array, attention: &Array, update: &Array) -> Result<Array> {
    let (l, k) = memory.dims2();
    check_width("write attention", attention, l)?;
    check_width("write vector", update, k)?;
    check_simplex(attention, 1e-6)?;
    let mut g = Graph::new();
    let m = g.input("m", &[l, k])?;
    let z = g.input("z", &[1, l])?;
    let u = g.input("u", &[1, k])?;
    let out = record_write(&mut g, m, z, u)?;
    g.mark_output("m", out);
    let mut feeds = Feeds::new();
    feeds.insert("m", memory).insert("z", attention).insert("u", update);
    Ok(g.forward(&feeds)?.remove("m").expect("marked output"))
}

/// Oja-style Hebbian update
/// `hebb[i,j] + eta·post[j]·(pre[i] - post[j]·hebb[i,j])`.
pub fn hebb_step(hebb: &Array, pre: &Array, post: &Array, eta: f64) -> Result<Array> {
    let (i, j) = hebb.dims2();
    let mut g = Graph::new();
    let h = g.input("h", &[i, j])?;
    let x = g.input("pre", &[1, i])?;
    let y = g.input("post", &[1, j])?;
    let out = g.hebb_update(h, x, y, eta)?;
    g.mark_output("h", out);
    let mut feeds = Feeds::new();
    feeds.insert("h", hebb).insert("pre", pre).insert("post", post);
    Ok(g.forward(&feeds)?.remove("h").expect("marked output"))
}

/// Everything one memory step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub query: Array,
    pub attention: Array,
    pub read: Array,
    pub output: Array,
    pub update: Array,
    pub state: MemoryState,
}

/// Runs one full memory step on the encoded input `x` and returns every
/// intermediate plus the propagated state. `output` is `m_t`.
pub fn memory_step(params: &ControllerParams, x: &Array, state: &MemoryState) -> Result<StepOutput> {
    let k = params.width();
    check_width("memory_step input", x, k)?;
    let (mut g, ctrl, nodes) = controller_graph(params, state)?;
    let xn = g.input("x", &[1, k])?;
    let (step, next) = record_memory_step(&mut g, &ctrl, xn, &nodes)?;
    let mut named = NamedArrays::new();
    params.insert_into(&mut named);
    let mut feeds = Feeds::new();
    feeds.extend(&named).insert("x", x);
    state.feed(&mut feeds);
    g.forward(&feeds)?;
    let v = |id: NodeId| g.value(id).clone();
    Ok(StepOutput {
        query: v(step.query),
        attention: v(step.attention),
        read: v(step.read),
        output: v(step.output),
        update: v(step.update),
        state: MemoryState::from_graph(&g, &next),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_plastic(w: f64, alpha: f64, eta: f64) -> ControllerParams {
        let p = || PlasticProjection {
            w: Array::scalar(w),
            alpha: Array::scalar(alpha),
        };
        ControllerParams::Plastic {
            projections: [p(), p(), p()],
            eta,
        }
    }

    fn scalar_state(hebb: f64) -> MemoryState {
        let mut s = MemoryState::new(Array::zeros(&[2, 1]), false);
        s.hebb_input = Array::scalar(hebb);
        s.hebb_output = Array::scalar(hebb);
        s.hebb_update = Array::scalar(hebb);
        s
    }

    #[test]
    fn plastic_controllers_vanish_with_zero_weights() {
        let params = ControllerParams::plastic_zeros(4, 0.5);
        let state = MemoryState::new(Array::zeros(&[3, 4]), false);
        let x = Array::row(vec![0.3, -0.2, 0.9, 0.1]);
        let ys = [
            input_controller(&params, &x, &state).unwrap(),
            output_controller(&params, &x, &x, &state).unwrap(),
            update_controller(&params, &x, &x, &state).unwrap(),
        ];
        for y in ys {
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn plastic_controllers_hand_evaluation() {
        let q = input_controller(&scalar_plastic(1.0, 1.0, 0.5), &Array::row(vec![0.2]), &scalar_state(0.5)).unwrap();
        assert!((q.data()[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert!((q.data()[0] - 0.291313).abs() < 1e-6);

        let c = Array::row(vec![0.4]);
        let m = output_controller(&scalar_plastic(1.0, 2.0, 0.5), &c, &c, &scalar_state(0.25)).unwrap();
        assert!((m.data()[0] - 0.537050).abs() < 1e-6);

        let u = update_controller(&scalar_plastic(1.0, 2.0, 0.5), &c, &c, &scalar_state(0.25)).unwrap();
        assert!((u.data()[0] - 0.6f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn fixed_weights_see_the_encoded_input() {
        // w·x + alpha·hebb·c = 0.1 + 2·0.25·0.4
        let params = scalar_plastic(1.0, 2.0, 0.5);
        let m = output_controller(&params, &Array::row(vec![0.1]), &Array::row(vec![0.4]), &scalar_state(0.25)).unwrap();
        assert!((m.data()[0] - 0.3f64.tanh()).abs() < 1e-15);
        let u = update_controller(&params, &Array::row(vec![-0.3]), &Array::row(vec![0.4]), &scalar_state(0.25)).unwrap();
        assert!((u.data()[0] + 0.1f64.tanh()).abs() < 1e-15);
        // zero read: only the input path remains
        let m = output_controller(&params, &Array::row(vec![0.7]), &Array::row(vec![0.0]), &scalar_state(3.0)).unwrap();
        assert!((m.data()[0] - 0.7f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_is_a_fixed_tanh_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 5;
        let w = Array::uniform(&[k, k], 1.0, &mut rng);
        let params = ControllerParams::Plastic {
            projections: [0, 1, 2].map(|_| PlasticProjection {
                w: w.clone(),
                alpha: Array::zeros(&[k, k]),
            }),
            eta: 0.5,
        };
        let mut state = MemoryState::new(Array::zeros(&[2, k]), false);
        state.hebb_input = Array::uniform(&[k, k], 3.0, &mut rng);
        let x = Array::uniform(&[1, k], 1.0, &mut rng);
        let q = input_controller(&params, &x, &state).unwrap();
        for j in 0..k {
            let expected = (0..k).map(|i| w.at(i, j) * x.data()[i]).sum::<f64>().tanh();
            assert!((q.data()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_query_attends_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array::uniform(&[25, 80], 1.0, &mut rng);
        let z = attend(&Array::zeros(&[1, 80]), &m).unwrap();
        assert!(z.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn attend_hand_evaluation() {
        let m = Array::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let z = attend(&Array::row(vec![1.0]), &m).unwrap();
        assert!((z.data()[0] - 0.731059).abs() < 1e-6);
        assert!((z.data()[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn read_cases() {
        let m = Array::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let c = read(&Array::row(vec![0.25, 0.75]), &m).unwrap();
        assert_eq!(c.data(), [3.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array::uniform(&[4, 3], 1.0, &mut rng);
        let c = read(&Array::row(vec![0.0, 0.0, 1.0, 0.0]), &m).unwrap();
        assert_eq!(c.data(), m.row_slice(2));
    }

    #[test]
    fn write_cases() {
        let m = Array::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let out = memory_write(&m, &Array::row(vec![0.25, 0.75]), &Array::row(vec![0.0])).unwrap();
        assert_eq!(out.data(), [1.5, 1.0]);

        let m = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = memory_write(&m, &Array::row(vec![1.0, 0.0, 0.0]), &Array::row(vec![-1.0, 9.0])).unwrap();
        assert_eq!(out.data(), [-1.0, 9.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn write_rejects_off_simplex_attention() {
        let m = Array::zeros(&[2, 1]);
        let err = memory_write(&m, &Array::row(vec![0.5, 0.6]), &Array::row(vec![1.0]));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hebb_cases() {
        let h = hebb_step(&Array::scalar(0.0), &Array::row(vec![1.0]), &Array::row(vec![0.5]), 0.5).unwrap();
        assert_eq!(h.data(), [0.25]);
        let h = hebb_step(&Array::scalar(2.0), &Array::row(vec![1.0]), &Array::row(vec![0.5]), 0.5).unwrap();
        assert_eq!(h.data(), [2.0]);
        let h0 = Array::from_rows(&[vec![0.3, -0.1], vec![0.7, 2.0]]).unwrap();
        let h = hebb_step(&h0, &Array::row(vec![0.4, -0.9]), &Array::row(vec![0.2, 0.8]), 0.0).unwrap();
        assert_eq!(h, h0);
        assert!(hebb_step(&h0, &Array::row(vec![0.4, -0.9]), &Array::row(vec![0.2, 0.8]), 1.5).is_err());
    }

    #[test]
    fn zero_model_step() {
        let params = ControllerParams::plastic_zeros(4, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = MemoryState::random(5, 4, 0.05, false, &mut rng);
        let out = memory_step(&params, &Array::zeros(&[1, 4]), &state).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
        for i in 0..5 {
            for j in 0..4 {
                let expected = state.memory.at(i, j) * (1.0 - 0.2);
                assert!((out.state.memory.at(i, j) - expected).abs() < 1e-17);
            }
        }
        assert!(out.state.hebb_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_mode_step_carries_lstm_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ControllerParams::lstm_init(3, &mut rng);
        let state = MemoryState::random(4, 3, 0.05, true, &mut rng);
        let x = Array::uniform(&[1, 3], 1.0, &mut rng);
        let out = memory_step(&params, &x, &state).unwrap();
        assert_eq!(out.state.controllers.len(), 3);
        assert_eq!(out.state.controllers[0].h, out.query);
        assert!(memory_step(&params, &x, &MemoryState::random(4, 3, 0.05, false, &mut rng)).is_err());
    }

    #[test]
    fn composed_step_gradient_matches_finite_differences() {
        for (seed, plastic) in [(1u64, true), (2, false)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, k) = (4, 3);
            let params = if plastic {
                ControllerParams::plastic_init(k, 0.5, &mut rng)
            } else {
                ControllerParams::lstm_init(k, &mut rng)
            };
            let mut state = MemoryState::random(l, k, 0.5, !plastic, &mut rng);
            state.hebb_input = Array::uniform(&[k, k], 0.5, &mut rng);
            state.hebb_output = Array::uniform(&[k, k], 0.5, &mut rng);
            let mut g = Graph::new();
            let ctrl = params.declare(&mut g).unwrap();
            let nodes = StateNodes::declare(&mut g, l, k, !plastic).unwrap();
            let x = g.param("x", &[1, k]).unwrap();
            // two chained steps so gradients flow through the written memory
            let (_, mid) = record_memory_step(&mut g, &ctrl, x, &nodes).unwrap();
            let (step, _) = record_memory_step(&mut g, &ctrl, x, &mid).unwrap();
            let r = g.input("r", &[1, k]).unwrap();
            let weighted = g.mul(step.output, r).unwrap();
            let loss = g.sum(weighted);

            let mut named = NamedArrays::new();
            params.insert_into(&mut named);
            named.insert("x".into(), Array::uniform(&[1, k], 1.0, &mut rng));
            named.insert("r".into(), Array::uniform(&[1, k], 1.0, &mut rng));
            let mut feeds = Feeds::new();
            feeds.extend(&named);
            state.feed(&mut feeds);
            let report = finite_difference_check(&mut g, loss, &feeds, 1e-5).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_is_on_the_simplex(seed in any::<u64>(), scale in 0.01f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array::uniform(&[7, 5], scale, &mut rng);
            let q = Array::uniform(&[1, 5], 1.0, &mut rng);
            let z = attend(&q, &m).unwrap();
            let total: f64 = z.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(z.data().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn positive_query_scaling_keeps_argmax(seed in any::<u64>(), s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array::uniform(&[6, 4], 1.0, &mut rng);
            let q = Array::uniform(&[1, 4], 1.0, &mut rng);
            let scaled = Array::row(q.data().iter().map(|v| v * s).collect());
            let argmax = |z: &Array| z.data().iter().enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            prop_assert_eq!(argmax(&attend(&q, &m).unwrap()), argmax(&attend(&scaled, &m).unwrap()));
        }

        #[test]
        fn identical_slots_read_back_exactly(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slot = Array::uniform(&[1, 3], 1.0, &mut rng);
            let m = Array::from_rows(&vec![slot.data().to_vec(); 4]).unwrap();
            let z = attend(&Array::uniform(&[1, 3], 1.0, &mut rng), &m).unwrap();
            let c = read(&z, &m).unwrap();
            prop_assert!(c.max_abs_diff(&slot) <= 1e-15);
        }
    }
}

//! GRU and LSTM layers over padded batches, with exact backpropagation
//! through time and a two-logit softmax head reading the final hidden state.
//!
//! Batches are processed column-wise: sequences are ordered by length inside
//! the batch and each timestep only touches the columns whose sequence is
//! still running, so padding can never influence a classified state. Every
//! column's arithmetic is independent of its neighbours, which keeps results
//! identical whether a sequence is evaluated alone or inside a batch.

use serde::{Deserialize, Serialize};

use crate::numeric::{
    matmul_at_into, matmul_bt_into, matmul_into, seeded_rng, seeded_uniform, sigmoid, Matrix,
};
use crate::vocab::EncodedTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

// Gate slots per cell kind.
const GRU_UPDATE: usize = 0;
const GRU_RESET: usize = 1;
const GRU_CAND: usize = 2;
const LSTM_FORGET: usize = 0;
const LSTM_INPUT: usize = 1;
const LSTM_OUTPUT: usize = 2;
const LSTM_CAND: usize = 3;

/// One gate block: input weights `w: [H x in]`, recurrent weights
/// `u: [H x H]` and bias `b: [H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vec<f64>,
}

/// All gate blocks of one recurrent layer. Gate order is `[update, reset,
/// candidate]` for GRU and `[forget, input, output, candidate]` for LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: CellKind,
    pub gates: Vec<GateParams>,
}

impl LayerParams {
    pub fn hidden_size(&self) -> usize {
        self.gates[0].u.rows()
    }

    pub fn input_size(&self) -> usize {
        self.gates[0].w.cols()
    }
}

/// The recurrent stack: one or two layers of a single cell kind.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub layers: Vec<LayerParams>,
}

impl CellParams {
    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size()
    }

    /// One-hot input width of the first layer (the vocabulary size).
    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }
}

/// Classifier head producing two logits from the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Complete trainable parameter set (recurrent stack plus head).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cell: CellParams,
    pub head: HeadParams,
}

/// Glorot-style uniform initialization: every weight matrix is drawn i.i.d.
/// from `±sqrt(6 / (fan_in + fan_out))`, biases start at zero. The draw order
/// (layers, then gates, w before u, head last) is fixed so a seed pins every
/// parameter.
pub fn init_params(
    kind: CellKind,
    vocab_size: usize,
    hidden: usize,
    layers: usize,
    seed: u64,
) -> ModelParams {
    assert!(vocab_size >= 2, "vocabulary size must be at least 2");
    assert!(hidden >= 1, "hidden size must be at least 1");
    assert!(layers == 1 || layers == 2, "layer count must be 1 or 2");
    let mut rng = seeded_rng(seed);
    let mut glorot = |rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        seeded_uniform(rows, cols, -bound, bound, &mut rng)
    };
    let mut layer_params = Vec::with_capacity(layers);
    for layer_idx in 0..layers {
        let input = if layer_idx == 0 { vocab_size } else { hidden };
        let gates = (0..kind.gate_count())
            .map(|_| GateParams {
                w: glorot(hidden, input),
                u: glorot(hidden, hidden),
                b: vec![0.0; hidden],
            })
            .collect();
        layer_params.push(LayerParams {
            kind,
            gates: layer_params_kind_check(kind, gates),
        });
    }
    let head = HeadParams {
        w: glorot(2, hidden),
        b: vec![0.0; 2],
    };
    ModelParams {
        cell: CellParams {
            kind,
            layers: layer_params,
        },
        head,
    }
}

fn layer_params_kind_check(kind: CellKind, gates: Vec<GateParams>) -> Vec<GateParams> {
    debug_assert_eq!(gates.len(), kind.gate_count());
    gates
}

impl ModelParams {
    /// Same shapes, all zeros; gradient and optimizer-state container.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// All parameter arrays in a fixed order: per layer, per gate `w, u, b`;
    /// then head `w, b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.cell.layers {
            for gate in &layer.gates {
                out.push(gate.w.data());
                out.push(gate.u.data());
                out.push(gate.b.as_slice());
            }
        }
        out.push(self.head.w.data());
        out.push(self.head.b.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.cell.layers {
            for gate in &mut layer.gates {
                out.push(gate.w.data_mut());
                out.push(gate.u.data_mut());
                out.push(gate.b.as_mut_slice());
            }
        }
        out.push(self.head.w.data_mut());
        out.push(self.head.b.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter count of the recurrent stack alone (head excluded).
    pub fn cell_param_count(&self) -> usize {
        self.param_count() - self.head.w.data().len() - self.head.b.len()
    }

    /// Flat read access following the `tensors()` order; test support for
    /// finite-difference checks.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Euclidean norm over every parameter jointly.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn debug_check_finite(&self) {
        debug_assert!(
            self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())),
            "parameters contain a non-finite entry"
        );
    }
}

/// A padded batch of encoded traces. Padding ids beyond each sequence's
/// length are never read.
#[derive(Debug, Clone)]
pub struct BatchInput {
    ids: Vec<usize>,
    pub batch: usize,
    pub t_max: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<u8>,
}

impl BatchInput {
    pub fn from_encoded<'a>(traces: impl IntoIterator<Item = &'a EncodedTrace>) -> BatchInput {
        let traces: Vec<&EncodedTrace> = traces.into_iter().collect();
        let seqs: Vec<&[usize]> = traces.iter().map(|t| t.ids.as_slice()).collect();
        let labels: Vec<u8> = traces.iter().map(|t| t.label_id).collect();
        BatchInput::from_sequences(&seqs, &labels)
    }

    pub fn from_sequences(seqs: &[&[usize]], labels: &[u8]) -> BatchInput {
        assert!(!seqs.is_empty(), "empty batch");
        assert_eq!(seqs.len(), labels.len());
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut ids = vec![0usize; seqs.len() * t_max];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (row, seq) in seqs.iter().enumerate() {
            assert!(!seq.is_empty(), "sequence {row} is empty");
            lengths.push(seq.len());
            ids[row * t_max..row * t_max + seq.len()].copy_from_slice(seq);
        }
        BatchInput {
            ids,
            batch: seqs.len(),
            t_max,
            lengths,
            labels: labels.to_vec(),
        }
    }

    #[inline]
    fn id(&self, row: usize, t: usize) -> usize {
        self.ids[row * self.t_max + t]
    }
}

/// Cached activations of one timestep (columns = sequences still running).
struct StepCache {
    /// Post-nonlinearity gate activations in the layer's gate order.
    gates: Vec<Matrix>,
    /// LSTM only: cell state and its tanh.
    cell: Option<(Matrix, Matrix)>,
    h: Matrix,
}

struct LayerTape {
    steps: Vec<StepCache>,
}

/// Everything `backward` needs from a forward pass.
pub struct Tape {
    batch: usize,
    t_max: usize,
    /// `perm[j]` = original index of sorted column `j` (lengths descending).
    perm: Vec<usize>,
    lengths: Vec<usize>,
    ids: Vec<usize>,
    /// `active[t]` = number of sequences with length > t.
    active: Vec<usize>,
    layers: Vec<LayerTape>,
    /// Final hidden state of the top layer per column (sorted order).
    h_final: Matrix,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Runs the recurrence to each sequence's own length and classifies the
/// hidden state at that step. Returns per-trace probabilities `[B x 2]` in
/// the input order plus the tape for `backward`.
pub fn forward(params: &ModelParams, batch: &BatchInput) -> (Matrix, Tape) {
    assert!(batch.batch > 0, "empty batch");
    let hidden = params.cell.hidden_size();
    let vocab = params.cell.input_size();
    let b = batch.batch;

    let mut perm: Vec<usize> = (0..b).collect();
    perm.sort_by(|&x, &y| batch.lengths[y].cmp(&batch.lengths[x]));
    let lengths: Vec<usize> = perm.iter().map(|&j| batch.lengths[j]).collect();
    let t_longest = lengths[0];
    let mut ids = vec![0usize; b * batch.t_max];
    for (col, &orig) in perm.iter().enumerate() {
        for t in 0..lengths[col] {
            let id = batch.id(orig, t);
            assert!(id < vocab, "token id {id} out of range for vocabulary {vocab}");
            ids[col * batch.t_max + t] = id;
        }
    }
    let active: Vec<usize> = (0..t_longest)
        .map(|t| lengths.iter().take_while(|&&l| l > t).count())
        .collect();

    let mut layers = Vec::with_capacity(params.cell.layers.len());
    let mut onehot = Matrix::zeros(vocab, b);
    for (layer_idx, layer) in params.cell.layers.iter().enumerate() {
        let h0 = Matrix::zeros(hidden, b);
        let c0 = Matrix::zeros(hidden, b);
        let mut steps: Vec<StepCache> = Vec::with_capacity(t_longest);
        for t in 0..t_longest {
            let aw = active[t];
            if layer_idx == 0 {
                for col in 0..aw {
                    onehot.set(ids[col * batch.t_max + t], col, 1.0);
                }
            }
            let cache = {
                let input: &Matrix = if layer_idx == 0 {
                    &onehot
                } else {
                    &layers[layer_idx - 1].steps[t].h
                };
                let h_prev = if t == 0 { &h0 } else { &steps[t - 1].h };
                match layer.kind {
                    CellKind::Gru => gru_forward_step(layer, input, h_prev, aw),
                    CellKind::Lstm => {
                        let c_prev = if t == 0 {
                            &c0
                        } else {
                            &steps[t - 1].cell.as_ref().unwrap().0
                        };
                        lstm_forward_step(layer, input, h_prev, c_prev, aw)
                    }
                }
            };
            if layer_idx == 0 {
                for col in 0..aw {
                    onehot.set(ids[col * batch.t_max + t], col, 0.0);
                }
            }
            steps.push(cache);
        }
        layers.push(LayerTape { steps });
    }

    let top = layers.last().unwrap();
    let mut h_final = Matrix::zeros(hidden, b);
    for col in 0..b {
        let step = &top.steps[lengths[col] - 1];
        let width = step.h.cols();
        for i in 0..hidden {
            h_final.set(i, col, step.h.data()[i * width + col]);
        }
    }

    let mut logits_cols = Matrix::zeros(2, b);
    matmul_into(&mut logits_cols, &params.head.w, &h_final, b, false);
    let mut logits_rows = Matrix::zeros(b, 2);
    for col in 0..b {
        logits_rows.set(perm[col], 0, logits_cols.at(0, col) + params.head.b[0]);
        logits_rows.set(perm[col], 1, logits_cols.at(1, col) + params.head.b[1]);
    }
    let probs = logits_rows.softmax_rows();
    probs.debug_check_finite();

    (
        probs,
        Tape {
            batch: b,
            t_max: batch.t_max,
            perm,
            lengths,
            ids,
            active,
            layers,
            h_final,
        },
    )
}

fn gate_preactivation(
    gate: &GateParams,
    input: &Matrix,
    recurrent_input: &Matrix,
    aw: usize,
) -> Matrix {
    let mut pre = Matrix::zeros(gate.w.rows(), aw);
    matmul_into(&mut pre, &gate.w, input, aw, false);
    matmul_into(&mut pre, &gate.u, recurrent_input, aw, true);
    for i in 0..pre.rows() {
        let bias = gate.b[i];
        for v in &mut pre.data_mut()[i * aw..(i + 1) * aw] {
            *v += bias;
        }
    }
    pre
}

fn gru_forward_step(layer: &LayerParams, input: &Matrix, h_prev: &Matrix, aw: usize) -> StepCache {
    let hidden = layer.hidden_size();
    let mut z = gate_preactivation(&layer.gates[GRU_UPDATE], input, h_prev, aw);
    z.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
    let mut r = gate_preactivation(&layer.gates[GRU_RESET], input, h_prev, aw);
    r.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));

    let hp_w = h_prev.cols();
    let mut reset_h = Matrix::zeros(hidden, aw);
    for i in 0..hidden {
        let r_row = &r.data()[i * aw..(i + 1) * aw];
        let hp_row = &h_prev.data()[i * hp_w..i * hp_w + aw];
        let out = &mut reset_h.data_mut()[i * aw..(i + 1) * aw];
        for j in 0..aw {
            out[j] = r_row[j] * hp_row[j];
        }
    }
    let mut cand = gate_preactivation(&layer.gates[GRU_CAND], input, &reset_h, aw);
    cand.data_mut().iter_mut().for_each(|x| *x = x.tanh());

    let mut h = Matrix::zeros(hidden, aw);
    for i in 0..hidden {
        let z_row = &z.data()[i * aw..(i + 1) * aw];
        let c_row = &cand.data()[i * aw..(i + 1) * aw];
        let hp_row = &h_prev.data()[i * hp_w..i * hp_w + aw];
        let out = &mut h.data_mut()[i * aw..(i + 1) * aw];
        for j in 0..aw {
            out[j] = (1.0 - z_row[j]) * hp_row[j] + z_row[j] * c_row[j];
        }
    }
    StepCache {
        gates: vec![z, r, cand],
        cell: None,
        h,
    }
}

fn lstm_forward_step(
    layer: &LayerParams,
    input: &Matrix,
    h_prev: &Matrix,
    c_prev: &Matrix,
    aw: usize,
) -> StepCache {
    let hidden = layer.hidden_size();
    let mut gates = Vec::with_capacity(4);
    for (slot, gate) in layer.gates.iter().enumerate() {
        let mut pre = gate_preactivation(gate, input, h_prev, aw);
        if slot == LSTM_CAND {
            pre.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        } else {
            pre.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        }
        gates.push(pre);
    }

    let cp_w = c_prev.cols();
    let mut c = Matrix::zeros(hidden, aw);
    let mut tanh_c = Matrix::zeros(hidden, aw);
    let mut h = Matrix::zeros(hidden, aw);
    for i in 0..hidden {
        let f_row = &gates[LSTM_FORGET].data()[i * aw..(i + 1) * aw];
        let i_row = &gates[LSTM_INPUT].data()[i * aw..(i + 1) * aw];
        let o_row = &gates[LSTM_OUTPUT].data()[i * aw..(i + 1) * aw];
        let g_row = &gates[LSTM_CAND].data()[i * aw..(i + 1) * aw];
        let cp_row = &c_prev.data()[i * cp_w..i * cp_w + aw];
        for j in 0..aw {
            let c_val = f_row[j] * cp_row[j] + i_row[j] * g_row[j];
            let t_val = c_val.tanh();
            c.data_mut()[i * aw + j] = c_val;
            tanh_c.data_mut()[i * aw + j] = t_val;
            h.data_mut()[i * aw + j] = o_row[j] * t_val;
        }
    }
    StepCache {
        gates,
        cell: Some((c, tanh_c)),
        h,
    }
}

/// Exact BPTT gradients of the batch-mean loss given its gradient at the
/// logits (`[B x 2]`, same order as the forward input). Padding steps
/// contribute nothing by construction.
pub fn backward(params: &ModelParams, tape: &Tape, dlogits: &Matrix) -> ModelParams {
    assert_eq!(dlogits.rows(), tape.batch, "tape/batch mismatch");
    assert_eq!(dlogits.cols(), 2, "expected two logit columns");
    let hidden = params.cell.hidden_size();
    let b = tape.batch;
    let layer_count = params.cell.layers.len();

    let mut grads = params.zeros_like();

    // Head: probabilities were produced in original row order; bring the
    // logit gradient back to sorted column order.
    let mut dl_sorted = Matrix::zeros(2, b);
    for col in 0..b {
        dl_sorted.set(0, col, dlogits.at(tape.perm[col], 0));
        dl_sorted.set(1, col, dlogits.at(tape.perm[col], 1));
    }
    matmul_bt_into(&mut grads.head.w, &dl_sorted, &tape.h_final, b, true);
    for c in 0..2 {
        grads.head.b[c] += dl_sorted.row(c).iter().sum::<f64>();
    }
    let mut dh_head = Matrix::zeros(hidden, b);
    matmul_at_into(&mut dh_head, &params.head.w, &dl_sorted, b, false);

    // Per-step gradient flowing into each layer's hidden output from the
    // layer above (None for the top layer, which receives the head gradient
    // at each sequence's final step instead).
    let mut d_from_above: Option<Vec<Matrix>> = None;
    for layer_idx in (0..layer_count).rev() {
        let layer = &params.cell.layers[layer_idx];
        let steps = &tape.layers[layer_idx].steps;
        let t_longest = steps.len();
        let is_top = layer_idx == layer_count - 1;
        let wants_input_grad = layer_idx > 0;

        let h0 = Matrix::zeros(hidden, b);
        let c0 = Matrix::zeros(hidden, b);
        let mut dh = Matrix::zeros(hidden, b);
        let mut dc = Matrix::zeros(hidden, b);
        let mut d_input_rev: Vec<Matrix> = Vec::new();

        for t in (0..t_longest).rev() {
            let aw = tape.active[t];
            let active_next = if t + 1 < t_longest { tape.active[t + 1] } else { 0 };
            if is_top {
                // Sequences ending at this step receive the head gradient.
                for col in active_next..aw {
                    for i in 0..hidden {
                        let v = dh_head.at(i, col);
                        dh.set(i, col, dh.at(i, col) + v);
                    }
                }
            }
            if let Some(above) = &d_from_above {
                let inj = &above[t];
                for i in 0..hidden {
                    let src = &inj.data()[i * aw..(i + 1) * aw];
                    let dst = &mut dh.data_mut()[i * b..i * b + aw];
                    for j in 0..aw {
                        dst[j] += src[j];
                    }
                }
            }

            let h_prev = if t == 0 { &h0 } else { &steps[t - 1].h };
            let input: Option<&Matrix> = if layer_idx == 0 {
                None
            } else {
                Some(&tape.layers[layer_idx - 1].steps[t].h)
            };
            let d_input = match layer.kind {
                CellKind::Gru => gru_backward_step(
                    layer,
                    &steps[t],
                    h_prev,
                    input,
                    &tape.ids,
                    tape.t_max,
                    t,
                    aw,
                    &mut dh,
                    &mut grads.cell.layers[layer_idx],
                    wants_input_grad,
                ),
                CellKind::Lstm => {
                    let c_prev = if t == 0 {
                        &c0
                    } else {
                        &steps[t - 1].cell.as_ref().unwrap().0
                    };
                    lstm_backward_step(
                        layer,
                        &steps[t],
                        h_prev,
                        c_prev,
                        input,
                        &tape.ids,
                        tape.t_max,
                        t,
                        aw,
                        &mut dh,
                        &mut dc,
                        &mut grads.cell.layers[layer_idx],
                        wants_input_grad,
                    )
                }
            };
            if let Some(d) = d_input {
                d_input_rev.push(d);
            }
        }
        d_from_above = if wants_input_grad {
            d_input_rev.reverse();
            Some(d_input_rev)
        } else {
            None
        };
    }

    grads.debug_check_finite();
    grads
}

/// Accumulates `da x input^T` into the gate's input-weight gradient. For the
/// one-hot first layer this is a column scatter by token id.
fn accumulate_input_grad(
    dw: &mut Matrix,
    da: &Matrix,
    input: Option<&Matrix>,
    ids: &[usize],
    t_max: usize,
    t: usize,
    aw: usize,
) {
    match input {
        Some(dense) => matmul_bt_into(dw, da, dense, aw, true),
        None => {
            let v = dw.cols();
            for col in 0..aw {
                let id = ids[col * t_max + t];
                for i in 0..da.rows() {
                    dw.data_mut()[i * v + id] += da.data()[i * aw + col];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gru_backward_step(
    layer: &LayerParams,
    cache: &StepCache,
    h_prev: &Matrix,
    input: Option<&Matrix>,
    ids: &[usize],
    t_max: usize,
    t: usize,
    aw: usize,
    dh: &mut Matrix,
    grads: &mut LayerParams,
    wants_input_grad: bool,
) -> Option<Matrix> {
    let hidden = layer.hidden_size();
    let b = dh.cols();
    let hp_w = h_prev.cols();
    let (z, r, cand) = (&cache.gates[GRU_UPDATE], &cache.gates[GRU_RESET], &cache.gates[GRU_CAND]);

    let mut da_z = Matrix::zeros(hidden, aw);
    let mut da_c = Matrix::zeros(hidden, aw);
    let mut reset_h = Matrix::zeros(hidden, aw);
    for i in 0..hidden {
        for j in 0..aw {
            let dh_ij = dh.data()[i * b + j];
            let z_ij = z.data()[i * aw + j];
            let c_ij = cand.data()[i * aw + j];
            let hp_ij = h_prev.data()[i * hp_w + j];
            let r_ij = r.data()[i * aw + j];
            da_z.data_mut()[i * aw + j] = dh_ij * (c_ij - hp_ij) * z_ij * (1.0 - z_ij);
            da_c.data_mut()[i * aw + j] = dh_ij * z_ij * (1.0 - c_ij * c_ij);
            reset_h.data_mut()[i * aw + j] = r_ij * hp_ij;
        }
    }

    // d(reset * h_prev) through the candidate's recurrent weights.
    let mut d_reset_h = Matrix::zeros(hidden, aw);
    matmul_at_into(&mut d_reset_h, &layer.gates[GRU_CAND].u, &da_c, aw, false);

    let mut da_r = Matrix::zeros(hidden, aw);
    for i in 0..hidden {
        for j in 0..aw {
            let r_ij = r.data()[i * aw + j];
            let hp_ij = h_prev.data()[i * hp_w + j];
            da_r.data_mut()[i * aw + j] = d_reset_h.data()[i * aw + j] * hp_ij * r_ij * (1.0 - r_ij);
        }
    }

    accumulate_input_grad(&mut grads.gates[GRU_UPDATE].w, &da_z, input, ids, t_max, t, aw);
    accumulate_input_grad(&mut grads.gates[GRU_RESET].w, &da_r, input, ids, t_max, t, aw);
    accumulate_input_grad(&mut grads.gates[GRU_CAND].w, &da_c, input, ids, t_max, t, aw);
    matmul_bt_into(&mut grads.gates[GRU_UPDATE].u, &da_z, h_prev, aw, true);
    matmul_bt_into(&mut grads.gates[GRU_RESET].u, &da_r, h_prev, aw, true);
    matmul_bt_into(&mut grads.gates[GRU_CAND].u, &da_c, &reset_h, aw, true);
    for i in 0..hidden {
        grads.gates[GRU_UPDATE].b[i] += da_z.row(i).iter().sum::<f64>();
        grads.gates[GRU_RESET].b[i] += da_r.row(i).iter().sum::<f64>();
        grads.gates[GRU_CAND].b[i] += da_c.row(i).iter().sum::<f64>();
    }

    // dh_prev = dh (1-z) + d_reset_h r + Uz^T da_z + Ur^T da_r
    let mut carry = Matrix::zeros(hidden, aw);
    matmul_at_into(&mut carry, &layer.gates[GRU_UPDATE].u, &da_z, aw, false);
    matmul_at_into(&mut carry, &layer.gates[GRU_RESET].u, &da_r, aw, true);
    for i in 0..hidden {
        for j in 0..aw {
            let dh_ij = dh.data()[i * b + j];
            let z_ij = z.data()[i * aw + j];
            let r_ij = r.data()[i * aw + j];
            dh.data_mut()[i * b + j] = dh_ij * (1.0 - z_ij)
                + d_reset_h.data()[i * aw + j] * r_ij
                + carry.data()[i * aw + j];
        }
    }

    if wants_input_grad {
        let din = layer.input_size();
        let mut d_input = Matrix::zeros(din, aw);
        matmul_at_into(&mut d_input, &layer.gates[GRU_UPDATE].w, &da_z, aw, false);
        matmul_at_into(&mut d_input, &layer.gates[GRU_RESET].w, &da_r, aw, true);
        matmul_at_into(&mut d_input, &layer.gates[GRU_CAND].w, &da_c, aw, true);
        Some(d_input)
    } else {
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward_step(
    layer: &LayerParams,
    cache: &StepCache,
    h_prev: &Matrix,
    c_prev: &Matrix,
    input: Option<&Matrix>,
    ids: &[usize],
    t_max: usize,
    t: usize,
    aw: usize,
    dh: &mut Matrix,
    dc: &mut Matrix,
    grads: &mut LayerParams,
    wants_input_grad: bool,
) -> Option<Matrix> {
    let hidden = layer.hidden_size();
    let b = dh.cols();
    let hp_w = h_prev.cols();
    let cp_w = c_prev.cols();
    let (c_state, tanh_c) = cache.cell.as_ref().unwrap();
    let _ = c_state;

    let mut da = vec![
        Matrix::zeros(hidden, aw),
        Matrix::zeros(hidden, aw),
        Matrix::zeros(hidden, aw),
        Matrix::zeros(hidden, aw),
    ];
    for i in 0..hidden {
        for j in 0..aw {
            let dh_ij = dh.data()[i * b + j];
            let f_ij = cache.gates[LSTM_FORGET].data()[i * aw + j];
            let i_ij = cache.gates[LSTM_INPUT].data()[i * aw + j];
            let o_ij = cache.gates[LSTM_OUTPUT].data()[i * aw + j];
            let g_ij = cache.gates[LSTM_CAND].data()[i * aw + j];
            let tc_ij = tanh_c.data()[i * aw + j];
            let cp_ij = c_prev.data()[i * cp_w + j];

            let d_o = dh_ij * tc_ij;
            let d_c = dc.data()[i * b + j] + dh_ij * o_ij * (1.0 - tc_ij * tc_ij);
            let d_f = d_c * cp_ij;
            let d_i = d_c * g_ij;
            let d_g = d_c * i_ij;

            da[LSTM_FORGET].data_mut()[i * aw + j] = d_f * f_ij * (1.0 - f_ij);
            da[LSTM_INPUT].data_mut()[i * aw + j] = d_i * i_ij * (1.0 - i_ij);
            da[LSTM_OUTPUT].data_mut()[i * aw + j] = d_o * o_ij * (1.0 - o_ij);
            da[LSTM_CAND].data_mut()[i * aw + j] = d_g * (1.0 - g_ij * g_ij);
            dc.data_mut()[i * b + j] = d_c * f_ij;
        }
    }

    for slot in 0..4 {
        accumulate_input_grad(&mut grads.gates[slot].w, &da[slot], input, ids, t_max, t, aw);
        matmul_bt_into(&mut grads.gates[slot].u, &da[slot], h_prev, aw, true);
        for i in 0..hidden {
            grads.gates[slot].b[i] += da[slot].row(i).iter().sum::<f64>();
        }
    }

    let mut carry = Matrix::zeros(hidden, aw);
    for slot in 0..4 {
        matmul_at_into(&mut carry, &layer.gates[slot].u, &da[slot], aw, slot > 0);
    }
    for i in 0..hidden {
        let src = &carry.data()[i * aw..(i + 1) * aw];
        let dst = &mut dh.data_mut()[i * b..i * b + aw];
        dst[..aw].copy_from_slice(src);
    }
    let _ = hp_w;

    if wants_input_grad {
        let din = layer.input_size();
        let mut d_input = Matrix::zeros(din, aw);
        for slot in 0..4 {
            matmul_at_into(&mut d_input, &layer.gates[slot].w, &da[slot], aw, slot > 0);
        }
        Some(d_input)
    } else {
        None
    }
}

/// One GRU step on a single column: `z = sig(Wz x + Uz h + bz)`,
/// `r = sig(Wr x + Ur h + br)`, `hc = tanh(Wc x + Uc (r.h) + bc)`,
/// `h' = (1 - z).h + z.hc`.
pub fn gru_step(layer: &LayerParams, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
    assert_eq!(layer.kind, CellKind::Gru);
    let hidden = layer.hidden_size();
    assert_eq!(x.len(), layer.input_size());
    assert_eq!(h_prev.len(), hidden);
    let pre = |gate: &GateParams, rec: &[f64]| -> Vec<f64> {
        (0..hidden)
            .map(|i| {
                let mut sum = gate.b[i];
                for (k, &xv) in x.iter().enumerate() {
                    sum += gate.w.at(i, k) * xv;
                }
                for (k, &hv) in rec.iter().enumerate() {
                    sum += gate.u.at(i, k) * hv;
                }
                sum
            })
            .collect()
    };
    let z: Vec<f64> = pre(&layer.gates[GRU_UPDATE], h_prev)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = pre(&layer.gates[GRU_RESET], h_prev)
        .into_iter()
        .map(sigmoid)
        .collect();
    let reset_h: Vec<f64> = r.iter().zip(h_prev).map(|(&rv, &hv)| rv * hv).collect();
    let cand: Vec<f64> = pre(&layer.gates[GRU_CAND], &reset_h)
        .into_iter()
        .map(f64::tanh)
        .collect();
    (0..hidden)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i])
        .collect()
}

/// One LSTM step on a single column (no peepholes): `c' = f.c + i.g`,
/// `h' = o.tanh(c')`.
pub fn lstm_step(
    layer: &LayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(layer.kind, CellKind::Lstm);
    let hidden = layer.hidden_size();
    assert_eq!(x.len(), layer.input_size());
    assert_eq!(h_prev.len(), hidden);
    assert_eq!(c_prev.len(), hidden);
    let pre = |gate: &GateParams| -> Vec<f64> {
        (0..hidden)
            .map(|i| {
                let mut sum = gate.b[i];
                for (k, &xv) in x.iter().enumerate() {
                    sum += gate.w.at(i, k) * xv;
                }
                for (k, &hv) in h_prev.iter().enumerate() {
                    sum += gate.u.at(i, k) * hv;
                }
                sum
            })
            .collect()
    };
    let f: Vec<f64> = pre(&layer.gates[LSTM_FORGET]).into_iter().map(sigmoid).collect();
    let i_gate: Vec<f64> = pre(&layer.gates[LSTM_INPUT]).into_iter().map(sigmoid).collect();
    let o: Vec<f64> = pre(&layer.gates[LSTM_OUTPUT]).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = pre(&layer.gates[LSTM_CAND]).into_iter().map(f64::tanh).collect();
    let c: Vec<f64> = (0..hidden)
        .map(|i| f[i] * c_prev[i] + i_gate[i] * g[i])
        .collect();
    let h: Vec<f64> = (0..hidden).map(|i| o[i] * c[i].tanh()).collect();
    (h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::one_hot;

    fn zero_layer(kind: CellKind, input: usize, hidden: usize) -> LayerParams {
        LayerParams {
            kind,
            gates: (0..kind.gate_count())
                .map(|_| GateParams {
                    w: Matrix::zeros(hidden, input),
                    u: Matrix::zeros(hidden, hidden),
                    b: vec![0.0; hidden],
                })
                .collect(),
        }
    }

    #[test]
    fn gru_step_zero_params_is_a_fixed_point() {
        let layer = zero_layer(CellKind::Gru, 4, 3);
        let h = gru_step(&layer, &one_hot(1, 4), &[0.0; 3]);
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn gru_update_gate_saturation_passes_candidate_through() {
        let mut layer = zero_layer(CellKind::Gru, 5, 4);
        let mut rng = seeded_rng(3);
        layer.gates[GRU_CAND].w = seeded_uniform(4, 5, -1.0, 1.0, &mut rng);
        layer.gates[GRU_UPDATE].b = vec![1000.0; 4];
        let x = one_hot(2, 5);
        let h_prev: Vec<f64> = (0..4).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let h = gru_step(&layer, &x, &h_prev);
        // z saturates to exactly 1, so h must equal the candidate.
        for i in 0..4 {
            let cand = layer.gates[GRU_CAND].w.at(i, 2).tanh();
            assert!((h[i] - cand).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_zero_params_stays_zero() {
        let layer = zero_layer(CellKind::Lstm, 4, 3);
        let (h, c) = lstm_step(&layer, &one_hot(0, 4), &[0.0; 3], &[0.0; 3]);
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn lstm_forget_gate_saturation_preserves_cell_state() {
        let mut layer = zero_layer(CellKind::Lstm, 4, 3);
        layer.gates[LSTM_FORGET].b = vec![1000.0; 3];
        layer.gates[LSTM_INPUT].b = vec![-1000.0; 3];
        let c_prev = vec![0.3, -0.7, 1.5];
        let (_, c) = lstm_step(&layer, &one_hot(1, 4), &[0.2, 0.1, -0.4], &c_prev);
        for i in 0..3 {
            assert!((c[i] - c_prev[i]).abs() < 1e-12);
        }
    }

    // Independent scalar re-implementations used as oracles. They share
    // nothing with the production step code beyond the equations.
    fn oracle_gru(layer: &LayerParams, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let hidden = layer.hidden_size();
        let dot = |m: &Matrix, v: &[f64], row: usize| -> f64 {
            let mut s = 0.0;
            for (k, &vv) in v.iter().enumerate() {
                s += m.at(row, k) * vv;
            }
            s
        };
        let mut h = vec![0.0; hidden];
        for i in 0..hidden {
            let z = crate::numeric::sigmoid(
                dot(&layer.gates[0].w, x, i) + dot(&layer.gates[0].u, h_prev, i) + layer.gates[0].b[i],
            );
            let r_full: Vec<f64> = (0..hidden)
                .map(|k| {
                    crate::numeric::sigmoid(
                        dot(&layer.gates[1].w, x, k)
                            + dot(&layer.gates[1].u, h_prev, k)
                            + layer.gates[1].b[k],
                    )
                })
                .collect();
            let rh: Vec<f64> = r_full.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
            let cand = (dot(&layer.gates[2].w, x, i)
                + dot(&layer.gates[2].u, &rh, i)
                + layer.gates[2].b[i])
                .tanh();
            h[i] = (1.0 - z) * h_prev[i] + z * cand;
        }
        h
    }

    fn oracle_lstm(layer: &LayerParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = layer.hidden_size();
        let dot = |m: &Matrix, v: &[f64], row: usize| -> f64 {
            let mut s = 0.0;
            for (k, &vv) in v.iter().enumerate() {
                s += m.at(row, k) * vv;
            }
            s
        };
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        for i in 0..hidden {
            let gate = |slot: usize| {
                dot(&layer.gates[slot].w, x, i)
                    + dot(&layer.gates[slot].u, h_prev, i)
                    + layer.gates[slot].b[i]
            };
            let f = crate::numeric::sigmoid(gate(0));
            let inp = crate::numeric::sigmoid(gate(1));
            let o = crate::numeric::sigmoid(gate(2));
            let g = gate(3).tanh();
            c[i] = f * c_prev[i] + inp * g;
            h[i] = o * c[i].tanh();
        }
        (h, c)
    }

    fn random_layer(kind: CellKind, input: usize, hidden: usize, seed: u64) -> LayerParams {
        let mut rng = seeded_rng(seed);
        LayerParams {
            kind,
            gates: (0..kind.gate_count())
                .map(|_| GateParams {
                    w: seeded_uniform(hidden, input, -0.8, 0.8, &mut rng),
                    u: seeded_uniform(hidden, hidden, -0.8, 0.8, &mut rng),
                    b: seeded_uniform(1, hidden, -0.5, 0.5, &mut rng).data().to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn gru_step_matches_scalar_oracle() {
        for seed in 0..50 {
            let layer = random_layer(CellKind::Gru, 6, 5, seed);
            let mut rng = seeded_rng(seed + 1000);
            let x = one_hot(rng.random_range(0..6), 6);
            let h_prev = seeded_uniform(1, 5, -0.9, 0.9, &mut rng).data().to_vec();
            let got = gru_step(&layer, &x, &h_prev);
            let want = oracle_gru(&layer, &x, &h_prev);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "seed {seed}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        for seed in 0..50 {
            let layer = random_layer(CellKind::Lstm, 6, 5, seed);
            let mut rng = seeded_rng(seed + 2000);
            let x = one_hot(rng.random_range(0..6), 6);
            let h_prev = seeded_uniform(1, 5, -0.9, 0.9, &mut rng).data().to_vec();
            let c_prev = seeded_uniform(1, 5, -0.9, 0.9, &mut rng).data().to_vec();
            let (h, c) = lstm_step(&layer, &x, &h_prev, &c_prev);
            let (oh, oc) = oracle_lstm(&layer, &x, &h_prev, &c_prev);
            for (g, w) in h.iter().zip(&oh).chain(c.iter().zip(&oc)) {
                assert!((g - w).abs() < 1e-12, "seed {seed}: {g} vs {w}");
            }
        }
    }

    use rand::Rng;

    #[test]
    fn forward_zero_params_gives_even_odds() {
        let params = ModelParams {
            cell: CellParams {
                kind: CellKind::Gru,
                layers: vec![zero_layer(CellKind::Gru, 3, 4)],
            },
            head: HeadParams {
                w: Matrix::zeros(2, 4),
                b: vec![0.0; 2],
            },
        };
        let batch = BatchInput::from_sequences(&[&[1]], &[0]);
        let (probs, _) = forward(&params, &batch);
        assert_eq!(probs.at(0, 0), 0.5);
        assert_eq!(probs.at(0, 1), 0.5);
    }

    #[test]
    fn forward_is_invariant_to_padding_and_batching() {
        let params = init_params(CellKind::Gru, 7, 5, 1, 9);
        let seqs: Vec<Vec<usize>> = vec![
            vec![1, 2, 3, 4, 5, 6],
            vec![2, 2],
            vec![6, 1, 3],
            vec![4],
            vec![5, 5, 5, 5],
            vec![3, 1],
            vec![1, 6, 2, 4, 3],
            vec![2],
        ];
        let labels = vec![0u8; 8];
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let (batch_probs, _) = forward(&params, &BatchInput::from_sequences(&refs, &labels));
        for (i, seq) in seqs.iter().enumerate() {
            let (solo, _) = forward(&params, &BatchInput::from_sequences(&[seq.as_slice()], &[0]));
            assert_eq!(
                solo.at(0, 0).to_bits(),
                batch_probs.at(i, 0).to_bits(),
                "sequence {i} differs between solo and batched evaluation"
            );
            assert_eq!(solo.at(0, 1).to_bits(), batch_probs.at(i, 1).to_bits());
        }
    }

    #[test]
    fn forward_matches_single_step_chain() {
        for kind in [CellKind::Gru, CellKind::Lstm] {
            let params = init_params(kind, 6, 4, 1, 17);
            let seq = [3usize, 1, 5, 0, 2];
            let batch = BatchInput::from_sequences(&[&seq], &[1]);
            let (probs, _) = forward(&params, &batch);

            let layer = &params.cell.layers[0];
            let mut h = vec![0.0; 4];
            let mut c = vec![0.0; 4];
            for &id in &seq {
                let x = one_hot(id, 6);
                match kind {
                    CellKind::Gru => h = gru_step(layer, &x, &h),
                    CellKind::Lstm => {
                        let (nh, nc) = lstm_step(layer, &x, &h, &c);
                        h = nh;
                        c = nc;
                    }
                }
            }
            let mut logits = [params.head.b[0], params.head.b[1]];
            for (i, logit) in logits.iter_mut().enumerate() {
                for (k, &hv) in h.iter().enumerate() {
                    *logit += params.head.w.at(i, k) * hv;
                }
            }
            let m = logits[0].max(logits[1]);
            let e0 = (logits[0] - m).exp();
            let e1 = (logits[1] - m).exp();
            let p1 = e1 / (e0 + e1);
            assert!((probs.at(0, 1) - p1).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn gru_hidden_state_stays_in_open_unit_interval() {
        let params = init_params(CellKind::Gru, 9, 6, 1, 4);
        let mut rng = seeded_rng(8);
        for _ in 0..20 {
            let len = rng.random_range(1..30);
            let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..9)).collect();
            let batch = BatchInput::from_sequences(&[&seq], &[0]);
            let (_, tape) = forward(&params, &batch);
            for step in &tape.layers[0].steps {
                for &v in step.h.data() {
                    assert!(v > -1.0 && v < 1.0);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let a = init_params(CellKind::Gru, 36, 32, 1, 5);
        let b = init_params(CellKind::Gru, 36, 32, 1, 5);
        assert_eq!(a, b);
        // 3 gates x (32x36 weights + 32x32 recurrent + 32 bias) = 6624.
        assert_eq!(a.cell_param_count(), 6624);
        assert_eq!(a.param_count(), 6624 + 2 * 32 + 2);

        let lstm = init_params(CellKind::Lstm, 36, 32, 1, 5);
        assert_eq!(lstm.cell_param_count() * 3, a.cell_param_count() * 4);
    }

    #[test]
    #[should_panic(expected = "empty batch")]
    fn forward_rejects_empty_batch() {
        let params = init_params(CellKind::Gru, 3, 2, 1, 0);
        let _ = forward(
            &params,
            &BatchInput {
                ids: vec![],
                batch: 0,
                t_max: 0,
                lengths: vec![],
                labels: vec![],
            },
        );
    }

    #[test]
    fn backward_zero_loss_gradient_is_zero() {
        let params = init_params(CellKind::Gru, 5, 4, 1, 21);
        let batch = BatchInput::from_sequences(&[&[1, 2], &[3]], &[0, 1]);
        let (_, tape) = forward(&params, &batch);
        let dlogits = Matrix::zeros(2, 2);
        let grads = backward(&params, &tape, &dlogits);
        for &v in grads.head.b.iter() {
            assert!(v.abs() < 1e-12);
        }
        assert_eq!(grads.global_norm(), 0.0);
    }
}

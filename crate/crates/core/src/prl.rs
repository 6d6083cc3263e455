//! Hierarchically coupled recurrent layer over a feature pyramid.
//!
//! Levels are scanned top-down (coarsest first). At level i and step t the
//! cell consumes the level's feature vector, its own previous state, and the
//! state of the level above at index `floor(t / d)` (clamped when ceil
//! divisions leave the upper level one short). The topmost level receives a
//! zero vector in place of an upper state, so its top-down weights contribute
//! nothing there. Cell parameters are shared across levels by default: the
//! same temporal pattern detector runs at every scale, mirroring the shared
//! CNN streams. An unshared mode (one cell per level) exists for ablation.
//!
//! The simple cell is `relu(W1 x + W2 h_prev + W3 h_upper + b)`. The LSTM
//! cell feeds the concatenation `[x | h_upper]` as its input, so W1 and W3
//! are the row blocks of its input weight matrix.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::wavelet::Pyramid;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Simple,
    Lstm,
}

#[derive(Debug, Clone)]
pub struct SimpleCell {
    /// W1: `[n_in x n_h]`.
    pub w_input: Tensor,
    /// W2: `[n_h x n_h]`.
    pub w_recurrent: Tensor,
    /// W3: `[n_h x n_h]`.
    pub w_topdown: Tensor,
    /// `[n_h]`.
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    /// Input weights over `[x | h_upper]`: `[(n_in + n_h) x 4 n_h]`,
    /// gates packed as [input | forget | candidate | output].
    pub w_input: Tensor,
    /// `[n_h x 4 n_h]`.
    pub w_recurrent: Tensor,
    /// `[4 n_h]`; forget block initialized to +1.
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub enum PrlCell {
    Simple(SimpleCell),
    Lstm(LstmCell),
}

#[derive(Debug, Clone)]
pub struct PrlParams {
    /// One entry when shared, one per level otherwise.
    pub cells: Vec<PrlCell>,
    pub shared: bool,
    pub hidden: usize,
    /// Downsampling ratio d between adjacent levels.
    pub ratio: usize,
    pub in_features: usize,
}

impl PrlParams {
    pub fn init(
        kind: CellKind,
        in_features: usize,
        hidden: usize,
        ratio: usize,
        levels: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_features < 1 || hidden < 1 || ratio < 1 || levels < 1 {
            return Err(Error::Argument("recurrent layer: all dimensions must be >= 1".into()));
        }
        let n_cells = if shared { 1 } else { levels };
        let cells = (0..n_cells).map(|_| init_cell(kind, in_features, hidden, rng)).collect();
        Ok(PrlParams { cells, shared, hidden, ratio, in_features })
    }

    fn cell_for_level(&self, level: usize) -> &PrlCell {
        if self.shared {
            &self.cells[0]
        } else {
            &self.cells[level.min(self.cells.len() - 1)]
        }
    }
}

fn init_cell(kind: CellKind, n_in: usize, n_h: usize, rng: &mut impl Rng) -> PrlCell {
    let in_scale = 1.0 / (n_in as f64).sqrt();
    let rec_scale = 1.0 / (n_h as f64).sqrt();
    match kind {
        CellKind::Simple => PrlCell::Simple(SimpleCell {
            w_input: Tensor::uniform(vec![n_in, n_h], in_scale, rng).with_grad(),
            w_recurrent: Tensor::uniform(vec![n_h, n_h], rec_scale, rng).with_grad(),
            w_topdown: Tensor::uniform(vec![n_h, n_h], rec_scale, rng).with_grad(),
            bias: Tensor::zeros(vec![n_h]).with_grad(),
        }),
        CellKind::Lstm => {
            let cat_scale = 1.0 / ((n_in + n_h) as f64).sqrt();
            let mut bias = Tensor::zeros(vec![4 * n_h]);
            for j in n_h..2 * n_h {
                bias.data_mut()[j] = 1.0; // forget-gate bias
            }
            PrlCell::Lstm(LstmCell {
                w_input: Tensor::uniform(vec![n_in + n_h, 4 * n_h], cat_scale, rng).with_grad(),
                w_recurrent: Tensor::uniform(vec![n_h, 4 * n_h], rec_scale, rng).with_grad(),
                bias: bias.with_grad(),
            })
        }
    }
}

pub enum BoundCell {
    Simple { w1: NodeId, w2: NodeId, w3: NodeId, b: NodeId },
    Lstm { w_x: NodeId, w_h: NodeId, b: NodeId },
}

pub struct PrlNodes {
    pub cells: Vec<BoundCell>,
}

pub fn bind_prl(g: &mut Graph, params: &PrlParams) -> Result<PrlNodes> {
    let mut cells = Vec::with_capacity(params.cells.len());
    for cell in &params.cells {
        cells.push(match cell {
            PrlCell::Simple(c) => BoundCell::Simple {
                w1: g.leaf(&c.w_input)?,
                w2: g.leaf(&c.w_recurrent)?,
                w3: g.leaf(&c.w_topdown)?,
                b: g.leaf(&c.bias)?,
            },
            PrlCell::Lstm(c) => BoundCell::Lstm {
                w_x: g.leaf(&c.w_input)?,
                w_h: g.leaf(&c.w_recurrent)?,
                b: g.leaf(&c.bias)?,
            },
        });
    }
    Ok(PrlNodes { cells })
}

impl PrlNodes {
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.cells
            .iter()
            .flat_map(|c| match c {
                BoundCell::Simple { w1, w2, w3, b } => vec![*w1, *w2, *w3, *b],
                BoundCell::Lstm { w_x, w_h, b } => vec![*w_x, *w_h, *b],
            })
            .collect()
    }

    fn for_level(&self, shared: bool, level: usize) -> &BoundCell {
        if shared {
            &self.cells[0]
        } else {
            &self.cells[level.min(self.cells.len() - 1)]
        }
    }
}

/// Recurrent state: hidden vector plus the LSTM cell buffer when present.
#[derive(Clone, Copy)]
pub struct PrlState {
    pub hidden: NodeId,
    pub cell: Option<NodeId>,
}

/// One recurrent step at a single level.
pub fn prl_step(
    g: &mut Graph,
    x: NodeId,
    prev: PrlState,
    h_upper: NodeId,
    cell: &BoundCell,
) -> Result<PrlState> {
    match cell {
        BoundCell::Simple { w1, w2, w3, b } => {
            let xa = g.matmul(x, *w1)?;
            let ha = g.matmul(prev.hidden, *w2)?;
            let ua = g.matmul(h_upper, *w3)?;
            let s = g.add(xa, ha)?;
            let s = g.add(s, ua)?;
            let s = g.add(s, *b)?;
            let h = g.relu(s)?;
            Ok(PrlState { hidden: h, cell: None })
        }
        BoundCell::Lstm { w_x, w_h, b } => {
            let cat = g.concat(x, h_upper)?;
            let cell_prev = prev
                .cell
                .ok_or_else(|| Error::Argument("LSTM step needs a cell state".into()))?;
            let (h, c) = g.lstm_step(cat, prev.hidden, cell_prev, *w_x, *w_h, *b)?;
            Ok(PrlState { hidden: h, cell: Some(c) })
        }
    }
}

/// Scan the pyramid top-down and return the full state sequence of the
/// finest level as `[len(C_1) x n_h]`. Initial states are zero.
pub fn prl_forward(
    g: &mut Graph,
    pyramid: &Pyramid,
    params: &PrlParams,
    bound: &PrlNodes,
) -> Result<NodeId> {
    if pyramid.is_empty() {
        return Err(Error::Argument("recurrent layer needs a non-empty pyramid".into()));
    }
    let n_h = params.hidden;
    let zero_state = g.input(&Tensor::zeros(vec![n_h]))?;
    let mut upper: Option<Vec<NodeId>> = None;

    for level in (0..pyramid.len()).rev() {
        let feats = pyramid.levels[level];
        let (t_len, width) = {
            let s = g.value(feats).shape();
            (s[0], s[1])
        };
        if width != params.in_features {
            return Err(Error::Dimension(format!(
                "level {level} has width {width}, cells expect {}",
                params.in_features
            )));
        }
        let cell = bound.for_level(params.shared, level);
        let is_lstm = matches!(cell, BoundCell::Lstm { .. });
        let mut state = PrlState {
            hidden: zero_state,
            cell: if is_lstm { Some(zero_state) } else { None },
        };
        let flat = g.reshape(feats, vec![t_len * width])?;
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x_t = g.slice_cols(flat, t * width, width)?;
            let h_up = match &upper {
                None => zero_state,
                Some(us) => us[(t / params.ratio).min(us.len() - 1)],
            };
            state = prl_step(g, x_t, state, h_up, cell)?;
            states.push(state.hidden);
        }
        if level == 0 {
            return g.stack_rows(&states);
        }
        upper = Some(states);
    }
    unreachable!("loop returns at level 0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn one_unit_simple(w1: f64, w2: f64, w3: f64, b: f64) -> PrlParams {
        PrlParams {
            cells: vec![PrlCell::Simple(SimpleCell {
                w_input: Tensor::new(vec![1, 1], vec![w1]).unwrap().with_grad(),
                w_recurrent: Tensor::new(vec![1, 1], vec![w2]).unwrap().with_grad(),
                w_topdown: Tensor::new(vec![1, 1], vec![w3]).unwrap().with_grad(),
                bias: Tensor::vector(&[b]).with_grad(),
            }]),
            shared: true,
            hidden: 1,
            ratio: 2,
            in_features: 1,
        }
    }

    fn pyramid_from(g: &mut Graph, levels: &[Tensor]) -> Pyramid {
        Pyramid { levels: levels.iter().map(|t| g.input(t).unwrap()).collect() }
    }

    #[test]
    fn zero_weights_give_activated_bias() {
        let params = one_unit_simple(0.0, 0.0, 0.0, 0.7);
        let mut g = Graph::new_checked();
        let bound = bind_prl(&mut g, &params).unwrap();
        let x = g.input(&Tensor::vector(&[5.0])).unwrap();
        let h0 = g.input(&Tensor::zeros(vec![1])).unwrap();
        let up = g.input(&Tensor::zeros(vec![1])).unwrap();
        let s = prl_step(&mut g, x, PrlState { hidden: h0, cell: None }, up, &bound.cells[0])
            .unwrap();
        assert_eq!(g.value(s.hidden).data(), &[0.7]);
    }

    #[test]
    fn unit_weights_sum_three_sources() {
        // Eq-style evaluation: all three inputs 1 with unit weights -> 3.
        let params = one_unit_simple(1.0, 1.0, 1.0, 0.0);
        let mut g = Graph::new_checked();
        let bound = bind_prl(&mut g, &params).unwrap();
        let x = g.input(&Tensor::vector(&[1.0])).unwrap();
        let h0 = g.input(&Tensor::vector(&[1.0])).unwrap();
        let up = g.input(&Tensor::vector(&[1.0])).unwrap();
        let s = prl_step(&mut g, x, PrlState { hidden: h0, cell: None }, up, &bound.cells[0])
            .unwrap();
        assert_eq!(g.value(s.hidden).data(), &[3.0]);
    }

    #[test]
    fn step_five_reads_upper_state_two() {
        // Pass-through weights (W1 = W3 = 1, W2 = 0): the top level's states
        // equal its inputs, and with zero fine-level input h1[t] = h2[t/2].
        let params = one_unit_simple(1.0, 0.0, 1.0, 0.0);
        let mut g = Graph::new();
        let c1 = Tensor::zeros(vec![6, 1]);
        let c2 = Tensor::new(vec![3, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let bound = bind_prl(&mut g, &params).unwrap();
        let pyr = pyramid_from(&mut g, &[c1, c2]);
        let h1 = prl_forward(&mut g, &pyr, &params, &bound).unwrap();
        let out = g.value(h1).data();
        assert_eq!(out, &[10.0, 10.0, 20.0, 20.0, 30.0, 30.0]);
        assert_eq!(out[5], 30.0); // step 5 -> floor(5/2) = 2
    }

    /// Independent scalar unrolling of the two-level recursion.
    fn hand_unrolled(c1: &[f64], c2: &[f64], d: usize) -> Vec<f64> {
        let relu = |v: f64| v.max(0.0);
        let mut h2 = Vec::new();
        let mut prev = 0.0;
        for &v in c2 {
            let h = relu(v + prev); // W1 = W2 = 1, upper input is zero
            h2.push(h);
            prev = h;
        }
        let mut out = Vec::new();
        let mut prev = 0.0;
        for (t, &v) in c1.iter().enumerate() {
            let up = h2[(t / d).min(h2.len() - 1)];
            let h = relu(v + prev + up);
            out.push(h);
            prev = h;
        }
        out
    }

    #[test]
    fn two_level_toy_matches_hand_unrolled_recursion() {
        let c1 = [0.5, -1.0, 0.25, 2.0];
        let c2 = [1.0, -0.5];
        let expect = hand_unrolled(&c1, &c2, 2);

        let params = one_unit_simple(1.0, 1.0, 1.0, 0.0);
        let mut g = Graph::new_checked();
        let bound = bind_prl(&mut g, &params).unwrap();
        let l1 = Tensor::new(vec![4, 1], c1.to_vec()).unwrap();
        let l2 = Tensor::new(vec![2, 1], c2.to_vec()).unwrap();
        let pyr = pyramid_from(&mut g, &[l1, l2]);
        let h1 = prl_forward(&mut g, &pyr, &params, &bound).unwrap();
        for (a, e) in g.value(h1).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    fn lstm_params(in_features: usize, hidden: usize, seed: u64, scale: f64) -> PrlParams {
        let mut p = PrlParams::init(
            CellKind::Lstm,
            in_features,
            hidden,
            2,
            3,
            true,
            &mut rng_from_seed(seed),
        )
        .unwrap();
        if let PrlCell::Lstm(c) = &mut p.cells[0] {
            for v in c.w_input.data_mut() {
                *v *= scale;
            }
            for v in c.w_recurrent.data_mut() {
                *v *= scale;
            }
        }
        p
    }

    #[test]
    fn single_level_degenerates_to_plain_rnn() {
        // With one level the upper input is always zero, so the output must
        // equal a manual LSTM chain over the same features.
        let params = lstm_params(2, 3, 41, 1.0);
        let feats = Tensor::uniform(vec![5, 2], 1.0, &mut rng_from_seed(42));

        let mut g = Graph::new();
        let bound = bind_prl(&mut g, &params).unwrap();
        let pyr = pyramid_from(&mut g, std::slice::from_ref(&feats));
        let out = prl_forward(&mut g, &pyr, &params, &bound).unwrap();
        let got = g.value(out).data().to_vec();

        let mut g = Graph::new();
        let (w_x, w_h, b) = match &params.cells[0] {
            PrlCell::Lstm(c) => (
                g.leaf(&c.w_input).unwrap(),
                g.leaf(&c.w_recurrent).unwrap(),
                g.leaf(&c.bias).unwrap(),
            ),
            _ => unreachable!(),
        };
        let zero = g.input(&Tensor::zeros(vec![3])).unwrap();
        let mut h = zero;
        let mut c = zero;
        let mut rows = Vec::new();
        for t in 0..5 {
            let x = g
                .input(&Tensor::vector(&feats.data()[t * 2..(t + 1) * 2]))
                .unwrap();
            let cat = g.concat(x, zero).unwrap();
            let (h2, c2) = g.lstm_step(cat, h, c, w_x, w_h, b).unwrap();
            h = h2;
            c = c2;
            rows.push(h);
        }
        let manual = g.stack_rows(&rows).unwrap();
        let expect = g.value(manual).data();
        assert_eq!(got.len(), expect.len());
        for (a, e) in got.iter().zip(expect) {
            assert_eq!(a.to_bits(), e.to_bits());
        }
    }

    #[test]
    fn final_state_feels_the_first_coarse_frame() {
        // Three levels: the last fine-level state must be sensitive to the
        // very first frame of the top level (a short top-down path exists).
        let params = lstm_params(2, 4, 50, 1.0);
        let mut g = Graph::new();
        let mk = |g: &mut Graph, t: usize, seed: u64| {
            let tensor =
                Tensor::uniform(vec![t, 2], 1.0, &mut rng_from_seed(seed)).with_grad();
            g.leaf(&tensor).unwrap()
        };
        let l1 = mk(&mut g, 16, 51);
        let l2 = mk(&mut g, 8, 52);
        let l3 = mk(&mut g, 4, 53);
        let bound = bind_prl(&mut g, &params).unwrap();
        let out = prl_forward(&mut g, &Pyramid { levels: vec![l1, l2, l3] }, &params, &bound)
            .unwrap();
        let flat = g.reshape(out, vec![16 * 4]).unwrap();
        let last = g.slice_cols(flat, 15 * 4, 4).unwrap();
        let loss = g.sum_all(last).unwrap();
        g.backward(loss).unwrap();
        let top_grad = g.grad(l3).unwrap();
        let first_frame_norm: f64 = top_grad[..2].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(first_frame_norm > 1e-9, "no top-down path: {first_frame_norm}");
    }

    #[test]
    fn pyramid_keeps_long_range_signal_better_than_flat_chain() {
        let params = lstm_params(2, 4, 60, 0.5);
        let t_fine = 128;

        // Flat chain over the fine level only.
        let fine = Tensor::uniform(vec![t_fine, 2], 1.0, &mut rng_from_seed(61)).with_grad();
        let first_frame_sensitivity = |levels: Vec<Tensor>| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = levels.iter().map(|t| g.leaf(t).unwrap()).collect();
            let bound = bind_prl(&mut g, &params).unwrap();
            let out =
                prl_forward(&mut g, &Pyramid { levels: ids.clone() }, &params, &bound).unwrap();
            let flat = g.reshape(out, vec![t_fine * 4]).unwrap();
            let last = g.slice_cols(flat, (t_fine - 1) * 4, 4).unwrap();
            let loss = g.sum_all(last).unwrap();
            g.backward(loss).unwrap();
            ids.iter()
                .map(|&id| {
                    let grad = g.grad(id).unwrap();
                    grad[..2].iter().map(|v| v * v).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };

        let flat_sens = first_frame_sensitivity(vec![fine.clone()]);
        let pyr_sens = first_frame_sensitivity(vec![
            fine,
            Tensor::uniform(vec![64, 2], 1.0, &mut rng_from_seed(62)),
            Tensor::uniform(vec![32, 2], 1.0, &mut rng_from_seed(63)),
        ]);
        assert!(
            pyr_sens > 10.0 * flat_sens,
            "pyramid {pyr_sens} vs flat {flat_sens}"
        );
    }

    #[test]
    fn future_frames_never_leak_backward() {
        let params = lstm_params(2, 3, 70, 1.0);
        let mut g = Graph::new();
        let l1t = Tensor::uniform(vec![8, 2], 1.0, &mut rng_from_seed(71)).with_grad();
        let l2t = Tensor::uniform(vec![4, 2], 1.0, &mut rng_from_seed(72)).with_grad();
        let l1 = g.leaf(&l1t).unwrap();
        let l2 = g.leaf(&l2t).unwrap();
        let bound = bind_prl(&mut g, &params).unwrap();
        let out = prl_forward(&mut g, &Pyramid { levels: vec![l1, l2] }, &params, &bound).unwrap();
        // Loss reads state at fine step 3 only.
        let flat = g.reshape(out, vec![8 * 3]).unwrap();
        let h3 = g.slice_cols(flat, 3 * 3, 3).unwrap();
        let loss = g.sum_all(h3).unwrap();
        g.backward(loss).unwrap();
        let g1 = g.grad(l1).unwrap();
        for t in 4..8 {
            assert_eq!(&g1[t * 2..(t + 1) * 2], &[0.0, 0.0], "fine frame {t} leaked");
        }
        let g2 = g.grad(l2).unwrap();
        for t in 2..4 {
            assert_eq!(&g2[t * 2..(t + 1) * 2], &[0.0, 0.0], "coarse frame {t} leaked");
        }
    }

    #[test]
    fn prefix_of_outputs_depends_only_on_input_prefix() {
        let params = lstm_params(1, 2, 80, 1.0);
        let full: Vec<Tensor> = vec![
            Tensor::uniform(vec![16, 1], 1.0, &mut rng_from_seed(81)),
            Tensor::uniform(vec![8, 1], 1.0, &mut rng_from_seed(82)),
            Tensor::uniform(vec![4, 1], 1.0, &mut rng_from_seed(83)),
        ];
        let prefix: Vec<Tensor> = vec![
            Tensor::new(vec![8, 1], full[0].data()[..8].to_vec()).unwrap(),
            Tensor::new(vec![4, 1], full[1].data()[..4].to_vec()).unwrap(),
            Tensor::new(vec![2, 1], full[2].data()[..2].to_vec()).unwrap(),
        ];
        let run = |levels: &[Tensor]| {
            let mut g = Graph::new();
            let pyr = pyramid_from(&mut g, levels);
            let bound = bind_prl(&mut g, &params).unwrap();
            let out = prl_forward(&mut g, &pyr, &params, &bound).unwrap();
            g.value(out).data().to_vec()
        };
        let full_out = run(&full);
        let prefix_out = run(&prefix);
        for (a, b) in prefix_out.iter().zip(&full_out) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_pyramid_is_an_argument_error() {
        let params = lstm_params(1, 2, 90, 1.0);
        let mut g = Graph::new();
        let bound = bind_prl(&mut g, &params).unwrap();
        assert!(matches!(
            prl_forward(&mut g, &Pyramid { levels: vec![] }, &params, &bound),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn cell_gradients_pass_finite_differences() {
        let feats1 = Tensor::uniform(vec![8, 2], 1.0, &mut rng_from_seed(101));
        let feats2 = Tensor::uniform(vec![4, 2], 1.0, &mut rng_from_seed(102));
        let base = lstm_params(2, 2, 100, 1.0);
        let (w_x0, w_h0, b0) = match &base.cells[0] {
            PrlCell::Lstm(c) => (c.w_input.clone(), c.w_recurrent.clone(), c.bias.clone()),
            _ => unreachable!(),
        };
        let mut tensors = vec![w_x0, w_h0, b0];
        let err = crate::gradcheck::max_relative_error(
            &mut tensors,
            crate::gradcheck::DEFAULT_STEP,
            &mut |g, p| {
                let params = PrlParams {
                    cells: vec![PrlCell::Lstm(LstmCell {
                        w_input: p[0].clone(),
                        w_recurrent: p[1].clone(),
                        bias: p[2].clone(),
                    })],
                    shared: true,
                    hidden: 2,
                    ratio: 2,
                    in_features: 2,
                };
                let pyr = pyramid_from(g, &[feats1.clone(), feats2.clone()]);
                let bound = bind_prl(g, &params)?;
                let out = prl_forward(g, &pyr, &params, &bound)?;
                let sq = g.mul(out, out)?;
                let loss = g.mean_all(sq)?;
                Ok((loss, bound.param_ids()))
            },
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn simple_cell_gradients_pass_finite_differences() {
        let feats1 = Tensor::uniform(vec![8, 2], 0.8, &mut rng_from_seed(111));
        let feats2 = Tensor::uniform(vec![4, 2], 0.8, &mut rng_from_seed(112));
        let base = PrlParams::init(CellKind::Simple, 2, 3, 2, 2, true, &mut rng_from_seed(110))
            .unwrap();
        let (w1, w2, w3, b) = match &base.cells[0] {
            PrlCell::Simple(c) => (
                c.w_input.clone(),
                c.w_recurrent.clone(),
                c.w_topdown.clone(),
                c.bias.clone(),
            ),
            _ => unreachable!(),
        };
        // Nonzero bias keeps ReLU away from its kink so central differences
        // stay clean.
        let mut b = b;
        for v in b.data_mut() {
            *v = 0.3;
        }
        let mut tensors = vec![w1, w2, w3, b];
        let err = crate::gradcheck::max_relative_error(
            &mut tensors,
            crate::gradcheck::DEFAULT_STEP,
            &mut |g, p| {
                let params = PrlParams {
                    cells: vec![PrlCell::Simple(SimpleCell {
                        w_input: p[0].clone(),
                        w_recurrent: p[1].clone(),
                        w_topdown: p[2].clone(),
                        bias: p[3].clone(),
                    })],
                    shared: true,
                    hidden: 3,
                    ratio: 2,
                    in_features: 2,
                };
                let pyr = pyramid_from(g, &[feats1.clone(), feats2.clone()]);
                let bound = bind_prl(g, &params)?;
                let out = prl_forward(g, &pyr, &params, &bound)?;
                let sq = g.mul(out, out)?;
                let loss = g.mean_all(sq)?;
                Ok((loss, bound.param_ids()))
            },
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

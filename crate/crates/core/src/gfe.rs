//! Feature extraction: a recurrent state summary, per-movement tokens tagged
//! with their position in the movement order, and a phase encoder, fused by
//! multi-head cross-attention plus a pooled read of each phase's own
//! movements into one row per phase.

use cross_autodiff::{Graph, ParamStore, Result, Var};
use cross_sim::MAX_MOVEMENTS;
use rand::Rng;

use crate::nn::{Gru, Linear};
use crate::obs::{Batch, MOVEMENT_FEATURES, STATE_DIM};

#[derive(Clone, Debug)]
pub struct Gfe {
    state_in: Linear,
    gru: Gru,
    token: Linear,
    position: Linear,
    phase1: Linear,
    phase2: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    member: Linear,
    pub width: usize,
    pub heads: usize,
}

/// Phase-aware features and the updated recurrent state.
pub struct GfeOut<'g> {
    /// `[ΣP, d]`
    pub h_sp: Var<'g>,
    /// `[N, d]`
    pub hidden: Var<'g>,
}

impl Gfe {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let lin = |store: &mut ParamStore, part: &str, i, o, b, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), i, o, b, rng)
        };
        Ok(Self {
            state_in: lin(store, "state", STATE_DIM, width, true, rng)?,
            gru: Gru::new(store, &format!("{name}.gru"), width, width, rng)?,
            token: lin(store, "token", MOVEMENT_FEATURES, width, true, rng)?,
            position: lin(store, "position", MAX_MOVEMENTS, width, false, rng)?,
            phase1: lin(store, "phase1", MAX_MOVEMENTS, width, true, rng)?,
            phase2: lin(store, "phase2", width, width, true, rng)?,
            query: lin(store, "query", width, width, false, rng)?,
            key: lin(store, "key", width, width, false, rng)?,
            value: lin(store, "value", width, width, false, rng)?,
            out: lin(store, "out", width, width, false, rng)?,
            member: lin(store, "member", width, width, false, rng)?,
            width,
            heads,
        })
    }

    /// `hidden` is the `[N, d]` recurrent state carried from the previous decision.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, batch: &Batch, hidden: Var<'g>) -> Result<GfeOut<'g>> {
        let state = g.constant(batch.state.clone());
        let encoded = self.state_in.forward(g, store, state)?.relu();
        let h_s = self.gru.forward(g, store, encoded, hidden)?;
        let tokens = self
            .token
            .forward(g, store, g.constant(batch.movements.clone()))?
            .add(self.position.forward(g, store, g.constant(batch.positions.clone()))?)?
            .relu()
            .add(h_s.segment_repeat(&batch.movement_seg)?)?;
        let h_p = self.phase1.forward(g, store, g.constant(batch.phases.clone()))?.relu();
        let h_p = self.phase2.forward(g, store, h_p)?;
        let q = self.query.forward(g, store, h_p)?;
        let k = self.key.forward(g, store, tokens)?;
        let v = self.value.forward(g, store, tokens)?;
        let attn = g.attention(q, k, v, self.heads, &batch.phase_seg, &batch.movement_seg)?;
        // Each phase also reads the mean token of the movements it serves.
        let served = tokens.gather_rows(&batch.member_rows)?.segment_mean(&batch.member_seg)?;
        let h_sp = h_p
            .add(self.out.forward(g, store, attn)?)?
            .add(self.member.forward(g, store, served)?)?;
        Ok(GfeOut { h_sp, hidden: h_s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_all;
    use crate::obs::Observation;
    use crate::fixtures::{four_way_obs, param_relative_error, t_junction_obs};
    use cross_autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize, seed: u64) -> (ParamStore, Gfe) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gfe = Gfe::new(&mut store, "gfe", width, 4, &mut rng).unwrap();
        (store, gfe)
    }

    fn run(store: &ParamStore, gfe: &Gfe, obs: &[&Observation], hidden: &Tensor) -> (Tensor, Tensor) {
        let batch = Batch::new(obs).unwrap();
        let g = Graph::new();
        let out = gfe.forward(&g, store, &batch, g.constant(hidden.clone())).unwrap();
        ((*out.h_sp.value()).clone(), (*out.hidden.value()).clone())
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let (mut store, gfe) = setup(8, 1);
        zero_all(&mut store);
        let o = four_way_obs(5);
        let (h_sp, hidden) = run(&store, &gfe, &[&o], &Tensor::zeros(&[1, 8]));
        assert!(h_sp.data().iter().all(|v| *v == 0.0));
        assert!(hidden.data().iter().all(|v| *v == 0.0));
        assert_eq!(h_sp.shape(), &[8, 8]);
    }

    #[test]
    fn padded_garbage_leaves_features_bit_identical() {
        let (store, gfe) = setup(16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for clean in [t_junction_obs(3), four_way_obs(4)] {
            let mut dirty = clean.clone();
            crate::fixtures::scramble_padding(&mut dirty, &mut rng);
            let h = Tensor::full(&[1, 16], 0.3);
            assert_eq!(run(&store, &gfe, &[&clean], &h), run(&store, &gfe, &[&dirty], &h));
        }
    }

    #[test]
    fn equal_scores_average_unmasked_values() {
        let g = Graph::new();
        let seg_q = std::sync::Arc::new(cross_autodiff::Segments::from_lengths([2, 1]));
        let seg_k = std::sync::Arc::new(cross_autodiff::Segments::from_lengths([3, 2]));
        let q = g.constant(Tensor::zeros(&[3, 4]));
        let k = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).sin()).collect()).unwrap());
        let v = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| i as f64).collect()).unwrap());
        let out = g.attention(q, k, v, 2, &seg_q, &seg_k).unwrap().value();
        let mean = |rows: std::ops::Range<usize>, c: usize| {
            rows.clone().map(|r| (r * 4 + c) as f64).sum::<f64>() / rows.len() as f64
        };
        for c in 0..4 {
            assert!((out.row(0)[c] - mean(0..3, c)).abs() < 1e-12);
            assert!((out.row(1)[c] - mean(0..3, c)).abs() < 1e-12);
            assert!((out.row(2)[c] - mean(3..5, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_carries_history() {
        let (store, gfe) = setup(8, 3);
        let o = four_way_obs(7);
        let (a1, h1) = run(&store, &gfe, &[&o], &Tensor::zeros(&[1, 8]));
        let (a2, _) = run(&store, &gfe, &[&o], &h1);
        let (b1, _) = run(&store, &gfe, &[&o], &Tensor::zeros(&[1, 8]));
        assert_eq!(a1, b1);
        assert_ne!(a1, a2);
    }

    #[test]
    fn batched_rows_match_single_runs() {
        let (store, gfe) = setup(8, 4);
        let (a, b) = (t_junction_obs(1), four_way_obs(2));
        let (joint, _) = run(&store, &gfe, &[&a, &b], &Tensor::zeros(&[2, 8]));
        let (sa, _) = run(&store, &gfe, &[&a], &Tensor::zeros(&[1, 8]));
        let (sb, _) = run(&store, &gfe, &[&b], &Tensor::zeros(&[1, 8]));
        let mut both = sa.data().to_vec();
        both.extend_from_slice(sb.data());
        for (x, y) in joint.data().iter().zip(&both) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, gfe) = setup(8, 5);
        let obs = [t_junction_obs(11), four_way_obs(12)];
        let batch = Batch::new(&[&obs[0], &obs[1]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h0 = cross_autodiff::init::uniform(&mut rng, &[2, 8], 0.5);
        let err = param_relative_error(&mut store, 1e-6, 40, &mut rng, |g, s| {
            let out = gfe.forward(g, s, &batch, g.constant(h0.clone()))?;
            Ok(out.h_sp.tanh().sum().add(out.hidden.sum())?)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

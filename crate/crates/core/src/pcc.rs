//! Predictive contrastive clustering: forecast the next traffic state from a
//! gated encoding, then softly assign that encoding to learnable centers.

use cross_autodiff::{init, AutodiffError, Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::Rng;

use crate::nn::{LayerNorm, Linear};
use crate::obs::{CONTEXT_DIM, STATE_DIM};

#[derive(Clone, Debug)]
pub struct Pcc {
    glu1: Linear,
    glu2: Linear,
    proj: Linear,
    phi: Linear,
    phi_norm: LayerNorm,
    pub centers: ParamId,
    pub clusters: usize,
    pub tau_k: f64,
}

pub struct PccOut<'g> {
    /// `[N, h]` dynamics encoding.
    pub z: Var<'g>,
    /// `[N, 180]` predicted next state.
    pub s_hat: Var<'g>,
    /// `[N, K]` cosine similarities to the centers.
    pub sims: Var<'g>,
    /// `[N, K]` soft assignment.
    pub w: Var<'g>,
    /// `[N, h]` assignment-weighted center mix.
    pub z_hat: Var<'g>,
}

impl Pcc {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        clusters: usize,
        tau_k: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            glu1: Linear::new(store, &format!("{name}.glu1"), CONTEXT_DIM, 2 * hidden, true, rng)?,
            glu2: Linear::new(store, &format!("{name}.glu2"), hidden, 2 * hidden, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), hidden, STATE_DIM, true, rng)?,
            phi: Linear::new(store, &format!("{name}.phi"), hidden, hidden, true, rng)?,
            phi_norm: LayerNorm::new(store, &format!("{name}.phi_norm"), hidden)?,
            centers: store.add(format!("{name}.centers"), init::unit_rows(rng, clusters, hidden))?,
            clusters,
            tau_k,
        })
    }

    /// `context` is the `[N, 225]` clustering input.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, context: Var<'g>) -> Result<PccOut<'g>> {
        let z = self.glu1.forward(g, store, context)?.glu()?;
        let z = self.glu2.forward(g, store, z)?.glu()?;
        let s_hat = self.proj.forward(g, store, z)?;
        let projected = self.phi_norm.forward(g, store, self.phi.forward(g, store, z)?)?;
        let centers = g.param(store, self.centers);
        let sims = projected.cosine_similarity(centers)?;
        let w = sims.softmax(self.tau_k)?;
        let z_hat = w.matmul(centers)?;
        Ok(PccOut {
            z,
            s_hat,
            sims,
            w,
            z_hat,
        })
    }
}

/// Mean squared error over the entries where `mask` is 1.
pub fn loss_pred<'g>(s_hat: Var<'g>, target: &Tensor, mask: &Tensor) -> Result<Var<'g>> {
    let g = s_hat.graph();
    let count = mask.data().iter().sum::<f64>();
    let diff = s_hat.sub(g.constant(target.clone()))?.mul(g.constant(mask.clone()))?;
    Ok(diff.mul(diff)?.sum().scale(1.0 / count.max(1.0)))
}

/// Soft-target cross-entropy `−Σ w_k log softmax(s/τ_c)_k`, batch-averaged.
/// The target `w` is held constant.
pub fn loss_cont<'g>(sims: Var<'g>, w: Var<'g>, tau_c: f64) -> Result<Var<'g>> {
    let n = sims.shape()[0].max(1);
    let logp = sims.log_softmax(tau_c)?;
    Ok(w.detach().mul(logp)?.sum().scale(-1.0 / n as f64))
}

/// `1 − H(w̄)/log K` for the batch-mean assignment `w̄`.
pub fn loss_div<'g>(w: Var<'g>) -> Result<Var<'g>> {
    let shape = w.shape();
    let (n, k) = (shape[0], shape[1]);
    if n == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "loss_div",
            msg: "empty batch".into(),
        });
    }
    if k == 1 {
        return Ok(w.sum().scale(0.0));
    }
    let mean = w.sum_rows().scale(1.0 / n as f64);
    let entropy = mean.xlogx().sum().neg();
    Ok(entropy.scale(-1.0 / (k as f64).ln()).add_scalar(1.0))
}

pub fn loss_pcc<'g>(cont: Var<'g>, div: Var<'g>, lambda_div: f64) -> Result<Var<'g>> {
    cont.add(div.scale(lambda_div))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{four_way_obs, objective, param_relative_error, t_junction_obs};
    use crate::obs::Batch;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap())
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    fn setup(seed: u64, tau_k: f64) -> (ParamStore, Pcc) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pcc = Pcc::new(&mut store, "pcc", 8, 6, tau_k, &mut rng).unwrap();
        (store, pcc)
    }

    #[test]
    fn assignment_oracles() {
        let g = Graph::new();
        let w = row(&g, &[1.0, 0.0]).softmax(1.0).unwrap().value();
        let e = 1f64.exp();
        assert!((w.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w.data()[0] - 0.7311).abs() < 1e-4 && (w.data()[1] - 0.2689).abs() < 1e-4);

        let sharp = row(&g, &[0.2, 0.9, 0.5]).softmax(1e-4).unwrap().value();
        assert_eq!(sharp.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn equal_similarities_mix_centers_evenly() {
        let (mut store, pcc) = setup(1, 0.1);
        // Identical centers make every similarity equal.
        let c = store.value(pcc.centers).row(0).to_vec();
        let same = Tensor::from_rows(&vec![c.clone(); 6]).unwrap();
        store.set_value(pcc.centers, same).unwrap();
        let batch = Batch::new(&[&four_way_obs(3)]).unwrap();
        let g = Graph::new();
        let out = pcc.forward(&g, &store, g.constant(batch.context.clone())).unwrap();
        for w in out.w.value().data() {
            assert!((w - 1.0 / 6.0).abs() < 1e-12);
        }
        for (z, c) in out.z_hat.value().data().iter().zip(&c) {
            assert!((z - c).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_temperature_picks_nearest_center() {
        let (store, pcc) = setup(2, 1e-4);
        let batch = Batch::new(&[&t_junction_obs(5)]).unwrap();
        let g = Graph::new();
        let out = pcc.forward(&g, &store, g.constant(batch.context.clone())).unwrap();
        let sims = out.sims.value();
        let best = (0..6).max_by(|&a, &b| sims.data()[a].total_cmp(&sims.data()[b])).unwrap();
        let w = out.w.value();
        assert!((w.data()[best] - 1.0).abs() < 1e-9);
        let centers = store.value(pcc.centers);
        for (z, c) in out.z_hat.value().data().iter().zip(centers.row(best)) {
            assert!((z - c).abs() < 1e-9);
        }
    }

    #[test]
    fn prediction_loss_examples() {
        let g = Graph::new();
        let target = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mask = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let same = g.constant(target.clone());
        assert_eq!(loss_pred(same, &target, &mask).unwrap().item(), 0.0);
        let shifted = Tensor::matrix(2, 3, vec![2.0, 3.0, 77.0, 5.0, -8.0, 1e6]).unwrap();
        assert_eq!(loss_pred(g.constant(shifted.clone()), &target, &mask).unwrap().item(), 1.0);
        let garbage = Tensor::matrix(2, 3, vec![1.0, 2.0, -9.0, 4.0, 31.0, 0.5]).unwrap();
        let a = loss_pred(g.constant(shifted.clone()), &garbage, &mask).unwrap().item();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn contrastive_loss_examples() {
        let g = Graph::new();
        let one = row(&g, &[0.4]);
        assert_eq!(loss_cont(one, one.softmax(0.1).unwrap(), 0.1).unwrap().item(), 0.0);

        let sims = row(&g, &[0.3, -0.2, 0.9, 0.1]);
        let w = sims.softmax(0.1).unwrap();
        let l = loss_cont(sims, w, 0.1).unwrap().item();
        assert!((l - entropy(w.value().data())).abs() < 1e-12);

        let flat = row(&g, &[0.5; 6]);
        let l = loss_cont(flat, flat.softmax(0.1).unwrap(), 0.1).unwrap().item();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!((l - 1.7918).abs() < 1e-4);
    }

    #[test]
    fn target_branch_carries_no_gradient() {
        let sims = Tensor::matrix(2, 3, vec![0.1, 0.5, -0.3, 0.2, 0.2, 0.9]).unwrap();
        let through_target = {
            let g = Graph::new();
            let s = g.leaf(sims.clone());
            let loss = loss_cont(s, s.softmax(0.1).unwrap(), 0.1).unwrap();
            g.backward(loss).unwrap().get(s).unwrap().clone()
        };
        let constant_target = {
            let g = Graph::new();
            let s = g.leaf(sims.clone());
            let w = g.constant((*s.softmax(0.1).unwrap().value()).clone());
            let loss = loss_cont(s, w, 0.1).unwrap();
            g.backward(loss).unwrap().get(s).unwrap().clone()
        };
        assert_eq!(through_target, constant_target);
    }

    #[test]
    fn diversity_loss_examples() {
        let g = Graph::new();
        let uniform = g.constant(Tensor::full(&[4, 6], 1.0 / 6.0));
        assert!(loss_div(uniform).unwrap().item().abs() < 1e-9);
        let mut hot = vec![0.0; 18];
        for r in 0..3 {
            hot[r * 6 + 2] = 1.0;
        }
        let collapsed = g.constant(Tensor::matrix(3, 6, hot).unwrap());
        assert!((loss_div(collapsed).unwrap().item() - 1.0).abs() < 1e-9);
        let pair = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let expected = 1.0 - entropy(&[0.75, 0.25]) / 2f64.ln();
        let l = loss_div(pair).unwrap().item();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1887).abs() < 1e-4);
        assert!(loss_div(g.constant(Tensor::zeros(&[0, 6]))).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let g = Graph::new();
        let s = |v: f64| g.constant(Tensor::scalar(v));
        assert_eq!(loss_pcc(s(0.7), s(0.4), 0.0).unwrap().item(), 0.7);
        assert_eq!(loss_pcc(s(0.0), s(1.0), 1.0).unwrap().item(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (c, d, l): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            assert!((loss_pcc(s(c), s(d), l).unwrap().item() - (c + l * d)).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_reach_every_parameter_and_match_finite_differences() {
        let (mut store, pcc) = setup(5, 0.1);
        let obs = [t_junction_obs(1), four_way_obs(2), four_way_obs(3)];
        let batch = Batch::new(&[&obs[0], &obs[1], &obs[2]]).unwrap();
        let next = Batch::new(&[&obs[2], &obs[0], &obs[1]]).unwrap();
        let loss = objective(|g, s| {
            let out = pcc.forward(g, s, g.constant(batch.context.clone()))?;
            let pred = loss_pred(out.s_hat, &next.state, &batch.state_mask)?;
            let pccl = loss_pcc(loss_cont(out.sims, out.w, 0.1)?, loss_div(out.w)?, 0.1)?;
            Ok(pred.add(pccl)?.add(out.z_hat.sum().scale(0.01))?)
        });
        let g = Graph::new();
        let grads = g.backward(loss(&g, &store).unwrap()).unwrap();
        for id in store.ids() {
            let grad = grads.param(id).unwrap_or_else(|| panic!("{} has no gradient", store.name(id)));
            assert!(grad.data().iter().any(|v| *v != 0.0), "{}", store.name(id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // The contrastive term stops gradients through w, so the numeric check uses the rest.
        let smooth = objective(|g, s| {
            let out = pcc.forward(g, s, g.constant(batch.context.clone()))?;
            let pred = loss_pred(out.s_hat, &next.state, &batch.state_mask)?;
            Ok(pred.add(loss_div(out.w)?)?.add(out.sims.tanh().sum())?.add(out.z_hat.sum().scale(0.01))?)
        });
        let err = param_relative_error(&mut store, 1e-6, 60, &mut rng, smooth).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn assignments_are_convex(seed in 0u64..1_000, obs_seed in 0u64..1_000) {
            let (store, pcc) = setup(seed, 0.1);
            let o = if obs_seed % 2 == 0 { four_way_obs(obs_seed) } else { t_junction_obs(obs_seed) };
            let batch = Batch::new(&[&o]).unwrap();
            let g = Graph::new();
            let out = pcc.forward(&g, &store, g.constant(batch.context.clone())).unwrap();
            let w = out.w.value();
            prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.data().iter().all(|v| *v > 0.0));
            let centers = store.value(pcc.centers);
            for c in 0..8 {
                let col: Vec<f64> = (0..6).map(|k| centers.row(k)[c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = out.z_hat.value().data()[c];
                prop_assert!(z >= lo - 1e-12 && z <= hi + 1e-12);
            }
            let div = loss_div(out.w).unwrap().item();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&div));
        }
    }
}

//! Top-k gated expert pool and its regularisers.

use std::sync::Arc;

use cross_autodiff::{Graph, ParamStore, Result, Segments, Tensor, Var};
use rand::Rng;

use crate::nn::Linear;

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug)]
pub struct Moe {
    router1: Linear,
    router2: Linear,
    experts: Vec<Linear>,
    pub top_k: usize,
    pub tau_r: f64,
}

pub struct MoeOut<'g> {
    /// `[ΣP, d]`
    pub h_moe: Var<'g>,
    /// `[N, N_E]` router logits after temperature scaling.
    pub logits: Var<'g>,
    /// `[N, N_E]` gate weights, zero off the selection.
    pub alpha: Var<'g>,
    pub selected: Arc<Vec<Vec<usize>>>,
}

impl Moe {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        context: usize,
        experts: usize,
        top_k: usize,
        tau_r: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let router1 = Linear::new(store, &format!("{name}.router1"), width + context, width, true, rng)?;
        let router2 = Linear::new(store, &format!("{name}.router2"), width, experts, true, rng)?;
        let experts = (0..experts)
            .map(|m| Linear::new(store, &format!("{name}.expert{m}"), width, width, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            router1,
            router2,
            experts,
            top_k,
            tau_r,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, m: usize) -> &Linear {
        &self.experts[m]
    }

    /// Router logits from the phase-pooled features and the pattern context.
    pub fn router_logits<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h_sp: Var<'g>,
        seg: &Arc<Segments>,
        context: Var<'g>,
    ) -> Result<Var<'g>> {
        let pooled = h_sp.segment_mean(seg)?;
        let input = g.concat_cols(&[pooled, context])?;
        let hidden = self.router1.forward(g, store, input)?.relu();
        Ok(self.router2.forward(g, store, hidden)?.scale(1.0 / self.tau_r))
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h_sp: Var<'g>,
        seg: &Arc<Segments>,
        context: Var<'g>,
    ) -> Result<MoeOut<'g>> {
        let logits = self.router_logits(g, store, h_sp, seg, context)?;
        let values = logits.value();
        let n_e = self.experts.len();
        let selected: Arc<Vec<Vec<usize>>> =
            Arc::new((0..values.rows()).map(|r| top_k(values.row(r), self.top_k)).collect());
        let alpha = logits
            .select_per_row(&selected)?
            .softmax(1.0)?
            .scatter_per_row(&selected, n_e)?;
        let h_moe = self.combine(g, store, h_sp, seg, alpha, &selected)?;
        Ok(MoeOut {
            h_moe,
            logits,
            alpha,
            selected,
        })
    }

    /// `Σ_m α_m E_m(h_sp)`, evaluating each expert only on the rows of
    /// samples that selected it.
    pub fn combine<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h_sp: Var<'g>,
        seg: &Arc<Segments>,
        alpha: Var<'g>,
        selected: &[Vec<usize>],
    ) -> Result<Var<'g>> {
        let rows = seg.total();
        let owners = seg.owners();
        let alpha_rows = alpha.segment_repeat(seg)?;
        let mut out: Option<Var<'g>> = None;
        for (m, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).filter(|&r| selected[owners[r]].contains(&m)).collect();
            if idx.is_empty() {
                continue;
            }
            let idx = Arc::new(idx);
            let y = expert.forward(g, store, h_sp.gather_rows(&idx)?)?.relu();
            let gate = alpha_rows.slice_cols(m, m + 1)?.gather_rows(&idx)?;
            let part = y.scale_rows(gate)?.scatter_rows(&idx, rows)?;
            out = Some(match out {
                Some(acc) => acc.add(part)?,
                None => part,
            });
        }
        Ok(out.unwrap_or_else(|| g.constant(Tensor::zeros(&[rows, h_sp.shape()[1]]))))
    }
}

/// The single-expert stand-in used when routing is ablated.
#[derive(Clone, Debug)]
pub struct Dense {
    layer: Linear,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            layer: Linear::new(store, &format!("{name}.dense"), width, width, true, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, h_sp: Var<'g>) -> Result<Var<'g>> {
        Ok(self.layer.forward(g, store, h_sp)?.relu())
    }
}

/// Normalised usage `f̂_m` of each expert over a batch of gate weights.
pub fn usage(alpha: &Tensor) -> Vec<f64> {
    let n_e = alpha.cols();
    let mut f = vec![0.0; n_e];
    for r in 0..alpha.rows() {
        for (acc, a) in f.iter_mut().zip(alpha.row(r)) {
            *acc += a;
        }
    }
    let total: f64 = f.iter().sum();
    if total > 0.0 {
        f.iter_mut().for_each(|v| *v /= total);
    }
    f
}

/// KL divergence of the batch usage `f̂` from uniform.
pub fn loss_lb<'g>(alpha: Var<'g>) -> Result<Var<'g>> {
    let total = alpha.value().data().iter().sum::<f64>();
    let n_e = alpha.shape()[1];
    let f = alpha.sum_rows().scale(1.0 / total);
    f.xlogx().sum().add(f.sum().scale((n_e as f64).ln()))
}

/// Mean per-sample routing entropy.
pub fn loss_se<'g>(alpha: Var<'g>) -> Result<Var<'g>> {
    let n = alpha.shape()[0].max(1);
    Ok(alpha.xlogx().sum().scale(-1.0 / n as f64))
}

pub fn loss_moe<'g>(lb: Var<'g>, se: Var<'g>, lambda_lb: f64, lambda_se: f64) -> Result<Var<'g>> {
    lb.scale(lambda_lb).add(se.scale(lambda_se))
}

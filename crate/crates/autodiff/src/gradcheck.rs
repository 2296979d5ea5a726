//! Central finite-difference oracle for checking backward rules.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` between analytic and
/// numerical gradients, taken over at most `max_coords` sampled coordinates
/// of each input.
///
/// `f` builds a scalar from leaves bound to `inputs`, in order.
pub fn relative_error<F, R>(inputs: &[Tensor], h: f64, max_coords: usize, rng: &mut R, f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    R: Rng,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;

    let mut diff_sq = 0.0;
    let mut ana_sq = 0.0;
    let mut num_sq = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads.get(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for c in sample(rng, n, n.min(max_coords)) {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff_sq += (analytic[c] - numeric).powi(2);
            ana_sq += analytic[c].powi(2);
            num_sq += numeric.powi(2);
        }
    }
    Ok(diff_sq.sqrt() / ana_sq.sqrt().max(num_sq.sqrt()).max(1e-8))
}

//! Small layers over a shared [`ParamStore`].

use cross_autodiff::{init, Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::Rng;

/// Fully connected layer `x·W + b`, initialised uniformly in `±1/√fan_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init::uniform(rng, &[fan_in, fan_out], bound))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init::uniform(rng, &[fan_out], bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul(g.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_row(g.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    pub width: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), fan_in, 3 * width, true, rng)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), width, 3 * width, true, rng)?,
            width,
        })
    }

    /// One step: `r`, `z` gates and candidate `n`; `h' = n + z ⊙ (h − n)`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
        let d = self.width;
        let gx = self.input.forward(g, store, x)?;
        let gh = self.hidden.forward(g, store, h)?;
        let r = gx.slice_cols(0, d)?.add(gh.slice_cols(0, d)?)?.sigmoid();
        let z = gx.slice_cols(d, 2 * d)?.add(gh.slice_cols(d, 2 * d)?)?.sigmoid();
        let n = gx.slice_cols(2 * d, 3 * d)?.add(r.mul(gh.slice_cols(2 * d, 3 * d)?)?)?.tanh();
        n.add(z.mul(h.sub(n)?)?)
    }
}

/// Layer normalisation with a learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0))?,
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm().mul_row(g.param(store, self.gain))?.add_row(g.param(store, self.offset))
    }
}

/// Sets every parameter of a store to zero.
pub fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cross_autodiff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 16, 8, true, &mut rng).unwrap();
        let bound = 0.25;
        assert!(store.value(l.weight).data().iter().all(|v| v.abs() <= bound));
        assert!(store.value(l.bias.unwrap()).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.value(l.weight).shape(), &[16, 8]);
    }

    #[test]
    fn zero_weight_gru_keeps_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        zero_all(&mut store);
        let g = Graph::new();
        let mut h = g.constant(Tensor::zeros(&[2, 4]));
        for step in 0..5 {
            let x = g.constant(Tensor::full(&[2, 3], 10.0 * step as f64 - 7.0));
            h = gru.forward(&g, &store, x, h).unwrap();
        }
        assert!(h.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        let x = init::uniform(&mut rng, &[2, 3], 1.0);
        let h = init::uniform(&mut rng, &[2, 4], 1.0);
        let err = gradcheck::relative_error(&[x, h], 1e-6, 64, &mut rng, |g, v| {
            Ok(gru.forward(g, &store, v[0], v[1])?.tanh().sum())
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
